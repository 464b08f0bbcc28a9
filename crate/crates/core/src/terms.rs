//! Term normalization shared by indexing, search, and operator selection:
//! lowercase, split on anything that is not alphanumeric, keep tokens of at
//! least two characters. No stemming.

pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
}

pub fn normalize_term(raw: &str) -> Option<String> {
    let mut it = terms(raw);
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_punctuation_and_short_tokens() {
        let got: Vec<_> = terms("Pareto-front, a (b) ZXQV7; clean_refs!").collect();
        assert_eq!(got, vec!["pareto", "front", "zxqv7", "clean", "refs"]);
    }

    #[test]
    fn single_term_normalization() {
        assert_eq!(normalize_term("Merge"), Some("merge".to_string()));
        assert_eq!(normalize_term("two words"), None);
        assert_eq!(normalize_term("x"), None);
    }
}
