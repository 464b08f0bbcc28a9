//! Risk flags and the pattern table used to infer them from command and
//! script text. Inference is heuristic: it records likely effects, it does
//! not prove their absence.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskFlag {
    WritesFiles,
    Network,
    Destructive,
    LongRunning,
    ExternalSideEffect,
}

impl RiskFlag {
    pub const ALL: [RiskFlag; 5] = [
        RiskFlag::WritesFiles,
        RiskFlag::Network,
        RiskFlag::Destructive,
        RiskFlag::LongRunning,
        RiskFlag::ExternalSideEffect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskFlag::WritesFiles => "writes_files",
            RiskFlag::Network => "network",
            RiskFlag::Destructive => "destructive",
            RiskFlag::LongRunning => "long_running",
            RiskFlag::ExternalSideEffect => "external_side_effect",
        }
    }
}

impl fmt::Display for RiskFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type RiskSet = BTreeSet<RiskFlag>;

struct Rule {
    flag: RiskFlag,
    /// Whole words (bounded by non-identifier characters).
    words: &'static [&'static str],
    /// Plain substrings, matched case-insensitively.
    substrings: &'static [&'static str],
}

const RULES: &[Rule] = &[
    Rule {
        flag: RiskFlag::Destructive,
        words: &["rm", "rmdir", "shred", "mkfs", "truncate", "rimraf"],
        substrings: &[
            "shutil.rmtree",
            "os.remove",
            "os.unlink",
            "os.rmdir",
            ".unlink(",
            "fs.rm",
            "git reset --hard",
            "git clean",
            "drop table",
            "delete from",
            "dd if=",
        ],
    },
    Rule {
        flag: RiskFlag::Network,
        words: &["curl", "wget", "ssh", "scp", "rsync", "ftp", "nc", "httpx", "aiohttp"],
        substrings: &[
            "http://",
            "https://",
            "requests.",
            "urllib",
            "urlopen",
            "fetch(",
            "pip install",
            "npm install",
            "git clone",
            "git pull",
            "socket.",
        ],
    },
    Rule {
        flag: RiskFlag::WritesFiles,
        words: &["tee", "cp", "mv", "mkdir", "touch"],
        substrings: &[
            ".write(",
            ".to_csv(",
            ".to_excel(",
            ".savefig(",
            ".save(",
            "write_text(",
            "write_bytes(",
            "writefile",
            "json.dump(",
            "open(",
        ],
    },
    Rule {
        flag: RiskFlag::LongRunning,
        words: &["sleep", "nohup", "watch"],
        substrings: &["while true", "while :", "--epochs", "tail -f", "time.sleep("],
    },
    Rule {
        flag: RiskFlag::ExternalSideEffect,
        words: &["sendmail", "smtplib", "twine", "gcloud", "aws", "terraform"],
        substrings: &[
            "git push",
            "docker push",
            "kubectl apply",
            "kubectl delete",
            "gh pr ",
            "gh release",
            "npm publish",
            "cargo publish",
            "slack.com",
        ],
    },
];

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.'
}

fn has_word(text: &str, word: &str) -> bool {
    let mut from = 0;
    while let Some(pos) = text[from..].find(word) {
        let at = from + pos;
        let before = text[..at].chars().next_back();
        let after = text[at + word.len()..].chars().next();
        if !before.is_some_and(is_ident) && !after.is_some_and(is_ident) {
            return true;
        }
        from = at + word.len();
    }
    false
}

/// Shell output redirection (`>` / `>>`) that is not a comparison, arrow,
/// or fd duplication.
fn has_redirect(text: &str) -> bool {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'>' {
            continue;
        }
        let prev = if i > 0 { bytes[i - 1] } else { b' ' };
        if matches!(prev, b'-' | b'=' | b'<' | b'>') {
            continue;
        }
        let mut j = i + 1;
        if bytes.get(j) == Some(&b'>') {
            j += 1;
        }
        match bytes.get(j) {
            Some(b'=') | Some(b'&') | None => continue,
            _ => {}
        }
        let target = text[j..].trim_start();
        if target.starts_with("/dev/null") {
            continue;
        }
        if !target.is_empty() {
            return true;
        }
    }
    false
}

/// Infers risk flags from command or script text.
pub fn infer_risk(text: &str) -> RiskSet {
    let lower = text.to_lowercase();
    let mut flags = RiskSet::new();
    for rule in RULES {
        let hit = rule.words.iter().any(|w| has_word(&lower, w))
            || rule.substrings.iter().any(|s| lower.contains(s));
        if hit {
            flags.insert(rule.flag);
        }
    }
    if has_redirect(text) {
        flags.insert(RiskFlag::WritesFiles);
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn destructive_and_network() {
        let r = infer_risk("rm -rf build && curl https://x.io");
        assert!(r.contains(&RiskFlag::Destructive));
        assert!(r.contains(&RiskFlag::Network));
    }

    #[test]
    fn word_boundaries() {
        assert!(infer_risk("python format.py --firm x").is_empty());
        assert!(infer_risk("echo hi").is_empty());
        assert!(infer_risk("python -c 'print(1)'").is_empty());
    }

    #[test]
    fn redirects() {
        assert!(infer_risk("echo hi > out.txt").contains(&RiskFlag::WritesFiles));
        assert!(infer_risk("make 2>&1").is_empty());
        assert!(infer_risk("ls > /dev/null").is_empty());
        assert!(infer_risk("if a >= b").is_empty());
        assert!(infer_risk("f = lambda x: x -> y").is_empty());
    }

    #[test]
    fn side_effects() {
        assert!(infer_risk("git push origin main").contains(&RiskFlag::ExternalSideEffect));
        assert!(infer_risk("sleep 100").contains(&RiskFlag::LongRunning));
    }
}
