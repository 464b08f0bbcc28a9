//! HTTP judge adapter.
//!
//! One text exchange per request. The request body is a small keyed text
//! document; the response must follow a strict line grammar:
//!
//! ```text
//! LABEL: <workflow|dispatcher|reference|insufficient|abstain>
//! CONFIDENCE: <0..1>            (optional)
//! EVIDENCE: "<json-quoted span>"  (zero or more)
//! ```
//!
//! Workflow completion responses are a sequence of
//! `FILL: <step_id>` / `TYPE:` / `SPEC:` / `EVIDENCE:` ... / `END` records.
//! Anything unparseable yields an abstain verdict or no fills.

use std::time::Duration;

use super::{
    CompletionRequest, JudgeError, JudgeVerdict, NodeFill, ShapeJudge, VerdictLabel,
    DEFAULT_TIMEOUT, ENV_ENDPOINT, ENV_KEY, ENV_MODEL, ENV_TIMEOUT_MS,
};
use crate::lowering::{ExecutionSpec, StepType, WorkflowGraph};
use crate::provenance::{Grounding, SourceDoc, SourceRef};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteJudgeConfig {
    pub endpoint: String,
    pub key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl RemoteJudgeConfig {
    pub fn from_env() -> Option<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Option<Self> {
        let endpoint = get(ENV_ENDPOINT).filter(|e| !e.trim().is_empty())?;
        let timeout = get(ENV_TIMEOUT_MS)
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_TIMEOUT);
        Some(RemoteJudgeConfig {
            endpoint,
            key: get(ENV_KEY).filter(|k| !k.is_empty()),
            model: get(ENV_MODEL).unwrap_or_default(),
            timeout,
        })
    }
}

pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub fn new(config: RemoteJudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteJudge { config, agent }
    }

    fn exchange(&self, body: String) -> Result<String, JudgeError> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "text/plain; charset=utf-8");
        if let Some(key) = &self.config.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| JudgeError::Unavailable(e.to_string()))
    }
}

/// Renders the request document sent to the endpoint.
pub fn render_request(model: &str, request: &CompletionRequest, draft: Option<&WorkflowGraph>) -> String {
    let mut out = String::from("SKILLC-JUDGE/1\n");
    out.push_str(&format!("KIND: {}\n", request.kind));
    out.push_str(&format!("MODEL: {model}\n"));
    out.push_str(&format!(
        "FEATURES: {}\n",
        serde_json::to_string(&request.grounded_features).unwrap_or_default()
    ));
    if let Some(graph) = draft {
        out.push_str("INCOMPLETE:\n");
        for node in graph.nodes.iter().filter(|n| n.incomplete) {
            out.push_str(&format!("{}\t{}\n", node.step_id, node.name.replace('\n', " ")));
        }
    }
    out.push_str("EXCERPT:\n");
    out.push_str(&request.excerpt);
    out
}

fn parse_quoted(value: &str) -> Option<String> {
    serde_json::from_str::<String>(value.trim()).ok()
}

/// Parses a shape response; any grammar violation yields abstain.
pub fn parse_shape_response(text: &str) -> JudgeVerdict {
    let mut label = None;
    let mut confidence = 1.0;
    let mut evidence = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let Some((key, value)) = line.split_once(':') else {
            return JudgeVerdict::abstain();
        };
        match key.trim() {
            "LABEL" if label.is_none() => match VerdictLabel::parse(value) {
                Some(l) => label = Some(l),
                None => return JudgeVerdict::abstain(),
            },
            "CONFIDENCE" => match value.trim().parse::<f64>() {
                Ok(c) if (0.0..=1.0).contains(&c) => confidence = c,
                _ => return JudgeVerdict::abstain(),
            },
            "EVIDENCE" => match parse_quoted(value) {
                Some(span) => evidence.push(span),
                None => return JudgeVerdict::abstain(),
            },
            _ => return JudgeVerdict::abstain(),
        }
    }
    match label {
        Some(VerdictLabel::Abstain) | None => JudgeVerdict::abstain(),
        Some(label) => JudgeVerdict {
            label,
            supporting_evidence: evidence,
            confidence,
        },
    }
}

fn spec_for(step_type: &StepType, spec: &str) -> ExecutionSpec {
    match step_type {
        StepType::Command | StepType::Verify => ExecutionSpec::Command {
            template: spec.to_string(),
        },
        StepType::Script => {
            let mut parts = spec.split_whitespace().map(str::to_string);
            ExecutionSpec::Script {
                asset_path: parts.next().unwrap_or_default(),
                args: parts.collect(),
            }
        }
        _ => ExecutionSpec::Guidance {
            text: spec.to_string(),
        },
    }
}

/// Parses fill records. Evidence spans absent from the package are kept as
/// empty-range references so later verification rejects them.
pub fn parse_fill_response(text: &str, grounding: &Grounding) -> Vec<NodeFill> {
    let mut fills = Vec::new();
    let mut current: Option<(String, Option<StepType>, Option<String>, Vec<SourceRef>)> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line == "END" {
            if let Some((id, Some(ty), Some(spec), prov)) = current.take() {
                fills.push(NodeFill {
                    step_id: id,
                    execution_spec: spec_for(&ty, &spec),
                    step_type: ty,
                    provenance: prov,
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Vec::new();
        };
        let value = value.trim();
        match (key.trim(), current.as_mut()) {
            ("FILL", None) => current = Some((value.to_string(), None, None, Vec::new())),
            ("TYPE", Some(c)) => {
                let ty = StepType::from_name(value).canonical();
                if ty == StepType::Manual && !value.eq_ignore_ascii_case("manual") {
                    return Vec::new();
                }
                c.1 = Some(ty);
            }
            ("SPEC", Some(c)) => c.2 = Some(value.to_string()),
            ("EVIDENCE", Some(c)) => {
                let Some(span) = parse_quoted(value) else {
                    return Vec::new();
                };
                c.3.push(grounding.locate(&span).unwrap_or(SourceRef {
                    asset_path: SourceDoc::Entry,
                    byte_start: 0,
                    byte_end: 0,
                    quote: span,
                }));
            }
            _ => return Vec::new(),
        }
    }
    fills
}

impl ShapeJudge for RemoteJudge {
    fn identity(&self) -> String {
        format!("remote:{}@{}", self.config.model, self.config.endpoint)
    }

    fn propose_shape(&mut self, request: &CompletionRequest) -> Result<JudgeVerdict, JudgeError> {
        let body = render_request(&self.config.model, request, None);
        Ok(parse_shape_response(&self.exchange(body)?))
    }

    fn propose_fills(
        &mut self,
        request: &CompletionRequest,
        draft: &WorkflowGraph,
    ) -> Result<Vec<NodeFill>, JudgeError> {
        let body = render_request(&self.config.model, request, Some(draft));
        Ok(parse_fill_response(&self.exchange(body)?, &request.grounding))
    }
}
