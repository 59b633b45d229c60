//! A scripted stand-in for the LLM, answering from a synthetic corpus's
//! ground truth.
//!
//! It recognises each prompt of the pipeline by its text. Reverse
//! classification is correct with probability `accuracy`. Machine scores are
//! the true levels, pushed up one step with probability `treated_up` in the
//! treatment group, down one step with probability `control_down` in the
//! control group, then moved one step either way with probability `noise`,
//! clipped to the scale. All randomness is keyed on the document text, so
//! the same request always gets the same answer.

use std::collections::BTreeMap;

use causal_themes::llm::{
    ChatRequest, ChatBackend, LlmError, PROMPT_REVERSE_TESTING, PROMPT_REVERSE_TRAINING, PROMPT_SCORE, PROMPT_SUMMARY,
    PROMPT_THEMES,
};
use causal_themes::rng;
use causal_themes::GroupLabel;
use rand::Rng;
use serde_json::Value;

use crate::synthetic::{self, SyntheticCorpus};

pub struct SimulatedLlm {
    truth: BTreeMap<String, (GroupLabel, BTreeMap<String, i64>)>,
    seed: u64,
    pub accuracy: f64,
    pub treated_up: f64,
    pub control_down: f64,
    pub noise: f64,
}

const SUMMARY: &str = "Documents in group A focus on identifying causal effects and on experimental evidence. \
Documents in group B more often build structural models of behaviour and forecast time series. \
Both groups discuss policy implications to a similar degree.";

impl SimulatedLlm {
    pub fn new(corpus: &SyntheticCorpus, seed: u64) -> SimulatedLlm {
        let truth = corpus
            .documents
            .iter()
            .zip(&corpus.truth)
            .map(|(d, t)| (d.text.clone(), (t.group, t.scores.clone())))
            .collect();
        SimulatedLlm {
            truth,
            seed,
            accuracy: 0.85,
            treated_up: 0.5,
            control_down: 0.3,
            noise: 0.15,
        }
    }

    fn rng(&self, purpose: &str, text: &str) -> rng::Rng {
        rng::seeded(rng::derive_seed(self.seed, &format!("{purpose}:{text}")))
    }

    fn classify(&self, text: &str) -> &'static str {
        let Some((group, _)) = self.truth.get(text) else {
            return "A";
        };
        let correct = self.rng("classify", text).random_bool(self.accuracy);
        let g = if correct { *group } else { group.other() };
        g.letter()
    }

    fn score_line(&self, text: &str) -> String {
        let Some((group, scores)) = self.truth.get(text) else {
            return String::new();
        };
        let mut r = self.rng("score", text);
        scores
            .iter()
            .map(|(id, level)| (id, *level))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(id, level)| {
                let mut v = level;
                if group.is_treatment() && r.random_bool(self.treated_up) {
                    v += 1;
                }
                if !group.is_treatment() && r.random_bool(self.control_down) {
                    v -= 1;
                }
                if r.random_bool(self.noise) {
                    v += if r.random_bool(0.5) { 1 } else { -1 };
                }
                format!("{id}{}", v.clamp(0, 3))
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Every `{document_id, text}` object in JSON arrays after `marker`.
fn documents_after(content: &str, marker: &str) -> Vec<(String, String)> {
    let Some(start) = content.find(marker) else {
        return Vec::new();
    };
    let rest = &content[start + marker.len()..];
    let Ok(Value::Array(items)) = serde_json::from_str::<Value>(rest.trim()) else {
        return Vec::new();
    };
    items
        .iter()
        .filter_map(|d| Some((d["document_id"].as_str()?.to_string(), d["text"].as_str()?.to_string())))
        .collect()
}

/// Alias → text over every document shown in the conversation.
fn shown_documents(request: &ChatRequest) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for m in request.messages.iter().filter(|m| m.role == "user") {
        for marker in [PROMPT_REVERSE_TRAINING, PROMPT_REVERSE_TESTING, PROMPT_SUMMARY, PROMPT_SCORE] {
            out.extend(documents_after(&m.content, marker));
        }
    }
    out
}

fn requested_aliases(content: &str) -> Vec<String> {
    let tail = content.rsplit(':').next().unwrap_or("");
    tail.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn score_block(lines: impl IntoIterator<Item = (String, String)>) -> String {
    let mut out = String::from("```\n[\n");
    for (alias, line) in lines {
        out.push_str(&format!("    {{\n        {alias}: {line}\n    }},\n"));
    }
    out.push_str("]\n```\n");
    out
}

impl ChatBackend for SimulatedLlm {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let last = &request.messages.last().ok_or_else(|| LlmError::Precondition("empty request".into()))?.content;
        let docs = shown_documents(request);
        if last.starts_with(PROMPT_REVERSE_TRAINING) {
            return Ok("I have studied the training documents and am ready for the testing set.".into());
        }
        if last.starts_with(PROMPT_REVERSE_TESTING) {
            let lines: Vec<String> = documents_after(last, PROMPT_REVERSE_TESTING)
                .iter()
                .map(|(alias, text)| format!("{alias}: {}", self.classify(text)))
                .collect();
            return Ok(lines.join("\n"));
        }
        if last.starts_with("Your answer did not include a predicted group") {
            let lines: Vec<String> = requested_aliases(last)
                .iter()
                .filter_map(|a| docs.get(a).map(|t| format!("{a}: {}", self.classify(t))))
                .collect();
            return Ok(lines.join("\n"));
        }
        if last.starts_with(PROMPT_SUMMARY) {
            return Ok(SUMMARY.into());
        }
        if last == PROMPT_THEMES {
            let training = request
                .messages
                .first()
                .map(|m| documents_after(&m.content, PROMPT_SUMMARY))
                .unwrap_or_default();
            let scores = training.into_iter().map(|(a, t)| (a, self.score_line(&t)));
            return Ok(format!(
                "{}\n\nScores for the training documents:\n\n{}",
                synthetic::themes().to_theme_json(),
                score_block(scores)
            ));
        }
        if last.contains(PROMPT_SCORE) {
            let scores = documents_after(last, PROMPT_SCORE)
                .into_iter()
                .map(|(a, t)| (a, self.score_line(&t)));
            return Ok(score_block(scores));
        }
        if last.starts_with("Your answer did not include scores") {
            let scores = requested_aliases(last)
                .into_iter()
                .filter_map(|a| docs.get(&a).map(|t| (a.clone(), self.score_line(t))));
            return Ok(score_block(scores));
        }
        Ok("I am not sure what you are asking for.".into())
    }
}
