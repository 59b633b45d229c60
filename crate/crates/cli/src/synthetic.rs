//! Synthetic corpus with known theme scores.
//!
//! Each document has a latent score on five themes, drawn from a
//! group-specific distribution, and a text that states those levels in
//! words. Three themes differ between the groups, one differs mildly and
//! one (`POL`) has the same distribution in both.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use causal_themes::themes::{ScalePoint, ThemeProvenance};
use causal_themes::{rng, Corpus, Document, GroupLabel, Theme, ThemeSet};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

struct Spec {
    id: &'static str,
    name: &'static str,
    topic: &'static str,
    treated: [f64; 4],
    control: [f64; 4],
}

const SPECS: [Spec; 5] = [
    Spec {
        id: "IDN",
        name: "Identification Strategy",
        topic: "identifying causal effects from observational data",
        treated: [0.1, 0.2, 0.3, 0.4],
        control: [0.4, 0.3, 0.2, 0.1],
    },
    Spec {
        id: "EXP",
        name: "Experimental Evidence",
        topic: "randomized field experiments",
        treated: [0.2, 0.3, 0.3, 0.2],
        control: [0.45, 0.3, 0.15, 0.1],
    },
    Spec {
        id: "STR",
        name: "Structural Modelling",
        topic: "structural models of agent behaviour",
        treated: [0.4, 0.3, 0.2, 0.1],
        control: [0.1, 0.25, 0.35, 0.3],
    },
    Spec {
        id: "FOR",
        name: "Forecasting",
        topic: "forecasting time series",
        treated: [0.4, 0.3, 0.2, 0.1],
        control: [0.3, 0.3, 0.2, 0.2],
    },
    Spec {
        id: "POL",
        name: "Policy Relevance",
        topic: "implications for public policy",
        treated: [0.25, 0.25, 0.25, 0.25],
        control: [0.25, 0.25, 0.25, 0.25],
    },
];

const OPENERS: [&str; 4] = [
    "This work studies",
    "We examine",
    "The article investigates",
    "This study considers",
];

const SUBJECTS: [&str; 8] = [
    "labour markets",
    "household savings",
    "firm entry",
    "trade flows",
    "school choice",
    "health insurance",
    "housing prices",
    "energy demand",
];

/// Configuration shipped with the synthetic fixture project.
pub const FIXTURE_CONFIG: &str = r#"seed = 20240901

[split]
h1 = 50
h0 = 50

[test]
permutations = 5000
metric = "accuracy"

[estimate]
bootstrap_draws = 2000
labeled_budget = 40

[tradeoff]
ells = [20, 40, 60, 80, 100]
outer = 100
inner = 20

[llm]
provider = "replay"
"#;

/// Subcommands up to and including every LLM call, in pipeline order.
pub const LLM_STEPS: [&str; 7] = [
    "split",
    "summarize",
    "propose-themes",
    "freeze-themes",
    "release-holdout",
    "classify",
    "score-machine",
];

/// Ground-truth themes, as an LLM would propose them.
pub fn themes() -> ThemeSet {
    let themes = SPECS
        .iter()
        .map(|s| Theme {
            theme_id: s.id.into(),
            theme_name: s.name.into(),
            theme_description: format!("How much the abstract is about {}, from 0 (not at all) to 3 (central).", s.topic),
            theme_scale: (0..=3).map(ScalePoint::Int).collect(),
        })
        .collect();
    ThemeSet::new(themes, ThemeProvenance::LlmProposed).expect("synthetic themes are valid")
}

/// True scores of one document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub document_id: String,
    pub group: GroupLabel,
    pub scores: BTreeMap<String, i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub truth: Vec<Truth>,
}

fn draw_level<R: Rng>(probs: &[f64; 4], r: &mut R) -> i64 {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (level, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return level as i64;
        }
    }
    3
}

fn sentence(topic: &str, level: i64) -> Option<String> {
    match level {
        1 => Some(format!("It briefly touches on {topic}.")),
        2 => Some(format!("A substantial part of the analysis concerns {topic}.")),
        3 => Some(format!("The contribution centres on {topic}.")),
        _ => None,
    }
}

impl SyntheticCorpus {
    /// `n1` treated and `n0` control documents with ids in random order.
    pub fn generate(n1: usize, n0: usize, seed: u64) -> SyntheticCorpus {
        let mut r = rng::seeded(seed);
        let mut groups: Vec<GroupLabel> = std::iter::repeat_n(GroupLabel::Treatment, n1)
            .chain(std::iter::repeat_n(GroupLabel::Control, n0))
            .collect();
        groups.shuffle(&mut r);
        let mut documents = Vec::new();
        let mut truth = Vec::new();
        for (i, group) in groups.into_iter().enumerate() {
            let document_id = format!("doc{i:03}");
            let mut scores = BTreeMap::new();
            let mut parts = vec![format!(
                "{} {} (study {i}).",
                OPENERS[r.random_range(0..OPENERS.len())],
                SUBJECTS[r.random_range(0..SUBJECTS.len())]
            )];
            for s in &SPECS {
                let probs = if group.is_treatment() { &s.treated } else { &s.control };
                let level = draw_level(probs, &mut r);
                scores.insert(s.id.to_string(), level);
                parts.extend(sentence(s.topic, level));
            }
            documents.push(Document {
                document_id: document_id.clone(),
                text: parts.join(" "),
                group,
            });
            truth.push(Truth {
                document_id,
                group,
                scores,
            });
        }
        SyntheticCorpus { documents, truth }
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::new(self.documents.clone()).expect("synthetic ids are unique")
    }

    pub fn truth_of(&self, document_id: &str) -> Option<&Truth> {
        self.truth.iter().find(|t| t.document_id == document_id)
    }

    pub fn write(&self, corpus_path: &Path, truth_path: &Path) -> std::io::Result<()> {
        self.corpus().write_jsonl(std::fs::File::create(corpus_path)?)?;
        let mut f = std::fs::File::create(truth_path)?;
        for t in &self.truth {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read(corpus_path: &Path, truth_path: &Path) -> anyhow::Result<SyntheticCorpus> {
        let corpus = causal_themes::corpus::load_corpus(corpus_path)?;
        let truth = std::fs::read_to_string(truth_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<Truth>, _>>()?;
        Ok(SyntheticCorpus {
            documents: corpus.documents().to_vec(),
            truth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_balanced() {
        let a = SyntheticCorpus::generate(30, 20, 4);
        assert_eq!(a, SyntheticCorpus::generate(30, 20, 4));
        assert_eq!(a.documents.iter().filter(|d| d.group.is_treatment()).count(), 30);
        let c = a.corpus();
        assert_eq!(c.n(), 50);
    }

    #[test]
    fn texts_are_unique_and_state_levels() {
        let s = SyntheticCorpus::generate(50, 50, 1);
        let mut texts: Vec<&str> = s.documents.iter().map(|d| d.text.as_str()).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 100);
        for (d, t) in s.documents.iter().zip(&s.truth) {
            let central = t.scores.values().filter(|&&v| v == 3).count();
            assert_eq!(d.text.matches("centres on").count(), central);
        }
    }

    #[test]
    fn group_differences_point_the_right_way() {
        let s = SyntheticCorpus::generate(500, 500, 2);
        let mean = |id: &str, g: GroupLabel| {
            let xs: Vec<f64> = s.truth.iter().filter(|t| t.group == g).map(|t| t.scores[id] as f64).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean("IDN", GroupLabel::Treatment) > mean("IDN", GroupLabel::Control) + 0.5);
        assert!(mean("STR", GroupLabel::Treatment) < mean("STR", GroupLabel::Control) - 0.5);
        assert!((mean("POL", GroupLabel::Treatment) - mean("POL", GroupLabel::Control)).abs() < 0.2);
    }
}
