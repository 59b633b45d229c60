//! Runs the whole pipeline on the shipped synthetic fixtures, replaying the
//! recorded LLM transcript and scoring the hold-out with the true theme
//! levels in place of a human annotator. Prints the final report.
//!
//! ```text
//! cargo run -p causal-themes-cli --example demo [PROJECT_DIR]
//! ```

use std::path::{Path, PathBuf};

use causal_themes_annotate::{NextDocument, Submission};
use causal_themes_cli::commands::annotation_store;
use causal_themes_cli::config::Config;
use causal_themes_cli::project::Project;
use causal_themes_cli::synthetic::{SyntheticCorpus, LLM_STEPS};
use causal_themes_cli::{run_args, Runtime};

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
    let temp = tempfile::tempdir()?;
    let dir: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| temp.path().to_path_buf());
    std::fs::create_dir_all(dir.join("transcripts"))?;
    for f in ["corpus.jsonl", "causal-themes.toml", "transcripts/transcript.jsonl"] {
        std::fs::copy(fixtures.join(f), dir.join(f))?;
    }
    let truth = SyntheticCorpus::read(&fixtures.join("corpus.jsonl"), &fixtures.join("truth.jsonl"))?;
    let p = dir.to_str().expect("utf-8 path");
    let run = |step: &str| run_args(["-C", p, step], Runtime::default());

    for step in LLM_STEPS {
        eprintln!("{step}: {}", run(step)?.lines().next().unwrap_or(""));
    }

    let mut store = annotation_store(&Project::open(&dir, Config::load(&dir)?))?;
    store.start_session("oracle", None)?;
    while let NextDocument::Document { document_id, .. } = store.next_document("oracle")? {
        let scores = &truth.truth_of(&document_id).expect("fixture truth").scores;
        let scores = scores.iter().map(|(k, v)| (k.clone(), (*v).into())).collect();
        store.submit("oracle", &Submission { document_id, scores })?;
    }
    drop(store);

    for step in ["register", "reveal"] {
        eprintln!("{step}: {}", run(step)?);
    }
    println!("{}", run("report")?);
    Ok(())
}
