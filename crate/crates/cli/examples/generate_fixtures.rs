//! Regenerates `fixtures/synthetic/`: a 200-document synthetic corpus, its
//! ground truth, a project configuration and the LLM transcript recorded
//! from the scripted model. Replaying the transcript reproduces every LLM
//! step without network access.
//!
//! ```text
//! cargo run -p causal-themes-cli --example generate_fixtures [OUT_DIR]
//! ```

use std::path::PathBuf;

use causal_themes_cli::simulate::SimulatedLlm;
use causal_themes_cli::synthetic::SyntheticCorpus;
use causal_themes_cli::{run_args, Runtime};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic"));
    std::fs::create_dir_all(&out)?;
    let synthetic = SyntheticCorpus::generate(100, 100, 7);
    synthetic.write(&out.join("corpus.jsonl"), &out.join("truth.jsonl"))?;
    std::fs::write(out.join("causal-themes.toml"), causal_themes_cli::synthetic::FIXTURE_CONFIG)?;

    let work = tempfile::tempdir()?;
    std::fs::copy(out.join("corpus.jsonl"), work.path().join("corpus.jsonl"))?;
    std::fs::write(work.path().join("causal-themes.toml"), causal_themes_cli::synthetic::FIXTURE_CONFIG)?;
    let project = work.path().to_str().expect("utf-8 temp path");
    for step in causal_themes_cli::synthetic::LLM_STEPS {
        let runtime = Runtime {
            replay: None,
            backend: Some(Box::new(SimulatedLlm::new(&synthetic, 11))),
        };
        let summary = run_args(["-C", project, step], runtime)?;
        println!("{step}: {}", summary.lines().next().unwrap_or(""));
    }
    let transcripts = out.join("transcripts");
    std::fs::create_dir_all(&transcripts)?;
    std::fs::copy(
        work.path().join("transcripts").join(causal_themes::llm::TRANSCRIPT_FILE),
        transcripts.join(causal_themes::llm::TRANSCRIPT_FILE),
    )?;
    println!("fixtures written to {}", out.display());
    Ok(())
}
