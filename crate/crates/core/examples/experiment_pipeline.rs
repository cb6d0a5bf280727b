//! Full pipeline on a synthetic cipher language: writes a tagging task and two
//! configs (baseline and +TPP), runs both and prints the comparison table.
//!
//!     cargo run --release --example experiment_pipeline -- [OUT_DIR] [--quick]
//!
//! The written configs also work with the CLI, e.g.
//! `tpp run --config OUT_DIR/tpp.toml`.

use std::path::Path;

use tpp_core::corpus::{CipherKind, CipherSpec};
use tpp_core::experiment::{emit_report, run_experiment, validate_config, RunOptions};
use tpp_core::synthetic::{generate_tagging_task, TaggingTaskSpec};

fn config(seed: u64, pairs: usize, epochs: usize, tpp: bool) -> String {
    let mut s = format!(
        r#"seed = {seed}
output_dir = "runs/{name}"

[encoder]
dropout = 0.0
init_std = 0.03

[[corpora]]
name = "cipher"
held_out = 250
[corpora.cipher]
vocab_size = 30
sentence_length_range = [5, 5]
num_pairs = {pairs}
cipher = "substitution"
seed = {seed}

[base_pretrain]
learning_rate = 1e-3
warmup_steps = 100
epochs = {epochs}
"#,
        name = if tpp { "tpp" } else { "baseline" }
    );
    if tpp {
        s.push_str(&format!(
            r#"
[schedule]
mode = "ONE"
corpora = ["cipher"]
[schedule.tpp]
learning_rate = 1.5e-3
warmup_steps = 100
epochs = {epochs}
"#
        ));
    }
    s.push_str(&format!(
        r#"
[task]
type = "tagging"
source_lang = "en"
train = "task/train.conll"
eval = {{ en = "task/test_source.conll", xx = "task/test_target.conll" }}
[task.finetune]
learning_rate = 3e-4
warmup_steps = 50
freeze_embeddings = true
epochs = {epochs}

[analysis]
corpus = "cipher"
"#
    ));
    s
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(String::as_str)
        .unwrap_or("pipeline_out");
    let out = Path::new(out);
    let seed = 1;
    let (pairs, epochs, train) = if quick {
        (600, 1, 200)
    } else {
        (5000, 3, 2000)
    };

    let mut cipher = CipherSpec::new(30, pairs, CipherKind::Substitution, seed);
    cipher.sentence_length_range = (5, 5);
    let task = generate_tagging_task(
        &cipher.build_cipher()?,
        &TaggingTaskSpec {
            num_train: train,
            seed,
            ..TaggingTaskSpec::default()
        },
        "en",
        "xx",
    )?;
    task.write(out.join("task"))?;

    let mut manifests = Vec::new();
    for (file, tpp) in [("baseline.toml", false), ("tpp.toml", true)] {
        let path = out.join(file);
        std::fs::write(&path, config(seed, pairs, epochs, tpp))?;
        let cfg = validate_config(&path)?;
        let m = run_experiment(&cfg, &RunOptions::default())?;
        println!(
            "{}: {:?}",
            m.name,
            m.metrics
                .iter()
                .map(|(l, s)| (l, &s.display))
                .collect::<Vec<_>>()
        );
        manifests.push(m);
    }
    print!("{}", emit_report(&manifests[0], &manifests[1..])?.table);
    Ok(())
}
