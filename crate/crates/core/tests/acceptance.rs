//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails. Set `ACCEPTANCE_DIR` to keep the experiment outputs.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{Arm, Scale};
use tpp_core::analysis::AlignmentReport;
use tpp_core::corpus::{generate_cipher_corpus, hold_out, CorpusId, TranslationPair};
use tpp_core::encoder::load_checkpoint;
use tpp_core::eval::{macro_f1, relative_improvement, span_micro_f1};
use tpp_core::experiment::{run_experiment, validate_config, RunManifest, RunOptions};
use tpp_core::tpp::{
    make_tpp_batch, make_tpp_batch_corpus_wide, tpp_loss, tpp_loss_from_embeddings, TppExample,
};

const FULL: Scale = Scale {
    pairs: 5000,
    held_out: 250,
    epochs: 3,
    tpp_epochs: 5,
    task_train: 2000,
    task_test: 500,
};
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(start: Instant, limit: Duration, o: Outcome) -> Outcome {
    let t = start.elapsed();
    if t > limit {
        outcome(
            false,
            format!("{}; took {:.1?}, limit {:.0?}", o.detail, t, limit),
        )
    } else {
        outcome(o.pass, format!("{} [{:.1?}]", o.detail, t))
    }
}

/// Printed Table 2 rows: (task, baseline scores, [(score, printed Δ%)] per variant).
#[allow(clippy::type_complexity)]
const TABLE_2: [(&str, [f64; 3], [[(f64, f64); 3]; 2]); 3] = [
    (
        "NER",
        [21.1, 16.5, 32.1],
        [
            [(24.3, 15.2), (29.9, 81.4), (39.4, 22.8)],
            [(23.2, 10.3), (27.4, 66.4), (38.5, 19.9)],
        ],
    ),
    (
        "Sentiment",
        [31.7, 55.0, 51.5],
        [
            [(32.7, 3.0), (66.4, 20.6), (58.3, 13.2)],
            [(32.4, 2.3), (67.7, 23.1), (58.5, 13.7)],
        ],
    ),
    (
        "UD POS",
        [67.4, 52.7, 64.0],
        [
            [(71.5, 6.0), (57.6, 9.2), (67.1, 4.8)],
            [(66.4, -1.5), (52.7, 0.1), (65.0, 1.5)],
        ],
    ),
];

fn criterion_1() -> Outcome {
    let langs = ["hi", "ja", "ar"];
    let variants = ["One", "ALL"];
    let mut misses = Vec::new();
    let mut cells = 0;
    for (task, base, rows) in TABLE_2 {
        for (v, row) in variants.iter().zip(rows) {
            for ((lang, b), (score, printed)) in langs.iter().zip(base).zip(row) {
                cells += 1;
                let d = relative_improvement(b, score).unwrap();
                if (d - printed).abs() > 0.2 + 1e-9 {
                    misses.push(format!(
                        "{task} {v} {lang}: ({b}, {score}) -> {d:.2} vs printed {printed}"
                    ));
                }
            }
        }
    }
    let ok = relative_improvement(21.1, 24.3)
        .map(|d| format!("{d:.1}"))
        .ok()
        == Some("15.2".into());
    if misses.is_empty() && ok {
        outcome(
            true,
            format!("{cells}/{cells} printed Δ% reproduced within ±0.2"),
        )
    } else {
        outcome(
            false,
            format!(
                "{}/{cells} within ±0.2; off: {}",
                cells - misses.len(),
                misses.join("; ")
            ),
        )
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.random_range(2..=6);
        let dim = 8;
        let src: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let tgt: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut perm: Vec<usize> = (0..b).collect();
        while perm.iter().enumerate().any(|(i, &j)| i == j) {
            perm.shuffle(&mut rng);
        }
        let mut ex: Vec<TppExample> = (0..b)
            .map(|i| TppExample {
                source: i,
                target: i,
                label: true,
            })
            .collect();
        ex.extend((0..b).map(|i| TppExample {
            source: perm[i],
            target: i,
            label: false,
        }));

        let to_arr = |m: &[Vec<f64>]| Array2::from_shape_fn((b, dim), |(i, j)| m[i][j]);
        let (loss, ds, dt) =
            tpp_loss_from_embeddings(to_arr(&src).view(), to_arr(&tgt).view(), &ex).unwrap();
        if (loss - common::reference_tpp_loss(&src, &tgt, &ex)).abs() > 1e-12 {
            return outcome(false, "loss value differs from the reference definition");
        }
        let (mut num2, mut diff2, mut ana2) = (0.0, 0.0, 0.0);
        for side in 0..2 {
            for i in 0..b {
                for j in 0..dim {
                    let eval = |delta: f64| {
                        let (mut s, mut t) = (src.clone(), tgt.clone());
                        if side == 0 {
                            s[i][j] += delta
                        } else {
                            t[i][j] += delta
                        }
                        common::reference_tpp_loss(&s, &t, &ex)
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let ana = if side == 0 { ds[[i, j]] } else { dt[[i, j]] };
                    num2 += num * num;
                    ana2 += ana * ana;
                    diff2 += (num - ana) * (num - ana);
                }
            }
        }
        let rel = diff2.sqrt() / num2.sqrt().max(ana2.sqrt()).max(1e-12);
        worst = worst.max(rel);
    }
    within(
        start,
        Duration::from_secs(10),
        outcome(
            worst < 1e-4,
            format!("100 cases, worst relative error {worst:.2e} (< 1e-4)"),
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let words = ["ka", "lo", "mi", "nu", "pe", "ri", "so", "tu"];
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(1..=4);
        (0..n)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pool: Vec<TranslationPair> = (0..200)
        .map(|_| {
            let s = sentence(&mut rng);
            let t = sentence(&mut rng).to_uppercase();
            TranslationPair::new(&s, &t, "en", "xx", CorpusId::TT, None).unwrap()
        })
        .collect();
    for n in 0..1000 {
        let b = rng.random_range(2..=64);
        // distinct targets, except a shared one now and then
        let mut aligned: Vec<TranslationPair> = Vec::with_capacity(b);
        while aligned.len() < b {
            let s = format!("s{n}_{} {}", aligned.len(), sentence(&mut rng));
            let t = if b >= 8 && aligned.len() >= 2 && rng.random_bool(0.05) {
                aligned[0].target_text.clone()
            } else {
                format!(
                    "T{n}_{} {}",
                    aligned.len(),
                    sentence(&mut rng).to_uppercase()
                )
            };
            aligned.push(TranslationPair::new(&s, &t, "en", "xx", CorpusId::TT, None).unwrap());
        }
        let batch = if n % 2 == 0 {
            make_tpp_batch(&aligned, &mut rng)
        } else {
            make_tpp_batch_corpus_wide(&aligned, &pool, &mut rng)
        };
        let batch = match batch {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("batch {n} (B={b}): {e}")),
        };
        let labels = batch.labels();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = labels.len() - pos;
        if pos != b || neg != b {
            return outcome(
                false,
                format!("batch {n}: {pos} positives, {neg} negatives for B={b}"),
            );
        }
        let cand = batch.candidate_texts();
        let own = batch.source_aligned_targets();
        for (k, e) in batch.examples().iter().enumerate() {
            if e.label != (own[k] == cand[k]) {
                return outcome(false, format!("batch {n}: example {k} pairs a source with its own translation as a negative"));
            }
        }
    }
    within(
        start,
        Duration::from_secs(10),
        outcome(
            true,
            "1000 batches, B in 2..=64, in-batch and corpus-wide negatives",
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 0..100 {
        let sents = rng.random_range(1..=6);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..sents {
            let len = rng.random_range(0..=10);
            let g = common::random_bio(&mut rng, len);
            let p = if rng.random_bool(0.5) {
                common::random_bio(&mut rng, len)
            } else {
                common::perturb_spans(&mut rng, &g)
            };
            gold.push(g);
            pred.push(p);
        }
        let got = span_micro_f1(&gold, &pred).unwrap().value;
        let want = common::brute_span_f1(&gold, &pred);
        if got != want {
            return outcome(
                false,
                format!("span instance {n}: {got} vs brute force {want}"),
            );
        }
    }
    for n in 0..100 {
        let k = rng.random_range(2..=5);
        let len = rng.random_range(1..=40);
        let gold: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let got = macro_f1(&gold, &pred, &names).unwrap().value;
        let want = common::brute_macro_f1(&gold, &pred, k);
        if got != want {
            return outcome(
                false,
                format!("macro instance {n}: {got} vs brute force {want}"),
            );
        }
    }
    within(
        start,
        Duration::from_secs(10),
        outcome(
            true,
            "100 span and 100 macro-F1 instances match brute force exactly",
        ),
    )
}

/// Output directory of `arm` for `seed`.
fn run_dir(root: &Path, seed: u64, arm: Arm) -> PathBuf {
    let name = match arm {
        Arm::TppOnly => "tpp_only",
        Arm::Baseline => "baseline",
        Arm::MlmTpp => "mlm_tpp",
    };
    root.join(format!("seed{seed}")).join("runs").join(name)
}

fn run_arm(root: &Path, seed: u64, arm: Arm) -> tpp_core::Result<RunManifest> {
    let cfg = validate_config(common::write_cipher_experiment(
        &root.join(format!("seed{seed}")),
        seed,
        FULL,
        arm,
    ))?;
    let opts = RunOptions {
        output_dir: Some(run_dir(root, seed, arm)),
        ..RunOptions::default()
    };
    run_experiment(&cfg, &opts)
}

fn read_alignment(p: PathBuf) -> AlignmentReport {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the TPP-only arm for every seed and checks criteria 5 and 7.
fn criteria_5_and_7(root: &Path) -> (Outcome, Outcome) {
    let start = Instant::now();
    let (mut pre_p, mut post_p, mut drop, mut init_loss, mut final_loss) =
        (vec![], vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        if let Err(e) = run_arm(root, seed, Arm::TppOnly) {
            let f = || outcome(false, format!("seed {seed}: {e}"));
            return (f(), f());
        }
        let dir = run_dir(root, seed, Arm::TppOnly);
        let pre = read_alignment(dir.join("analysis/pre_alignment.json"));
        let post = read_alignment(dir.join("analysis/post_alignment.json"));
        pre_p.push(pre.p_at_1);
        post_p.push(post.p_at_1);
        drop.push(1.0 - post.mean_normalized_distance / pre.mean_normalized_distance);

        // loss of the initialized encoder over the first 20 training batches
        let model = load_checkpoint(dir.join("checkpoints/init.ckpt")).unwrap();
        let corpus = generate_cipher_corpus(&common::cipher_spec(FULL.pairs, seed)).unwrap();
        let (train, _) = hold_out(&corpus, FULL.held_out, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let losses: Vec<f64> = train.pairs()[..320]
            .chunks(16)
            .map(|c| {
                tpp_loss(&make_tpp_batch(c, &mut rng).unwrap(), &model)
                    .unwrap()
                    .0
            })
            .collect();
        init_loss.push(mean(&losses));

        let csv = fs::read_to_string(dir.join("logs/tpp_phase1_loss.csv")).unwrap();
        let steps: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let per_epoch = steps.len() / FULL.tpp_epochs;
        final_loss.push(mean(&steps[steps.len() - per_epoch..]));
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let c5 = outcome(
        mean(&pre_p) <= 0.1 && mean(&post_p) >= 0.8 && mean(&drop) >= 0.3,
        format!(
            "p@1 before {:.3} (<= 0.1) after {:.3} (>= 0.8) per seed {}; distance drop {:.1}% (>= 30%)",
            mean(&pre_p),
            mean(&post_p),
            fmt(&post_p),
            100.0 * mean(&drop)
        ),
    );
    let ln2 = std::f64::consts::LN_2;
    let c7 = outcome(
        (mean(&init_loss) - ln2).abs() <= 0.05 && mean(&final_loss) < 0.2,
        format!(
            "initial loss {:.4} (ln 2 ± 0.05) per seed {}; final-epoch loss {:.4} (< 0.2) per seed {}",
            mean(&init_loss),
            fmt(&init_loss),
            mean(&final_loss),
            fmt(&final_loss)
        ),
    );
    (within(start, Duration::from_secs(600), c5), c7)
}

fn criterion_6(root: &Path) -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let base = match run_arm(root, seed, Arm::Baseline) {
            Ok(m) => m.metrics["xx"].value,
            Err(e) => return outcome(false, format!("seed {seed} baseline: {e}")),
        };
        let tpp = match run_arm(root, seed, Arm::MlmTpp) {
            Ok(m) => m.metrics["xx"].value,
            Err(e) => return outcome(false, format!("seed {seed} +TPP: {e}")),
        };
        gains.push(100.0 * (tpp - base));
        detail.push(format!("{:.1}->{:.1}", 100.0 * base, 100.0 * tpp));
    }
    let g = mean(&gains);
    within(
        start,
        Duration::from_secs(900),
        outcome(
            g >= 10.0,
            format!(
                "target accuracy gain {g:.1} points (>= 10); per seed {}",
                detail.join(", ")
            ),
        ),
    )
}

fn criterion_8(root: &Path) -> Outcome {
    let start = Instant::now();
    let seed = SEEDS[0];
    let reference = run_dir(root, seed, Arm::MlmTpp);
    let config = root.join(format!("seed{seed}/mlm_tpp.toml"));

    // identical config and seed in a fresh directory
    let again = root.join("c8/rerun");
    let cfg = validate_config(&config).unwrap();
    if let Err(e) = run_experiment(
        &cfg,
        &RunOptions {
            output_dir: Some(again.clone()),
            ..RunOptions::default()
        },
    ) {
        return outcome(false, format!("rerun: {e}"));
    }
    let a = fs::read(reference.join("metrics/xx.json")).unwrap();
    let b = fs::read(again.join("metrics/xx.json")).unwrap();
    if a != b {
        return outcome(false, "metric JSON differs between identical runs");
    }

    // kill the CLI once TPP is under way, then resume
    let resumed = root.join("c8/resumed");
    let cli = env!("CARGO_BIN_EXE_tpp");
    let mut child = Command::new(cli)
        .args(["run", "--config"])
        .arg(&config)
        .arg("--output-dir")
        .arg(&resumed)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let manifest_path = resumed.join("manifest.json");
    let deadline = Instant::now() + Duration::from_secs(300);
    let interrupted = loop {
        if let Ok(m) = RunManifest::load(&manifest_path) {
            if m.stages.len() >= 2 {
                break true;
            }
        }
        if child.try_wait().unwrap().is_some() || Instant::now() > deadline {
            break false;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    let _ = child.kill();
    let _ = child.wait();
    let partial = RunManifest::load(&manifest_path)
        .map(|m| m.stages.len())
        .unwrap_or(0);
    if !interrupted || RunManifest::load(&manifest_path).is_ok_and(|m| m.complete) {
        return outcome(false, "could not interrupt the run before it finished");
    }
    let status = Command::new(cli)
        .args(["run", "--resume", "--config"])
        .arg(&config)
        .arg("--output-dir")
        .arg(&resumed)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap();
    if !status.success() {
        return outcome(false, format!("resumed run exited with {status}"));
    }
    let want = fs::read(reference.join("manifest.json")).unwrap();
    let got = fs::read(&manifest_path).unwrap();
    let same_metrics = fs::read(resumed.join("metrics/xx.json")).unwrap() == a;
    within(
        start,
        Duration::from_secs(900),
        outcome(
            want == got && same_metrics,
            format!(
                "rerun metric JSON bit-identical; run killed after {partial} stages and resumed: manifest {}",
                if want == got { "identical" } else { "differs" }
            ),
        ),
    )
}

fn main() {
    let kept = std::env::var_os("ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = kept.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&root).unwrap();

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "relative improvement reproduces Table 2", criterion_1()),
        (2, "TPP loss gradient check", criterion_2()),
        (3, "TPP batch balance and no self-negatives", criterion_3()),
        (4, "metric oracles", criterion_4()),
    ];
    let (c5, c7) = criteria_5_and_7(&root);
    results.push((5, "synthetic alignment experiment", c5));
    results.push((6, "zero-shot tagging transfer", criterion_6(&root)));
    results.push((7, "TPP loss descent", c7));
    results.push((8, "determinism and resumability", criterion_8(&root)));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!(
            "criterion {n} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
