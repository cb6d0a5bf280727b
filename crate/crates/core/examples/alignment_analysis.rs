//! Embedding-space diagnostics for aligned pairs: distance histogram,
//! retrieval p@1, a 2-D PCA projection and TSV/binary embedding dumps.
//!
//!     cargo run --example alignment_analysis -- [OUT_DIR]

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpp_core::analysis::{alignment_report, pair_distance_stats, project_2d, EmbeddingDump};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
        .join("alignment_analysis");
    std::fs::create_dir_all(&out)?;

    // source points plus a shifted, noisy copy playing the role of translations
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, d) = (200, 16);
    let src = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let shift = Array2::from_shape_fn((1, d), |(_, j)| if j == 0 { 1.5 } else { 0.0 });
    for noise in [0.05, 0.5] {
        let tgt = &src
            + &shift
            + &Array2::from_shape_simple_fn((n, d), || rng.random_range(-noise..noise));
        let r = alignment_report(src.view(), tgt.view())?;
        println!(
            "noise {noise}: p@1 {:.3}, mean normalized distance {:.3}",
            r.p_at_1, r.mean_normalized_distance
        );
        println!(
            "  histogram {:?}",
            pair_distance_stats(src.view(), tgt.view())?
                .histogram
                .counts
        );

        let both = ndarray::concatenate![ndarray::Axis(0), src, tgt];
        let labels: Vec<&str> = (0..2 * n)
            .map(|i| if i < n { "en" } else { "xx" })
            .collect();
        let proj = project_2d(both.view(), &labels)?;
        let total: f64 = proj.eigenvalues.iter().sum();
        println!(
            "  top-2 components explain {:.1}% of variance",
            100.0 * (proj.eigenvalues[0] + proj.eigenvalues[1]) / total
        );
        std::fs::write(out.join(format!("projection_{noise}.csv")), proj.to_csv())?;

        let mut dump = EmbeddingDump::from_matrix(src.view(), "en");
        dump.extend(EmbeddingDump::from_matrix(tgt.view(), "xx"))?;
        dump.write_tsv(&out.join(format!("embeddings_{noise}.tsv")))?;
        dump.write_binary(&out.join(format!("embeddings_{noise}.bin")))?;
        assert_eq!(
            EmbeddingDump::read_binary(&out.join(format!("embeddings_{noise}.bin")))?,
            dump
        );
    }
    println!("wrote projections and dumps to {}", out.display());
    Ok(())
}
