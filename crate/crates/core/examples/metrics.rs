//! Scoring: BIO span extraction and micro F1, macro F1 for classification,
//! and the relative-improvement column of a results table.
//!
//!     cargo run --example metrics

use tpp_core::eval::{extract_spans, macro_f1, one_decimal, relative_improvement, span_micro_f1};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gold = vec![
        vec!["B-PER", "I-PER", "O", "B-LOC"],
        vec!["O", "B-ORG", "I-ORG", "I-ORG"],
    ];
    let pred = vec![
        vec!["B-PER", "I-PER", "O", "B-ORG"],
        vec!["O", "B-ORG", "I-ORG", "O"],
    ];
    for (g, p) in gold.iter().zip(&pred) {
        println!("gold {:?}", extract_spans(g)?);
        println!("pred {:?}", extract_spans(p)?);
    }
    let f = span_micro_f1(&gold, &pred)?;
    println!("span micro F1 {} ({} sentences)", f.display, f.n);
    for (label, s) in &f.per_class {
        println!(
            "  {label}: p {:.2} r {:.2} f1 {:.2} support {}",
            s.p, s.r, s.f1, s.support
        );
    }

    let m = macro_f1(
        &[0, 0, 1, 1, 1],
        &[0, 1, 1, 1, 0],
        &["negative", "positive"],
    )?;
    println!("sentiment macro F1 {}", m.display);

    // a results row: baseline and +TPP scores per language
    let rows = [("de", 70.0, 72.5), ("ja", 20.0, 26.0), ("hi", 55.0, 54.0)];
    println!("lang & baseline & +TPP & Δ% \\\\");
    for (lang, b, s) in rows {
        println!(
            "{lang} & {b} & {s} & {} \\\\",
            one_decimal(relative_improvement(b, s)?)
        );
    }
    Ok(())
}
