//! Task metrics: exact-match span micro-F1 over BIO tags, macro-F1 over
//! classes, token accuracy and relative improvement.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled span over word indices, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

pub type SpanSet = BTreeSet<Span>;

/// Per-class precision, recall, F1 and gold support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

/// A metric value in [0, 1] with its per-class breakdown.
///
/// `n` counts the evaluated units: sentences for span F1, examples for
/// macro-F1 and tokens for accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub per_class: BTreeMap<String, ClassScores>,
    pub n: usize,
    pub display: String,
}

impl MetricReport {
    fn new(metric: &str, value: f64, per_class: BTreeMap<String, ClassScores>, n: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            per_class,
            n,
            display: one_decimal(100.0 * value),
        }
    }

    /// The value as a percentage.
    pub fn percent(&self) -> f64 {
        100.0 * self.value
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Formats with exactly one decimal, e.g. `15.2`.
pub fn one_decimal(x: f64) -> String {
    let s = format!("{x:.1}");
    if s == "-0.0" {
        "0.0".to_string()
    } else {
        s
    }
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(Error::invalid(format!("'{tag}' is not a BIO tag"))),
    }
}

/// Maximal `B-X (I-X)*` runs. An `I-X` that does not continue a run of
/// type X is malformed.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<SpanSet> {
    let mut spans = SpanSet::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, label) in labels.iter().enumerate() {
        match parse_tag(label.as_ref())? {
            Tag::Outside => {
                if let Some((t, s)) = open.take() {
                    spans.insert(Span {
                        label: t.to_string(),
                        start: s,
                        end: i,
                    });
                }
            }
            Tag::Begin(t) => {
                if let Some((prev, s)) = open.replace((t, i)) {
                    spans.insert(Span {
                        label: prev.to_string(),
                        start: s,
                        end: i,
                    });
                }
            }
            Tag::Inside(t) => match open {
                Some((prev, _)) if prev == t => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "malformed BIO at position {i}: '{}' does not continue a {t} span",
                        label.as_ref()
                    )))
                }
            },
        }
    }
    if let Some((t, s)) = open {
        spans.insert(Span {
            label: t.to_string(),
            start: s,
            end: labels.len(),
        });
    }
    Ok(spans)
}

fn check_shapes<G, P>(gold: &[G], pred: &[P], len: impl Fn(usize) -> (usize, usize)) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold sequences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for i in 0..gold.len() {
        let (g, p) = len(i);
        if g != p {
            return Err(Error::Shape(format!(
                "sequence {i}: {g} gold labels vs {p} predicted"
            )));
        }
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn scores(&self) -> ClassScores {
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        ClassScores {
            p,
            r,
            f1: f1(p, r),
            support: self.tp + self.fn_,
        }
    }
}

/// Micro-averaged F1 over exact (type, start, end) span matches pooled
/// across sentences and classes.
pub fn span_micro_f1<S: AsRef<str>, T: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<T>],
) -> Result<MetricReport> {
    check_shapes(gold, pred, |i| (gold[i].len(), pred[i].len()))?;
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gs = extract_spans(g)?;
        let ps = extract_spans(p)?;
        for s in &gs {
            let c = per.entry(s.label.clone()).or_default();
            if ps.contains(s) {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
        for s in ps.difference(&gs) {
            per.entry(s.label.clone()).or_default().fp += 1;
        }
    }
    let total = per.values().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let per_class = per.iter().map(|(k, c)| (k.clone(), c.scores())).collect();
    Ok(MetricReport::new(
        "span_micro_f1",
        total.scores().f1,
        per_class,
        gold.len(),
    ))
}

/// Unweighted mean of per-class F1 over every class in `label_set`;
/// classes with an undefined F1 count as 0.
pub fn macro_f1<S: AsRef<str>>(
    gold: &[usize],
    pred: &[usize],
    label_set: &[S],
) -> Result<MetricReport> {
    check_shapes(gold, pred, |_| (0, 0))?;
    if label_set.is_empty() {
        return Err(Error::Empty("label set".into()));
    }
    let k = label_set.len();
    if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= k) {
        return Err(Error::invalid(format!(
            "class id {bad} outside a label set of size {k}"
        )));
    }
    let mut counts = vec![Counts::default(); k];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            counts[g].tp += 1;
        } else {
            counts[g].fn_ += 1;
            counts[p].fp += 1;
        }
    }
    let per_class: BTreeMap<String, ClassScores> = label_set
        .iter()
        .zip(&counts)
        .map(|(l, c)| (l.as_ref().to_string(), c.scores()))
        .collect();
    let value = counts.iter().map(|c| c.scores().f1).sum::<f64>() / k as f64;
    Ok(MetricReport::new("macro_f1", value, per_class, gold.len()))
}

/// Fraction of positions whose predicted label equals the gold label.
pub fn token_accuracy<S: AsRef<str>, T: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<T>],
) -> Result<MetricReport> {
    check_shapes(gold, pred, |i| (gold[i].len(), pred[i].len()))?;
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    let (mut right, mut n) = (0, 0);
    for (g, p) in gold.iter().zip(pred) {
        for (g, p) in g.iter().zip(p) {
            let (g, p) = (g.as_ref(), p.as_ref());
            n += 1;
            if g == p {
                right += 1;
                per.entry(g.to_string()).or_default().tp += 1;
            } else {
                per.entry(g.to_string()).or_default().fn_ += 1;
                per.entry(p.to_string()).or_default().fp += 1;
            }
        }
    }
    let per_class = per.iter().map(|(k, c)| (k.clone(), c.scores())).collect();
    Ok(MetricReport::new(
        "token_accuracy",
        ratio(right, n),
        per_class,
        n,
    ))
}

/// Relative improvement of `score` over `baseline`, in percent.
pub fn relative_improvement(baseline: f64, score: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() || !score.is_finite() {
        return Err(Error::invalid(format!(
            "relative improvement needs a positive finite baseline, got {baseline} -> {score}"
        )));
    }
    Ok(100.0 * (score - baseline) / baseline)
}
