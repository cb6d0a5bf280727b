//! Embedding-alignment diagnostics: normalized pair distances, cross-lingual
//! retrieval precision, PCA projection and embedding dumps.
//!
//! Binary embedding dump layout (little endian):
//! `b"TPPEMB\0\0"`, `u64 n`, `u64 dim`, then per row `u64 pair_index`,
//! `u32 lang_len`, `lang_len` UTF-8 bytes, `dim` × `f64`.
//!
//! TSV dump layout: a header line `n<TAB>dim`, then one line per row
//! `pair_index<TAB>lang<TAB>v0<TAB>v1...`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 20;

/// Twenty uniform bins over [0, 1]; the value 1.0 falls in the last bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64]) -> Self {
        let mut counts = vec![0; HISTOGRAM_BINS];
        for &v in values {
            let b = ((v * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        Self { counts }
    }

    /// `bin_left,bin_right,count` rows.
    pub fn to_csv(&self) -> String {
        let w = 1.0 / self.counts.len() as f64;
        let mut out = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i as f64 * w, (i + 1) as f64 * w, c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStats {
    pub distances: Vec<f64>,
    pub normalized: Vec<f64>,
    pub max_distance: f64,
    pub mean_normalized_distance: f64,
    pub histogram: Histogram,
}

fn check_aligned(emb_s: &ArrayView2<f64>, emb_t: &ArrayView2<f64>) -> Result<()> {
    if emb_s.dim() != emb_t.dim() {
        return Err(Error::Shape(format!(
            "aligned embeddings must agree in shape: {:?} vs {:?}",
            emb_s.dim(),
            emb_t.dim()
        )));
    }
    if emb_s.nrows() == 0 {
        return Err(Error::Empty("no embedding pairs".into()));
    }
    Ok(())
}

/// Euclidean distance between aligned rows, normalized by the maximum.
pub fn pair_distance_stats(
    emb_s: ArrayView2<f64>,
    emb_t: ArrayView2<f64>,
) -> Result<DistanceStats> {
    check_aligned(&emb_s, &emb_t)?;
    let distances: Vec<f64> = emb_s
        .rows()
        .into_iter()
        .zip(emb_t.rows())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max_distance = distances.iter().cloned().fold(0.0, f64::max);
    let normalized: Vec<f64> = if max_distance > 0.0 {
        distances.iter().map(|d| d / max_distance).collect()
    } else {
        vec![0.0; distances.len()]
    };
    let mean_normalized_distance = normalized.iter().sum::<f64>() / normalized.len() as f64;
    let histogram = Histogram::of(&normalized);
    Ok(DistanceStats {
        distances,
        normalized,
        max_distance,
        mean_normalized_distance,
        histogram,
    })
}

fn unit_rows(m: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Fraction of source rows whose most cosine-similar target row is their
/// aligned partner. Ties go to the lowest target index; zero rows have
/// similarity 0 with everything.
pub fn retrieval_p_at_1(emb_s: ArrayView2<f64>, emb_t: ArrayView2<f64>) -> Result<f64> {
    check_aligned(&emb_s, &emb_t)?;
    let n = emb_s.nrows();
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least 2 pairs"));
    }
    let sim = unit_rows(&emb_s).dot(&unit_rows(&emb_t).t());
    let hits = sim
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_normalized_distance: f64,
    pub distance_histogram: Vec<usize>,
    pub p_at_1: f64,
    pub n_pairs: usize,
    pub distance_metric: String,
    pub retrieval_similarity: String,
}

pub fn alignment_report(emb_s: ArrayView2<f64>, emb_t: ArrayView2<f64>) -> Result<AlignmentReport> {
    let stats = pair_distance_stats(emb_s, emb_t)?;
    Ok(AlignmentReport {
        mean_normalized_distance: stats.mean_normalized_distance,
        distance_histogram: stats.histogram.counts,
        p_at_1: retrieval_p_at_1(emb_s, emb_t)?,
        n_pairs: emb_s.nrows(),
        distance_metric: "euclidean".into(),
        retrieval_similarity: "cosine".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Eigenvalues of the centered scatter matrix `XᵀX`, descending.
    pub eigenvalues: Vec<f64>,
    /// The two principal axes, one per row.
    pub components: Array2<f64>,
}

impl Projection {
    /// `x,y,lang` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,lang\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.x, p.y, p.label));
        }
        out
    }
}

/// PCA onto the top two principal components after mean-centering. Each
/// axis is oriented so its largest-magnitude coordinate is positive.
pub fn project_2d<S: AsRef<str>>(embeddings: ArrayView2<f64>, labels: &[S]) -> Result<Projection> {
    let (n, d) = embeddings.dim();
    if n < 3 {
        return Err(Error::invalid(format!(
            "projection needs at least 3 rows, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("n > 0");
    let centered = &embeddings - &mean;
    if centered.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("rank-0 input: all rows are identical"));
    }
    let scatter = centered.t().dot(&centered);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| scatter[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let dims = d.min(2);
    let mut components = Array2::zeros((2, d));
    for (c, &k) in order.iter().take(dims).enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[c, j]] = sign * v[j];
        }
    }
    let coords = centered.dot(&components.t());
    let points = coords
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, l)| ProjectedPoint {
            x: r[0],
            y: r[1],
            label: l.as_ref().to_string(),
        })
        .collect();
    Ok(Projection {
        points,
        eigenvalues,
        components,
    })
}

/// One embedding tagged with its pair index and language.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub pair_index: usize,
    pub lang: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

const DUMP_MAGIC: &[u8; 8] = b"TPPEMB\0\0";

impl EmbeddingDump {
    /// Rows of `emb` tagged with `lang`, pair index = row index.
    pub fn from_matrix(emb: ArrayView2<f64>, lang: &str) -> Self {
        Self {
            dim: emb.ncols(),
            rows: emb
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| EmbeddingRow {
                    pair_index: i,
                    lang: lang.to_string(),
                    vector: r.to_vec(),
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: EmbeddingDump) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Shape(format!(
                "dump dims {} vs {}",
                self.dim, other.dim
            )));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}\t{}", self.rows.len(), self.dim).map_err(io)?;
        for r in &self.rows {
            write!(w, "{}\t{}", r.pair_index, r.lang).map_err(io)?;
            for v in &r.vector {
                write!(w, "\t{v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: missing header", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let (n, dim) = header
            .split_once('\t')
            .and_then(|(n, d)| Some((n.parse::<usize>().ok()?, d.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::Parse(format!("{}: bad header '{header}'", path.display())))?;
        let mut rows = Vec::with_capacity(n);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = || Error::Parse(format!("{}: line {}", path.display(), k + 2));
            let mut f = line.split('\t');
            let pair_index = f.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let lang = f.next().ok_or_else(bad)?.to_string();
            let vector = f
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if vector.len() != dim {
                return Err(bad());
            }
            rows.push(EmbeddingRow {
                pair_index,
                lang,
                vector,
            });
        }
        if rows.len() != n {
            return Err(Error::Parse(format!(
                "{}: header says {n} rows, found {}",
                path.display(),
                rows.len()
            )));
        }
        Ok(Self { dim, rows })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for r in &self.rows {
            buf.extend_from_slice(&(r.pair_index as u64).to_le_bytes());
            buf.extend_from_slice(&(r.lang.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.lang.as_bytes());
            for v in &r.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Parse(format!("{}: {what}", path.display()));
        let mut pos = 0;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + k).ok_or_else(|| bad("truncated"))?;
            pos += k;
            Ok(s)
        };
        if take(8)? != DUMP_MAGIC {
            return Err(bad("not an embedding dump"));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize;
        let n = u64_at(take(8)?);
        let dim = u64_at(take(8)?);
        let mut rows = Vec::new();
        for _ in 0..n {
            let pair_index = u64_at(take(8)?);
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let lang = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| bad("language tag is not UTF-8"))?;
            let raw = take(8 * dim)?;
            let vector = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rows.push(EmbeddingRow {
                pair_index,
                lang,
                vector,
            });
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dim, rows })
    }
}
