//! Embedding diagnostics: Poincaré-ball projection, Recall@K and 2-D
//! scatter export.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{no_grad, Scalar};

pub const DEFAULT_CURVATURE: f64 = 1.0;

/// Largest tanh value used, so saturated inputs stay strictly inside the ball.
const MAX_TANH: f64 = 1.0 - 1e-12;

/// Row-major `n × dim` vectors with labels and a source tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<f64>, dim: usize, labels: Vec<usize>, source: impl Into<String>) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} vectors of width {dim}",
                vectors.len(),
                labels.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingSet {
            vectors,
            dim,
            labels,
            source: source.into(),
        })
    }

    /// Final-normed CLS embeddings of `samples`.
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        samples: &Samples<T>,
        batch_size: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        let mut vectors = Vec::with_capacity(samples.len() * model.config().embed_dim);
        no_grad(|| -> Result<()> {
            for b in samples.batches(model.config(), batch_size)? {
                let out = model.forward_with(&b.patches, &ForwardOptions::default())?;
                vectors.extend(out.embedding.to_vec().into_iter().map(Scalar::as_f64));
            }
            Ok(())
        })?;
        Self::new(vectors, model.config().embed_dim, samples.labels.clone(), source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_curvature(c: f64) -> Result<()> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Config(format!("curvature must be positive, got {c}")));
    }
    Ok(())
}

/// Exponential map at the origin: `tanh(√c‖x‖) · x / (√c‖x‖)`.
pub fn poincare_project(x: &[f64], c: f64) -> Result<Vec<f64>> {
    check_curvature(c)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot project a non-finite vector".into()));
    }
    let n = norm(x);
    if !n.is_finite() {
        return Err(Error::Data("vector norm overflows".into()));
    }
    if n == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let s = c.sqrt() * n;
    let scale = s.tanh().min(MAX_TANH) / s;
    Ok(x.iter().map(|v| v * scale).collect())
}

/// Geodesic distance in the ball of curvature `-c`.
pub fn poincare_distance(u: &[f64], v: &[f64], c: f64) -> Result<f64> {
    check_curvature(c)?;
    if u.len() != v.len() {
        return Err(Error::Data(format!("points of width {} and {}", u.len(), v.len())));
    }
    let nu = 1.0 - c * u.iter().map(|x| x * x).sum::<f64>();
    let nv = 1.0 - c * v.iter().map(|x| x * x).sum::<f64>();
    if nu <= 0.0 || nv <= 0.0 {
        return Err(Error::Data("point outside the Poincaré ball".into()));
    }
    let diff: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 + 2.0 * c * diff / (nu * nv)).acosh() / c.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Metric {
    Euclidean,
    /// Vectors are projected with the given curvature first.
    Poincare { curvature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallReport {
    pub k: usize,
    pub recall: f64,
    pub queried: usize,
    /// Samples whose class has no other member.
    pub skipped: usize,
}

/// All-pairs distance matrix, row-major `n × n`.
pub fn pairwise(set: &EmbeddingSet, metric: Metric) -> Result<Vec<f64>> {
    let n = set.len();
    let points: Vec<Vec<f64>> = match metric {
        Metric::Euclidean => (0..n).map(|i| set.row(i).to_vec()).collect(),
        Metric::Poincare { curvature } => (0..n)
            .map(|i| poincare_project(set.row(i), curvature))
            .collect::<Result<_>>()?,
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = match metric {
                Metric::Euclidean => points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                Metric::Poincare { curvature } => poincare_distance(&points[i], &points[j], curvature)?,
            };
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Ok(out)
}

/// Fraction of samples whose `k` nearest others (ties by index) contain a
/// same-label sample.
pub fn recall_at_k(set: &EmbeddingSet, k: usize, metric: Metric) -> Result<RecallReport> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Data("recall needs at least two samples".into()));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k = {k} must be in 1..{n}")));
    }
    let dist = pairwise(set, metric)?;
    let (mut hits, mut queried, mut skipped) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let label = set.labels[i];
        if !(0..n).any(|j| j != i && set.labels[j] == label) {
            skipped += 1;
            continue;
        }
        queried += 1;
        let row = &dist[i * n..(i + 1) * n];
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        if others[..k].iter().any(|&j| set.labels[j] == label) {
            hits += 1;
        }
    }
    if queried == 0 {
        return Err(Error::Data("every class is a singleton".into()));
    }
    Ok(RecallReport {
        k,
        recall: hits as f64 / queried as f64,
        queried,
        skipped,
    })
}

/// Principal axes of the rows of `sets`, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit axes, largest variance first.
    pub axes: [Vec<f64>; 2],
    pub explained: [f64; 2],
}

impl Pca2 {
    pub fn fit(sets: &[&EmbeddingSet]) -> Result<Self> {
        let dim = sets.first().map_or(0, |s| s.dim);
        if dim == 0 || sets.iter().any(|s| s.dim != dim) {
            return Err(Error::Data("PCA needs non-empty sets of one width".into()));
        }
        let rows: Vec<&[f64]> = sets.iter().flat_map(|s| (0..s.len()).map(move |i| s.row(i))).collect();
        if rows.is_empty() {
            return Err(Error::Data("PCA needs at least one vector".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for r in &rows {
            for a in 0..dim {
                for b in 0..dim {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let axis = |slot: usize| -> (Vec<f64>, f64) {
            let Some(&i) = order.get(slot) else {
                return (vec![0.0; dim], 0.0);
            };
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // sign fixed so the largest-magnitude entry is positive
            let lead = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (v, eig.eigenvalues[i].max(0.0))
        };
        let ((a0, e0), (a1, e1)) = (axis(0), axis(1));
        Ok(Pca2 {
            mean,
            axes: [a0, a1],
            explained: [e0, e1],
        })
    }

    pub fn transform(&self, x: &[f64]) -> [f64; 2] {
        let dot = |axis: &[f64]| axis.iter().zip(x.iter().zip(&self.mean)).map(|(a, (v, m))| a * (v - m)).sum();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub source: String,
}

/// PCA to two dimensions over all sets jointly, then projection into the
/// Poincaré disk.
pub fn scatter_points(sets: &[&EmbeddingSet], curvature: f64) -> Result<Vec<ScatterPoint>> {
    let pca = Pca2::fit(sets)?;
    let mut out = Vec::new();
    for s in sets {
        for i in 0..s.len() {
            let p = poincare_project(&pca.transform(s.row(i)), curvature)?;
            out.push(ScatterPoint {
                x: p[0],
                y: p[1],
                label: s.labels[i],
                source: s.source.clone(),
            });
        }
    }
    Ok(out)
}

/// Rows `x,y,label,source`.
pub fn write_scatter_csv<W: std::io::Write>(points: &[ScatterPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Disk outline with one dot per point, colored by label. `radius` is the
/// disk radius in the same units as the points.
pub fn scatter_svg(points: &[ScatterPoint], radius: f64) -> String {
    let size = 400.0;
    let half = size / 2.0;
    let scale = (half - 10.0) / radius;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    svg.push_str(
        "<metadata>2-D coordinates are the top two principal components (a UMAP substitute), mapped into the Poincaré disk by the exponential map at the origin.</metadata>\n",
    );
    svg.push_str(&format!(
        "<circle cx=\"{half}\" cy=\"{half}\" r=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        half - 10.0
    ));
    for p in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"2\" fill=\"{}\"><title>{} {}</title></circle>\n",
            half + p.x * scale,
            half - p.y * scale,
            PALETTE[p.label % PALETTE.len()],
            p.source,
            p.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Distances of projected points from the disk boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BorderStats {
    pub source: String,
    pub count: usize,
    pub mean_norm: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    /// Mean of `radius - ‖y‖`.
    pub mean_border_distance: f64,
}

pub fn border_stats(points: &[ScatterPoint], radius: f64) -> Vec<BorderStats> {
    let mut sources: Vec<&str> = Vec::new();
    for p in points {
        if !sources.contains(&p.source.as_str()) {
            sources.push(&p.source);
        }
    }
    sources
        .into_iter()
        .map(|s| {
            let norms: Vec<f64> = points.iter().filter(|p| p.source == s).map(|p| p.x.hypot(p.y)).collect();
            let n = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / n;
            BorderStats {
                source: s.to_string(),
                count: norms.len(),
                mean_norm: mean,
                min_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
                max_norm: norms.iter().copied().fold(0.0, f64::max),
                mean_border_distance: radius - mean,
            }
        })
        .collect()
}
