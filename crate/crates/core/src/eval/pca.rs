//! Principal components of generated prompt vectors.
//!
//! The `d × d` covariance is diagonalized with cyclic Jacobi rotations, which
//! is deterministic and needs no external solver at these sizes.

use std::io::Write;

use log::warn;

use super::{EvalPlan, EvalTask, ModelSet};
use crate::encoders::EmbeddingStore;
use crate::error::{Error, Result};
use crate::models::Method;
use crate::tensor::{matmul, Matrix};

pub const PCA_HEADER: &str = "method,dataset,split,vec_idx,pc1,pc2,pc3";

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix: eigenvalues in descending
/// order and the matching unit eigenvectors as the rows of the second
/// value. Each eigenvector's largest-magnitude entry is made positive.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("jacobi_eigen", a.shape(), (n, n)));
    }
    let mut s = a.clone();
    let mut v = Matrix::identity(n);
    let total: f64 = s.data().iter().map(|x| x * x).sum();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.get(i, j).powi(2))
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (s.get(q, q) - s.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (skp, skq) = (s.get(k, p), s.get(k, q));
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let (spk, sqk) = (s.get(p, k), s.get(q, k));
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.get(j, j).total_cmp(&s.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| s.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|k| v.get(k, i)).collect();
        let lead = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for (k, x) in col.into_iter().enumerate() {
            vectors.set(r, k, sign * x);
        }
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `points × k` projected coordinates.
    pub coords: Matrix,
    /// `k × d` principal axes; zero rows for missing components.
    pub components: Matrix,
    /// Share of total variance per component.
    pub explained: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Projects the rows of `points` onto their top `k` principal axes.
pub fn pca_project(points: &Matrix, k: usize) -> Result<PcaResult> {
    let (n, d) = points.shape();
    if n < k + 1 {
        return Err(Error::Data(format!("PCA to {k} components needs at least {} points, got {n}", k + 1)));
    }
    if k > d {
        return Err(Error::Data(format!("cannot take {k} components of {d}-dim points")));
    }
    let mean: Vec<f64> = points.col_sums().data().iter().map(|s| s / n as f64).collect();
    let mut centered = points.clone();
    for r in 0..n {
        for (x, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let cov = matmul(&centered.transpose(), &centered)?.scale(1.0 / (n - 1) as f64);
    let (values, vectors) = jacobi_eigen(&cov)?;
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut components = Matrix::zeros(k, d);
    let mut explained = vec![0.0; k];
    let mut kept = 0;
    for i in 0..k {
        if values[i] > tol {
            components.row_mut(i).copy_from_slice(vectors.row(i));
            explained[i] = values[i] / total;
            kept += 1;
        }
    }
    if kept < k {
        warn!("points span only {kept} of {k} requested components; padding with zeros");
    }
    let coords = matmul(&centered, &components.transpose())?;
    Ok(PcaResult { coords, components, explained, mean })
}

/// One generated prompt vector with its provenance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPoint {
    pub method: Method,
    pub dataset: String,
    /// `base`, `new`, `unseen`, or `client<i>`.
    pub split: String,
    pub vec_idx: usize,
    pub vector: Vec<f64>,
}

fn task_dataset(store: &EmbeddingStore, task: &EvalTask) -> String {
    let mut names: Vec<&str> = Vec::new();
    for &id in &task.class_ids {
        if let Some((di, _)) = store.locate(id) {
            let n = store.datasets[di].name.as_str();
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    names.join("+")
}

/// Prompt rows generated for every client, base, new and unseen candidate
/// set of `plan`. Shared tasks use the first model of a per-client set.
pub fn prompt_points(method: Method, models: ModelSet<'_>, store: &EmbeddingStore, plan: &EvalPlan) -> Result<Vec<PromptPoint>> {
    let mut out = Vec::new();
    let mut push = |task: &EvalTask, split: String, model: &crate::models::PromptModel| -> Result<()> {
        let p = model.prompts(&task.tokens)?;
        let dataset = task_dataset(store, task);
        for (vec_idx, row) in p.iter_rows().enumerate() {
            out.push(PromptPoint {
                method,
                dataset: dataset.clone(),
                split: split.clone(),
                vec_idx,
                vector: row.to_vec(),
            });
        }
        Ok(())
    };
    let shared = match models {
        ModelSet::Shared(m) => m,
        ModelSet::PerClient(ms) => ms.first().ok_or_else(|| Error::Data("no client models".into()))?,
    };
    for (i, task) in plan.local.iter().enumerate() {
        let model = match models {
            ModelSet::Shared(m) => m,
            ModelSet::PerClient(ms) => ms.get(i).ok_or_else(|| Error::Data(format!("no model for client {i}")))?,
        };
        push(task, format!("client{i}"), model)?;
    }
    for (tasks, split) in [(&plan.base, "base"), (&plan.new, "new"), (&plan.unseen, "unseen")] {
        for task in tasks {
            push(task, split.to_string(), shared)?;
        }
    }
    Ok(out)
}

/// Runs PCA to three components over `points` and writes one CSV row each.
pub fn write_pca_csv<W: Write>(points: &[PromptPoint], mut w: W) -> Result<PcaResult> {
    let rows: Vec<&[f64]> = points.iter().map(|p| p.vector.as_slice()).collect();
    let pca = pca_project(&Matrix::from_rows(&rows)?, 3)?;
    writeln!(w, "{PCA_HEADER}")?;
    for (p, c) in points.iter().zip(pca.coords.iter_rows()) {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            p.method, p.dataset, p.split, p.vec_idx, c[0], c[1], c[2]
        )?;
    }
    w.flush()?;
    Ok(pca)
}
