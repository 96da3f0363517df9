//! Point-supervised counting loss, query contrastive loss and prototype
//! decorrelation loss, each with an analytic gradient.
//!
//! Every loss is evaluated in f64 regardless of the model scalar; values and
//! gradients are converted back at the boundary.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};
use crate::model::WeatherBank;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp on the norm product inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the compact prototype term.
    pub lambda1: f64,
    /// Weight of the contrastive term.
    pub lambda2: f64,
    pub tau: f64,
    /// Negative queue capacity R.
    pub negatives: usize,
    /// Gaussian bandwidth of the posterior, pixels.
    pub sigma: f64,
    /// Background margin d in pixels; `None` means 15% of the crop side.
    pub background_margin: Option<f64>,
    pub background_enabled: bool,
    /// Let gradients reach the positive crop's queries.
    pub positive_gradient: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.2,
            negatives: 64,
            sigma: 8.0,
            background_margin: None,
            background_enabled: true,
            positive_gradient: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives (R) must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if let Some(d) = self.background_margin {
            if !(d >= 0.0) {
                return Err(Error::Config(format!("background_margin must be non-negative, got {d}")));
            }
        }
        Ok(())
    }

    pub fn margin_for(&self, crop_size: usize) -> f64 {
        self.background_margin.unwrap_or(0.15 * crop_size as f64)
    }
}

/// Per-cell posteriors: row 0 is the background, row `i` the i-th point.
/// With the background disabled row 0 is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorField<T> {
    pub posteriors: Tensor<T>,
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    pub background_margin: f64,
    pub background_enabled: bool,
}

impl<T: Scalar> PosteriorField<T> {
    pub fn num_points(&self) -> usize {
        self.posteriors.shape()[0] - 1
    }

    fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn background(&self) -> &[T] {
        &self.posteriors.data()[..self.cells()]
    }

    /// Posterior row of point `i` (1-based, matching the row index).
    pub fn point(&self, i: usize) -> &[T] {
        let k = self.cells();
        &self.posteriors.data()[i * k..(i + 1) * k]
    }
}

/// Centre of density cell `(row, col)` in input pixels.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    (stride as f64 * (col as f64 + 0.5), stride as f64 * (row as f64 + 0.5))
}

/// Gaussian posteriors of every cell over the annotated points, plus a
/// background hypothesis at distance `margin` beyond the nearest point.
pub fn build_posterior_field<T: Scalar>(
    points: &[Point],
    rows: usize,
    cols: usize,
    stride: usize,
    sigma: f64,
    margin: f64,
    background: bool,
) -> Result<PosteriorField<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if rows == 0 || cols == 0 || stride == 0 {
        return Err(Error::Precondition(format!(
            "grid {rows}×{cols} with stride {stride} is empty"
        )));
    }
    if points.is_empty() && !background {
        return Err(Error::Validation(
            "no annotated points and background disabled: the counting loss is undefined".into(),
        ));
    }
    let l = points.len();
    let k = rows * cols;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut post = vec![0.0f64; (l + 1) * k];
    let mut logs = vec![0.0f64; l + 1];
    for r in 0..rows {
        for c in 0..cols {
            let cell = r * cols + c;
            let (cx, cy) = cell_center(r, c, stride);
            let mut nearest = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let d2 = (cx - p.x).powi(2) + (cy - p.y).powi(2);
                nearest = nearest.min(d2);
                logs[i + 1] = -d2 * inv;
            }
            if points.is_empty() {
                post[cell] = 1.0;
                continue;
            }
            let start = if background {
                logs[0] = -(margin - nearest.sqrt()).powi(2) * inv;
                0
            } else {
                1
            };
            let max = logs[start..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs[start..].iter().map(|&v| (v - max).exp()).sum();
            for i in start..=l {
                post[i * k + cell] = (logs[i] - max).exp() / z;
            }
        }
    }
    Ok(PosteriorField {
        posteriors: Tensor::from_vec(&[l + 1, k], post.into_iter().map(T::lit).collect())?,
        rows,
        cols,
        sigma,
        background_margin: margin,
        background_enabled: background,
    })
}

/// Convenience wrapper using the margin and switches of `cfg`.
pub fn posterior_field_for<T: Scalar>(
    points: &[Point],
    rows: usize,
    cols: usize,
    stride: usize,
    cfg: &LossConfig,
) -> Result<PosteriorField<T>> {
    let crop = stride * rows.max(cols);
    build_posterior_field(
        points,
        rows,
        cols,
        stride,
        cfg.sigma,
        cfg.margin_for(crop),
        cfg.background_enabled,
    )
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|Σ_k P₀(k)·D_k| + Σ_i |1 − Σ_k P_i(k)·D_k|` and its gradient in D.
pub fn bayesian_count_loss_grad<T: Scalar>(density: &Tensor<T>, field: &PosteriorField<T>) -> Result<(T, Tensor<T>)> {
    if density.shape() != [field.rows, field.cols] {
        return Err(Error::Dimension(format!(
            "density {:?} vs posterior grid {}×{}",
            density.shape(),
            field.rows,
            field.cols
        )));
    }
    let d = density.data();
    let mut grad = vec![0.0f64; d.len()];
    let mut loss = 0.0;
    for i in 0..=field.num_points() {
        let p = field.point(i);
        let e: f64 = p.iter().zip(d).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        let (term, s) = if i == 0 { (e.abs(), sign(e)) } else { ((1.0 - e).abs(), -sign(1.0 - e)) };
        loss += term;
        if s != 0.0 {
            for (g, a) in grad.iter_mut().zip(p) {
                *g += s * a.as_f64();
            }
        }
    }
    Ok((T::lit(loss), Tensor::from_vec(density.shape(), grad.into_iter().map(T::lit).collect())?))
}

pub fn bayesian_count_loss<T: Scalar>(density: &Tensor<T>, field: &PosteriorField<T>) -> Result<T> {
    Ok(bayesian_count_loss_grad(density, field)?.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn guard_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::NumericalGuard(format!(
            "{what} has norm {n}; cosine similarity is undefined"
        )));
    }
    Ok(n)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // sqrt(‖a‖²‖b‖²) rather than ‖a‖‖b‖ so that φ(a, a) is exactly 1
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt().max(COSINE_EPS)
}

/// `a·b / max(‖a‖‖b‖, ε)`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (a, b) = (to_f64(a), to_f64(b));
    guard_norm(&a, "first vector")?;
    guard_norm(&b, "second vector")?;
    Ok(cosine(&a, &b))
}

/// φ(a,b) and ∂φ/∂a for non-zero `a`, `b`.
fn cosine_with_grad(a: &[f64], na: f64, b: &[f64], nb: f64) -> (f64, Vec<f64>) {
    let ab = dot(a, b);
    let nn = na * nb;
    let g = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / nn - ab / (nn * na) * x / na)
        .collect();
    (cosine(a, b), g)
}

/// Value of the contrastive loss and its gradients in `v` and `v_pos`.
#[derive(Clone, Debug)]
pub struct ContrastiveGrad<T> {
    pub value: T,
    pub d_query: Vec<T>,
    pub d_positive: Vec<T>,
}

/// InfoNCE over flattened query matrices; negatives are constants.
pub fn contrastive_loss_grad<T: Scalar>(
    v: &[T],
    v_pos: &[T],
    negatives: &[&[T]],
    tau: f64,
) -> Result<ContrastiveGrad<T>> {
    if negatives.is_empty() {
        return Err(Error::Validation("contrastive loss needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = v.len();
    if v_pos.len() != n || negatives.iter().any(|w| w.len() != n) {
        return Err(Error::Dimension(format!("all query vectors must have length {n}")));
    }
    let a = to_f64(v);
    let na = guard_norm(&a, "query")?;
    let pos = to_f64(v_pos);
    let npos = guard_norm(&pos, "positive query")?;

    let (s0, g0) = cosine_with_grad(&a, na, &pos, npos);
    let (_, g0_pos) = cosine_with_grad(&pos, npos, &a, na);
    let mut sims = vec![s0];
    let mut sim_grads = vec![g0];
    for (r, w) in negatives.iter().enumerate() {
        let w = to_f64(w);
        let nw = guard_norm(&w, &format!("negative {r}"))?;
        let (s, g) = cosine_with_grad(&a, na, &w, nw);
        sims.push(s);
        sim_grads.push(g);
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let value = (max + z.ln()) - logits[0];
    let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();

    let mut d_query = vec![0.0; n];
    for (r, (p, g)) in probs.iter().zip(&sim_grads).enumerate() {
        let coef = (p - if r == 0 { 1.0 } else { 0.0 }) / tau;
        for (d, gi) in d_query.iter_mut().zip(g) {
            *d += coef * gi;
        }
    }
    let coef = (probs[0] - 1.0) / tau;
    Ok(ContrastiveGrad {
        value: T::lit(value),
        d_query: d_query.into_iter().map(T::lit).collect(),
        d_positive: g0_pos.into_iter().map(|g| T::lit(coef * g)).collect(),
    })
}

pub fn contrastive_loss<T: Scalar>(v: &[T], v_pos: &[T], negatives: &[&[T]], tau: f64) -> Result<T> {
    Ok(contrastive_loss_grad(v, v_pos, negatives, tau)?.value)
}

/// `Σ_i Σ_{j≠i} |φ(P_i, P_j)|` and its gradient in the bank.
pub fn compact_prototype_loss_grad<T: Scalar>(bank: &WeatherBank<T>) -> Result<(T, Tensor<T>)> {
    let s = bank.len();
    if s < 2 {
        return Err(Error::Validation(format!(
            "compact prototype loss needs at least 2 prototypes, got {s}"
        )));
    }
    let protos: Vec<Vec<f64>> = (0..s).map(|i| to_f64(bank.prototype(i))).collect();
    let norms = protos
        .iter()
        .enumerate()
        .map(|(i, p)| guard_norm(p, &format!("prototype {i}")))
        .collect::<Result<Vec<_>>>()?;
    let m = protos[0].len();
    let mut grad = vec![0.0; s * m];
    let mut loss = 0.0;
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let (phi, g) = cosine_with_grad(&protos[i], norms[i], &protos[j], norms[j]);
            loss += phi.abs();
            // the (i, j) term and its mirror (j, i) both depend on P_i
            let sg = 2.0 * sign(phi);
            for (d, gi) in grad[i * m..(i + 1) * m].iter_mut().zip(&g) {
                *d += sg * gi;
            }
        }
    }
    Ok((
        T::lit(loss),
        Tensor::from_vec(bank.prototypes.shape(), grad.into_iter().map(T::lit).collect())?,
    ))
}

pub fn compact_prototype_loss<T: Scalar>(bank: &WeatherBank<T>) -> Result<T> {
    Ok(compact_prototype_loss_grad(bank)?.0)
}

/// `l_cc + λ1·l_cp + λ2·l_con`.
pub fn total_loss<T: Scalar>(l_cc: T, l_cp: T, l_con: T, cfg: &LossConfig) -> Result<T> {
    for (name, v) in [("l_cc", l_cc), ("l_cp", l_cp), ("l_con", l_con)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(l_cc + T::lit(cfg.lambda1) * l_cp + T::lit(cfg.lambda2) * l_con)
}
