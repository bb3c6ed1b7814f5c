//! Dense f64 kernel: matrices, probability transforms, hand-written
//! forward/backward passes for affine and ReLU layers, Adam, and a
//! central-difference gradient oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperatures are clamped into this range before dividing logits.
pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 1e3;
/// Floor applied to predicted probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;
/// Tolerance for the simplex checks on [`LabelDistribution`].
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_finite(context: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix data",
                rows * cols,
                data.len(),
            ));
        }
        check_finite("matrix data", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Glorot-uniform initialization in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape("transposed matvec", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * xr;
            }
        }
        Ok(out)
    }

    /// `self += scale · (u ⊗ v)`
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += scale * ur * vc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates non-negativity and unit sum (within [`SIMPLEX_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid("empty distribution".into()));
        }
        check_finite("distribution", &probs)?;
        if let Some(i) = probs.iter().position(|&p| p < 0.0) {
            return Err(Error::Invalid(format!(
                "negative probability {} at index {i}",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        assert!(class < classes, "class {class} out of range {classes}");
        let mut p = vec![0.0; classes];
        p[class] = 1.0;
        Self(p)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    /// Unchecked constructor for values built by convex combination of
    /// already-valid distributions.
    pub(crate) fn from_mixture(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| *p >= 0.0));
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the single unit entry, if the distribution is one-hot.
    pub fn hot_index(&self) -> Option<usize> {
        let mut hot = None;
        for (i, &p) in self.0.iter().enumerate() {
            if p == 1.0 && hot.is_none() {
                hot = Some(i);
            } else if p != 0.0 {
                return None;
            }
        }
        hot
    }

    /// Argmax with ties resolved to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<LabelDistribution> {
    if logits.is_empty() {
        return Err(Error::Invalid("softmax of empty vector".into()));
    }
    check_finite("softmax logits", logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(LabelDistribution(exps.into_iter().map(|e| e / total).collect()))
}

pub fn clamp_temperature(t: f64) -> f64 {
    t.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)
}

/// `softmax(logits / T)` with `T` clamped into
/// [[`MIN_TEMPERATURE`], [`MAX_TEMPERATURE`]].
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Result<LabelDistribution> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t = clamp_temperature(temperature);
    if t == 1.0 {
        return softmax(logits);
    }
    check_finite("tempered softmax logits", logits)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    softmax(&scaled)
}

/// `-Σ target · ln(max(predicted, LOG_FLOOR))`
pub fn cross_entropy(target: &LabelDistribution, predicted: &LabelDistribution) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::shape("cross entropy", target.len(), predicted.len()));
    }
    let loss = -target
        .probs()
        .iter()
        .zip(predicted.probs())
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>();
    // -0.0 when every term vanishes
    Ok(loss.max(0.0))
}

pub fn affine_forward(input: &[f64], weight: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if bias.len() != weight.rows() {
        return Err(Error::shape("affine bias", weight.rows(), bias.len()));
    }
    let mut out = weight.matvec(input)?;
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Vec<f64>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

pub fn affine_backward(upstream: &[f64], input: &[f64], weight: &Matrix) -> Result<AffineGrads> {
    if upstream.len() != weight.rows() {
        return Err(Error::shape("affine upstream", weight.rows(), upstream.len()));
    }
    if input.len() != weight.cols() {
        return Err(Error::shape("affine cached input", weight.cols(), input.len()));
    }
    let mut grad_weight = Matrix::zeros(weight.rows(), weight.cols());
    grad_weight.add_outer(upstream, input, 1.0);
    Ok(AffineGrads {
        input: weight.matvec_t(upstream)?,
        weight: grad_weight,
        bias: upstream.to_vec(),
    })
}

pub fn relu_forward(input: &[f64]) -> Result<Vec<f64>> {
    check_finite("relu input", input)?;
    Ok(input.iter().map(|&x| x.max(0.0)).collect())
}

/// Subgradient at zero is zero.
pub fn relu_backward(upstream: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != input.len() {
        return Err(Error::shape("relu backward", input.len(), upstream.len()));
    }
    Ok(upstream
        .iter()
        .zip(input)
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update, in place. A non-finite gradient leaves
    /// both `params` and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam step",
                self.m.len(),
                format!("params {} / grads {}", params.len(), grads.len()),
            ));
        }
        check_finite("adam gradient", grads)?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Invalid(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite difference evaluation",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
