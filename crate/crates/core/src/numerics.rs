//! Dense linear algebra, hand-derived layer gradients, and the finite-difference
//! oracle used to verify them.
//!
//! Everything is `f64`. Matrices are row-major; hidden states are rows.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Appends a row; the matrix must be empty or have matching width.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "push_row",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// First `n` rows as a new matrix.
    pub fn truncated(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Column sums as a 1×cols matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) -> Result<()> {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb || c.rows != m || c.cols != n {
        return Err(Error::ShapeMismatch {
            op: "gemm",
            left: (m, k),
            right: (kb, n),
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale(beta);
        return Ok(());
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and extents are derived from the owning matrices' shapes,
    // checked above, so every access lies within the backing vectors.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c)?;
    Ok(c)
}

/// `a * b^T`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a, false, b, true, 0.0, &mut c)?;
    Ok(c)
}

/// `a^T * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.cols, b.cols);
    gemm(1.0, a, true, b, false, 0.0, &mut c)?;
    Ok(c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// A weight matrix with its gradient accumulator and freezing flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `delta` to the gradient unless the parameter is frozen.
    pub fn accumulate(&mut self, delta: &Matrix) -> Result<()> {
        if self.trainable {
            self.grad.add_assign(delta)?;
        }
        Ok(())
    }

    /// Adds `delta` to one row of the gradient unless frozen.
    pub fn accumulate_row(&mut self, row: usize, delta: &[f64]) {
        if self.trainable {
            axpy(1.0, delta, self.grad.row_mut(row));
        }
    }
}

/// Visits a model's parameters by stable name.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, p| p.trainable = trainable);
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value.data.len());
        n
    }
}

impl ParamSet for Vec<Parameter> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for (i, p) in self.iter().enumerate() {
            f(&format!("p{i}"), p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, p) in self.iter_mut().enumerate() {
            f(&format!("p{i}"), p);
        }
    }
}

/// Deterministic seeded generator (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed` and a label; the same pair
    /// always yields the same stream.
    pub fn labeled(seed: u64, label: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.rotate_left(17);
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(h ^ seed)
    }

    /// Child stream seeded from this generator's next draw.
    pub fn split(&mut self) -> Rng {
        let s = self.next_u64();
        Rng::new(s)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.index(n - i);
            all.swap(i, j);
        }
        all.truncate(k);
        all
    }

    pub fn matrix_uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.uniform_range(-bound, bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn matrix_normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix { rows, cols, data }
    }
}

/// Glorot-uniform weights: entries in ±sqrt(6/(fan_in+fan_out)).
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.matrix_uniform(fan_in, fan_out, bound)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let max = max_finite(v)?;
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let max = max_finite(v)?;
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok(v.iter().map(|x| x - lse).collect())
}

fn max_finite(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if !x.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        max = max.max(x);
    }
    Ok(max)
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if x <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Elementwise nonlinearity used by the projector and feed-forward layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// `x W + b`, with `b` (1×out) broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Parameter, b: &Parameter) -> Result<Matrix> {
    if x.cols != w.value.rows || b.value.shape() != (1, w.value.cols) {
        return Err(Error::ShapeMismatch {
            op: "linear_forward",
            left: x.shape(),
            right: w.value.shape(),
        });
    }
    let mut out = Matrix::zeros(x.rows, w.value.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(b.value.row(0));
    }
    gemm(1.0, x, false, &w.value, false, 1.0, &mut out)?;
    Ok(out)
}

/// Backward of [`linear_forward`]: returns dL/dx and accumulates dL/dW and
/// dL/db into trainable parameters.
pub fn linear_backward(
    x: &Matrix,
    w: &mut Parameter,
    b: &mut Parameter,
    upstream: &Matrix,
) -> Result<Matrix> {
    if upstream.rows != x.rows || upstream.cols != w.value.cols || x.cols != w.value.rows {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: upstream.shape(),
            right: (x.rows, w.value.cols),
        });
    }
    if w.trainable {
        gemm(1.0, x, true, upstream, false, 1.0, &mut w.grad)?;
    }
    if b.trainable {
        b.grad.add_assign(&upstream.col_sums())?;
    }
    matmul_nt(upstream, &w.value)
}

/// Affine layer owning its weight and bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::new(glorot(rng, fan_in, fan_out)),
            bias: Parameter::new(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_forward(x, &self.weight, &self.bias)
    }

    pub fn backward(&mut self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        linear_backward(x, &mut self.weight, &mut self.bias, upstream)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cached statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normed: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer norm with gain and bias (both 1×d).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        let mut g = Matrix::zeros(1, d);
        g.fill(1.0);
        Self {
            gain: Parameter::new(g),
            bias: Parameter::new(Matrix::zeros(1, d)),
        }
    }

    pub fn forward_row(&self, x: &[f64], out: &mut [f64]) -> (f64, Vec<f64>) {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normed: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
        let g = self.gain.value.row(0);
        let b = self.bias.value.row(0);
        for j in 0..x.len() {
            out[j] = normed[j] * g[j] + b[j];
        }
        (inv, normed)
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let mut out = Matrix::zeros(x.rows, x.cols);
        let mut normed = Matrix::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let (inv, n) = self.forward_row(x.row(r), out.row_mut(r));
            normed.row_mut(r).copy_from_slice(&n);
            inv_std.push(inv);
        }
        (out, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, upstream: &Matrix) -> Matrix {
        let (rows, d) = upstream.shape();
        let mut dx = Matrix::zeros(rows, d);
        let g = self.gain.value.row(0).to_vec();
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        for r in 0..rows {
            let dy = upstream.row(r);
            let xh = cache.normed.row(r);
            let mut dxh = vec![0.0; d];
            for j in 0..d {
                dxh[j] = dy[j] * g[j];
                dg[j] += dy[j] * xh[j];
                db[j] += dy[j];
            }
            let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
            let mean_dxh_xh = dot(&dxh, xh) / d as f64;
            let inv = cache.inv_std[r];
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        self.gain.accumulate_row(0, &dg);
        self.bias.accumulate_row(0, &db);
        dx
    }
}

/// Max relative error between the analytic gradients currently stored in
/// `model` and central finite differences of `f`, over up to `max_coords`
/// trainable coordinates sampled with `rng`.
///
/// The error of one coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<M: ParamSet + ?Sized>(
    model: &mut M,
    mut f: impl FnMut(&M) -> Result<f64>,
    eps: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let base = f(model)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut idx = 0;
    model.visit(&mut |_, p| {
        if p.trainable {
            coords.extend((0..p.value.data.len()).map(|j| (idx, j)));
        }
        idx += 1;
    });
    if coords.len() > max_coords {
        let picked = rng.sample_indices(coords.len(), max_coords);
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut worst = 0.0f64;
    for (pi, j) in coords {
        let original = with_param(model, pi, |p| p.value.data[j]);
        let analytic = with_param(model, pi, |p| p.grad.data[j]);
        with_param(model, pi, |p| p.value.data[j] = original + eps);
        let plus = f(model)?;
        with_param(model, pi, |p| p.value.data[j] = original - eps);
        let minus = f(model)?;
        with_param(model, pi, |p| p.value.data[j] = original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn with_param<M: ParamSet + ?Sized, T>(
    model: &mut M,
    index: usize,
    op: impl FnOnce(&mut Parameter) -> T,
) -> T {
    let mut op = Some(op);
    let mut out = None;
    let mut i = 0;
    model.visit_mut(&mut |_, p| {
        if i == index {
            if let Some(op) = op.take() {
                out = Some(op(p));
            }
        }
        i += 1;
    });
    out.expect("parameter index in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_single() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[123.4]).unwrap(), vec![1.0]);
        assert!(matches!(softmax(&[]), Err(Error::EmptyDistribution)));
        assert!(matches!(log_softmax(&[]), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        // exp(1), exp(2), exp(3) normalized, evaluated without max-shift.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, x) in got.iter().zip(&e) {
            assert!((g - x / z).abs() < 1e-15);
        }
        // Frozen reference values.
        assert!((got[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
        assert!((got[2] - 0.665_240_955_774_821_2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_edge_cases() {
        let ln2 = std::f64::consts::LN_2;
        let v = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((v[0] + ln2).abs() < 1e-15 && (v[1] + ln2).abs() < 1e-15);
        assert_eq!(log_softmax(&[-7.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn log_softmax_composes_with_softmax() {
        let mut rng = Rng::new(3);
        let v: Vec<f64> = (0..5).map(|_| 3.0 * rng.normal()).collect();
        let p = softmax(&v).unwrap();
        let lp = log_softmax(&v).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
            assert!(*b <= 0.0);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn linear_zero_input_and_identity() {
        let mut rng = Rng::new(1);
        let w = Parameter::new(rng.matrix_normal(4, 3, 1.0));
        let b = Parameter::new(Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let y = linear_forward(&Matrix::zeros(2, 4), &w, &b).unwrap();
        assert_eq!(y.row(0), b.value.row(0));
        assert_eq!(y.row(1), b.value.row(0));

        let x = rng.matrix_normal(3, 4, 1.0);
        let id = Parameter::new(Matrix::identity(4));
        let zb = Parameter::new(Matrix::zeros(1, 4));
        assert_eq!(linear_forward(&x, &id, &zb).unwrap(), x);
    }

    #[test]
    fn linear_shape_mismatch_reports_shapes() {
        let w = Parameter::new(Matrix::zeros(4, 3));
        let b = Parameter::new(Matrix::zeros(1, 3));
        let err = linear_forward(&Matrix::zeros(2, 5), &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 5)") && msg.contains("(4, 3)"), "{msg}");
    }

    struct LinearProbe {
        layer: Linear,
        x: Matrix,
        target: Matrix,
    }

    impl ParamSet for LinearProbe {
        fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
            self.layer.visit("lin", f);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            self.layer.visit_mut("lin", f);
        }
    }

    fn probe_loss(p: &LinearProbe) -> Result<f64> {
        let y = p.layer.forward(&p.x)?;
        Ok(y
            .data()
            .iter()
            .zip(p.target.data())
            .map(|(a, b)| 0.5 * (a - b).powi(2))
            .sum())
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut probe = LinearProbe {
            layer: Linear::new(&mut rng, 4, 5),
            x: rng.matrix_normal(3, 4, 1.0),
            target: rng.matrix_normal(3, 5, 1.0),
        };
        probe.layer.bias.value = rng.matrix_normal(1, 5, 1.0);
        let y = probe.layer.forward(&probe.x).unwrap();
        let mut dy = y.clone();
        for (d, t) in dy.data_mut().iter_mut().zip(probe.target.data()) {
            *d -= t;
        }
        let x = probe.x.clone();
        let dx = probe.layer.backward(&x, &dy).unwrap();
        let err = finite_diff_check(&mut probe, probe_loss, 1e-5, 256, &mut rng).unwrap();
        assert!(err < 1e-6, "weight gradient error {err}");

        // Input gradient: perturb x directly.
        for r in 0..3 {
            for c in 0..4 {
                let mut p2 = LinearProbe {
                    layer: probe.layer.clone(),
                    x: probe.x.clone(),
                    target: probe.target.clone(),
                };
                let orig = p2.x.get(r, c);
                p2.x.set(r, c, orig + 1e-5);
                let up = probe_loss(&p2).unwrap();
                p2.x.set(r, c, orig - 1e-5);
                let down = probe_loss(&p2).unwrap();
                let num = (up - down) / 2e-5;
                assert!((num - dx.get(r, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn finite_diff_on_sum_and_quadratic() {
        let mut rng = Rng::new(5);
        let mut ps = vec![Parameter::new(rng.matrix_normal(3, 2, 1.0))];
        ps[0].grad.fill(1.0);
        let err = finite_diff_check(
            &mut ps,
            |m| Ok(m[0].value.data().iter().sum()),
            1e-5,
            256,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut qs = vec![Parameter::new(rng.matrix_normal(4, 4, 1.0))];
        qs[0].grad = qs[0].value.clone();
        let err = finite_diff_check(
            &mut qs,
            |m| Ok(0.5 * m[0].value.frobenius_sq()),
            1e-5,
            256,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn finite_diff_rejects_non_finite_objective() {
        let mut rng = Rng::new(0);
        let mut ps = vec![Parameter::new(Matrix::zeros(1, 1))];
        let r = finite_diff_check(&mut ps, |_| Ok(f64::NAN), 1e-5, 8, &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let mut ln = LayerNorm::new(6);
        ln.gain.value = rng.matrix_normal(1, 6, 1.0);
        ln.bias.value = rng.matrix_normal(1, 6, 1.0);
        let x = rng.matrix_normal(3, 6, 2.0);
        let w = rng.matrix_normal(3, 6, 1.0);
        let loss = |ln: &LayerNorm, x: &Matrix| -> f64 {
            let (y, _) = ln.forward(x);
            dot(y.data(), w.data())
        };
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &w);
        for r in 0..3 {
            for c in 0..6 {
                let mut xp = x.clone();
                xp.set(r, c, x.get(r, c) + 1e-5);
                let up = loss(&ln, &xp);
                xp.set(r, c, x.get(r, c) - 1e-5);
                let down = loss(&ln, &xp);
                assert!(((up - down) / 2e-5 - dx.get(r, c)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(
            Rng::labeled(1, "encoder").next_u64(),
            Rng::labeled(1, "lm").next_u64()
        );
    }

    #[test]
    fn gemm_transposes_agree() {
        let mut rng = Rng::new(9);
        let a = rng.matrix_normal(3, 4, 1.0);
        let b = rng.matrix_normal(5, 4, 1.0);
        let c1 = matmul_nt(&a, &b).unwrap();
        let c2 = matmul(&a, &b.transpose()).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c3 = matmul_tn(&a.transpose(), &b.transpose()).unwrap();
        for (x, y) in c1.data().iter().zip(c3.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..16)) {
                let p = softmax(&v).unwrap();
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            }

            #[test]
            fn softmax_preserves_argmax(v in prop::collection::vec(-50.0f64..50.0, 1..16)) {
                let p = softmax(&v).unwrap();
                let mut sorted = v.clone();
                sorted.sort_by(f64::total_cmp);
                let unique_max = sorted.len() < 2 || sorted[sorted.len() - 1] != sorted[sorted.len() - 2];
                if unique_max {
                    prop_assert_eq!(argmax(&p), argmax(&v));
                }
            }
        }
    }
}
