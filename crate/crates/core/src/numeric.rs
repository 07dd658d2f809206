//! Minimal differentiable compute kernel: dense matrices, a named parameter
//! store with AdamW state, forward/backward ops, and a finite-difference
//! gradient checker. Everything is f64.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self (r×k) · other (k×c) -> r×c
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self (r×k) · otherᵀ (c×k) -> r×c
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by {}x{}ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot(a, other.row(j)));
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// One trainable tensor with gradient and AdamW moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub frozen: bool,
}

impl Param {
    fn new(value: Matrix) -> Self {
        let (r, c) = (value.rows, value.cols);
        Param {
            value,
            grad: Matrix::zeros(r, c),
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            frozen: false,
        }
    }
}

/// Named parameter map. BTreeMap keeps iteration (and checkpoints) ordered.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Scales all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let sq: f64 = self
            .params
            .values()
            .map(|p| p.grad.data.iter().map(|g| g * g).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.data.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward/backward ops
// ---------------------------------------------------------------------------

/// Saved inputs for the backward pass of [`affine`].
pub struct AffineTrace {
    pub name: String,
    pub x: Matrix,
}

/// y = x·W + b with W = `{name}.w` (in×out) and b = `{name}.b` (1×out).
pub fn affine(store: &ParameterStore, name: &str, x: &Matrix) -> Result<(Matrix, AffineTrace)> {
    let w = store.value(&format!("{name}.w"))?;
    let b = store.value(&format!("{name}.b"))?;
    let mut y = x.matmul(w)?;
    for i in 0..y.rows {
        axpy(y.row_mut(i), 1.0, b.row(0));
    }
    Ok((y, AffineTrace { name: name.to_string(), x: x.clone() }))
}

/// Accumulates ∂L/∂W and ∂L/∂b, returns ∂L/∂x.
pub fn affine_backward(
    store: &mut ParameterStore,
    trace: &AffineTrace,
    grad_y: &Matrix,
) -> Result<Matrix> {
    let w = store.value(&format!("{}.w", trace.name))?.clone();
    {
        let gw = &mut store.get_mut(&format!("{}.w", trace.name))?.grad;
        // gw += xᵀ · grad_y
        for i in 0..trace.x.rows {
            for k in 0..trace.x.cols {
                let xv = trace.x.get(i, k);
                if xv != 0.0 {
                    axpy(gw.row_mut(k), xv, grad_y.row(i));
                }
            }
        }
    }
    {
        let gb = &mut store.get_mut(&format!("{}.b", trace.name))?.grad;
        for i in 0..grad_y.rows {
            axpy(gb.row_mut(0), 1.0, grad_y.row(i));
        }
    }
    grad_y.matmul_transpose(&w)
}

pub fn tanh_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.tanh());
    y
}

/// grad_x from grad_y given the forward *output* y = tanh(x).
pub fn tanh_backward(y: &Matrix, grad_y: &Matrix) -> Matrix {
    let mut g = grad_y.clone();
    for (gv, yv) in g.data.iter_mut().zip(&y.data) {
        *gv *= 1.0 - yv * yv;
    }
    g
}

pub struct EmbedTrace {
    pub table: String,
    pub token_ids: Vec<usize>,
}

/// Mean of the embedding rows for `token_ids` from table `{table}` (V×D).
pub fn embedding_mean_pool(
    store: &ParameterStore,
    table: &str,
    token_ids: &[usize],
) -> Result<(Matrix, EmbedTrace)> {
    let t = store.value(table)?;
    if token_ids.is_empty() {
        return Err(Error::Argument("embedding_mean_pool on empty token list".into()));
    }
    let mut out = Matrix::zeros(1, t.cols);
    for &id in token_ids {
        if id >= t.rows {
            return Err(Error::Index(format!("token id {} out of range {}", id, t.rows)));
        }
        axpy(out.row_mut(0), 1.0, t.row(id));
    }
    let inv = 1.0 / token_ids.len() as f64;
    out.data.iter_mut().for_each(|v| *v *= inv);
    Ok((out, EmbedTrace { table: table.to_string(), token_ids: token_ids.to_vec() }))
}

pub fn embedding_mean_pool_backward(
    store: &mut ParameterStore,
    trace: &EmbedTrace,
    grad_out: &Matrix,
) -> Result<()> {
    let inv = 1.0 / trace.token_ids.len() as f64;
    let g = &mut store.get_mut(&trace.table)?.grad;
    for &id in &trace.token_ids {
        axpy(g.row_mut(id), inv, grad_out.row(0));
    }
    Ok(())
}

/// Numerically-stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// loss = −log softmax(logits)[target]; grad = softmax − one_hot(target).
pub fn softmax_cross_entropy(logits: &Matrix, target: usize) -> Result<(f64, Matrix)> {
    if logits.rows != 1 || logits.cols == 0 {
        return Err(Error::Shape("softmax_cross_entropy expects a non-empty 1×K row".into()));
    }
    if target >= logits.cols {
        return Err(Error::Index(format!("target {} out of range {}", target, logits.cols)));
    }
    let probs = softmax(logits.row(0));
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = Matrix::from_vec(1, logits.cols, probs)?;
    grad.data[target] -= 1.0;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW step over all non-frozen parameters; gradients are zeroed for
/// every parameter afterwards. `step_index` is 1-based.
pub fn adamw_update(
    store: &mut ParameterStore,
    learning_rate: f64,
    betas: (f64, f64),
    weight_decay: f64,
    step_index: u64,
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(step_index as i32);
    let bc2 = 1.0 - b2.powi(step_index as i32);
    for p in store.params.values_mut() {
        if !p.frozen {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                p.first_moment.data[i] = b1 * p.first_moment.data[i] + (1.0 - b1) * g;
                p.second_moment.data[i] = b2 * p.second_moment.data[i] + (1.0 - b2) * g * g;
                let m_hat = p.first_moment.data[i] / bc1;
                let v_hat = p.second_moment.data[i] / bc2;
                p.value.data[i] -= learning_rate
                    * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p.value.data[i]);
            }
        }
        p.grad.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central-difference check of the analytic gradients already stored for
/// `names` against `f`, which must recompute the scalar loss from the store.
/// Relative error uses a small floor so near-zero gradients don't blow up.
pub fn finite_difference_check<F>(
    f: &mut F,
    store: &mut ParameterStore,
    names: &[&str],
    h: f64,
) -> Result<FdReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for &name in names {
        let len = store.get(name)?.value.data.len();
        for i in 0..len {
            let orig = store.get(name)?.value.data[i];
            store.get_mut(name)?.value.data[i] = orig + h;
            let plus = f(store)?;
            store.get_mut(name)?.value.data[i] = orig - h;
            let minus = f(store)?;
            store.get_mut(name)?.value.data[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = store.get(name)?.grad.data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut store = ParameterStore::new();
        store.insert("lin.w", Matrix::identity(3));
        store.insert("lin.b", Matrix::zeros(1, 3));
        let x = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let (y, _) = affine(&store, "lin", &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn affine_scalar_gradient() {
        let mut store = ParameterStore::new();
        store.insert("lin.w", Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        store.insert("lin.b", Matrix::from_vec(1, 1, vec![0.3]).unwrap());
        let x = Matrix::from_vec(1, 1, vec![5.0]).unwrap();
        let (y, trace) = affine(&store, "lin", &x).unwrap();
        assert_relative_eq!(y.data[0], 10.3);
        let upstream = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let gx = affine_backward(&mut store, &trace, &upstream).unwrap();
        assert_relative_eq!(store.get("lin.w").unwrap().grad.data[0], 5.0);
        assert_relative_eq!(store.get("lin.b").unwrap().grad.data[0], 1.0);
        assert_relative_eq!(gx.data[0], 2.0);
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        store.insert("lin.w", random_matrix(&mut rng, 3, 4));
        store.insert("lin.b", random_matrix(&mut rng, 1, 4));
        let x = random_matrix(&mut rng, 2, 3);
        // loss = sum of outputs
        let xc = x.clone();
        let mut f = move |s: &ParameterStore| -> Result<f64> {
            let (y, _) = affine(s, "lin", &xc)?;
            Ok(y.data.iter().sum())
        };
        let (y, trace) = affine(&store, "lin", &x).unwrap();
        let mut ones = Matrix::zeros(y.rows, y.cols);
        ones.fill(1.0);
        affine_backward(&mut store, &trace, &ones).unwrap();
        let report =
            finite_difference_check(&mut f, &mut store, &["lin.w", "lin.b"], 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn embedding_mean_pool_single_and_repeated() {
        let mut store = ParameterStore::new();
        store.insert(
            "emb",
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        );
        let (one, _) = embedding_mean_pool(&store, "emb", &[1]).unwrap();
        assert_eq!(one.data, vec![3.0, 4.0]);
        let (two, _) = embedding_mean_pool(&store, "emb", &[1, 1]).unwrap();
        assert_eq!(two.data, vec![3.0, 4.0]);
        assert!(embedding_mean_pool(&store, "emb", &[3]).is_err());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        store.insert("emb", random_matrix(&mut rng, 6, 4));
        let ids = vec![0usize, 2, 2, 5, 1];
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let idc = ids.clone();
        let wc = weights.clone();
        let mut f = move |s: &ParameterStore| -> Result<f64> {
            let (y, _) = embedding_mean_pool(s, "emb", &idc)?;
            Ok(dot(y.row(0), &wc))
        };
        let (_, trace) = embedding_mean_pool(&store, "emb", &ids).unwrap();
        let upstream = Matrix::from_vec(1, 4, weights).unwrap();
        embedding_mean_pool_backward(&mut store, &trace, &upstream).unwrap();
        let report = finite_difference_check(&mut f, &mut store, &["emb"], 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::from_vec(1, 4, vec![0.7; 4]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, 2).unwrap();
        assert_relative_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_target() {
        let logits = Matrix::from_vec(1, 3, vec![1e9, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParameterStore::new();
        store.insert("logits", random_matrix(&mut rng, 1, 7));
        let mut f = |s: &ParameterStore| -> Result<f64> {
            Ok(softmax_cross_entropy(s.value("logits")?, 3)?.0)
        };
        let (_, grad) = softmax_cross_entropy(store.value("logits").unwrap(), 3).unwrap();
        store.get_mut("logits").unwrap().grad = grad;
        let report = finite_difference_check(&mut f, &mut store, &["logits"], 1e-4).unwrap();
        assert!(report.max_rel_err <= 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, -2.0, 0.3, 9.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_matches_hand_execution() {
        // Scalar, grad 1, lr 0.1, step 1: bias-corrected step ≈ lr·g/√(g²).
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        store.get_mut("p").unwrap().grad.data[0] = 1.0;
        adamw_update(&mut store, 0.1, (0.9, 0.999), 0.0, 1);
        let v = store.value("p").unwrap().data[0];
        assert_relative_eq!(v, 1.0 - 0.1 / (1.0 + ADAM_EPS), epsilon = 1e-12);
        assert_eq!(store.get("p").unwrap().grad.data[0], 0.0);
    }

    #[test]
    fn adamw_frozen_parameter_unchanged() {
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::from_vec(1, 1, vec![0.25]).unwrap());
        store.set_frozen("p", true).unwrap();
        for step in 1..=10 {
            store.get_mut("p").unwrap().grad.data[0] = 3.0;
            adamw_update(&mut store, 0.1, (0.9, 0.999), 0.01, step);
        }
        assert_eq!(store.value("p").unwrap().data[0].to_bits(), 0.25f64.to_bits());
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap());
        adamw_update(&mut store, 0.1, (0.9, 0.999), 0.0, 1);
        assert_eq!(store.value("p").unwrap().data, vec![0.5, -0.5]);
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let mut store = ParameterStore::new();
        store.insert("theta", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        store.get_mut("theta").unwrap().grad.data[0] = 6.0;
        let mut quad = |s: &ParameterStore| -> Result<f64> {
            let t = s.value("theta")?.data[0];
            Ok(t * t)
        };
        let report = finite_difference_check(&mut quad, &mut store, &["theta"], 1e-4).unwrap();
        assert!(report.max_rel_err < 1e-6);

        store.get_mut("theta").unwrap().grad.data[0] = 0.0;
        let mut constant = |_: &ParameterStore| -> Result<f64> { Ok(7.0) };
        let report = finite_difference_check(&mut constant, &mut store, &["theta"], 1e-4).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn clip_global_norm_scales_gradients() {
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        store.get_mut("p").unwrap().grad.data = vec![3.0, 4.0];
        store.clip_global_norm(1.0);
        let g = &store.get("p").unwrap().grad.data;
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
    }
}
