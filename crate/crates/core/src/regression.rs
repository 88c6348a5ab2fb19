//! Outcome models: degree-2 polynomial kernel ridge regression and L1-penalized logistic
//! regression, plus k-fold cross-validation over a penalty grid.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, RngSeed};
use crate::error::{check_dim, EfcError, Result};
use crate::linalg::{dot, Cholesky};
use crate::scalar::Scalar;

/// Probability clamp used wherever a log of a predicted probability is taken.
pub const PROB_CLAMP: f64 = 1e-12;

/// Anything that maps a pre-outcome vector to an outcome prediction.
pub trait Predictor<F: Scalar>: Sync {
    fn input_dim(&self) -> usize;

    fn predict(&self, t: ArrayView1<'_, F>) -> Result<F>;

    fn predict_many(&self, points: ArrayView2<'_, F>) -> Result<Array1<F>> {
        check_dim(self.input_dim(), points.ncols())?;
        points.outer_iter().map(|row| self.predict(row)).collect::<Result<Vec<_>>>().map(Array1::from)
    }
}

/// Wraps a closure as a predictor (analytic oracles, test fields).
pub struct FnPredictor<G> {
    dim: usize,
    f: G,
}

impl<G> FnPredictor<G> {
    pub fn new(dim: usize, f: G) -> Self {
        Self { dim, f }
    }
}

impl<F: Scalar, G> Predictor<F> for FnPredictor<G>
where
    G: Fn(ArrayView1<'_, F>) -> F + Sync,
{
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, t: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.dim, t.len())?;
        Ok((self.f)(t))
    }
}

/// Default ridge penalty for `n` training rows.
pub fn default_ridge<F: Scalar>(n: usize) -> F {
    F::lit(1e-4) * F::from_usize_lossy(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRidge<F> {
    pub train: Array2<F>,
    pub dual: Array1<F>,
    pub lambda: F,
    pub offset: F,
}

#[inline]
fn poly2<F: Scalar>(a: &[F], b: &[F], offset: F) -> F {
    let k = dot(a, b) + offset;
    k * k
}

fn kernel_matrix<F: Scalar>(x: ArrayView2<'_, F>, offset: F) -> Array2<F> {
    let x = x.as_standard_layout();
    let n = x.nrows();
    let rows: Vec<&[F]> = x.outer_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v = poly2(rows[i], rows[j], offset);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Fits kernel ridge regression with `k(x, x') = (x^T x' + offset)^2` by solving
/// `(K + lambda I) a = y` with a Cholesky factorization and one refinement step.
pub fn fit_krr_xy<F: Scalar>(x: ArrayView2<'_, F>, y: ArrayView1<'_, F>, lambda: F, offset: F) -> Result<KernelRidge<F>> {
    let n = x.nrows();
    if n == 0 {
        return Err(EfcError::EmptyDataset);
    }
    check_dim(n, y.len())?;
    if !(lambda > F::zero()) || !lambda.is_finite() {
        return Err(EfcError::InvalidParameter("ridge penalty must be positive".into()));
    }
    if !(offset >= F::zero()) || !offset.is_finite() {
        return Err(EfcError::InvalidParameter("kernel offset must be nonnegative".into()));
    }
    let mut k = kernel_matrix(x, offset);
    for i in 0..n {
        k[[i, i]] += lambda;
    }
    let chol = Cholesky::factor(k.view())?;
    let mut dual = chol.solve(y)?;
    let resid = &y - &k.dot(&dual);
    dual += &chol.solve(resid.view())?;
    if dual.iter().any(|a| !a.is_finite()) {
        return Err(EfcError::NumericalFailure("non-finite kernel ridge coefficients".into()));
    }
    Ok(KernelRidge { train: x.as_standard_layout().into_owned(), dual, lambda, offset })
}

pub fn fit_krr<F: Scalar>(data: &Dataset<F>, lambda: F, offset: F) -> Result<KernelRidge<F>> {
    fit_krr_xy(data.points().view(), data.require_outcomes()?.view(), lambda, offset)
}

impl<F: Scalar> KernelRidge<F> {
    /// Residual norm of `(K + lambda I) a - y` relative to `||y||`.
    pub fn dual_residual(&self, y: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.dual.len(), y.len())?;
        let mut k = kernel_matrix(self.train.view(), self.offset);
        for i in 0..k.nrows() {
            k[[i, i]] += self.lambda;
        }
        let r = &k.dot(&self.dual) - &y;
        let ny = y.dot(&y).sqrt();
        Ok(r.dot(&r).sqrt() / ny.max(F::min_positive_value()))
    }
}

impl<F: Scalar> Predictor<F> for KernelRidge<F> {
    fn input_dim(&self) -> usize {
        self.train.ncols()
    }

    fn predict(&self, t: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.input_dim(), t.len())?;
        let t = t.as_standard_layout();
        let ts = t.as_slice().expect("standard layout");
        let mut s = F::zero();
        for (row, &a) in self.train.outer_iter().zip(self.dual.iter()) {
            s += a * poly2(row.as_slice().expect("owned standard layout"), ts, self.offset);
        }
        if !s.is_finite() {
            return Err(EfcError::NonFinite("kernel ridge prediction".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticLasso<F> {
    pub weights: Array1<F>,
    pub intercept: F,
    pub lambda: F,
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus<F: Scalar>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl<F: Scalar> LogisticLasso<F> {
    pub fn new(weights: Array1<F>, intercept: F, lambda: F) -> Self {
        Self { weights, intercept, lambda }
    }

    pub fn score(&self, t: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.weights.len(), t.len())?;
        Ok(self.weights.dot(&t) + self.intercept)
    }

    /// Penalized objective `mean log-loss + lambda ||w||_1` at this model's parameters.
    pub fn objective(&self, x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.weights.len(), x.ncols())?;
        let z = x.dot(&self.weights) + self.intercept;
        Ok(mean_log_loss(z.view(), y) + self.lambda * l1(self.weights.view()))
    }
}

impl<F: Scalar> Predictor<F> for LogisticLasso<F> {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, t: ArrayView1<'_, F>) -> Result<F> {
        Ok(sigmoid(self.score(t)?))
    }
}

fn mean_log_loss<F: Scalar>(z: ArrayView1<'_, F>, y: ArrayView1<'_, F>) -> F {
    let s: F = z.iter().zip(y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum();
    s / F::from_usize_lossy(z.len())
}

fn l1<F: Scalar>(w: ArrayView1<'_, F>) -> F {
    w.iter().map(|x| x.abs()).sum()
}

#[inline]
fn soft_threshold<F: Scalar>(x: F, thr: F) -> F {
    if x > thr {
        x - thr
    } else if x < -thr {
        x + thr
    } else {
        F::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig<F> {
    pub rel_tolerance: F,
    pub max_iter: usize,
}

impl<F: Scalar> Default for LassoConfig<F> {
    fn default() -> Self {
        Self { rel_tolerance: F::lit(1e-8), max_iter: 10_000 }
    }
}

/// Lasso fit together with the objective value after every iteration.
#[derive(Debug, Clone)]
pub struct LassoTrace<F> {
    pub model: LogisticLasso<F>,
    pub objective: Vec<F>,
    pub iterations: usize,
}

struct LogisticProblem<'a, F> {
    x: ArrayView2<'a, F>,
    y: ArrayView1<'a, F>,
    lambda: F,
    inv_n: F,
}

impl<F: Scalar> LogisticProblem<'_, F> {
    fn smooth(&self, w: &Array1<F>, b: F) -> F {
        let z = self.x.dot(w) + b;
        mean_log_loss(z.view(), self.y)
    }

    fn smooth_grad(&self, w: &Array1<F>, b: F) -> (F, Array1<F>, F) {
        let z = self.x.dot(w) + b;
        let loss = mean_log_loss(z.view(), self.y);
        let r = Array1::from_iter(z.iter().zip(self.y.iter()).map(|(&z, &y)| sigmoid(z) - y));
        let gw = self.x.t().dot(&r) * self.inv_n;
        let gb = r.sum() * self.inv_n;
        (loss, gw, gb)
    }

    fn total(&self, w: &Array1<F>, b: F) -> F {
        self.smooth(w, b) + self.lambda * l1(w.view())
    }
}

/// Minimizes `mean log-loss + lambda ||w||_1` (intercept unpenalized) by accelerated proximal
/// gradient with backtracking, in its monotone variant so the objective never increases.
pub fn fit_logistic_lasso_traced<F: Scalar>(
    x: ArrayView2<'_, F>,
    y: ArrayView1<'_, F>,
    lambda: F,
    cfg: &LassoConfig<F>,
) -> Result<LassoTrace<F>> {
    let n = x.nrows();
    if n == 0 {
        return Err(EfcError::EmptyDataset);
    }
    check_dim(n, y.len())?;
    if y.iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(EfcError::InvalidParameter("logistic outcomes must be 0 or 1".into()));
    }
    if !(lambda >= F::zero()) || !lambda.is_finite() {
        return Err(EfcError::InvalidParameter("lasso penalty must be nonnegative".into()));
    }
    let p = x.ncols();
    let prob = LogisticProblem { x, y, lambda, inv_n: F::one() / F::from_usize_lossy(n) };

    // Start from the intercept-only maximum likelihood solution.
    let ybar = y.sum() * prob.inv_n;
    let eps = F::lit(PROB_CLAMP);
    let ybar = ybar.max(eps).min(F::one() - eps);
    let mut w = Array1::zeros(p);
    let mut b = (ybar / (F::one() - ybar)).ln();
    let mut obj = prob.total(&w, b);
    let mut history = vec![obj];

    let mut yw = w.clone();
    let mut yb = b;
    let mut momentum = F::one();
    let mut lip = F::one();
    let two = F::lit(2.0);
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let (fy, gw, gb) = prob.smooth_grad(&yw, yb);
        // Backtracking on the local Lipschitz estimate.
        let (zw, zb, fz) = loop {
            let step = F::one() / lip;
            let thr = lambda * step;
            let zw = Array1::from_iter(yw.iter().zip(gw.iter()).map(|(&v, &g)| soft_threshold(v - step * g, thr)));
            let zb = yb - step * gb;
            let fz = prob.smooth(&zw, zb);
            let dw = &zw - &yw;
            let db = zb - yb;
            let quad = fy + gw.dot(&dw) + gb * db + lip / two * (dw.dot(&dw) + db * db);
            if fz <= quad * (F::one() + F::epsilon()) || lip > F::lit(1e30) {
                break (zw, zb, fz);
            }
            lip *= two;
        };
        let obj_z = fz + lambda * l1(zw.view());
        let next_momentum = (F::one() + (F::one() + F::lit(4.0) * momentum * momentum).sqrt()) / two;
        let accepted = obj_z <= obj;
        let prev_obj = obj;
        let w_prev = w.clone();
        let b_prev = b;
        if accepted {
            w.assign(&zw);
            b = zb;
            obj = obj_z;
        }
        // y = x_k + (m_k / m_{k+1}) (z - x_k) + ((m_k - 1) / m_{k+1}) (x_k - x_{k-1})
        let c1 = momentum / next_momentum;
        let c2 = (momentum - F::one()) / next_momentum;
        yw = &w + &((&zw - &w) * c1) + &((&w - &w_prev) * c2);
        yb = b + c1 * (zb - b) + c2 * (b - b_prev);
        momentum = next_momentum;
        history.push(obj);

        if accepted && (prev_obj - obj).abs() <= cfg.rel_tolerance * prev_obj.abs().max(F::min_positive_value()) {
            break;
        }
        // Shrink the Lipschitz estimate slowly so steps can grow again.
        lip = (lip / F::lit(1.1)).max(F::lit(1e-8));
    }

    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(EfcError::NumericalFailure("non-finite lasso coefficients".into()));
    }
    Ok(LassoTrace { model: LogisticLasso { weights: w, intercept: b, lambda }, objective: history, iterations })
}

pub fn fit_logistic_lasso<F: Scalar>(data: &Dataset<F>, lambda: F) -> Result<LogisticLasso<F>> {
    let y = data.require_outcomes()?;
    Ok(fit_logistic_lasso_traced(data.points().view(), y.view(), lambda, &LassoConfig::default())?.model)
}

/// A fitted outcome model, serializable to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeModel<F> {
    KernelRidge(KernelRidge<F>),
    LogisticLasso(LogisticLasso<F>),
}

impl<F: Scalar> OutcomeModel<F> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| EfcError::MalformedFile { path: path.to_path_buf(), reason: e.to_string() })
    }
}

impl<F: Scalar> From<KernelRidge<F>> for OutcomeModel<F> {
    fn from(m: KernelRidge<F>) -> Self {
        OutcomeModel::KernelRidge(m)
    }
}

impl<F: Scalar> From<LogisticLasso<F>> for OutcomeModel<F> {
    fn from(m: LogisticLasso<F>) -> Self {
        OutcomeModel::LogisticLasso(m)
    }
}

impl<F: Scalar> Predictor<F> for OutcomeModel<F> {
    fn input_dim(&self) -> usize {
        match self {
            OutcomeModel::KernelRidge(m) => m.input_dim(),
            OutcomeModel::LogisticLasso(m) => m.input_dim(),
        }
    }

    fn predict(&self, t: ArrayView1<'_, F>) -> Result<F> {
        match self {
            OutcomeModel::KernelRidge(m) => m.predict(t),
            OutcomeModel::LogisticLasso(m) => m.predict(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind<F> {
    /// Kernel ridge with the given kernel offset; the grid ranges over the ridge penalty.
    KernelRidge { offset: F },
    /// Logistic lasso; the grid ranges over the L1 penalty.
    LogisticLasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult<F> {
    pub chosen: F,
    pub grid: Vec<F>,
    pub mean_loss: Vec<F>,
}

/// Deterministic assignment of `n` rows to `k` folds.
pub fn fold_assignment(n: usize, k: usize, rng: RngSeed) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(EfcError::InvalidParameter("need at least two folds".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.rng());
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for (f, rows) in folds.iter_mut().enumerate() {
        if rows.is_empty() {
            return Err(EfcError::FoldTooSmall { fold: f });
        }
        rows.sort_unstable();
    }
    Ok(folds)
}

/// k-fold cross-validation; picks the grid value with the smallest mean validation loss
/// (squared error for kernel ridge, log-loss for the lasso), ties going to the larger value.
pub fn cross_validate<F: Scalar>(
    data: &Dataset<F>,
    folds: usize,
    grid: &[F],
    kind: ModelKind<F>,
    rng: RngSeed,
) -> Result<CvResult<F>> {
    if grid.is_empty() {
        return Err(EfcError::InvalidParameter("empty penalty grid".into()));
    }
    let y = data.require_outcomes()?;
    let assignment = fold_assignment(data.n(), folds, rng)?;
    let mut totals = vec![F::zero(); grid.len()];
    for val in &assignment {
        let mut in_val = vec![false; data.n()];
        val.iter().for_each(|&i| in_val[i] = true);
        let train: Vec<usize> = (0..data.n()).filter(|&i| !in_val[i]).collect();
        let xt = data.points().select(Axis(0), &train);
        let yt = y.select(Axis(0), &train);
        let xv = data.points().select(Axis(0), val);
        let yv = y.select(Axis(0), val);
        for (g, &penalty) in grid.iter().enumerate() {
            let loss = match kind {
                ModelKind::KernelRidge { offset } => {
                    let m = fit_krr_xy(xt.view(), yt.view(), penalty, offset)?;
                    let pred = m.predict_many(xv.view())?;
                    let r = &pred - &yv;
                    r.dot(&r) / F::from_usize_lossy(r.len())
                }
                ModelKind::LogisticLasso => {
                    let fit = fit_logistic_lasso_traced(xt.view(), yt.view(), penalty, &LassoConfig::default())?;
                    log_loss(&fit.model, xv.view(), yv.view())?
                }
            };
            totals[g] += loss;
        }
    }
    let k = F::from_usize_lossy(assignment.len());
    let mean_loss: Vec<F> = totals.iter().map(|&t| t / k).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let better = mean_loss[i] < mean_loss[best] || (mean_loss[i] == mean_loss[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(CvResult { chosen: grid[best], grid: grid.to_vec(), mean_loss })
}

/// Mean clamped log-loss of a probabilistic model on labelled rows.
pub fn log_loss<F: Scalar>(model: &LogisticLasso<F>, x: ArrayView2<'_, F>, y: ArrayView1<'_, F>) -> Result<F> {
    check_dim(model.weights.len(), x.ncols())?;
    let eps = F::lit(PROB_CLAMP);
    let z = x.dot(&model.weights) + model.intercept;
    let s: F = z
        .iter()
        .zip(y.iter())
        .map(|(&z, &y)| {
            let p = sigmoid(z).max(eps).min(F::one() - eps);
            -(y * p.ln() + (F::one() - y) * (F::one() - p).ln())
        })
        .sum();
    Ok(s / F::from_usize_lossy(z.len()))
}

/// Central-difference gradient of a predictor at `t`.
pub fn numeric_gradient<F: Scalar, P: Predictor<F> + ?Sized>(model: &P, t: ArrayView1<'_, F>, eps: F) -> Result<Array1<F>> {
    check_dim(model.input_dim(), t.len())?;
    let mut probe = t.to_owned();
    let mut g = Array1::zeros(t.len());
    for i in 0..t.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = model.predict(probe.view())?;
        probe[i] = orig - eps;
        let down = model.predict(probe.view())?;
        probe[i] = orig;
        g[i] = (up - down) / (eps + eps);
    }
    Ok(g)
}
