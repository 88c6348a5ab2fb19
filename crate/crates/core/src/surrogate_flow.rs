//! Surrogate interventions: move `t*` onto the confounder level set `{t : h(t) = h2}` by
//! integrating the gradient flow `dt/ds = -grad_t |h(t) - h2|^2` from `t(0) = t*`.
//!
//! The flow is integrated with fixed-step forward Euler,
//! `t_{k+1} = t_k - 2 l J_h(t_k) (h(t_k) - h2)`. For linear confounders the limit of the flow
//! is the orthogonal projection of `t*` onto the affine level set, available in closed form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::confounders::FunctionalConfounder;
use crate::data_model::{format_scalar, InterventionQuery};
use crate::error::{check_dim, EfcError, Result};
use crate::linalg::{condition_number, gram, Cholesky};
use crate::scalar::Scalar;

/// Condition number of `W^T W` above which the closed-form projection is refused.
pub const MAX_PROJECTION_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig<F> {
    /// Euler step size `l`.
    pub step_size: F,
    /// Stop once the mismatch falls to `rel_tolerance` times its initial value.
    pub rel_tolerance: F,
    pub max_steps: usize,
    /// Flag divergence once the mismatch exceeds this multiple of its initial value.
    pub divergence_factor: F,
    pub record_trajectory: bool,
    /// Integrate numerically even when the confounder is linear.
    pub force_euler: bool,
}

impl<F: Scalar> Default for FlowConfig<F> {
    fn default() -> Self {
        Self {
            step_size: F::lit(0.05),
            rel_tolerance: F::lit(1e-4),
            max_steps: 100_000,
            divergence_factor: F::lit(1e6),
            record_trajectory: false,
            force_euler: false,
        }
    }
}

impl<F: Scalar> FlowConfig<F> {
    pub fn with_step_size(mut self, step: F) -> Self {
        self.step_size = step;
        self
    }

    pub fn with_rel_tolerance(mut self, tol: F) -> Self {
        self.rel_tolerance = tol;
        self
    }

    pub fn with_max_steps(mut self, k: usize) -> Self {
        self.max_steps = k;
        self
    }

    pub fn with_trajectory(mut self, record: bool) -> Self {
        self.record_trajectory = record;
        self
    }

    pub fn with_force_euler(mut self, force: bool) -> Self {
        self.force_euler = force;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > F::zero()) || !self.step_size.is_finite() {
            return Err(EfcError::InvalidParameter("step size must be positive".into()));
        }
        if !(self.rel_tolerance > F::zero() && self.rel_tolerance < F::one()) {
            return Err(EfcError::InvalidParameter("relative tolerance must lie in (0, 1)".into()));
        }
        if self.max_steps < 1 {
            return Err(EfcError::InvalidParameter("max_steps must be >= 1".into()));
        }
        if !(self.divergence_factor > F::one()) {
            return Err(EfcError::InvalidParameter("divergence factor must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowStatus {
    Converged,
    MaxStepsReached,
    Diverged,
    /// Stopped by a batch-level criterion before this query met its own tolerance.
    Interrupted,
}

impl std::fmt::Display for FlowStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FlowStatus::Converged => "converged",
            FlowStatus::MaxStepsReached => "max_steps",
            FlowStatus::Diverged => "diverged",
            FlowStatus::Interrupted => "interrupted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint<F> {
    pub t: Array1<F>,
    pub mismatch: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateResult<F> {
    pub t_hat: Array1<F>,
    pub steps_taken: usize,
    pub final_mismatch: F,
    pub initial_mismatch: F,
    /// Largest squared mismatch over all iterates, initial point included.
    pub max_mismatch: F,
    pub status: FlowStatus,
    pub trajectory: Option<Vec<TrajectoryPoint<F>>>,
}

impl<F: Scalar> SurrogateResult<F> {
    fn identity(t_star: &Array1<F>, record: bool) -> Self {
        Self {
            t_hat: t_star.clone(),
            steps_taken: 0,
            final_mismatch: F::zero(),
            initial_mismatch: F::zero(),
            max_mismatch: F::zero(),
            status: FlowStatus::Converged,
            trajectory: record.then(|| vec![TrajectoryPoint { t: t_star.clone(), mismatch: F::zero() }]),
        }
    }

    pub fn is_diverged(&self) -> bool {
        self.status == FlowStatus::Diverged
    }
}

fn check_query<F: Scalar>(conf: &FunctionalConfounder<F>, query: &InterventionQuery<F>) -> Result<()> {
    check_dim(conf.dim(), query.t_star.len())?;
    check_dim(conf.output_dim(), query.h_target.len())
}

/// Per-query state of a running Euler integration.
struct EulerState<F> {
    t: Array1<F>,
    grad: Array1<F>,
    mismatch: F,
    initial: F,
    max: F,
    trajectory: Option<Vec<TrajectoryPoint<F>>>,
}

impl<F: Scalar> EulerState<F> {
    fn start(conf: &FunctionalConfounder<F>, query: &InterventionQuery<F>, record: bool) -> Result<Self> {
        let t = query.t_star.clone();
        let mut grad = Array1::zeros(t.len());
        let m = conf.mismatch_gradient(t.view(), query.h_target.view(), &mut grad)?;
        if !m.is_finite() {
            return Err(EfcError::NonFinite("initial confounder mismatch".into()));
        }
        let trajectory = record.then(|| vec![TrajectoryPoint { t: t.clone(), mismatch: m }]);
        Ok(Self { t, grad, mismatch: m, initial: m, max: m, trajectory })
    }

    fn step(&mut self, conf: &FunctionalConfounder<F>, h_target: ArrayView1<'_, F>, step: F) -> Result<()> {
        let scale = -(step + step);
        self.t.scaled_add(scale, &self.grad);
        let m = conf.mismatch_gradient(self.t.view(), h_target, &mut self.grad)?;
        if m.is_nan() {
            return Err(EfcError::NonFinite("Euler iterate".into()));
        }
        self.mismatch = m;
        if m > self.max {
            self.max = m;
        }
        if let Some(tr) = self.trajectory.as_mut() {
            tr.push(TrajectoryPoint { t: self.t.clone(), mismatch: m });
        }
        Ok(())
    }

    fn diverged(&self, cfg: &FlowConfig<F>) -> bool {
        self.mismatch > cfg.divergence_factor * self.initial
    }

    fn converged(&self, cfg: &FlowConfig<F>) -> bool {
        self.mismatch <= cfg.rel_tolerance * self.initial
    }

    fn finish(self, steps: usize, status: FlowStatus) -> SurrogateResult<F> {
        SurrogateResult {
            t_hat: self.t,
            steps_taken: steps,
            final_mismatch: self.mismatch,
            initial_mismatch: self.initial,
            max_mismatch: self.max,
            status,
            trajectory: self.trajectory,
        }
    }
}

/// Fixed-step Euler integration of the surrogate gradient flow for one query.
pub fn euler_solve<F: Scalar>(
    conf: &FunctionalConfounder<F>,
    query: &InterventionQuery<F>,
    cfg: &FlowConfig<F>,
) -> Result<SurrogateResult<F>> {
    cfg.validate()?;
    check_query(conf, query)?;
    let mut state = EulerState::start(conf, query, cfg.record_trajectory)?;
    if state.initial == F::zero() {
        return Ok(SurrogateResult::identity(&query.t_star, cfg.record_trajectory));
    }
    for k in 1..=cfg.max_steps {
        state.step(conf, query.h_target.view(), cfg.step_size)?;
        if state.diverged(cfg) {
            return Ok(state.finish(k, FlowStatus::Diverged));
        }
        if state.converged(cfg) {
            return Ok(state.finish(k, FlowStatus::Converged));
        }
    }
    Ok(state.finish(cfg.max_steps, FlowStatus::MaxStepsReached))
}

/// Precomputed orthogonal projection onto the level sets of a linear confounder
/// `h(t) = W^T (t - c)`: `t' = t* - W (W^T W)^{-1} (h(t*) - h2)`.
#[derive(Debug, Clone)]
pub struct LinearProjector<F> {
    weights: Array2<F>,
    center: Array1<F>,
    gram: Cholesky<F>,
}

impl<F: Scalar> LinearProjector<F> {
    pub fn new(conf: &FunctionalConfounder<F>) -> Result<Self> {
        let (weights, center) = conf.linear_parts().ok_or_else(|| {
            EfcError::InvalidParameter("closed-form surrogate needs a linear confounder".into())
        })?;
        let g = gram(weights.view());
        let cond = condition_number(g.view())?;
        if !(cond.as_f64() <= MAX_PROJECTION_CONDITION) {
            return Err(EfcError::SingularProjection { condition: cond.as_f64() });
        }
        let gram = Cholesky::factor(g.view())
            .map_err(|_| EfcError::SingularProjection { condition: cond.as_f64() })?;
        Ok(Self { weights, center, gram })
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Solves `(W^T W) x = b`.
    pub fn gram_solve(&self, b: ArrayView1<'_, F>) -> Result<Array1<F>> {
        self.gram.solve(b)
    }

    /// Projection of `t_star` onto `{t : h(t) = h_target}`.
    pub fn project(&self, t_star: ArrayView1<'_, F>, h_target: ArrayView1<'_, F>) -> Result<Array1<F>> {
        check_dim(self.dim(), t_star.len())?;
        check_dim(self.output_dim(), h_target.len())?;
        let h = self.weights.t().dot(&(&t_star - &self.center));
        let resid = &h - &h_target;
        if resid.iter().all(|r| *r == F::zero()) {
            return Ok(t_star.to_owned());
        }
        // t* - W G^-1 W^T t* + W G^-1 (h2 + W^T c): same point as t* - W G^-1 (h(t*) - h2),
        // but exact when W selects coordinates (the removed part cancels to zero first)
        let remove = self.gram.solve(self.weights.t().dot(&t_star).view())?;
        let target = &h_target + &self.weights.t().dot(&self.center);
        let insert = self.gram.solve(target.view())?;
        Ok(&t_star - &self.weights.dot(&remove) + self.weights.dot(&insert))
    }
}

/// Exact limit of the flow for a linear confounder.
pub fn closed_form_linear<F: Scalar>(
    conf: &FunctionalConfounder<F>,
    query: &InterventionQuery<F>,
) -> Result<SurrogateResult<F>> {
    let projector = LinearProjector::new(conf)?;
    closed_form_with(&projector, conf, query)
}

fn closed_form_with<F: Scalar>(
    projector: &LinearProjector<F>,
    conf: &FunctionalConfounder<F>,
    query: &InterventionQuery<F>,
) -> Result<SurrogateResult<F>> {
    check_query(conf, query)?;
    let initial = conf.mismatch(query.t_star.view(), query.h_target.view())?;
    let t_hat = projector.project(query.t_star.view(), query.h_target.view())?;
    let final_mismatch = conf.mismatch(t_hat.view(), query.h_target.view())?;
    Ok(SurrogateResult {
        t_hat,
        steps_taken: 0,
        final_mismatch,
        initial_mismatch: initial,
        max_mismatch: initial.max(final_mismatch),
        status: FlowStatus::Converged,
        trajectory: None,
    })
}

/// Integrates all queries in lockstep and stops at the first step where the mean squared
/// mismatch over the batch falls to `delta^2` or below.
///
/// The batch also stops once its mean mismatch reaches `rel_tolerance` times the initial mean,
/// or after `max_steps`. Diverged queries are frozen and excluded from the mean.
pub fn batch_solve_to_mismatch<F: Scalar>(
    conf: &FunctionalConfounder<F>,
    queries: &[InterventionQuery<F>],
    delta: F,
    cfg: &FlowConfig<F>,
) -> Result<Vec<SurrogateResult<F>>> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(EfcError::InvalidParameter("batch needs at least one query".into()));
    }
    if !(delta >= F::zero()) {
        return Err(EfcError::InvalidParameter("delta must be nonnegative".into()));
    }
    let target = delta * delta;
    let mut states = Vec::with_capacity(queries.len());
    for q in queries {
        check_query(conf, q)?;
        states.push(EulerState::start(conf, q, cfg.record_trajectory)?);
    }
    let mut diverged_at: Vec<Option<usize>> = vec![None; queries.len()];
    let initial_mean = mean_active(&states, &diverged_at);

    let mut steps = 0usize;
    let mut batch_done = false;
    loop {
        let active = diverged_at.iter().filter(|d| d.is_none()).count();
        if active == 0 {
            break;
        }
        let mean = mean_active(&states, &diverged_at);
        if mean <= target || mean <= cfg.rel_tolerance * initial_mean {
            batch_done = true;
            break;
        }
        if steps == cfg.max_steps {
            break;
        }
        steps += 1;
        for (i, (state, q)) in states.iter_mut().zip(queries).enumerate() {
            if diverged_at[i].is_some() {
                continue;
            }
            state.step(conf, q.h_target.view(), cfg.step_size)?;
            if state.diverged(cfg) {
                diverged_at[i] = Some(steps);
            }
        }
    }

    Ok(states
        .into_iter()
        .zip(diverged_at)
        .map(|(state, div)| match div {
            Some(k) => state.finish(k, FlowStatus::Diverged),
            None => {
                let status = if state.initial == F::zero() || state.converged(cfg) {
                    FlowStatus::Converged
                } else if batch_done {
                    FlowStatus::Interrupted
                } else {
                    FlowStatus::MaxStepsReached
                };
                state.finish(steps, status)
            }
        })
        .collect())
}

fn mean_active<F: Scalar>(states: &[EulerState<F>], diverged: &[Option<usize>]) -> F {
    let mut sum = F::zero();
    let mut n = 0usize;
    for (s, d) in states.iter().zip(diverged) {
        if d.is_none() {
            sum += s.mismatch;
            n += 1;
        }
    }
    if n == 0 {
        F::zero()
    } else {
        sum / F::from_usize_lossy(n)
    }
}

/// Reusable surrogate search for one confounder: closed form when the confounder is linear
/// with a well-conditioned `W^T W` (unless `force_euler`), Euler integration otherwise.
#[derive(Debug, Clone)]
pub struct SurrogateSolver<F> {
    conf: FunctionalConfounder<F>,
    cfg: FlowConfig<F>,
    projector: Option<LinearProjector<F>>,
}

impl<F: Scalar> SurrogateSolver<F> {
    pub fn new(conf: &FunctionalConfounder<F>, cfg: &FlowConfig<F>) -> Result<Self> {
        cfg.validate()?;
        let projector = if conf.is_linear() && !cfg.force_euler {
            // a rank-deficient W has no projection; Euler still handles queries whose
            // mismatch is already zero (e.g. a confounder scaled to nothing)
            match LinearProjector::new(conf) {
                Ok(p) => Some(p),
                Err(EfcError::SingularProjection { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        Ok(Self { conf: conf.clone(), cfg: cfg.clone(), projector })
    }

    pub fn confounder(&self) -> &FunctionalConfounder<F> {
        &self.conf
    }

    pub fn config(&self) -> &FlowConfig<F> {
        &self.cfg
    }

    pub fn uses_closed_form(&self) -> bool {
        self.projector.is_some()
    }

    pub fn solve(&self, query: &InterventionQuery<F>) -> Result<SurrogateResult<F>> {
        match &self.projector {
            Some(p) => closed_form_with(p, &self.conf, query),
            None => euler_solve(&self.conf, query, &self.cfg),
        }
    }
}

/// Dumps a recorded trajectory as CSV: `step,t_0,...,t_{T-1},mismatch`.
pub fn write_trajectory_csv<F: Scalar>(path: impl AsRef<Path>, result: &SurrogateResult<F>) -> Result<()> {
    let traj = result
        .trajectory
        .as_ref()
        .ok_or_else(|| EfcError::InvalidParameter("no trajectory was recorded".into()))?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let dim = result.t_hat.len();
    let mut header = vec!["step".to_string()];
    header.extend((0..dim).map(|i| format!("t_{i}")));
    header.push("mismatch".into());
    writeln!(w, "{}", header.join(","))?;
    for (k, p) in traj.iter().enumerate() {
        let mut cells = vec![k.to_string()];
        cells.extend(p.t.iter().map(|&x| format_scalar(x)));
        cells.push(format_scalar(p.mismatch));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}
