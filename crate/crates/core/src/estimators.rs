//! Effect estimators: LODE conditional and average effects, the confounded baseline,
//! functional-intervention effects, and per-SNP log-odds effects.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confounders::FunctionalConfounder;
use crate::data_model::{Dataset, InterventionQuery, RngSeed};
use crate::error::{check_dim, EfcError, Result};
use crate::linalg::{condition_number, gram};
use crate::regression::{default_ridge, fit_krr_xy, sigmoid, LogisticLasso, Predictor, PROB_CLAMP};
use crate::scalar::Scalar;
use crate::surrogate_flow::{FlowConfig, FlowStatus, LinearProjector, SurrogateResult, SurrogateSolver};

/// Condition number of the standardized functional design above which it is called degenerate.
pub const MAX_DESIGN_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Lode,
    Baseline,
    Functional,
    GwasLogOdds,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Lode => "lode",
            Method::Baseline => "baseline",
            Method::Functional => "functional",
            Method::GwasLogOdds => "gwas_log_odds",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate<F> {
    /// `None` when the surrogate search diverged.
    pub value: Option<F>,
    pub surrogate: Option<SurrogateResult<F>>,
    pub query: InterventionQuery<F>,
    pub method: Method,
}

impl<F: Scalar> EffectEstimate<F> {
    pub fn is_diverged(&self) -> bool {
        self.surrogate.as_ref().is_some_and(|s| s.status == FlowStatus::Diverged)
    }
}

/// LODE estimate of the conditional effect: the outcome model evaluated at the surrogate.
pub fn lode_conditional_effect_with<F: Scalar, P: Predictor<F> + ?Sized>(
    model: &P,
    solver: &SurrogateSolver<F>,
    query: &InterventionQuery<F>,
) -> Result<EffectEstimate<F>> {
    check_dim(model.input_dim(), query.t_star.len())?;
    let surrogate = solver.solve(query)?;
    let value = if surrogate.status == FlowStatus::Diverged {
        None
    } else {
        Some(model.predict(surrogate.t_hat.view())?)
    };
    Ok(EffectEstimate { value, surrogate: Some(surrogate), query: query.clone(), method: Method::Lode })
}

pub fn lode_conditional_effect<F: Scalar, P: Predictor<F> + ?Sized>(
    model: &P,
    conf: &FunctionalConfounder<F>,
    query: &InterventionQuery<F>,
    cfg: &FlowConfig<F>,
) -> Result<EffectEstimate<F>> {
    let solver = SurrogateSolver::new(conf, cfg)?;
    lode_conditional_effect_with(model, &solver, query)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageEffect<F> {
    pub value: F,
    /// Conditional estimates that entered the mean, in sample order.
    pub conditional: Vec<F>,
    pub diverged: usize,
}

/// LODE estimate of the average effect: mean of conditional estimates over confounder draws,
/// skipping diverged surrogates.
pub fn lode_average_effect<F: Scalar, P: Predictor<F> + ?Sized>(
    model: &P,
    conf: &FunctionalConfounder<F>,
    t_star: ArrayView1<'_, F>,
    h_samples: ArrayView2<'_, F>,
    cfg: &FlowConfig<F>,
) -> Result<AverageEffect<F>> {
    if h_samples.nrows() == 0 {
        return Err(EfcError::InvalidParameter("no confounder samples".into()));
    }
    check_dim(conf.output_dim(), h_samples.ncols())?;
    let solver = SurrogateSolver::new(conf, cfg)?;
    let mut conditional = Vec::with_capacity(h_samples.nrows());
    let mut diverged = 0;
    for h in h_samples.outer_iter() {
        let q = InterventionQuery::new(t_star.to_owned(), h.to_owned())?;
        match lode_conditional_effect_with(model, &solver, &q)?.value {
            Some(v) => conditional.push(v),
            None => diverged += 1,
        }
    }
    if conditional.is_empty() {
        return Err(EfcError::AllDiverged(diverged));
    }
    let sum: F = conditional.iter().copied().sum();
    let value = sum / F::from_usize_lossy(conditional.len());
    Ok(AverageEffect { value, conditional, diverged })
}

/// The confounded estimate `E[y | t = t*]`.
pub fn baseline_conditional_effect<F: Scalar, P: Predictor<F> + ?Sized>(
    model: &P,
    query: &InterventionQuery<F>,
) -> Result<EffectEstimate<F>> {
    let value = model.predict(query.t_star.view())?;
    Ok(EffectEstimate { value: Some(value), surrogate: None, query: query.clone(), method: Method::Baseline })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalConfig<F> {
    /// Ridge penalty; `None` uses the default for the sample size.
    pub lambda: Option<F>,
    pub offset: F,
}

impl<F: Scalar> Default for FunctionalConfig<F> {
    fn default() -> Self {
        Self { lambda: None, offset: F::one() }
    }
}

/// Effect of the functional intervention `g(t) = g*`: regress `y` on `(h(t), g(t))` and average
/// the fit at `(h(t_i), g*)` over all rows.
pub fn functional_effect<F: Scalar>(
    data: &Dataset<F>,
    g_values: ArrayView1<'_, F>,
    h_values: ArrayView2<'_, F>,
    g_star: F,
    cfg: &FunctionalConfig<F>,
) -> Result<F> {
    let y = data.require_outcomes()?;
    let n = data.n();
    if n == 0 {
        return Err(EfcError::EmptyDataset);
    }
    check_dim(n, g_values.len())?;
    check_dim(n, h_values.nrows())?;
    let design = concatenate(Axis(1), &[h_values, g_values.insert_axis(Axis(1))])
        .map_err(|e| EfcError::InvalidParameter(e.to_string()))?;
    check_design(design.view())?;
    let lambda = cfg.lambda.unwrap_or_else(|| default_ridge(n));
    let model = fit_krr_xy(design.view(), y.view(), lambda, cfg.offset)?;
    let mut probe = design;
    probe.column_mut(h_values.ncols()).fill(g_star);
    let pred = model.predict_many(probe.view())?;
    Ok(pred.sum() / F::from_usize_lossy(n))
}

/// Rejects designs whose standardized columns are (nearly) collinear.
fn check_design<F: Scalar>(design: ArrayView2<'_, F>) -> Result<()> {
    let n = F::from_usize_lossy(design.nrows());
    let mut z = design.to_owned();
    for (j, mut col) in z.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let sd = (col.dot(&col) / n).sqrt();
        if !(sd > F::zero()) {
            return Err(EfcError::DegenerateDesign(format!("column {j} is constant")));
        }
        col.mapv_inplace(|v| v / sd);
    }
    let cond = condition_number(gram(z.view()).view())?.as_f64();
    if !(cond <= MAX_DESIGN_CONDITION) {
        return Err(EfcError::DegenerateDesign(format!("design condition number {cond:.3e}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnpEffect<F> {
    pub snp: usize,
    pub effect: F,
    /// Persons whose surrogate diverged and were left out of the average.
    pub skipped: usize,
}

/// Index into the confounder pool drawn for one person; shared by every SNP.
fn pool_index(rng: RngSeed, person_id: u64, pool: usize) -> usize {
    rng.substream(person_id).rng().random_range(0..pool)
}

fn clamped_log<F: Scalar>(p: F) -> F {
    let eps = F::lit(PROB_CLAMP);
    p.max(eps).min(F::one() - eps).ln()
}

/// Average log-odds effect of setting SNP `snp` to 1 versus 0.
///
/// For each person a confounder value is drawn from `h_pool` (rows are draws from the empirical
/// distribution of `h`) using the person's own substream, and both interventions share it.
/// `person_ids` keys the substreams; it defaults to the row index.
pub fn gwas_snp_effect<F: Scalar, P: Predictor<F> + ?Sized>(
    model: &P,
    solver: &SurrogateSolver<F>,
    persons: ArrayView2<'_, F>,
    h_pool: ArrayView2<'_, F>,
    person_ids: Option<&[u64]>,
    snp: usize,
    rng: RngSeed,
) -> Result<SnpEffect<F>> {
    let dim = persons.ncols();
    check_dim(model.input_dim(), dim)?;
    if snp >= dim {
        return Err(EfcError::InvalidParameter(format!("SNP index {snp} out of range")));
    }
    if h_pool.nrows() == 0 || persons.nrows() == 0 {
        return Err(EfcError::EmptyDataset);
    }
    if let Some(ids) = person_ids {
        check_dim(persons.nrows(), ids.len())?;
    }
    let mut sum = F::zero();
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (p, t) in persons.outer_iter().enumerate() {
        let id = person_ids.map_or(p as u64, |ids| ids[p]);
        let h2 = h_pool.row(pool_index(rng, id, h_pool.nrows())).to_owned();
        let mut log_p = [F::zero(); 2];
        let mut ok = true;
        for (slot, v) in [F::one(), F::zero()].into_iter().enumerate() {
            let mut ti = t.to_owned();
            ti[snp] = v;
            let s = solver.solve(&InterventionQuery::new(ti, h2.clone())?)?;
            if s.status == FlowStatus::Diverged {
                ok = false;
                break;
            }
            log_p[slot] = clamped_log(model.predict(s.t_hat.view())?);
        }
        if ok {
            sum += log_p[0] - log_p[1];
            used += 1;
        } else {
            skipped += 1;
        }
    }
    if used == 0 {
        return Err(EfcError::AllDiverged(skipped));
    }
    Ok(SnpEffect { snp, effect: sum / F::from_usize_lossy(used), skipped })
}

/// Per-SNP effects for a logistic model and a linear confounder, computed without forming
/// surrogates explicitly.
///
/// The surrogate of `t` is `t - W G^{-1} r` with `r = W^T (t - c) - h2`, so the logistic score
/// at the surrogate is `w^T t + b - u^T r` with `u = G^{-1} W^T w`. Setting one SNP changes
/// `w^T t` and `r` by rank-one amounts, making every SNP/person pair `O(d)`.
#[derive(Debug, Clone)]
pub struct GwasEffectEngine<F> {
    weights: Array2<F>,
    coef: Array1<F>,
    intercept: F,
    u: Array1<F>,
    /// Per person: `w^T t + b - u^T r` at the person's own genotype.
    base_score: Array1<F>,
    persons: Array2<F>,
}

impl<F: Scalar> GwasEffectEngine<F> {
    pub fn new(
        model: &LogisticLasso<F>,
        conf: &FunctionalConfounder<F>,
        persons: ArrayView2<'_, F>,
        h_pool: ArrayView2<'_, F>,
        person_ids: Option<&[u64]>,
        rng: RngSeed,
    ) -> Result<Self> {
        check_dim(model.weights.len(), persons.ncols())?;
        check_dim(conf.dim(), persons.ncols())?;
        if h_pool.nrows() == 0 || persons.nrows() == 0 {
            return Err(EfcError::EmptyDataset);
        }
        if let Some(ids) = person_ids {
            check_dim(persons.nrows(), ids.len())?;
        }
        let projector = LinearProjector::new(conf)?;
        let (weights, center) = conf.linear_parts().expect("projector exists only for linear confounders");
        let wt_w = weights.t().dot(&model.weights);
        let u = projector.gram_solve(wt_w.view())?;
        let h = (&persons - &center).dot(&weights);
        let mut base_score = Array1::zeros(persons.nrows());
        for (p, t) in persons.outer_iter().enumerate() {
            let id = person_ids.map_or(p as u64, |ids| ids[p]);
            let h2 = h_pool.row(pool_index(rng, id, h_pool.nrows()));
            let r = &h.row(p) - &h2;
            base_score[p] = model.weights.dot(&t) + model.intercept - u.dot(&r);
        }
        Ok(Self {
            weights,
            coef: model.weights.clone(),
            intercept: model.intercept,
            u,
            base_score,
            persons: persons.to_owned(),
        })
    }

    pub fn intercept(&self) -> F {
        self.intercept
    }

    pub fn snp_effect(&self, snp: usize) -> Result<SnpEffect<F>> {
        if snp >= self.persons.ncols() {
            return Err(EfcError::InvalidParameter(format!("SNP index {snp} out of range")));
        }
        // d score / d t_snp along the surrogate map.
        let slope = self.coef[snp] - self.u.dot(&self.weights.row(snp));
        let mut sum = F::zero();
        for (p, &base) in self.base_score.iter().enumerate() {
            let t = self.persons[[p, snp]];
            let s1 = base + slope * (F::one() - t);
            let s0 = base - slope * t;
            sum += clamped_log(sigmoid(s1)) - clamped_log(sigmoid(s0));
        }
        Ok(SnpEffect { snp, effect: sum / F::from_usize_lossy(self.persons.nrows()), skipped: 0 })
    }
}
