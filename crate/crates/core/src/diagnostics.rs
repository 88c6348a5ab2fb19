//! Numeric checks of the conditions behind LODE: the C-redundancy residual, the computable part
//! of the conditional-effect error bound, a nearest-neighbour support score for surrogates, and a
//! dependence score for functional-intervention positivity.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::causal_models::BoundConstants;
use crate::confounders::FunctionalConfounder;
use crate::error::{check_dim, EfcError, Result};
use crate::regression::{default_ridge, fit_krr_xy, numeric_gradient, Predictor};
use crate::scalar::Scalar;
use crate::surrogate_flow::{FlowConfig, SurrogateResult};

/// Largest `sum_j |grad_t f(t, h2) . grad h_j(t)|` over the probe points.
///
/// `f_grad(t, h2)` is the gradient of the outcome function in its first argument with the
/// confounder value held at `h2`.
pub fn cred_residual<F, G>(f_grad: G, conf: &FunctionalConfounder<F>, points: &[(Array1<F>, Array1<F>)]) -> Result<F>
where
    F: Scalar,
    G: Fn(ArrayView1<'_, F>, ArrayView1<'_, F>) -> Result<Array1<F>>,
{
    let mut worst = F::zero();
    for (t, h2) in points {
        check_dim(conf.output_dim(), h2.len())?;
        let g = f_grad(t.view(), h2.view())?;
        check_dim(conf.dim(), g.len())?;
        let jac = conf.jacobian(t.view())?;
        let r: F = jac.t().dot(&g).iter().map(|v| v.abs()).sum();
        if r > worst {
            worst = r;
        }
    }
    Ok(worst)
}

/// Gradient field of a fitted predictor by central differences; ignores `h2`.
pub fn predictor_gradient_field<'a, F: Scalar, P: Predictor<F> + ?Sized>(
    model: &'a P,
    eps: F,
) -> impl Fn(ArrayView1<'_, F>, ArrayView1<'_, F>) -> Result<Array1<F>> + 'a {
    move |t, _h2| numeric_gradient(model, t, eps)
}

pub const DROPPED_TERMS_NOTE: &str = "excludes the estimator error allowance c(N) and the unspecified O(step) term inside the \
accumulation term; callers add an estimator-error allowance separately";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<F> {
    /// `2 K l^2 M sigma_H L_h^2`.
    pub accumulation_term: F,
    /// `L_z ||h(t_hat) - h2||`.
    pub mismatch_term: F,
    /// `L_e ||t' - t_hat||`, only with an oracle surrogate.
    pub alt_term: Option<F>,
    pub dropped_terms_note: String,
    pub total: F,
}

/// Computable part of the conditional-effect error bound for one surrogate.
///
/// Every recorded iterate (or just `t_hat` when no trajectory was kept) and the oracle surrogate
/// must lie in the ball on which the constants hold.
pub fn theorem2_bound<F: Scalar>(
    consts: &BoundConstants<F>,
    surrogate: &SurrogateResult<F>,
    cfg: &FlowConfig<F>,
    oracle_t_prime: Option<ArrayView1<'_, F>>,
) -> Result<BoundReport<F>> {
    consts.validate()?;
    let radius = consts.domain_radius;
    let check = |t: ArrayView1<'_, F>| -> Result<()> {
        let norm = t.dot(&t).sqrt();
        if norm > radius || !norm.is_finite() {
            return Err(EfcError::DomainExceeded { norm: norm.as_f64(), radius: radius.as_f64() });
        }
        Ok(())
    };
    match &surrogate.trajectory {
        Some(traj) => traj.iter().try_for_each(|p| check(p.t.view()))?,
        None => check(surrogate.t_hat.view())?,
    }
    if let Some(tp) = oracle_t_prime {
        check_dim(surrogate.t_hat.len(), tp.len())?;
        check(tp)?;
    }
    let k = F::from_usize_lossy(surrogate.steps_taken);
    let l = cfg.step_size;
    let two = F::lit(2.0);
    let accumulation_term = two * k * l * l * surrogate.max_mismatch * consts.sigma_h_phi * consts.l_h * consts.l_h;
    let mismatch_term = consts.l_z * surrogate.final_mismatch.max(F::zero()).sqrt();
    let alt_term = oracle_t_prime.map(|tp| {
        let d = &tp - &surrogate.t_hat;
        consts.l_e * d.dot(&d).sqrt()
    });
    let path = accumulation_term + mismatch_term;
    let total = alt_term.map_or(path, |a| a.min(path));
    Ok(BoundReport { accumulation_term, mismatch_term, alt_term, dropped_terms_note: DROPPED_TERMS_NOTE.into(), total })
}

pub const SUPPORT_NOTE: &str = "heuristic stand-in for effect connectivity and surrogate positivity, which cannot be \
certified nonparametrically; percentiles at or above 99 suggest the surrogate lies outside the data support";

/// Percentile at or above which a surrogate is flagged as off-support.
pub const SUPPORT_FLAG_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport<F> {
    pub k: usize,
    pub distance: F,
    pub percentile: F,
    pub flagged: bool,
    pub note: String,
}

/// k-nearest-neighbour reference distribution over the distinct rows of a dataset.
#[derive(Debug, Clone)]
pub struct SupportIndex<F> {
    rows: Array2<F>,
    k: usize,
    /// Sorted in-sample k-th neighbour distances.
    reference: Vec<F>,
}

fn sq_dist<F: Scalar>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> F {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn kth_smallest<F: Scalar>(mut d: Vec<F>, k: usize) -> F {
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
    *kth
}

impl<F: Scalar> SupportIndex<F> {
    pub fn new(points: ArrayView2<'_, F>, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(EfcError::InvalidParameter("neighbour count must be >= 1".into()));
        }
        // Exact duplicates are collapsed so the reference does not depend on multiplicities.
        let mut order: Vec<usize> = (0..points.nrows()).collect();
        let key = |i: usize| points.row(i).to_vec();
        order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
        order.dedup_by(|a, b| points.row(*a) == points.row(*b));
        let rows = points.select(Axis(0), &order);
        let n = rows.nrows();
        if n <= k {
            return Err(EfcError::InvalidParameter(format!("need more than {k} distinct rows, found {n}")));
        }
        let mut reference: Vec<F> = (0..n)
            .map(|i| {
                let d: Vec<F> = (0..n).filter(|&j| j != i).map(|j| sq_dist(rows.row(i), rows.row(j))).collect();
                kth_smallest(d, k).sqrt()
            })
            .collect();
        reference.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        Ok(Self { rows, k, reference })
    }

    pub fn score(&self, t_hat: ArrayView1<'_, F>) -> Result<SupportReport<F>> {
        check_dim(self.rows.ncols(), t_hat.len())?;
        let d: Vec<F> = self.rows.outer_iter().map(|r| sq_dist(r, t_hat)).collect();
        let distance = kth_smallest(d, self.k).sqrt();
        let below = self.reference.partition_point(|&r| r < distance);
        let percentile = F::lit(100.0) * F::from_usize_lossy(below) / F::from_usize_lossy(self.reference.len());
        Ok(SupportReport {
            k: self.k,
            distance,
            percentile,
            flagged: percentile.as_f64() >= SUPPORT_FLAG_PERCENTILE,
            note: SUPPORT_NOTE.into(),
        })
    }
}

/// Percentile of the k-th nearest-neighbour distance from `t_hat` to the data among the
/// in-sample k-th neighbour distances.
pub fn support_score<F: Scalar>(points: ArrayView2<'_, F>, t_hat: ArrayView1<'_, F>, k: usize) -> Result<SupportReport<F>> {
    SupportIndex::new(points, k)?.score(t_hat)
}

/// Fraction of the variance of `g` explained by a kernel ridge fit of `g` on `h`, in `[0, 1]`.
/// Values near 1 mean `g` is (nearly) a function of `h`.
pub fn fpos_dependence_check<F: Scalar>(g_values: ArrayView1<'_, F>, h_values: ArrayView2<'_, F>) -> Result<F> {
    let n = g_values.len();
    check_dim(n, h_values.nrows())?;
    if n == 0 {
        return Err(EfcError::EmptyDataset);
    }
    let nf = F::from_usize_lossy(n);
    let mean = g_values.sum() / nf;
    let sst: F = g_values.iter().map(|&g| (g - mean) * (g - mean)).sum();
    if !(sst > F::zero()) {
        return Ok(F::one());
    }
    // Standardize h so the kernel offset is meaningful at any scale.
    let mut h = h_values.to_owned();
    for mut col in h.columns_mut() {
        let m = col.sum() / nf;
        col.mapv_inplace(|v| v - m);
        let sd = (col.dot(&col) / nf).sqrt();
        if sd > F::zero() {
            col.mapv_inplace(|v| v / sd);
        }
    }
    let model = fit_krr_xy(h.view(), g_values, default_ridge(n), F::one())?;
    let pred = model.predict_many(h.view())?;
    let sse: F = pred.iter().zip(g_values.iter()).map(|(&p, &g)| (p - g) * (p - g)).sum();
    Ok((F::one() - sse / sst).max(F::zero()).min(F::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_models::{analytic_constants, sample, true_conditional_effect, ModelFamily, ModelSpec};
    use crate::data_model::{make_eval_queries, InterventionQuery, RngSeed};
    use crate::surrogate_flow::{closed_form_linear, euler_solve, FlowStatus};
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn probes(spec: &ModelSpec<f64>, n: usize, seed: u64) -> Vec<(Array1<f64>, Array1<f64>)> {
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut r = RngSeed::new(seed).rng();
        (0..n)
            .map(|_| {
                let t = Array1::from_iter((0..spec.dim).map(|_| normal.sample(&mut r)));
                (t, array![normal.sample(&mut r)])
            })
            .collect()
    }

    #[test]
    fn cred_holds_for_both_models() {
        for family in [ModelFamily::A, ModelFamily::B] {
            let spec = ModelSpec::<f64>::new(family).with_gamma(1.7).with_alpha(0.8);
            let conf = spec.confounder().unwrap();
            let res = cred_residual(|t, _| spec.effect_gradient(t), &conf, &probes(&spec, 1000, 1)).unwrap();
            assert!(res <= 1e-12, "{family}: {res}");
        }
    }

    #[test]
    fn cred_detects_violation() {
        let conf = FunctionalConfounder::linear_sum(1.0, 4).unwrap();
        let field = |t: ArrayView1<'_, f64>, _: ArrayView1<'_, f64>| {
            let h = conf.value(t)?[0];
            Ok(conf.jacobian(t)?.column(0).to_owned() * (2.0 * h))
        };
        // h(t) = sum(t) / 2 = 1.
        let pts = vec![(array![0.5, 0.5, 0.5, 0.5], array![0.0])];
        let res = cred_residual(field, &conf, &pts).unwrap();
        assert!((res - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn cred_invariant_to_rescaling_h() {
        let spec = ModelSpec::<f64>::new(ModelFamily::B);
        let conf = spec.confounder().unwrap().scaled(5.0).unwrap();
        let res = cred_residual(|t, _| spec.effect_gradient(t), &conf, &probes(&spec, 200, 2)).unwrap();
        assert!(res <= 1e-12);
    }

    #[test]
    fn bound_zero_for_closed_form_model_a() {
        let spec = ModelSpec::<f64>::new(ModelFamily::A);
        let conf = spec.confounder().unwrap();
        let consts = analytic_constants(&spec, spec.default_domain_radius()).unwrap();
        let t = Array1::from_iter((0..20).map(|i| 0.1 * i as f64 - 1.0));
        let res = closed_form_linear(&conf, &InterventionQuery::scalar(t, 0.5).unwrap()).unwrap();
        let report = theorem2_bound(&consts, &res, &FlowConfig::default(), None).unwrap();
        assert_eq!(report.accumulation_term, 0.0);
        assert!(report.mismatch_term <= 1e-10);
        assert!(report.total <= 1e-10);
    }

    #[test]
    fn bound_without_steps_is_mismatch_penalty() {
        let spec = ModelSpec::<f64>::new(ModelFamily::B);
        let consts = analytic_constants(&spec, spec.default_domain_radius()).unwrap();
        let t = Array1::from_elem(20, 0.5);
        let res = SurrogateResult {
            t_hat: t,
            steps_taken: 0,
            final_mismatch: 4.0,
            initial_mismatch: 4.0,
            max_mismatch: 4.0,
            status: FlowStatus::Interrupted,
            trajectory: None,
        };
        let report = theorem2_bound(&consts, &res, &FlowConfig::default(), None).unwrap();
        assert_eq!(report.total, consts.l_z * 2.0);
        assert_eq!(report.accumulation_term, 0.0);
    }

    #[test]
    fn bound_rejects_points_outside_domain() {
        let spec = ModelSpec::<f64>::new(ModelFamily::B);
        let consts = analytic_constants(&spec, 1.0).unwrap();
        let res = SurrogateResult {
            t_hat: Array1::from_elem(20, 1.0),
            steps_taken: 1,
            final_mismatch: 0.0,
            initial_mismatch: 1.0,
            max_mismatch: 1.0,
            status: FlowStatus::Converged,
            trajectory: None,
        };
        assert!(matches!(
            theorem2_bound(&consts, &res, &FlowConfig::default(), None),
            Err(EfcError::DomainExceeded { .. })
        ));
    }

    #[test]
    fn bound_holds_for_model_b_oracle() {
        let spec = ModelSpec::<f64>::new(ModelFamily::B);
        let conf = spec.confounder().unwrap();
        let data = sample(&spec, 100, RngSeed::new(31)).unwrap();
        let cfg = FlowConfig::default().with_trajectory(true);
        for q in make_eval_queries(&data, &conf, RngSeed::new(32)).unwrap() {
            let res = euler_solve(&conf, &q, &cfg).unwrap();
            let radius = res
                .trajectory
                .as_ref()
                .unwrap()
                .iter()
                .map(|p| p.t.dot(&p.t).sqrt())
                .fold(0.0, f64::max);
            let consts = analytic_constants(&spec, radius).unwrap();
            let report = theorem2_bound(&consts, &res, &cfg, None).unwrap();
            let est = spec.conditional_mean(res.t_hat.view()).unwrap();
            let truth = true_conditional_effect(&spec, q.t_star.view(), q.h_target[0]).unwrap();
            assert!((est - truth).abs() <= report.total, "{} > {}", (est - truth).abs(), report.total);
        }
    }

    fn perturbed(base: &SurrogateResult<f64>, f: impl Fn(&mut SurrogateResult<f64>)) -> SurrogateResult<f64> {
        let mut r = base.clone();
        f(&mut r);
        r
    }

    proptest! {
        #[test]
        fn bound_monotone_in_inputs(
            k in 0usize..50,
            m in 0.0f64..10.0,
            fin in 0.0f64..1.0,
            l in 0.001f64..0.5,
            lz in 0.0f64..5.0,
            bump in 0.01f64..2.0,
        ) {
            let consts = BoundConstants { l_z: lz, l_h: 2.0, sigma_h_phi: 0.5, l_e: 3.0, domain_radius: 10.0 };
            let base = SurrogateResult {
                t_hat: Array1::zeros(4),
                steps_taken: k,
                final_mismatch: fin,
                initial_mismatch: m.max(fin),
                max_mismatch: m.max(fin),
                status: FlowStatus::Converged,
                trajectory: None,
            };
            let cfg = FlowConfig::default().with_step_size(l);
            let b0 = theorem2_bound(&consts, &base, &cfg, None).unwrap().total;
            let variants = [
                theorem2_bound(&consts, &perturbed(&base, |r| r.steps_taken += 1), &cfg, None).unwrap().total,
                theorem2_bound(&consts, &perturbed(&base, |r| r.max_mismatch += bump), &cfg, None).unwrap().total,
                theorem2_bound(&consts, &perturbed(&base, |r| r.final_mismatch += bump), &cfg, None).unwrap().total,
                theorem2_bound(&consts, &base, &cfg.clone().with_step_size(l + bump), None).unwrap().total,
                theorem2_bound(&BoundConstants { l_z: lz + bump, ..consts.clone() }, &base, &cfg, None).unwrap().total,
            ];
            for v in variants {
                prop_assert!(v >= b0);
            }
            let r = theorem2_bound(&consts, &base, &cfg, Some(array![1.0, 0.0, 0.0, 0.0].view())).unwrap();
            prop_assert!(r.accumulation_term >= 0.0 && r.mismatch_term >= 0.0 && r.alt_term.unwrap() >= 0.0);
            prop_assert!(r.total <= r.accumulation_term + r.mismatch_term);
        }
    }

    fn gaussian_cloud(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = RngSeed::new(seed).rng();
        Array2::from_shape_fn((n, dim), |_| normal.sample(&mut r))
    }

    #[test]
    fn support_examples() {
        let cloud = gaussian_cloud(1000, 3, 5);
        let on = support_score(cloud.view(), cloud.row(17), 1).unwrap();
        assert_eq!(on.distance, 0.0);
        assert_eq!(on.percentile, 0.0);
        assert!(!on.flagged);
        let far = support_score(cloud.view(), array![10.0, 0.0, 0.0].view(), 5).unwrap();
        assert!(far.percentile >= 99.0 && far.flagged);
        assert!(far.note.contains("connectivity"));

        let doubled = ndarray::concatenate(Axis(0), &[cloud.view(), cloud.view()]).unwrap();
        let probe = array![0.3, -0.2, 1.0];
        let a = support_score(cloud.view(), probe.view(), 3).unwrap();
        let b = support_score(doubled.view(), probe.view(), 3).unwrap();
        assert_eq!(a, b);
        assert!(support_score(cloud.slice(ndarray::s![..2, ..]), probe.view(), 2).is_err());
    }

    #[test]
    fn fpos_examples() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = RngSeed::new(9).rng();
        let h = Array2::from_shape_fn((1000, 1), |_| normal.sample(&mut r));
        let g_same = h.column(0).to_owned();
        assert!(fpos_dependence_check(g_same.view(), h.view()).unwrap() >= 0.99);
        let indep = Array1::from_iter((0..1000).map(|_| normal.sample(&mut r)));
        assert!(fpos_dependence_check(indep.view(), h.view()).unwrap() <= 0.1);
        let mut last = 1.0;
        for scale in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let g = &g_same + &(&indep * scale);
            let s = fpos_dependence_check(g.view(), h.view()).unwrap();
            assert!(s <= last && (0.0..=1.0).contains(&s), "{scale}: {s}");
            last = s;
        }
        assert!(last < 0.2);
    }
}
