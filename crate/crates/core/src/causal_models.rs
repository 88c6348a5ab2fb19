//! Simulated data-generating processes with analytic effect oracles.
//!
//! Family A: `h(t) = gamma * sum_i t_i / sqrt(T)`,
//! `y = sum_i (-1)^i t_i / sqrt(T) + alpha h^2 + (1 + alpha) h + eta`.
//!
//! Family B: `h(t) = gamma * sum_{i even} t_i t_{i+1}`,
//! `y = sum_i (-1)^i t_i^2 / sqrt(T) + alpha h + eta`.
//!
//! In both, `t ~ N(0, sigma^2 I)` and `eta ~ N(0, noise_sd^2)`; `i` is 0-based.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::confounders::FunctionalConfounder;
use crate::data_model::{Dataset, RngSeed};
use crate::error::{check_dim, EfcError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    A,
    B,
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelFamily::A => write!(f, "A"),
            ModelFamily::B => write!(f, "B"),
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = EfcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(EfcError::InvalidParameter(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec<F> {
    pub family: ModelFamily,
    pub dim: usize,
    pub gamma: F,
    pub alpha: F,
    pub sigma: F,
    /// Standard deviation of the outcome noise; the default `sqrt(0.1)` is a variance of 0.1.
    pub noise_sd: F,
}

impl<F: Scalar> ModelSpec<F> {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            dim: 20,
            gamma: F::one(),
            alpha: F::one(),
            sigma: F::one(),
            noise_sd: F::lit(0.1f64.sqrt()),
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_gamma(mut self, gamma: F) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_alpha(mut self, alpha: F) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_sigma(mut self, sigma: F) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_noise_sd(mut self, noise_sd: F) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(EfcError::InvalidParameter("T must be even and >= 2".into()));
        }
        if !(self.sigma > F::zero()) {
            return Err(EfcError::InvalidParameter("sigma must be positive".into()));
        }
        if !(self.noise_sd >= F::zero()) {
            return Err(EfcError::InvalidParameter("noise_sd must be nonnegative".into()));
        }
        if !self.gamma.is_finite() || !self.alpha.is_finite() {
            return Err(EfcError::NonFinite("gamma/alpha".into()));
        }
        Ok(())
    }

    /// The family's functional confounder.
    pub fn confounder(&self) -> Result<FunctionalConfounder<F>> {
        match self.family {
            ModelFamily::A => FunctionalConfounder::linear_sum(self.gamma, self.dim),
            ModelFamily::B => FunctionalConfounder::pairwise_bilinear(self.gamma, self.dim),
        }
    }

    /// Default radius of the ball on which [`analytic_constants`] is evaluated: `4 sigma sqrt(T)`.
    pub fn default_domain_radius(&self) -> F {
        F::lit(4.0) * self.sigma * F::from_usize_lossy(self.dim).sqrt()
    }

    /// Part of the outcome that reads only the first argument: `sum (-1)^i t_i^(1|2) / sqrt(T)`.
    pub fn direct_effect(&self, t: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.dim, t.len())?;
        let mut s = F::zero();
        for (i, &x) in t.iter().enumerate() {
            let term = match self.family {
                ModelFamily::A => x,
                ModelFamily::B => x * x,
            };
            if i % 2 == 0 {
                s += term;
            } else {
                s -= term;
            }
        }
        Ok(s / F::from_usize_lossy(self.dim).sqrt())
    }

    /// Part of the outcome that reads the confounder value.
    pub fn confounder_effect(&self, h: F) -> F {
        match self.family {
            ModelFamily::A => self.alpha * h * h + (F::one() + self.alpha) * h,
            ModelFamily::B => self.alpha * h,
        }
    }

    /// Gradient of `phi(t, h2)` in its first argument (independent of `h2` for both families).
    pub fn effect_gradient(&self, t: ArrayView1<'_, F>) -> Result<Array1<F>> {
        check_dim(self.dim, t.len())?;
        let root = F::from_usize_lossy(self.dim).sqrt();
        Ok(Array1::from_iter(t.iter().enumerate().map(|(i, &x)| {
            let sign = if i % 2 == 0 { F::one() } else { -F::one() };
            match self.family {
                ModelFamily::A => sign / root,
                ModelFamily::B => F::lit(2.0) * sign * x / root,
            }
        })))
    }

    /// `E[y | t] = phi(t, h(t))`.
    pub fn conditional_mean(&self, t: ArrayView1<'_, F>) -> Result<F> {
        let h = self.confounder()?.value(t)?[0];
        Ok(self.direct_effect(t)? + self.confounder_effect(h))
    }
}

/// Draws `n` rows of `t ~ N(0, sigma^2 I)` and the matching outcomes.
pub fn sample<F: Scalar>(spec: &ModelSpec<F>, n: usize, rng: RngSeed) -> Result<Dataset<F>> {
    spec.validate()?;
    let points = sample_points(spec, n, rng.substream(0))?;
    let normal = Normal::new(0.0, spec.noise_sd.as_f64())
        .map_err(|e| EfcError::InvalidParameter(e.to_string()))?;
    let mut r = rng.substream(1).rng();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let eta = F::lit(normal.sample(&mut r));
        y[i] = spec.conditional_mean(points.row(i))? + eta;
    }
    Dataset::new(points, Some(y))
}

/// Pre-outcome vectors only.
pub fn sample_points<F: Scalar>(spec: &ModelSpec<F>, n: usize, rng: RngSeed) -> Result<Array2<F>> {
    spec.validate()?;
    let normal = Normal::new(0.0, spec.sigma.as_f64())
        .map_err(|e| EfcError::InvalidParameter(e.to_string()))?;
    let mut r = rng.rng();
    Ok(Array2::from_shape_simple_fn((n, spec.dim), || F::lit(normal.sample(&mut r))))
}

/// `phi(t*, h2) = E_eta f(t*, h2, eta)`.
pub fn true_conditional_effect<F: Scalar>(spec: &ModelSpec<F>, t_star: ArrayView1<'_, F>, h_target: F) -> Result<F> {
    Ok(spec.direct_effect(t_star)? + spec.confounder_effect(h_target))
}

/// Monte Carlo average of `phi(t*, h)` over `h = h(t)`, `t ~ N(0, sigma^2 I)`.
pub fn true_average_effect<F: Scalar>(
    spec: &ModelSpec<F>,
    t_star: ArrayView1<'_, F>,
    mc_draws: usize,
    rng: RngSeed,
) -> Result<F> {
    if mc_draws == 0 {
        return Err(EfcError::InvalidParameter("mc_draws must be >= 1".into()));
    }
    spec.validate()?;
    let direct = spec.direct_effect(t_star)?;
    let conf = spec.confounder()?;
    let normal = Normal::new(0.0, spec.sigma.as_f64())
        .map_err(|e| EfcError::InvalidParameter(e.to_string()))?;
    let mut r = rng.rng();
    let mut t = Array1::zeros(spec.dim);
    let mut acc = 0.0f64;
    for _ in 0..mc_draws {
        t.mapv_inplace(|_| F::lit(normal.sample(&mut r)));
        let h = conf.value(t.view())?[0];
        acc += (direct + spec.confounder_effect(h)).as_f64();
    }
    Ok(F::lit(acc / mc_draws as f64))
}

/// Constants entering the surrogate error bound, valid on `|t| <= domain_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants<F> {
    /// Lipschitz constant of `phi` in the confounder value.
    pub l_z: F,
    /// Bound on `|grad h|_2`.
    pub l_h: F,
    /// Bound on the spectral norm of the Hessian of `phi` in `t`.
    pub sigma_h_phi: F,
    /// Lipschitz constant of `E[y | t]` in `t`.
    pub l_e: F,
    pub domain_radius: F,
}

impl<F: Scalar> BoundConstants<F> {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_z, self.l_h, self.sigma_h_phi, self.l_e, self.domain_radius];
        if all.iter().any(|v| !v.is_finite() || *v < F::zero()) {
            return Err(EfcError::InvalidParameter("bound constants must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Closed-form constants on the ball `|t| <= R` (confounder values satisfy `|h| <= gamma R`
/// for family A and `|h| <= gamma R^2 / 2` for family B).
pub fn analytic_constants<F: Scalar>(spec: &ModelSpec<F>, domain_radius: F) -> Result<BoundConstants<F>> {
    spec.validate()?;
    if !(domain_radius > F::zero()) {
        return Err(EfcError::InvalidParameter("domain radius must be positive".into()));
    }
    let r = domain_radius;
    let g = spec.gamma.abs();
    let a = spec.alpha.abs();
    let one = F::one();
    let two = F::lit(2.0);
    let root_t = F::from_usize_lossy(spec.dim).sqrt();
    let c = match spec.family {
        ModelFamily::A => {
            let h_max = g * r;
            let l_z = two * a * h_max + (one + spec.alpha).abs();
            // grad E[y|t] = s/sqrt(T) + (2 alpha h + 1 + alpha) grad h, with s orthogonal to grad h.
            let slope = l_z * g;
            BoundConstants {
                l_z,
                l_h: g,
                sigma_h_phi: F::zero(),
                l_e: (one + slope * slope).sqrt(),
                domain_radius: r,
            }
        }
        ModelFamily::B => BoundConstants {
            l_z: a,
            l_h: g * r,
            sigma_h_phi: two / root_t,
            l_e: two * r / root_t + a * g * r,
            domain_radius: r,
        },
    };
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(family: ModelFamily) -> ModelSpec<f64> {
        ModelSpec::new(family)
    }

    #[test]
    fn empty_sample() {
        let d = sample(&spec(ModelFamily::A), 0, RngSeed::new(1)).unwrap();
        assert_eq!(d.n(), 0);
        assert_eq!(d.dim(), 20);
    }

    #[test]
    fn model_a_confounder_variance() {
        let s = spec(ModelFamily::A);
        let d = sample(&s, 100_000, RngSeed::new(11)).unwrap();
        let h = s.confounder().unwrap().values(d.points()).unwrap();
        let mean = h.mean().unwrap();
        let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (h.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn model_b_forced_point() {
        let s = spec(ModelFamily::B).with_dim(2).with_alpha(0.0).with_noise_sd(0.0);
        let y = s.conditional_mean(array![1.0, 1.0].view()).unwrap();
        assert_eq!(y, 0.0);
    }

    #[test]
    fn conditional_effect_examples() {
        let a = spec(ModelFamily::A).with_dim(2);
        let t = array![1.0, 0.0];
        let v0 = true_conditional_effect(&a, t.view(), 0.0).unwrap();
        let v1 = true_conditional_effect(&a, t.view(), 1.0).unwrap();
        assert!((v0 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert!((v1 - 3.70711).abs() < 1e-5);
        let b = spec(ModelFamily::B);
        assert_eq!(true_conditional_effect(&b, Array1::zeros(20).view(), 0.0).unwrap(), 0.0);
        assert!(true_conditional_effect(&b, Array1::zeros(3).view(), 0.0).is_err());
    }

    #[test]
    fn average_effect_model_a() {
        let a = spec(ModelFamily::A);
        let v = true_average_effect(&a, Array1::zeros(20).view(), 1_000_000, RngSeed::new(5)).unwrap();
        assert!((v - 1.0).abs() < 0.01, "{v}");

        let a0 = spec(ModelFamily::A).with_alpha(0.0).with_gamma(0.0);
        let t = Array1::from_iter((0..20).map(|i| i as f64 * 0.1));
        let direct = a0.direct_effect(t.view()).unwrap();
        let v = true_average_effect(&a0, t.view(), 100, RngSeed::new(5)).unwrap();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn single_draw_average_is_conditional() {
        let a = spec(ModelFamily::B).with_gamma(1.5);
        let t = Array1::from_iter((0..20).map(|i| (i as f64).sin()));
        let seed = RngSeed::new(99);
        let avg = true_average_effect(&a, t.view(), 1, seed).unwrap();
        // Recreate the single draw.
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut r = seed.rng();
        let draw = Array1::from_iter((0..20).map(|_| normal.sample(&mut r)));
        let h = a.confounder().unwrap().value(draw.view()).unwrap()[0];
        let cond = true_conditional_effect(&a, t.view(), h).unwrap();
        assert!((avg - cond).abs() < 1e-12);
    }

    #[test]
    fn constants_examples() {
        let a = spec(ModelFamily::A).with_gamma(1.0).with_alpha(1.0);
        assert_eq!(analytic_constants(&a, 3.0).unwrap().sigma_h_phi, 0.0);
        let b = spec(ModelFamily::B).with_dim(4);
        assert!((analytic_constants(&b, 1.0).unwrap().sigma_h_phi - 1.0).abs() < 1e-15);
        let b = spec(ModelFamily::B).with_alpha(0.5);
        assert_eq!(analytic_constants(&b, 2.0).unwrap().l_z, 0.5);
        assert!(analytic_constants(&b, 0.0).is_err());
    }

    #[test]
    fn noise_free_samples_match_oracle() {
        for fam in [ModelFamily::A, ModelFamily::B] {
            let s = spec(fam).with_noise_sd(0.0).with_gamma(1.3);
            let d = sample(&s, 50, RngSeed::new(2)).unwrap();
            let conf = s.confounder().unwrap();
            for i in 0..d.n() {
                let h = conf.value(d.point(i)).unwrap()[0];
                let phi = true_conditional_effect(&s, d.point(i), h).unwrap();
                assert_eq!(d.outcomes().unwrap()[i], phi);
            }
        }
    }

    #[test]
    fn model_a_zero_alpha_mean_outcome() {
        let s = spec(ModelFamily::A).with_alpha(0.0);
        let n = 10_000;
        let d = sample(&s, n, RngSeed::new(8)).unwrap();
        let mean = d.outcomes().unwrap().mean().unwrap();
        assert!(mean.abs() <= 4.0 * 1.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(spec(ModelFamily::A).with_dim(3).validate().is_err());
        assert!(spec(ModelFamily::A).with_sigma(0.0).validate().is_err());
        assert!(spec(ModelFamily::A).with_noise_sd(-1.0).validate().is_err());
    }
}
