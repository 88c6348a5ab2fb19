//! Functional confounders `h(t)` with analytic Jacobians.
//!
//! Three families are provided:
//!
//! * `LinearSum`: `h(t) = gamma * sum_i t_i / sqrt(T)`
//! * `PairwiseBilinear`: `h(t) = gamma * sum_{i even} t_i * t_{i+1}` (0-based `i`)
//! * `LinearMap`: `h(t) = W^T (t - c)` with `W` a `T x d` matrix and optional centre `c`
//!
//! Jacobians are returned as `T x d` matrices, one column per output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data_model::{format_scalar, read_numeric_csv};
use crate::error::{check_dim, EfcError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfounderKind<F> {
    LinearSum { gamma: F, dim: usize },
    PairwiseBilinear { gamma: F, dim: usize },
    LinearMap { weights: Array2<F>, center: Option<Array1<F>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionalConfounder<F> {
    kind: ConfounderKind<F>,
}

impl<F: Scalar> FunctionalConfounder<F> {
    pub fn linear_sum(gamma: F, dim: usize) -> Result<Self> {
        Self::from_kind(ConfounderKind::LinearSum { gamma, dim })
    }

    pub fn pairwise_bilinear(gamma: F, dim: usize) -> Result<Self> {
        Self::from_kind(ConfounderKind::PairwiseBilinear { gamma, dim })
    }

    pub fn linear_map(weights: Array2<F>) -> Result<Self> {
        Self::from_kind(ConfounderKind::LinearMap { weights, center: None })
    }

    /// `h(t) = W^T (t - center)`.
    pub fn linear_map_centered(weights: Array2<F>, center: Array1<F>) -> Result<Self> {
        Self::from_kind(ConfounderKind::LinearMap { weights, center: Some(center) })
    }

    pub fn from_kind(kind: ConfounderKind<F>) -> Result<Self> {
        match &kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                if *dim < 2 {
                    return Err(EfcError::InvalidParameter("LinearSum requires T >= 2".into()));
                }
                if !gamma.is_finite() {
                    return Err(EfcError::NonFinite("gamma".into()));
                }
            }
            ConfounderKind::PairwiseBilinear { gamma, dim } => {
                if *dim < 2 || dim % 2 != 0 {
                    return Err(EfcError::InvalidParameter(
                        "PairwiseBilinear requires an even T >= 2".into(),
                    ));
                }
                if !gamma.is_finite() {
                    return Err(EfcError::NonFinite("gamma".into()));
                }
            }
            ConfounderKind::LinearMap { weights, center } => {
                if weights.nrows() == 0 || weights.ncols() == 0 {
                    return Err(EfcError::InvalidParameter("LinearMap needs a non-empty W".into()));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(EfcError::NonFinite("LinearMap weights".into()));
                }
                if let Some(c) = center {
                    check_dim(weights.nrows(), c.len())?;
                    if c.iter().any(|w| !w.is_finite()) {
                        return Err(EfcError::NonFinite("LinearMap centre".into()));
                    }
                }
            }
        }
        Ok(Self { kind })
    }

    pub fn kind(&self) -> &ConfounderKind<F> {
        &self.kind
    }

    /// Input dimension `T`.
    pub fn dim(&self) -> usize {
        match &self.kind {
            ConfounderKind::LinearSum { dim, .. } | ConfounderKind::PairwiseBilinear { dim, .. } => *dim,
            ConfounderKind::LinearMap { weights, .. } => weights.nrows(),
        }
    }

    /// Output dimension `d`.
    pub fn output_dim(&self) -> usize {
        match &self.kind {
            ConfounderKind::LinearMap { weights, .. } => weights.ncols(),
            _ => 1,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, ConfounderKind::PairwiseBilinear { .. })
    }

    /// `(W, c)` such that `h(t) = W^T (t - c)`, for the linear families.
    pub fn linear_parts(&self) -> Option<(Array2<F>, Array1<F>)> {
        match &self.kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                let w = *gamma / F::from_usize_lossy(*dim).sqrt();
                Some((Array2::from_elem((*dim, 1), w), Array1::zeros(*dim)))
            }
            ConfounderKind::LinearMap { weights, center } => Some((
                weights.clone(),
                center.clone().unwrap_or_else(|| Array1::zeros(weights.nrows())),
            )),
            ConfounderKind::PairwiseBilinear { .. } => None,
        }
    }

    /// The confounder `m(h) = c * h`.
    pub fn scaled(&self, c: F) -> Result<Self> {
        let kind = match &self.kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                ConfounderKind::LinearSum { gamma: *gamma * c, dim: *dim }
            }
            ConfounderKind::PairwiseBilinear { gamma, dim } => {
                ConfounderKind::PairwiseBilinear { gamma: *gamma * c, dim: *dim }
            }
            ConfounderKind::LinearMap { weights, center } => {
                ConfounderKind::LinearMap { weights: weights * c, center: center.clone() }
            }
        };
        Self::from_kind(kind)
    }

    pub fn value(&self, t: ArrayView1<'_, F>) -> Result<Array1<F>> {
        check_dim(self.dim(), t.len())?;
        Ok(match &self.kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                let s: F = t.iter().copied().sum();
                Array1::from_elem(1, *gamma * s / F::from_usize_lossy(*dim).sqrt())
            }
            ConfounderKind::PairwiseBilinear { gamma, .. } => {
                let mut s = F::zero();
                for i in (0..t.len()).step_by(2) {
                    s += t[i] * t[i + 1];
                }
                Array1::from_elem(1, *gamma * s)
            }
            ConfounderKind::LinearMap { weights, center } => match center {
                Some(c) => weights.t().dot(&(&t - c)),
                None => weights.t().dot(&t),
            },
        })
    }

    /// `h` evaluated on each row of `points` (`n x d`).
    pub fn values(&self, points: &Array2<F>) -> Result<Array2<F>> {
        check_dim(self.dim(), points.ncols())?;
        let mut out = Array2::zeros((points.nrows(), self.output_dim()));
        for (i, row) in points.axis_iter(Axis(0)).enumerate() {
            out.row_mut(i).assign(&self.value(row)?);
        }
        Ok(out)
    }

    /// Analytic Jacobian, `T x d`.
    pub fn jacobian(&self, t: ArrayView1<'_, F>) -> Result<Array2<F>> {
        check_dim(self.dim(), t.len())?;
        Ok(match &self.kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                Array2::from_elem((*dim, 1), *gamma / F::from_usize_lossy(*dim).sqrt())
            }
            ConfounderKind::PairwiseBilinear { gamma, dim } => {
                let mut g = Array2::zeros((*dim, 1));
                for i in (0..*dim).step_by(2) {
                    g[[i, 0]] = *gamma * t[i + 1];
                    g[[i + 1, 0]] = *gamma * t[i];
                }
                g
            }
            ConfounderKind::LinearMap { weights, .. } => weights.clone(),
        })
    }

    /// Squared mismatch `|h(t) - h2|^2`.
    pub fn mismatch(&self, t: ArrayView1<'_, F>, h_target: ArrayView1<'_, F>) -> Result<F> {
        check_dim(self.output_dim(), h_target.len())?;
        let h = self.value(t)?;
        Ok(h.iter().zip(h_target.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum())
    }

    /// Writes `J_h(t) (h(t) - h2)` into `out` and returns the squared mismatch.
    ///
    /// Half the gradient of the squared mismatch; the Euler flow steps along `-2 l` times this.
    pub fn mismatch_gradient(
        &self,
        t: ArrayView1<'_, F>,
        h_target: ArrayView1<'_, F>,
        out: &mut Array1<F>,
    ) -> Result<F> {
        check_dim(self.dim(), t.len())?;
        check_dim(self.dim(), out.len())?;
        check_dim(self.output_dim(), h_target.len())?;
        let h = self.value(t)?;
        let resid: Array1<F> = &h - &h_target;
        let m = resid.iter().map(|r| *r * *r).sum();
        match &self.kind {
            ConfounderKind::LinearSum { gamma, dim } => {
                let g = *gamma / F::from_usize_lossy(*dim).sqrt() * resid[0];
                out.fill(g);
            }
            ConfounderKind::PairwiseBilinear { gamma, dim } => {
                let s = *gamma * resid[0];
                for i in (0..*dim).step_by(2) {
                    out[i] = s * t[i + 1];
                    out[i + 1] = s * t[i];
                }
            }
            ConfounderKind::LinearMap { weights, .. } => {
                out.assign(&weights.dot(&resid));
            }
        }
        Ok(m)
    }

    /// Writes the weight matrix (rows = T, columns = d) of a linear map as CSV.
    ///
    /// Header `w_0,...,w_{d-1}` with a trailing `center` column when a centre is set.
    pub fn save_linear_map_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let ConfounderKind::LinearMap { weights, center } = &self.kind else {
            return Err(EfcError::InvalidParameter(
                "only LinearMap confounders serialise to a matrix file".into(),
            ));
        };
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        let mut header: Vec<String> = (0..weights.ncols()).map(|j| format!("w_{j}")).collect();
        if center.is_some() {
            header.push("center".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, row) in weights.axis_iter(Axis(0)).enumerate() {
            let mut cells: Vec<String> = row.iter().map(|&x| format_scalar(x)).collect();
            if let Some(c) = center {
                cells.push(format_scalar(c[i]));
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_linear_map_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, m) = read_numeric_csv::<F>(path)?;
        let has_center = header.last().map(String::as_str) == Some("center");
        let d = if has_center { header.len() - 1 } else { header.len() };
        if d == 0 {
            return Err(EfcError::MalformedFile {
                path: path.to_path_buf(),
                reason: "no weight columns".into(),
            });
        }
        let weights = m.slice(ndarray::s![.., ..d]).to_owned();
        if has_center {
            Self::linear_map_centered(weights, m.column(d).to_owned())
        } else {
            Self::linear_map(weights)
        }
    }
}

/// Largest relative disagreement between the analytic Jacobian and central differences.
///
/// Each component contributes `|analytic - numeric| / (1 + |analytic|)`.
pub fn check_grad<F: Scalar>(conf: &FunctionalConfounder<F>, t: ArrayView1<'_, F>, eps: F) -> Result<F> {
    if !(eps > F::zero()) {
        return Err(EfcError::InvalidParameter("eps must be positive".into()));
    }
    let jac = conf.jacobian(t)?;
    let mut probe = t.to_owned();
    let two_eps = eps + eps;
    let mut worst = F::zero();
    for i in 0..t.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = conf.value(probe.view())?;
        probe[i] = orig - eps;
        let minus = conf.value(probe.view())?;
        probe[i] = orig;
        for j in 0..conf.output_dim() {
            let numeric = (plus[j] - minus[j]) / two_eps;
            let analytic = jac[[i, j]];
            let r = (analytic - numeric).abs() / (F::one() + analytic.abs());
            if r > worst {
                worst = r;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn linear_sum_value() {
        let c = FunctionalConfounder::linear_sum(1.0f64, 2).unwrap();
        let v = c.value(array![1.0, 0.0].view()).unwrap();
        assert!((v[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
    }

    #[test]
    fn bilinear_value_zero_product() {
        let c = FunctionalConfounder::pairwise_bilinear(1.0, 2).unwrap();
        assert_eq!(c.value(array![1.0, 0.0].view()).unwrap()[0], 0.0);
    }

    #[test]
    fn identity_map_value() {
        let c = FunctionalConfounder::linear_map(Array2::eye(2)).unwrap();
        assert_eq!(c.value(array![3.0, 4.0].view()).unwrap(), array![3.0, 4.0]);
    }

    #[test]
    fn linear_sum_gradient_is_constant() {
        let c = FunctionalConfounder::linear_sum(2.0, 4).unwrap();
        let g = c.jacobian(array![0.3, -1.0, 5.0, 2.0].view()).unwrap();
        assert_eq!(g.dim(), (4, 1));
        assert!(g.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bilinear_gradient_swaps_pair() {
        let c = FunctionalConfounder::pairwise_bilinear(1.0, 2).unwrap();
        let g = c.jacobian(array![0.25, -3.0].view()).unwrap();
        assert_eq!(g.column(0).to_owned(), array![-3.0, 0.25]);
    }

    #[test]
    fn linear_map_gradient_is_weights() {
        let w = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let c = FunctionalConfounder::linear_map(w.clone()).unwrap();
        assert_eq!(c.jacobian(array![9.0, 8.0, 7.0].view()).unwrap(), w);
    }

    #[test]
    fn invalid_families_rejected() {
        assert!(FunctionalConfounder::linear_sum(1.0, 1).is_err());
        assert!(FunctionalConfounder::pairwise_bilinear(1.0, 3).is_err());
        assert!(FunctionalConfounder::linear_map(array![[f64::NAN]]).is_err());
        let c = FunctionalConfounder::linear_sum(1.0, 3).unwrap();
        assert!(matches!(
            c.value(array![1.0, 2.0].view()),
            Err(EfcError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn check_grad_examples() {
        let lm = FunctionalConfounder::linear_map(array![[1.0, -2.0], [0.5, 3.0], [4.0, 0.0]]).unwrap();
        assert!(check_grad(&lm, array![0.1, 0.2, 0.3].view(), 1e-5).unwrap() <= 1e-10);
        let bl = FunctionalConfounder::pairwise_bilinear(1.0, 2).unwrap();
        assert!(check_grad(&bl, array![1.0, 2.0].view(), 1e-5).unwrap() <= 1e-6);
        let ls = FunctionalConfounder::linear_sum(1.7, 6).unwrap();
        let t = array![0.4, -1.2, 2.2, 0.0, 3.1, -0.7];
        assert!(check_grad(&ls, t.view(), 1e-5).unwrap() <= 1e-10);
        assert!(check_grad(&ls, t.view(), 0.0).is_err());
    }

    #[test]
    fn mismatch_gradient_matches_jacobian_product() {
        let bl = FunctionalConfounder::pairwise_bilinear(0.7f64, 4).unwrap();
        let t = array![0.3, -1.0, 2.0, 0.5];
        let h2 = array![0.25];
        let mut out = Array1::zeros(4);
        let m = bl.mismatch_gradient(t.view(), h2.view(), &mut out).unwrap();
        let resid = bl.value(t.view()).unwrap() - &h2;
        let expect = bl.jacobian(t.view()).unwrap().dot(&resid);
        assert!((m - resid[0] * resid[0]).abs() < 1e-15);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_map_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        let c = FunctionalConfounder::linear_map_centered(
            array![[0.1, 1.0 / 3.0], [2.5e-17, -7.0]],
            array![0.5, 0.25],
        )
        .unwrap();
        c.save_linear_map_csv(&p).unwrap();
        assert_eq!(FunctionalConfounder::<f64>::load_linear_map_csv(&p).unwrap(), c);
        let s = FunctionalConfounder::linear_sum(1.0, 2).unwrap();
        assert!(s.save_linear_map_csv(&p).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let c = FunctionalConfounder::<f32>::pairwise_bilinear(2.0, 2).unwrap();
        assert_eq!(c.value(array![1.5f32, 2.0].view()).unwrap()[0], 6.0);
        assert!(check_grad(&c, array![1.0f32, 2.0].view(), 1e-2).unwrap() < 1e-3);
    }

    fn any_conf() -> impl Strategy<Value = (FunctionalConfounder<f64>, Vec<f64>)> {
        (0usize..3, 1usize..5, -3.0f64..3.0)
            .prop_flat_map(|(kind, half, gamma)| {
                let dim = 2 * half;
                (
                    Just((kind, dim, gamma)),
                    proptest::collection::vec(-3.0f64..3.0, dim),
                    proptest::collection::vec(-2.0f64..2.0, dim * 2),
                )
            })
            .prop_map(|((kind, dim, gamma), t, w)| {
                let conf = match kind {
                    0 => FunctionalConfounder::linear_sum(gamma, dim).unwrap(),
                    1 => FunctionalConfounder::pairwise_bilinear(gamma, dim).unwrap(),
                    _ => FunctionalConfounder::linear_map(
                        Array2::from_shape_vec((dim, 2), w).unwrap(),
                    )
                    .unwrap(),
                };
                (conf, t)
            })
    }

    proptest! {
        #[test]
        fn analytic_gradients_pass_check((conf, t) in any_conf()) {
            let r = check_grad(&conf, Array1::from(t).view(), 1e-5).unwrap();
            prop_assert!(r <= 1e-5, "residual {r}");
        }

        #[test]
        fn gamma_scaling_is_linear(gamma in -3.0f64..3.0, c in -4.0f64..4.0,
                                   t in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let t = Array1::from(t);
            for conf in [
                FunctionalConfounder::linear_sum(gamma, 6).unwrap(),
                FunctionalConfounder::pairwise_bilinear(gamma, 6).unwrap(),
            ] {
                let base = conf.value(t.view()).unwrap()[0];
                let scaled = conf.scaled(c).unwrap().value(t.view()).unwrap()[0];
                prop_assert!((scaled - c * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
            }
        }
    }
}
