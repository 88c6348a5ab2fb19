//! Synthetic genome-wide association data with population structure, the principal-component
//! confounder, and the end-to-end effect-ranking pipeline.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::confounders::FunctionalConfounder;
use crate::data_model::{format_scalar, Dataset, RngSeed};
use crate::error::{EfcError, Result};
use crate::estimators::GwasEffectEngine;
use crate::linalg::thin_svd;
use crate::regression::{
    cross_validate, fit_logistic_lasso_traced, sigmoid, CvResult, LassoConfig, LogisticLasso, ModelKind,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenotypeData<F> {
    /// `n x S`, entries in `{0, 0.5, 1}`.
    pub genotypes: Array2<F>,
    /// Binary phenotype.
    pub phenotype: Array1<F>,
    pub pop_labels: Vec<usize>,
    /// Planted causal SNPs with their log-odds coefficients.
    pub causal_snps: Vec<(usize, F)>,
    /// Ancestral allele frequencies.
    pub allele_freqs: Array1<F>,
    /// Per-population allele frequencies, `n_pops x S`.
    pub pop_freqs: Array2<F>,
}

impl<F: Scalar> GenotypeData<F> {
    pub fn n(&self) -> usize {
        self.genotypes.nrows()
    }

    pub fn n_snps(&self) -> usize {
        self.genotypes.ncols()
    }

    pub fn causal_indices(&self) -> Vec<usize> {
        self.causal_snps.iter().map(|&(i, _)| i).collect()
    }

    pub fn to_dataset(&self) -> Result<Dataset<F>> {
        Dataset::new(self.genotypes.clone(), Some(self.phenotype.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenotypeConfig<F> {
    pub n: usize,
    pub n_snps: usize,
    pub n_pops: usize,
    /// Fixation index of the Balding-Nichols model.
    pub fst: F,
    pub n_causal: usize,
    /// Magnitude of each causal log-odds coefficient; signs are random.
    pub effect_size: F,
    /// Log-odds shift between the extreme populations.
    pub pop_effect: F,
    pub prevalence: F,
}

impl<F: Scalar> Default for GenotypeConfig<F> {
    fn default() -> Self {
        Self {
            n: 2000,
            n_snps: 200,
            n_pops: 2,
            fst: F::lit(0.1),
            n_causal: 10,
            effect_size: F::one(),
            pop_effect: F::lit(3.0),
            prevalence: F::one() / F::lit(3.0),
        }
    }
}

impl<F: Scalar> GenotypeConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EfcError::InvalidParameter(m.into()));
        if self.n < 1 || self.n_snps < 1 {
            return bad("need at least one individual and one SNP");
        }
        if self.n_pops < 2 {
            return bad("need at least two populations");
        }
        if !(self.fst > F::zero() && self.fst < F::one()) {
            return bad("fixation index must lie in (0, 1)");
        }
        if self.n_causal > self.n_snps {
            return bad("more causal SNPs than SNPs");
        }
        if !(self.prevalence > F::zero() && self.prevalence < F::one()) {
            return bad("prevalence must lie in (0, 1)");
        }
        if !self.effect_size.is_finite() || !self.pop_effect.is_finite() {
            return bad("effects must be finite");
        }
        Ok(())
    }
}

/// Balding-Nichols genotypes with a logistic phenotype driven by causal SNPs and population.
///
/// Individuals are split into contiguous, (nearly) equal population blocks. The intercept is
/// chosen by bisection so the mean disease probability equals the configured prevalence.
pub fn generate_genotypes<F: Scalar>(cfg: &GenotypeConfig<F>, rng: RngSeed) -> Result<GenotypeData<F>> {
    cfg.validate()?;
    let (n, s, k) = (cfg.n, cfg.n_snps, cfg.n_pops);
    let fst = cfg.fst.as_f64();
    let mut r = rng.substream(0).rng();
    let ancestral: Vec<f64> = (0..s).map(|_| r.random_range(0.05..0.95)).collect();
    let mut pop_freqs = Array2::<f64>::zeros((k, s));
    for (j, &p) in ancestral.iter().enumerate() {
        let scale = (1.0 - fst) / fst;
        let beta = Beta::new(p * scale, (1.0 - p) * scale)
            .map_err(|e| EfcError::InvalidParameter(format!("allele frequency prior: {e}")))?;
        for pop in 0..k {
            pop_freqs[[pop, j]] = beta.sample(&mut r).clamp(1e-6, 1.0 - 1e-6);
        }
    }

    let pop_labels: Vec<usize> = (0..n).map(|i| i * k / n).collect();
    let mut r = rng.substream(1).rng();
    let genotypes = Array2::from_shape_fn((n, s), |(i, j)| {
        let p = pop_freqs[[pop_labels[i], j]];
        let alleles = u8::from(r.random::<f64>() < p) + u8::from(r.random::<f64>() < p);
        F::lit(f64::from(alleles) / 2.0)
    });

    let mut r = rng.substream(2).rng();
    let mut idx: Vec<usize> = (0..s).collect();
    idx.shuffle(&mut r);
    let mut causal: Vec<usize> = idx[..cfg.n_causal].to_vec();
    causal.sort_unstable();
    let causal_snps: Vec<(usize, F)> = causal
        .iter()
        .map(|&j| (j, if r.random::<bool>() { cfg.effect_size } else { -cfg.effect_size }))
        .collect();

    let pop_effect = cfg.pop_effect.as_f64();
    let denom = (k - 1) as f64;
    let logit: Vec<f64> = (0..n)
        .map(|i| {
            let mut z = pop_effect * (pop_labels[i] as f64 / denom - 0.5);
            for &(j, b) in &causal_snps {
                z += b.as_f64() * genotypes[[i, j]].as_f64();
            }
            z
        })
        .collect();
    let intercept = calibrate_intercept(&logit, cfg.prevalence.as_f64());
    let mut r = rng.substream(3).rng();
    let phenotype = Array1::from_iter(logit.iter().map(|&z| {
        let p = sigmoid(z + intercept);
        if r.random::<f64>() < p {
            F::one()
        } else {
            F::zero()
        }
    }));

    Ok(GenotypeData {
        genotypes,
        phenotype,
        pop_labels,
        causal_snps,
        allele_freqs: Array1::from_iter(ancestral.into_iter().map(F::lit)),
        pop_freqs: pop_freqs.mapv(F::lit),
    })
}

fn calibrate_intercept(logit: &[f64], prevalence: f64) -> f64 {
    let mean_p = |b: f64| logit.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logit.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The principal-component confounder `h(t) = W^T (t - p_hat)` on raw genotype vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaConfounder<F> {
    pub confounder: FunctionalConfounder<F>,
    pub singular_values: Array1<F>,
    pub k: usize,
    /// SNP columns dropped for being monomorphic (their rows of `W` are zero).
    pub dropped: Vec<usize>,
}

/// Column-standardized genotypes `(G - p_hat) / sqrt(p_hat (1 - p_hat))` over polymorphic
/// columns, with the column frequencies and the kept-column index map.
pub fn normalized_genotypes<F: Scalar>(genotypes: ArrayView2<'_, F>) -> (Array2<F>, Array1<F>, Vec<usize>) {
    let n = F::from_usize_lossy(genotypes.nrows().max(1));
    let freqs = genotypes.sum_axis(Axis(0)).mapv(|s| s / n);
    let kept: Vec<usize> = (0..genotypes.ncols()).filter(|&j| freqs[j] > F::zero() && freqs[j] < F::one()).collect();
    let mut g = genotypes.select(Axis(1), &kept);
    for (c, &j) in kept.iter().enumerate() {
        let p = freqs[j];
        let sd = (p * (F::one() - p)).sqrt();
        g.column_mut(c).mapv_inplace(|x| (x - p) / sd);
    }
    (g, freqs, kept)
}

/// Top-`k` singular pairs of the normalized genotype matrix folded into a linear confounder on
/// raw genotypes: `W[s, j] = V[s, j] * sigma_j / sqrt(p_s (1 - p_s))`, centred at `p_hat`.
pub fn build_pca_confounder<F: Scalar>(genotypes: ArrayView2<'_, F>, k: usize) -> Result<PcaConfounder<F>> {
    let (n, s) = genotypes.dim();
    let (g, freqs, kept) = normalized_genotypes(genotypes);
    let dropped: Vec<usize> = (0..s).filter(|j| !kept.contains(j)).collect();
    if !dropped.is_empty() {
        log::warn!("dropping {} monomorphic SNP columns from the PCA confounder", dropped.len());
    }
    if k < 1 || k > n.min(kept.len()) {
        return Err(EfcError::InvalidParameter(format!(
            "component count {k} must lie in 1..={}",
            n.min(kept.len())
        )));
    }
    let svd = thin_svd(g.view())?;
    let mut w = Array2::zeros((s, k));
    for (c, &j) in kept.iter().enumerate() {
        let p = freqs[j];
        let sd = (p * (F::one() - p)).sqrt();
        for comp in 0..k {
            w[[j, comp]] = svd.v[[c, comp]] * svd.s[comp] / sd;
        }
    }
    let confounder = FunctionalConfounder::linear_map_centered(w, freqs)?;
    Ok(PcaConfounder { confounder, singular_values: svd.s.slice(ndarray::s![..k]).to_owned(), k, dropped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwasConfig<F> {
    pub n_components: usize,
    pub train_fraction: F,
    pub cv_folds: usize,
    pub lambda_grid: Vec<F>,
    pub threshold: F,
    pub lasso: LassoConfig<F>,
}

impl<F: Scalar> Default for GwasConfig<F> {
    fn default() -> Self {
        Self {
            n_components: 10,
            train_fraction: F::lit(0.6),
            cv_folds: 5,
            lambda_grid: [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0].iter().map(|&x| F::lit(x)).collect(),
            threshold: F::lit(0.1),
            lasso: LassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedSnp<F> {
    pub snp: usize,
    pub effect: F,
    pub coef: F,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwasReport<F> {
    /// Sorted by decreasing `|effect|`.
    pub ranked: Vec<RankedSnp<F>>,
    pub cv: CvResult<F>,
    pub model: LogisticLasso<F>,
    pub n_train: usize,
}

impl<F: Scalar> GwasReport<F> {
    /// SNP indices ordered by `|effect|`.
    pub fn effect_ranking(&self) -> Vec<usize> {
        self.ranked.iter().map(|r| r.snp).collect()
    }

    /// SNP indices ordered by `|lasso coefficient|`.
    pub fn coef_ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.model.weights.len()).collect();
        let w = &self.model.weights;
        idx.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        idx
    }

    pub fn n_selected(&self) -> usize {
        self.ranked.iter().filter(|r| r.selected).count()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["snp", "effect", "coef", "selected"])?;
        for r in &self.ranked {
            w.write_record([r.snp.to_string(), format_scalar(r.effect), format_scalar(r.coef), u8::from(r.selected).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of `truth` found among the first `k` entries of `ranking`.
pub fn recall_at(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let top = &ranking[..k.min(ranking.len())];
    truth.iter().filter(|t| top.contains(t)).count() as f64 / truth.len() as f64
}

/// Train/test split, cross-validated logistic lasso on the training rows, and per-SNP
/// effects over all individuals with the principal-component confounder.
pub fn run_gwas_pipeline<F: Scalar>(
    genotypes: ArrayView2<'_, F>,
    phenotype: ArrayView1<'_, F>,
    cfg: &GwasConfig<F>,
    rng: RngSeed,
) -> Result<GwasReport<F>> {
    let n = genotypes.nrows();
    if n == 0 {
        return Err(EfcError::EmptyDataset);
    }
    if !(cfg.train_fraction > F::zero() && cfg.train_fraction < F::one()) {
        return Err(EfcError::InvalidParameter("train fraction must lie in (0, 1)".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng.substream(0).rng());
    let n_train = ((cfg.train_fraction * F::from_usize_lossy(n)).round().to_usize().unwrap_or(0)).clamp(1, n);
    let mut train = order[..n_train].to_vec();
    train.sort_unstable();

    let train_data = Dataset::new(genotypes.select(Axis(0), &train), Some(phenotype.select(Axis(0), &train)))?;
    let cv = cross_validate(&train_data, cfg.cv_folds, &cfg.lambda_grid, ModelKind::LogisticLasso, rng.substream(1))?;
    let fit = fit_logistic_lasso_traced(
        train_data.points().view(),
        train_data.require_outcomes()?.view(),
        cv.chosen,
        &cfg.lasso,
    )?;
    let model = fit.model;

    let pca = build_pca_confounder(genotypes, cfg.n_components)?;
    let h = pca.confounder.values(&genotypes.to_owned())?;
    let engine = GwasEffectEngine::new(&model, &pca.confounder, genotypes, h.view(), None, rng.substream(2))?;
    let mut ranked = (0..genotypes.ncols())
        .map(|snp| {
            let e = engine.snp_effect(snp)?;
            Ok(RankedSnp { snp, effect: e.effect, coef: model.weights[snp], selected: e.effect.abs() > cfg.threshold })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.effect.abs().partial_cmp(&a.effect.abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.snp.cmp(&b.snp))
    });
    Ok(GwasReport { ranked, cv, model, n_train })
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("tsv") => b'\t',
        _ => b',',
    }
}

/// Genotype table read from disk: SNP columns plus an optional `y` phenotype column.
#[derive(Debug, Clone)]
pub struct GenotypeTable<F> {
    pub snp_ids: Vec<String>,
    pub genotypes: Array2<F>,
    pub phenotype: Option<Array1<F>>,
    /// Number of missing cells that were imputed.
    pub imputed: usize,
}

/// Reads a genotype CSV/TSV. Missing cells (`NA` or empty) are imputed by sampling from the
/// observed values of the same SNP.
pub fn load_genotypes<F: Scalar>(path: impl AsRef<Path>, rng: RngSeed) -> Result<GenotypeTable<F>> {
    let path = path.as_ref();
    let malformed = |reason: String| EfcError::MalformedFile { path: path.to_path_buf(), reason };
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter_for(path)).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(EfcError::EmptyFile(path.to_path_buf()));
    }
    let y_col = header.iter().position(|h| h == "y");
    let snp_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != y_col).collect();
    let mut cells: Vec<Option<F>> = Vec::new();
    let mut ys: Vec<F> = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(malformed(format!("row {} has {} fields, expected {}", line + 2, rec.len(), header.len())));
        }
        for &c in &snp_cols {
            let v = rec[c].trim();
            if v.is_empty() || v.eq_ignore_ascii_case("na") {
                cells.push(None);
                continue;
            }
            let x: f64 = v.parse().map_err(|_| malformed(format!("row {}: bad genotype {v:?}", line + 2)))?;
            if x != 0.0 && x != 0.5 && x != 1.0 {
                return Err(malformed(format!("row {}: genotype {x} not in {{0, 0.5, 1}}", line + 2)));
            }
            cells.push(Some(F::lit(x)));
        }
        if let Some(c) = y_col {
            let v = rec[c].trim();
            let y: f64 = v.parse().map_err(|_| malformed(format!("row {}: bad phenotype {v:?}", line + 2)))?;
            if y != 0.0 && y != 1.0 {
                return Err(malformed(format!("row {}: phenotype must be 0 or 1", line + 2)));
            }
            ys.push(F::lit(y));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(EfcError::EmptyFile(path.to_path_buf()));
    }
    let s = snp_cols.len();
    let mut genotypes = Array2::zeros((rows, s));
    let mut imputed = 0;
    for j in 0..s {
        let observed: Vec<F> = (0..rows).filter_map(|i| cells[i * s + j]).collect();
        let mut r = rng.substream(j as u64).rng();
        for i in 0..rows {
            genotypes[[i, j]] = match cells[i * s + j] {
                Some(v) => v,
                None => {
                    if observed.is_empty() {
                        return Err(malformed(format!("SNP column {} has no observed values", header[snp_cols[j]])));
                    }
                    imputed += 1;
                    observed[r.random_range(0..observed.len())]
                }
            };
        }
    }
    Ok(GenotypeTable {
        snp_ids: snp_cols.iter().map(|&c| header[c].clone()).collect(),
        genotypes,
        phenotype: y_col.map(|_| Array1::from(ys)),
        imputed,
    })
}

/// Writes genotypes as `snp_0..snp_{S-1},y`.
pub fn save_genotypes<F: Scalar>(path: impl AsRef<Path>, geno: &GenotypeData<F>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path)?;
    let mut header: Vec<String> = (0..geno.n_snps()).map(|j| format!("snp_{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (row, &y) in geno.genotypes.outer_iter().zip(geno.phenotype.iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
