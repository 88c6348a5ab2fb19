//! Seeded, config-driven simulation sweeps and their CSV output.
//!
//! Each sweep cell simulates a train and an evaluation set from one of the analytic models,
//! fits a degree-2 kernel ridge outcome model, builds evaluation queries and reports the RMSE
//! of the LODE and baseline conditional estimates against the analytic effect.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal_models::{sample, sample_points, true_conditional_effect, ModelFamily, ModelSpec};
use crate::data_model::{make_eval_queries, Dataset, InterventionQuery, RngSeed};
use crate::error::{EfcError, Result};
use crate::gwas_sim::{generate_genotypes, recall_at, run_gwas_pipeline, GenotypeConfig, GwasConfig};
use crate::regression::{cross_validate, default_ridge, fit_krr, ModelKind, KernelRidge, Predictor};
use crate::surrogate_flow::{batch_solve_to_mismatch, FlowConfig, FlowStatus, SurrogateResult, SurrogateSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ConfoundingStrength,
    PositivitySigma,
    MismatchDelta,
    StepSize,
    Gwas,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::ConfoundingStrength => "confounding_strength",
            Experiment::PositivitySigma => "positivity_sigma",
            Experiment::MismatchDelta => "mismatch_delta",
            Experiment::StepSize => "step_size",
            Experiment::Gwas => "gwas",
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Experiment {
    type Err = EfcError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "confounding_strength" => Self::ConfoundingStrength,
            "positivity_sigma" => Self::PositivitySigma,
            "mismatch_delta" => Self::MismatchDelta,
            "step_size" => Self::StepSize,
            "gwas" => Self::Gwas,
            other => return Err(EfcError::InvalidParameter(format!("unknown experiment {other:?}"))),
        })
    }
}

/// How surrogates are searched for in a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Each query on its own: closed form for linear confounders, Euler otherwise.
    PerQuery,
    /// All evaluation queries in lockstep, stopped on the batch-mean mismatch (`delta` grid).
    Batch,
}

/// Meaning of the step-size grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScale {
    /// `l` multiplies each query's own mismatch gradient.
    PerQuery,
    /// `l` multiplies the gradient of the mean mismatch over the evaluation batch, i.e. each
    /// query moves with step `l / n_eval`.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwasSweep {
    pub genotype: GenotypeConfig<f64>,
    pub pipeline: GwasConfig<f64>,
    /// Ranking depth at which recall of the planted SNPs is measured.
    pub selection_size: usize,
    /// Also run each seed on a copy of the generator whose phenotype ignores the genotypes.
    pub include_null: bool,
}

impl Default for GwasSweep {
    fn default() -> Self {
        Self {
            genotype: GenotypeConfig::default(),
            pipeline: GwasConfig::default(),
            selection_size: 20,
            include_null: true,
        }
    }
}

/// A sweep is a pure function of this struct. Grids left as `None` take the experiment's
/// default axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub experiment: Experiment,
    pub families: Option<Vec<ModelFamily>>,
    pub dim: usize,
    pub gammas: Option<Vec<f64>>,
    pub sigmas: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub deltas: Option<Vec<f64>>,
    pub step_sizes: Option<Vec<f64>>,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub flow: Option<FlowConfig<f64>>,
    pub search: Option<SearchMode>,
    pub step_scale: Option<StepScale>,
    /// Permit step sizes above 2 (expect diverged queries).
    pub allow_large_steps: bool,
    pub krr_offset: f64,
    /// Fixed ridge penalty; overrides the cross-validated choice.
    pub krr_lambda: Option<f64>,
    /// Penalties tried by k-fold CV on each training set; empty means `1e-4 * n_train`.
    pub krr_lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub output: Option<PathBuf>,
    pub gwas: GwasSweep,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self::preset(Experiment::ConfoundingStrength)
    }
}

const GAMMA_AXIS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl SweepConfig {
    /// Config with every optional field left to the experiment's defaults.
    pub fn preset(experiment: Experiment) -> Self {
        Self {
            experiment,
            families: None,
            dim: 20,
            gammas: None,
            sigmas: None,
            alphas: None,
            deltas: None,
            step_sizes: None,
            n_train: 1000,
            n_eval: 1000,
            n_seeds: 10,
            base_seed: 0,
            flow: None,
            search: None,
            step_scale: None,
            allow_large_steps: false,
            krr_offset: 1.0,
            krr_lambda: None,
            krr_lambda_grid: vec![0.01, 0.1, 1.0, 10.0],
            cv_folds: 5,
            output: None,
            gwas: GwasSweep::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn families(&self) -> Vec<ModelFamily> {
        self.families.clone().unwrap_or_else(|| match self.experiment {
            Experiment::MismatchDelta => vec![ModelFamily::A],
            Experiment::StepSize => vec![ModelFamily::B],
            _ => vec![ModelFamily::A, ModelFamily::B],
        })
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.gammas.clone().unwrap_or_else(|| match self.experiment {
            Experiment::MismatchDelta => vec![2.0],
            _ => GAMMA_AXIS.to_vec(),
        })
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigmas.clone().unwrap_or_else(|| match self.experiment {
            Experiment::PositivitySigma => vec![0.5, 1.0, 2.0],
            _ => vec![1.0],
        })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.clone().unwrap_or_else(|| match self.experiment {
            Experiment::MismatchDelta => vec![0.1, 1.0, 2.0],
            _ => vec![1.0],
        })
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.deltas.clone().unwrap_or_else(|| match self.experiment {
            Experiment::MismatchDelta => vec![0.0, 0.25, 0.5, 1.0, 2.0],
            _ => vec![0.0],
        })
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.step_sizes.clone().unwrap_or_else(|| match self.experiment {
            Experiment::StepSize => vec![0.01, 0.1, 0.5, 1.0, 2.0],
            _ => vec![self.flow_config().step_size],
        })
    }

    pub fn search_mode(&self) -> SearchMode {
        self.search.unwrap_or(match self.experiment {
            Experiment::MismatchDelta | Experiment::StepSize => SearchMode::Batch,
            _ => SearchMode::PerQuery,
        })
    }

    pub fn step_scaling(&self) -> StepScale {
        self.step_scale.unwrap_or(match self.experiment {
            Experiment::StepSize => StepScale::BatchMean,
            _ => StepScale::PerQuery,
        })
    }

    /// Flow settings; the default step keeps per-query Euler stable for the bilinear model
    /// across the whole confounding axis.
    pub fn flow_config(&self) -> FlowConfig<f64> {
        self.flow.clone().unwrap_or_else(|| {
            let base = FlowConfig::default();
            match self.experiment {
                Experiment::MismatchDelta => base.with_force_euler(true),
                Experiment::StepSize => base,
                _ => base.with_step_size(5e-4),
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EfcError::InvalidParameter(m));
        if self.n_train == 0 || self.n_eval < 2 || self.n_seeds == 0 || self.dim == 0 {
            return bad("counts must be positive (n_eval at least 2)".into());
        }
        if self.experiment == Experiment::Gwas {
            self.gwas.genotype.validate()?;
            if self.gwas.selection_size == 0 {
                return bad("selection size must be positive".into());
            }
            return Ok(());
        }
        self.flow_config().validate()?;
        let grids = [
            ("families", self.families().len()),
            ("gammas", self.gammas().len()),
            ("sigmas", self.sigmas().len()),
            ("alphas", self.alphas().len()),
            ("deltas", self.deltas().len()),
            ("step_sizes", self.step_sizes().len()),
        ];
        for (name, len) in grids {
            if len == 0 {
                return bad(format!("grid {name} is empty"));
            }
        }
        if self.sigmas().iter().any(|&s| !(s > 0.0)) {
            return bad("sigma must be positive".into());
        }
        if self.deltas().iter().any(|&d| !(d >= 0.0)) {
            return bad("delta must be nonnegative".into());
        }
        if self.gammas().iter().chain(&self.alphas()).any(|g| !g.is_finite()) {
            return bad("gamma and alpha must be finite".into());
        }
        for &l in &self.step_sizes() {
            if !(l > 0.0) || !l.is_finite() {
                return bad(format!("step size {l} must be positive"));
            }
            if l > 2.0 && !self.allow_large_steps {
                return bad(format!("step size {l} exceeds 2; set allow_large_steps"));
            }
        }
        if self.deltas().iter().any(|&d| d > 0.0) && self.search_mode() == SearchMode::PerQuery {
            return bad("a positive delta needs batch search".into());
        }
        if self.krr_lambda.is_none() && !self.krr_lambda_grid.is_empty() && self.cv_folds < 2 {
            return bad("cross-validation needs at least two folds".into());
        }
        if !(self.krr_offset >= 0.0)
            || self.krr_lambda.is_some_and(|l| !(l > 0.0))
            || self.krr_lambda_grid.iter().any(|&l| !(l > 0.0))
        {
            return bad("kernel offset must be nonnegative and the ridge penalty positive".into());
        }
        Ok(())
    }
}

/// One output row; the field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: Experiment,
    pub family: ModelFamily,
    pub gamma: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub step_size: f64,
    pub seed: u64,
    pub rmse_lode: f64,
    pub rmse_baseline: f64,
    pub diverged_count: usize,
    pub mean_steps: f64,
    pub error: String,
}

pub const SWEEP_HEADER: [&str; 13] = [
    "experiment",
    "family",
    "gamma",
    "sigma",
    "alpha",
    "delta",
    "step_size",
    "seed",
    "rmse_lode",
    "rmse_baseline",
    "diverged_count",
    "mean_steps",
    "error",
];

/// Shared data for every (delta, step) cell of one (family, gamma, sigma, alpha, seed) group.
struct Group {
    spec: ModelSpec<f64>,
    model: KernelRidge<f64>,
    queries: Vec<InterventionQuery<f64>>,
    truth: Vec<f64>,
    baseline: f64,
}

#[derive(Debug, Clone, Copy)]
struct GroupKey {
    family: ModelFamily,
    gamma: f64,
    sigma: f64,
    alpha: f64,
    seed: u64,
}

fn rmse(errors: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for e in errors {
        s += e * e;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

fn build_group(cfg: &SweepConfig, key: GroupKey) -> Result<Group> {
    let spec = ModelSpec::new(key.family)
        .with_dim(cfg.dim)
        .with_gamma(key.gamma)
        .with_alpha(key.alpha)
        .with_sigma(key.sigma);
    // the same seed gives the same underlying draws in every cell
    let rng = RngSeed::new(cfg.base_seed).derive(key.seed);
    let train = sample(&spec, cfg.n_train, rng.substream(0))?;
    let eval = Dataset::new(sample_points(&spec, cfg.n_eval, rng.substream(1))?, None)?;
    let conf = spec.confounder()?;
    let queries = make_eval_queries(&eval, &conf, rng.substream(2))?;
    let lambda = match cfg.krr_lambda {
        Some(l) => l,
        None if cfg.krr_lambda_grid.is_empty() => default_ridge(cfg.n_train),
        None => {
            let kind = ModelKind::KernelRidge { offset: cfg.krr_offset };
            cross_validate(&train, cfg.cv_folds, &cfg.krr_lambda_grid, kind, rng.substream(3))?.chosen
        }
    };
    let model = fit_krr(&train, lambda, cfg.krr_offset)?;
    let truth = queries
        .iter()
        .map(|q| true_conditional_effect(&spec, q.t_star.view(), q.h_target[0]))
        .collect::<Result<Vec<_>>>()?;
    let mut base_err = Vec::with_capacity(queries.len());
    for (q, &phi) in queries.iter().zip(&truth) {
        base_err.push(model.predict(q.t_star.view())? - phi);
    }
    let baseline = rmse(base_err.into_iter());
    Ok(Group { spec, model, queries, truth, baseline })
}

struct CellOutcome {
    rmse_lode: f64,
    diverged: usize,
    mean_steps: f64,
}

fn run_cell(cfg: &SweepConfig, group: &Group, delta: f64, step: f64) -> Result<CellOutcome> {
    let effective = match cfg.step_scaling() {
        StepScale::PerQuery => step,
        StepScale::BatchMean => step / group.queries.len() as f64,
    };
    let flow = cfg.flow_config().with_step_size(effective);
    let conf = group.spec.confounder()?;
    let surrogates: Vec<SurrogateResult<f64>> = match cfg.search_mode() {
        SearchMode::PerQuery => {
            let solver = SurrogateSolver::new(&conf, &flow)?;
            group.queries.iter().map(|q| solver.solve(q)).collect::<Result<_>>()?
        }
        SearchMode::Batch => batch_solve_to_mismatch(&conf, &group.queries, delta, &flow)?,
    };
    let mut errors = Vec::with_capacity(surrogates.len());
    let mut steps = 0usize;
    let mut diverged = 0usize;
    for (s, &phi) in surrogates.iter().zip(&group.truth) {
        if s.status == FlowStatus::Diverged {
            diverged += 1;
            continue;
        }
        steps += s.steps_taken;
        errors.push(group.model.predict(s.t_hat.view())? - phi);
    }
    let kept = errors.len();
    Ok(CellOutcome {
        rmse_lode: rmse(errors.into_iter()),
        diverged,
        mean_steps: if kept == 0 { f64::NAN } else { steps as f64 / kept as f64 },
    })
}

/// Runs every cell of a model sweep. Rows come back in grid order (family, gamma, sigma,
/// alpha, delta, step size, seed) whatever the scheduling; a failing cell is reported in its
/// `error` column and the rest of the sweep carries on.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.experiment == Experiment::Gwas {
        return Err(EfcError::InvalidParameter("the gwas experiment has its own runner (run_gwas_sweep)".into()));
    }
    let (families, gammas, sigmas, alphas) = (cfg.families(), cfg.gammas(), cfg.sigmas(), cfg.alphas());
    let (deltas, steps) = (cfg.deltas(), cfg.step_sizes());
    let mut keys = Vec::new();
    for (fi, &family) in families.iter().enumerate() {
        for (gi, &gamma) in gammas.iter().enumerate() {
            for (si, &sigma) in sigmas.iter().enumerate() {
                for (ai, &alpha) in alphas.iter().enumerate() {
                    for seed in 0..cfg.n_seeds as u64 {
                        keys.push(([fi, gi, si, ai], GroupKey { family, gamma, sigma, alpha, seed }));
                    }
                }
            }
        }
    }

    let blocks: Vec<Vec<([usize; 6], u64, SweepRow)>> = keys
        .par_iter()
        .map(|&(idx, key)| {
            let group = build_group(cfg, key);
            let mut rows = Vec::with_capacity(deltas.len() * steps.len());
            for (di, &delta) in deltas.iter().enumerate() {
                for (li, &step) in steps.iter().enumerate() {
                    let mut row = SweepRow {
                        experiment: cfg.experiment,
                        family: key.family,
                        gamma: key.gamma,
                        sigma: key.sigma,
                        alpha: key.alpha,
                        delta,
                        step_size: step,
                        seed: key.seed,
                        rmse_lode: f64::NAN,
                        rmse_baseline: f64::NAN,
                        diverged_count: 0,
                        mean_steps: f64::NAN,
                        error: String::new(),
                    };
                    match &group {
                        Ok(g) => {
                            row.rmse_baseline = g.baseline;
                            match run_cell(cfg, g, delta, step) {
                                Ok(c) => {
                                    row.rmse_lode = c.rmse_lode;
                                    row.diverged_count = c.diverged;
                                    row.mean_steps = c.mean_steps;
                                    if c.diverged == g.queries.len() {
                                        row.error = EfcError::AllDiverged(c.diverged).to_string();
                                    }
                                }
                                Err(e) => row.error = e.to_string(),
                            }
                        }
                        Err(e) => row.error = e.to_string(),
                    }
                    rows.push(([idx[0], idx[1], idx[2], idx[3], di, li], key.seed, row));
                }
            }
            rows
        })
        .collect();

    let mut all: Vec<_> = blocks.into_iter().flatten().collect();
    all.sort_by_key(|(idx, seed, _)| (*idx, *seed));
    Ok(all.into_iter().map(|(_, _, r)| r).collect())
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SWEEP_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_sweep_csv(std::fs::File::create(path)?, rows)
}

pub fn read_sweep_csv<R: Read>(input: R, origin: &Path) -> Result<Vec<SweepRow>> {
    let malformed = |reason: String| EfcError::MalformedFile { path: origin.to_path_buf(), reason };
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SWEEP_HEADER {
        return Err(malformed(format!("unexpected header {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<SweepRow>().enumerate() {
        rows.push(rec.map_err(|e| malformed(format!("row {}: {e}", i + 2)))?);
    }
    Ok(rows)
}

pub fn load_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    read_sweep_csv(std::fs::File::open(path)?, path)
}

/// Mean and sample standard deviation across seeds of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: Experiment,
    pub family: ModelFamily,
    pub gamma: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub step_size: f64,
    pub n_seeds: usize,
    pub rmse_lode_mean: f64,
    pub rmse_lode_sd: f64,
    pub rmse_baseline_mean: f64,
    pub rmse_baseline_sd: f64,
    pub diverged_mean: f64,
    pub mean_steps: f64,
}

/// Mean and `n - 1` standard deviation of the finite entries (`NaN` sd below two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Groups rows by cell and aggregates over seeds. The output is sorted by cell, so it does not
/// depend on the order of the input rows.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let cell_cmp = |a: &SweepRow, b: &SweepRow| {
        a.experiment
            .name()
            .cmp(b.experiment.name())
            .then(a.family.to_string().cmp(&b.family.to_string()))
            .then(a.gamma.total_cmp(&b.gamma))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.delta.total_cmp(&b.delta))
            .then(a.step_size.total_cmp(&b.step_size))
    };
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| cell_cmp(a, b).then(a.seed.cmp(&b.seed)));
    let mut out = Vec::new();
    for cell in sorted.chunk_by(|a, b| cell_cmp(a, b).is_eq()) {
        let pick = |f: fn(&SweepRow) -> f64| cell.iter().map(|r| f(r)).collect::<Vec<_>>();
        let (lm, ls) = mean_sd(&pick(|r| r.rmse_lode));
        let (bm, bs) = mean_sd(&pick(|r| r.rmse_baseline));
        let (dm, _) = mean_sd(&pick(|r| r.diverged_count as f64));
        let (sm, _) = mean_sd(&pick(|r| r.mean_steps));
        let r0 = cell[0];
        out.push(SummaryRow {
            experiment: r0.experiment,
            family: r0.family,
            gamma: r0.gamma,
            sigma: r0.sigma,
            alpha: r0.alpha,
            delta: r0.delta,
            step_size: r0.step_size,
            n_seeds: cell.len(),
            rmse_lode_mean: lm,
            rmse_lode_sd: ls,
            rmse_baseline_mean: bm,
            rmse_baseline_sd: bs,
            diverged_mean: dm,
            mean_steps: sm,
        });
    }
    out
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One seed of the synthetic GWAS study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwasRow {
    pub seed: u64,
    /// `true` for the run without planted effects.
    pub null_model: bool,
    pub recall_effect: f64,
    pub recall_coef: f64,
    pub n_selected: usize,
    pub n_snps: usize,
    pub lambda: f64,
    pub error: String,
}

/// Runs the GWAS pipeline on freshly generated genotypes for every seed (and, optionally, on
/// the matching no-signal generator).
pub fn run_gwas_sweep(cfg: &SweepConfig) -> Result<Vec<GwasRow>> {
    cfg.validate()?;
    let g = &cfg.gwas;
    let mut jobs = Vec::new();
    for seed in 0..cfg.n_seeds as u64 {
        jobs.push((seed, false));
        if g.include_null {
            jobs.push((seed, true));
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(seed, null_model)| {
            let rng = RngSeed::new(cfg.base_seed).derive(seed);
            let mut gen_cfg = g.genotype.clone();
            if null_model {
                // no signal at all: neither causal SNPs nor an ancestry effect on the phenotype
                gen_cfg.n_causal = 0;
                gen_cfg.pop_effect = 0.0;
            }
            let run = || -> Result<GwasRow> {
                let data = generate_genotypes(&gen_cfg, rng.substream(0))?;
                let report = run_gwas_pipeline(data.genotypes.view(), data.phenotype.view(), &g.pipeline, rng.substream(1))?;
                let truth = data.causal_indices();
                Ok(GwasRow {
                    seed,
                    null_model,
                    recall_effect: recall_at(&report.effect_ranking(), &truth, g.selection_size),
                    recall_coef: recall_at(&report.coef_ranking(), &truth, g.selection_size),
                    n_selected: report.n_selected(),
                    n_snps: data.n_snps(),
                    lambda: report.cv.chosen,
                    error: String::new(),
                })
            };
            run().unwrap_or_else(|e| GwasRow {
                seed,
                null_model,
                recall_effect: f64::NAN,
                recall_coef: f64::NAN,
                n_selected: 0,
                n_snps: gen_cfg.n_snps,
                lambda: f64::NAN,
                error: e.to_string(),
            })
        })
        .collect();
    Ok(rows)
}

pub fn write_gwas_csv<W: Write>(out: W, rows: &[GwasRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
