use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Axis};
use serde_json::json;

use efc::causal_models::{analytic_constants, sample, sample_points, true_conditional_effect};
use efc::data_model::{
    load_dataset, load_queries, make_eval_queries, read_numeric_csv, save_dataset, write_metadata, DatasetMetadata,
};
use efc::diagnostics::{
    cred_residual, fpos_dependence_check, predictor_gradient_field, support_score, theorem2_bound, DROPPED_TERMS_NOTE,
};
use efc::estimators::{baseline_conditional_effect, lode_conditional_effect_with};
use efc::gwas_sim::{generate_genotypes, load_genotypes, run_gwas_pipeline, save_genotypes, GenotypeConfig, GwasConfig};
use efc::harness::{
    load_sweep_csv, run_gwas_sweep, run_sweep, save_sweep_csv, summarize, write_gwas_csv, write_summary_csv, Experiment,
    SweepConfig,
};
use efc::regression::{cross_validate, default_ridge, fit_krr, fit_logistic_lasso, ModelKind};
use efc::surrogate_flow::euler_solve;
use efc::{
    Dataset, FlowConfig, FunctionalConfounder, InterventionQuery, ModelFamily, ModelSpec, OutcomeModel, RngSeed,
    SurrogateSolver,
};

#[derive(Parser)]
#[command(name = "efc", version, about = "Effect estimation with functional confounders")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout where a command allows it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from one of the analytic models.
    Simulate(SimulateArgs),
    /// Fit an outcome model to a dataset.
    Fit(FitArgs),
    /// Estimate conditional effects for a set of queries.
    Estimate(EstimateArgs),
    /// Run a simulation sweep and write one CSV row per cell and seed.
    Sweep(SweepArgs),
    /// Aggregate a sweep CSV over seeds.
    Summarize(SummarizeArgs),
    /// Diagnostics, each printed as one line of JSON.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Generate a synthetic genotype/phenotype table.
    GwasSim(GwasSimArgs),
    /// Rank SNPs by estimated effect.
    GwasRun(GwasRunArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "A")]
    family: ModelFamily,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Outcome noise standard deviation (default: variance 0.1).
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long, default_value_t = 20)]
    dim: usize,
}

impl ModelArgs {
    fn spec(&self) -> ModelSpec<f64> {
        let mut spec = ModelSpec::new(self.family)
            .with_dim(self.dim)
            .with_gamma(self.gamma)
            .with_alpha(self.alpha)
            .with_sigma(self.sigma);
        if let Some(sd) = self.noise_sd {
            spec = spec.with_noise_sd(sd);
        }
        spec
    }
}

#[derive(Args, Clone)]
struct FlowArgs {
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    /// Integrate numerically even for linear confounders.
    #[arg(long)]
    force_euler: bool,
}

impl FlowArgs {
    fn config(&self) -> FlowConfig<f64> {
        FlowConfig::default()
            .with_step_size(self.step_size)
            .with_rel_tolerance(self.rel_tol)
            .with_max_steps(self.max_steps)
            .with_force_euler(self.force_euler)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Write pre-outcome variables only.
    #[arg(long)]
    no_outcome: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitKind {
    Krr,
    Lasso,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV with a `y` column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "krr")]
    kind: FitKind,
    /// Penalty; omitted means cross-validation over --grid (or the default ridge).
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated penalty grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Kernel offset c in (x'x + c)^2.
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Lode,
    Baseline,
    Both,
}

#[derive(Args)]
struct ConfounderArgs {
    /// Confounder file: JSON, or a CSV weight matrix (rows = T, columns = d).
    #[arg(long)]
    confounder: Option<PathBuf>,
    /// Use the analytic model's confounder instead of a file.
    #[arg(long)]
    family: Option<ModelFamily>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 20)]
    dim: usize,
}

impl ConfounderArgs {
    fn load(&self) -> Result<FunctionalConfounder<f64>> {
        match (&self.confounder, self.family) {
            (Some(path), None) => load_confounder(path),
            (None, Some(family)) => Ok(ModelSpec::new(family).with_dim(self.dim).with_gamma(self.gamma).confounder()?),
            _ => bail!("give exactly one of --confounder or --family"),
        }
    }
}

fn load_confounder(path: &Path) -> Result<FunctionalConfounder<f64>> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    } else {
        Ok(FunctionalConfounder::load_linear_map_csv(path)?)
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Outcome model JSON written by `efc fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    confounder: ConfounderArgs,
    /// Query CSV: t_0..t_{T-1}, h_0..h_{d-1}.
    #[arg(long, conflicts_with = "data")]
    queries: Option<PathBuf>,
    /// Dataset CSV; queries pair each row with the confounder value of a shuffled row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    method: MethodArg,
    #[command(flatten)]
    flow: FlowArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config JSON; omitted fields take the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment preset used when no config is given.
    #[arg(long, conflicts_with = "config")]
    experiment: Option<Experiment>,
    #[arg(long)]
    n_seeds: Option<usize>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Sweep results CSV.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Largest |J_h^T grad f| over random probe points.
    Cred {
        #[command(flatten)]
        model: ModelArgs,
        /// Check a fitted model's numeric gradient instead of the analytic effect.
        #[arg(long)]
        fitted: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Error bound against the analytic effect with a perfect outcome model.
    Bound {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// k-NN distance percentile of a point within a dataset.
    Support {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated coordinates.
        #[arg(long, value_delimiter = ',', required = true)]
        point: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// How well the confounder predicts a functional intervention (R^2).
    Fpos {
        /// CSV with a `g` column; every other column is a confounder coordinate.
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct GwasSimArgs {
    /// Generator config JSON; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    snps: Option<usize>,
    #[arg(long)]
    causal: Option<usize>,
}

#[derive(Args)]
struct GwasRunArgs {
    /// Genotype CSV/TSV with a `y` column.
    #[arg(long)]
    genotypes: PathBuf,
    /// Pipeline config JSON; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("--out is required for this command")
}

/// stdout unless `--out` was given.
fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let out = require_out(&cli.out)?;
    let spec = args.model.spec();
    let rng = RngSeed::new(cli.seed);
    let data = if args.no_outcome {
        Dataset::new(sample_points(&spec, args.n, rng)?, None)?
    } else {
        sample(&spec, args.n, rng)?
    };
    save_dataset(out, &data)?;
    write_metadata(out, &DatasetMetadata { dim: spec.dim, model: serde_json::to_value(&spec)?, seed: cli.seed })?;
    Ok(())
}

fn fit(cli: &Cli, args: &FitArgs) -> Result<()> {
    let out = require_out(&cli.out)?;
    let data = load_dataset::<f64>(&args.data, true)?;
    let kind = match args.kind {
        FitKind::Krr => ModelKind::KernelRidge { offset: args.offset },
        FitKind::Lasso => ModelKind::LogisticLasso,
    };
    let (lambda, cv) = match (args.lambda, args.grid.is_empty()) {
        (Some(l), _) => (l, None),
        (None, false) => {
            let cv = cross_validate(&data, args.folds, &args.grid, kind, RngSeed::new(cli.seed))?;
            (cv.chosen, Some(cv))
        }
        (None, true) => match args.kind {
            FitKind::Krr => (default_ridge(data.n()), None),
            FitKind::Lasso => bail!("the lasso needs --lambda or --grid"),
        },
    };
    let model: OutcomeModel<f64> = match args.kind {
        FitKind::Krr => fit_krr(&data, lambda, args.offset)?.into(),
        FitKind::Lasso => fit_logistic_lasso(&data, lambda)?.into(),
    };
    model.save(out)?;
    println!("{}", json!({ "lambda": lambda, "cv": cv }));
    Ok(())
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> Result<()> {
    let model = OutcomeModel::<f64>::load(&args.model)?;
    let conf = args.confounder.load()?;
    let queries: Vec<InterventionQuery<f64>> = match (&args.queries, &args.data) {
        (Some(q), None) => load_queries(q)?,
        (None, Some(d)) => make_eval_queries(&load_dataset(d, false).or_else(|_| load_dataset(d, true))?, &conf, RngSeed::new(cli.seed))?,
        _ => bail!("give exactly one of --queries or --data"),
    };
    let solver = SurrogateSolver::new(&conf, &args.flow.config())?;
    let mut w = sink(&cli.out)?;
    writeln!(w, "query_id,method,value,steps,final_mismatch,status")?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| x.to_string());
    for (id, q) in queries.iter().enumerate() {
        if args.method != MethodArg::Baseline {
            let est = lode_conditional_effect_with(&model, &solver, q)?;
            let s = est.surrogate.as_ref().expect("LODE estimates carry their surrogate");
            writeln!(w, "{id},lode,{},{},{},{}", fmt(est.value), s.steps_taken, s.final_mismatch, s.status)?;
        }
        if args.method != MethodArg::Lode {
            let est = baseline_conditional_effect(&model, q)?;
            writeln!(w, "{id},baseline,{},,,", fmt(est.value))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let mut cfg = match (&args.config, args.experiment) {
        (Some(p), _) => SweepConfig::load(p)?,
        (None, Some(e)) => SweepConfig::preset(e),
        (None, None) => bail!("give --config or --experiment"),
    };
    if let Some(n) = args.n_seeds {
        cfg.n_seeds = n;
    }
    if args.config.is_none() {
        cfg.base_seed = cli.seed;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    let out = cfg.output.clone().context("no output path: pass --out or set `output` in the config")?;
    if cfg.experiment == Experiment::Gwas {
        let rows = run_gwas_sweep(&cfg)?;
        write_gwas_csv(File::create(&out)?, &rows)?;
    } else {
        let rows = run_sweep(&cfg)?;
        let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
        if failed > 0 {
            log::warn!("{failed} of {} cells failed; see the error column", rows.len());
        }
        save_sweep_csv(&out, &rows)?;
    }
    Ok(())
}

fn check(cli: &Cli, cmd: &CheckCommand) -> Result<()> {
    let report = match cmd {
        CheckCommand::Cred { model, fitted, n } => {
            let spec = model.spec();
            let conf = spec.confounder()?;
            let probe = Dataset::new(sample_points(&spec, *n, RngSeed::new(cli.seed))?, None)?;
            let points: Vec<_> = make_eval_queries(&probe, &conf, RngSeed::new(cli.seed).substream(1))?
                .into_iter()
                .map(|q| (q.t_star, q.h_target))
                .collect();
            let residual = match fitted {
                Some(path) => {
                    let m = OutcomeModel::<f64>::load(path)?;
                    cred_residual(predictor_gradient_field(&m, 1e-5), &conf, &points)?
                }
                None => cred_residual(|t, _| spec.effect_gradient(t), &conf, &points)?,
            };
            json!({ "check": "cred", "family": spec.family.to_string(), "points": n, "residual": residual })
        }
        CheckCommand::Bound { model, flow, n } => {
            let spec = model.spec();
            let conf = spec.confounder()?;
            let cfg = flow.config().with_trajectory(true);
            let eval = Dataset::new(sample_points(&spec, *n, RngSeed::new(cli.seed))?, None)?;
            let (mut violations, mut max_ratio, mut mean_total, mut skipped) = (0usize, 0.0f64, 0.0f64, 0usize);
            for q in make_eval_queries(&eval, &conf, RngSeed::new(cli.seed).substream(1))? {
                let res = euler_solve(&conf, &q, &cfg)?;
                if res.status == efc::FlowStatus::Diverged {
                    skipped += 1;
                    continue;
                }
                let traj = res.trajectory.as_ref().expect("trajectory recorded");
                let radius = traj.iter().map(|p| p.t.dot(&p.t).sqrt()).fold(0.0, f64::max);
                let report = theorem2_bound(&analytic_constants(&spec, radius)?, &res, &cfg, None)?;
                let err = (spec.conditional_mean(res.t_hat.view())?
                    - true_conditional_effect(&spec, q.t_star.view(), q.h_target[0])?)
                .abs();
                violations += usize::from(err > report.total);
                if report.total > 0.0 {
                    max_ratio = max_ratio.max(err / report.total);
                }
                mean_total += report.total / *n as f64;
            }
            json!({
                "check": "bound", "family": spec.family.to_string(), "queries": n, "diverged": skipped,
                "violations": violations, "max_error_over_bound": max_ratio, "mean_bound": mean_total,
                "note": DROPPED_TERMS_NOTE,
            })
        }
        CheckCommand::Support { data, point, k } => {
            let d = load_dataset::<f64>(data, false).or_else(|_| load_dataset(data, true))?;
            let r = support_score(d.points().view(), Array1::from(point.clone()).view(), *k)?;
            json!({ "check": "support", "k": r.k, "distance": r.distance, "percentile": r.percentile,
                    "flagged": r.flagged, "note": r.note })
        }
        CheckCommand::Fpos { data } => {
            let (header, m) = read_numeric_csv::<f64>(data)?;
            let g_col = header.iter().position(|h| h == "g").context("no `g` column")?;
            let h_cols: Vec<usize> = (0..header.len()).filter(|&c| c != g_col).collect();
            if h_cols.is_empty() {
                bail!("no confounder columns besides `g`");
            }
            let r2 = fpos_dependence_check(m.column(g_col), m.select(Axis(1), &h_cols).view())?;
            json!({ "check": "fpos", "r_squared": r2 })
        }
    };
    let mut w = sink(&cli.out)?;
    writeln!(w, "{report}")?;
    Ok(())
}

fn gwas_sim(cli: &Cli, args: &GwasSimArgs) -> Result<()> {
    let out = require_out(&cli.out)?;
    let mut cfg: GenotypeConfig<f64> = match &args.config {
        Some(p) => read_json(p)?,
        None => GenotypeConfig::default(),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = args.snps {
        cfg.n_snps = s;
    }
    if let Some(c) = args.causal {
        cfg.n_causal = c;
    }
    let data = generate_genotypes(&cfg, RngSeed::new(cli.seed))?;
    save_genotypes(out, &data)?;
    let meta = json!({ "config": cfg, "seed": cli.seed, "causal_snps": data.causal_snps, "pop_labels": data.pop_labels });
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn gwas_run(cli: &Cli, args: &GwasRunArgs) -> Result<()> {
    let out = require_out(&cli.out)?;
    let mut cfg: GwasConfig<f64> = match &args.config {
        Some(p) => read_json(p)?,
        None => GwasConfig::default(),
    };
    if let Some(k) = args.components {
        cfg.n_components = k;
    }
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    let rng = RngSeed::new(cli.seed);
    let table = load_genotypes::<f64>(&args.genotypes, rng.substream(0))?;
    let y = table.phenotype.as_ref().context("genotype file has no `y` column")?;
    let report = run_gwas_pipeline(table.genotypes.view(), y.view(), &cfg, rng.substream(1))?;
    report.write_csv(out)?;
    println!(
        "{}",
        json!({ "lambda": report.cv.chosen, "n_train": report.n_train, "selected": report.n_selected(),
                "imputed": table.imputed, "snps": table.snp_ids.len() })
    );
    Ok(())
}

fn summarize_cmd(cli: &Cli, args: &SummarizeArgs) -> Result<()> {
    let rows = load_sweep_csv(&args.input)?;
    write_summary_csv(sink(&cli.out)?, &summarize(&rows))?;
    Ok(())
}

fn main() -> Result<()> {
    match run() {
        // `efc estimate ... | head` should not end in an error
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => Ok(()),
        r => r,
    }
}

fn run() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::Fit(a) => fit(&cli, a),
        Command::Estimate(a) => estimate(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
        Command::Summarize(a) => summarize_cmd(&cli, a),
        Command::Check(c) => check(&cli, c),
        Command::GwasSim(a) => gwas_sim(&cli, a),
        Command::GwasRun(a) => gwas_run(&cli, a),
    }
}
