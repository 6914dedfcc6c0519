//! `cpce`: simulate datasets, estimate conditional principal causal effects,
//! check plug-in bias identities and run replicated benchmarks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use cpce::bias_lab::{robustness_sweep, Perturbation, SweepConfig};
use cpce::data::{fmt_f64, ColumnSpec};
use cpce::estimators::{estimate, make_fold_plan, EstimatorConfig, EstimatorKind, FoldScheme, Overrides};
use cpce::learners::{ProbSpec, SmootherSpec};
use cpce::sim::bench::{bench_summary_json, preset_for, write_bench_csv};
use cpce::sim::{generate, run_benchmark, BenchConfig, DgpKind, DgpSpec};
use cpce::{CpceError, SampleTable, Stratum};

#[derive(Parser, Debug)]
#[command(name = "cpce", version, about = "Conditional principal causal effects under principal ignorability")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with optional `seed`, `[estimator]`, `[bench]` and `[sweep]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; falls back to CPCE_SEED, then to the config file.
    #[arg(long, global = true, env = "CPCE_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from a simulation design.
    Simulate(SimulateArgs),
    /// Estimate a CPCE from a dataset CSV.
    Estimate(EstimateArgs),
    /// Compare closed-form plug-in biases with the Monte-Carlo oracle.
    BiasCheck(BiasCheckArgs),
    /// Replicated RMSE and coverage benchmark.
    Bench(BenchArgs),
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value = "study1")]
    dgp: String,
    /// Study I scenario.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scenario: Option<u8>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long, default_value = "dataset.csv")]
    out: PathBuf,
    /// Per-row true nuisances and effects (default: `<out stem>_truth.csv`).
    #[arg(long)]
    truth_out: Option<PathBuf>,
    /// Metadata sidecar (default: `<out>` with a `.json` extension).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FoldArg {
    Kfold,
    Threeway,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LearnerArg {
    Ols,
    NadarayaWatson,
    LocalLinear,
    Spline,
}

#[derive(clap::Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    /// tlearner, subset, onestep or eif.
    #[arg(long, default_value = "onestep")]
    estimator: String,
    /// 00, 10 or 11.
    #[arg(long, default_value = "10")]
    stratum: String,
    /// Comma-separated covariate columns (default: every column except y, s, z).
    #[arg(long, value_delimiter = ',')]
    x_cols: Vec<String>,
    #[arg(long, default_value = "y")]
    y_col: String,
    #[arg(long, default_value = "s")]
    s_col: String,
    #[arg(long, default_value = "z")]
    z_col: String,
    #[arg(long, value_enum, default_value = "kfold")]
    folds: FoldArg,
    /// Number of folds for `--folds kfold`.
    #[arg(long)]
    k: Option<usize>,
    /// CSV of query points carrying the covariate columns (default: the sample rows).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Learner used for outcome, second-stage and denominator regressions.
    #[arg(long, value_enum)]
    learner: Option<LearnerArg>,
    #[arg(long)]
    hajek: bool,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, default_value = "estimates.csv")]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct BiasCheckArgs {
    /// JSON array or TOML `[[regimes]]` list of perturbations (default suite if absent).
    #[arg(long)]
    regimes: Option<PathBuf>,
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scenario: Option<u8>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long, default_value = "bias_report.csv")]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    scenario: Option<u8>,
    /// Comma-separated estimator names.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Comma-separated strata.
    #[arg(long, value_delimiter = ',')]
    strata: Vec<String>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    ns: Vec<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Record interval coverage at the five fixed interior points.
    #[arg(long)]
    coverage: bool,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    estimator: Option<EstimatorConfig>,
    bench: Option<BenchConfig>,
    sweep: Option<SweepConfig>,
}

#[derive(Debug, Deserialize)]
struct RegimeFile {
    regimes: Vec<Perturbation>,
}

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn parse<T: std::str::FromStr<Err = CpceError>>(s: &str) -> anyhow::Result<T> {
    s.parse::<T>().map_err(|e| usage(e.to_string()))
}

fn resolve_dgp(name: &str, scenario: Option<u8>) -> anyhow::Result<DgpKind> {
    let kind: DgpKind = parse(name)?;
    match (kind, scenario) {
        (DgpKind::Study1 { .. }, Some(k)) => DgpKind::study1(k).map_err(|e| usage(e.to_string())),
        (_, Some(_)) => Err(usage(format!("--scenario applies only to study1, not {kind}"))),
        (k, None) => Ok(k),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("malformed config {}: {e}", path.display())))
}

fn sidecar(out: &Path, json: &Option<PathBuf>) -> PathBuf {
    json.clone().unwrap_or_else(|| out.with_extension("json"))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, seed: u64) -> anyhow::Result<bool> {
    let kind = resolve_dgp(&a.dgp, a.scenario)?;
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    if a.noise_sd.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
        return Err(usage("--noise-sd must be a finite non-negative number"));
    }
    let spec = DgpSpec { kind, n: a.n, seed, noise_sd: a.noise_sd };
    let (data, _) = generate(&spec)?;
    let mut w = create(&a.out)?;
    data.write_csv(&mut w)?;
    w.flush()?;

    let truth_path = a.truth_out.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
        a.out.with_file_name(format!("{stem}_truth.csv"))
    });
    let mut tw = csv::Writer::from_writer(create(&truth_path)?);
    let mut header = data.x_names().to_vec();
    header.extend(
        ["pi", "p1", "p0", "mu00", "mu01", "mu10", "mu11", "tau00", "tau10", "tau11"].map(String::from),
    );
    tw.write_record(&header)?;
    for i in 0..data.n() {
        let x = data.row(i);
        let nv = kind.nuisances(&x);
        let mut rec: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
        for v in [nv.pi, nv.p1, nv.p0, nv.mu[0][0], nv.mu[0][1], nv.mu[1][0], nv.mu[1][1]] {
            rec.push(fmt_f64(v));
        }
        for u in Stratum::ALL {
            rec.push(fmt_f64(kind.tau(&x, u)));
        }
        tw.write_record(&rec)?;
    }
    tw.flush()?;

    write_json(
        &sidecar(&a.out, &a.json),
        &json!({
            "command": "simulate",
            "dgp": kind,
            "n": a.n,
            "seed": seed,
            "noise_sd": spec.noise(),
            "cell_counts": data.cell_counts(),
            "dataset": a.out,
            "truth": truth_path,
        }),
    )?;
    log::info!("wrote {} rows to {}", data.n(), a.out.display());
    Ok(true)
}

fn default_x_cols(input: &Path, a: &EstimateArgs) -> anyhow::Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let skip = [&a.y_col, &a.s_col, &a.z_col];
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).filter(|h| !skip.contains(&h)).collect())
}

fn read_grid(path: &Path, cols: &[String]) -> anyhow::Result<nalgebra::DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = cols
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c)
                .ok_or_else(|| usage(format!("grid file lacks column '{c}'")))
        })
        .collect::<anyhow::Result<_>>()?;
    let mut vals = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &k in &idx {
            let f = rec.get(k).unwrap_or("").trim();
            vals.push(f.parse::<f64>().map_err(|_| anyhow!("unparseable grid value '{f}' in row {r}"))?);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("grid file {} has no rows", path.display());
    }
    Ok(nalgebra::DMatrix::from_row_slice(rows, cols.len(), &vals))
}

fn apply_learner(cfg: &mut EstimatorConfig, l: LearnerArg) {
    let spec = match l {
        LearnerArg::Ols => SmootherSpec::OlsLinear,
        LearnerArg::NadarayaWatson => SmootherSpec::NadarayaWatson { bandwidth: Default::default() },
        LearnerArg::LocalLinear => SmootherSpec::LocalLinear { bandwidth: Default::default() },
        LearnerArg::Spline => {
            cfg.prob = ProbSpec::AdditiveSplineLogit(Default::default());
            SmootherSpec::AdditiveSpline(Default::default())
        }
    };
    cfg.outcome = spec.clone();
    cfg.second_stage = spec.clone();
    cfg.denominator = Some(spec);
}

fn cmd_estimate(a: &EstimateArgs, seed: u64, file: &FileConfig) -> anyhow::Result<bool> {
    let kind: EstimatorKind = parse(&a.estimator)?;
    let u: Stratum = parse(&a.stratum)?;
    let x_cols = if a.x_cols.is_empty() { default_x_cols(&a.input, a)? } else { a.x_cols.clone() };
    let spec = ColumnSpec { x_cols, y_col: a.y_col.clone(), s_col: a.s_col.clone(), z_col: a.z_col.clone() };
    let data = SampleTable::read_csv_path(&a.input, &spec)?;

    let mut cfg = file.estimator.clone().unwrap_or_default();
    cfg.seed = seed;
    cfg.hajek |= a.hajek;
    if let Some(l) = a.learner {
        apply_learner(&mut cfg, l);
    }
    if let Some(k) = a.k {
        cfg.folds = k;
    }
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if let Some(l) = a.level {
        cfg.level = l;
    }
    cfg.validate()?;
    let scheme = match a.folds {
        FoldArg::Kfold => FoldScheme::KFold(cfg.folds),
        FoldArg::Threeway => FoldScheme::ThreeWay,
    };
    if kind == EstimatorKind::TLearner && a.k.is_some() {
        log::warn!("the T-learner does not cross-fit; --k ignored");
    }
    let plan = make_fold_plan(data.n(), scheme, seed)?;
    let query = match &a.grid {
        Some(g) => read_grid(g, &spec.x_cols)?,
        None => data.x().clone(),
    };
    let ov = Overrides { plan: Some(&plan), ..Default::default() };
    let est = estimate(kind, &data, &cfg, &query, u, &ov)?;

    let mut w = create(&a.out)?;
    est.write_csv(&mut w)?;
    w.flush()?;
    let mut doc = est.to_json();
    doc["command"] = json!("estimate");
    doc["input"] = json!(a.input);
    doc["n"] = json!(data.n());
    doc["columns"] = serde_json::to_value(&spec)?;
    write_json(&sidecar(&a.out, &a.json), &doc)?;

    println!("estimator {kind}, stratum {u}, n = {}, {} query points", data.n(), est.tau_hat.len());
    let mean = est.tau_hat.iter().sum::<f64>() / est.tau_hat.len() as f64;
    println!("mean tau_hat = {mean:.6}");
    match est.meta.frac_ci_excludes_zero {
        Some(f) => println!("fraction of {:.0}% intervals excluding 0 = {f:.4}", 100.0 * est.level),
        None => println!("no confidence intervals for this configuration"),
    }
    Ok(true)
}

fn load_regimes(path: &Path) -> anyhow::Result<Vec<Perturbation>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading regimes {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str::<RegimeFile>(&text).map(|f| f.regimes).map_err(|e| e.to_string())
    } else {
        match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) if v.is_object() => serde_json::from_value::<RegimeFile>(v).map(|f| f.regimes).map_err(|e| e.to_string()),
            Ok(v) => serde_json::from_value::<Vec<Perturbation>>(v).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        }
    };
    let regimes = parsed.map_err(|e| usage(format!("malformed regimes file {}: {e}", path.display())))?;
    if regimes.is_empty() {
        return Err(usage(format!("regimes file {} lists no regimes", path.display())));
    }
    Ok(regimes)
}

fn cmd_bias_check(a: &BiasCheckArgs, seed: u64, file: &FileConfig) -> anyhow::Result<bool> {
    let mut cfg = file.sweep.clone().unwrap_or_default();
    cfg.seed = seed;
    if let Some(d) = &a.dgp {
        cfg.dgp = resolve_dgp(d, a.scenario)?;
    } else if let Some(k) = a.scenario {
        cfg.dgp = DgpKind::study1(k).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(path) = &a.regimes {
        cfg.regimes = load_regimes(path)?;
    }
    if let Some(n) = a.n_mc {
        cfg.n_mc = n;
    }
    let report = robustness_sweep(&cfg)?;
    let mut w = create(&a.out)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let ok = report.protected_ok();
    write_json(
        &sidecar(&a.out, &a.json),
        &json!({
            "command": "bias-check",
            "config": cfg,
            "protected_ok": ok,
            "agreement_ok": report.agreement_ok(),
            "perturbed_detected": report.perturbed_detected(),
            "report": a.out,
        }),
    )?;
    print!("{}", report.summary());
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn cmd_bench(a: &BenchArgs, seed: u64, file: &FileConfig) -> anyhow::Result<bool> {
    let mut cfg = file.bench.clone().unwrap_or_default();
    let from_file = file.bench.is_some();
    if let Some(d) = &a.dgp {
        cfg.dgp = resolve_dgp(d, a.scenario)?;
    } else if let Some(k) = a.scenario {
        cfg.dgp = DgpKind::study1(k).map_err(|e| usage(e.to_string()))?;
    }
    if !from_file || a.dgp.is_some() || a.scenario.is_some() {
        cfg.estimator = file.estimator.clone().unwrap_or_else(|| preset_for(cfg.dgp));
    }
    cfg.seed = seed;
    if !a.estimators.is_empty() {
        cfg.estimators = a.estimators.iter().map(|s| parse(s)).collect::<anyhow::Result<_>>()?;
    }
    if !a.strata.is_empty() {
        cfg.strata = a.strata.iter().map(|s| parse(s)).collect::<anyhow::Result<_>>()?;
    }
    if !a.ns.is_empty() {
        cfg.ns = a.ns.clone();
    }
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(g) = a.grid_size {
        cfg.grid_size = g;
    }
    if a.coverage {
        if cfg.dgp.p() != 4 {
            return Err(usage("--coverage uses four-dimensional points"));
        }
        cfg.coverage_points = cpce::sim::bench::coverage_points();
    }
    cfg.estimator.validate()?;
    let results = run_benchmark(&cfg)?;
    let mut w = create(&a.out)?;
    write_bench_csv(&results, cfg.coverage_points.len(), &mut w)?;
    w.flush()?;
    write_json(&sidecar(&a.out, &a.json), &bench_summary_json(&cfg, &results))?;
    println!("{:<10} {:>7} {:>7} {:>12} {:>10} {:>8}", "estimator", "stratum", "n", "mean_rmse", "sd_rmse", "failed");
    for r in &results {
        println!(
            "{:<10} {:>7} {:>7} {:>12.6} {:>10.6} {:>8}",
            r.estimator.to_string(),
            r.stratum.to_string(),
            r.n,
            r.mean_rmse,
            r.sd_rmse(),
            r.failures()
        );
    }
    let failed: usize = results.iter().map(|r| r.failures()).sum();
    if failed > 0 {
        log::warn!("{failed} replications failed; see the error column of {}", a.out.display());
    }
    Ok(true)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    let file = load_config(cli.config.as_deref())?;
    let seed = cli
        .seed
        .or(file.seed)
        .ok_or_else(|| usage("a seed is required: pass --seed, set CPCE_SEED or put `seed` in the config file"))?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, seed),
        Command::Estimate(a) => cmd_estimate(a, seed, &file),
        Command::BiasCheck(a) => cmd_bias_check(a, seed, &file),
        Command::Bench(a) => cmd_bench(a, seed, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<CpceError>(), Some(CpceError::Config(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}
