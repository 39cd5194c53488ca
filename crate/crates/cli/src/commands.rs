use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use wda_core::balancing::{self, BalancingConfig, KernelMatrix};
use wda_core::data::{self, LabelColumn, LabeledDataset, SplitSpec, Standardization};
use wda_core::eval::{self, BenchSettings, ScalingAxis};
use wda_core::traceratio::{self, Projection};
use wda_core::wda::{self, WdaConfig};

use crate::error::{CliError, CliResult, EXIT_NOT_CONVERGED};
use crate::output::{self, emit, report_json, write_atomic};
use crate::{
    Algorithm, BalanceArgs, BenchArgs, Builtin, Cli, Command, DataArgs, EvalArgs, FitArgs, Format, ModelArgs,
    TransformArgs, TroptArgs,
};

/// Contents of a `--config` file. Every section is optional; command-line
/// flags override the values read here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    wda: Option<WdaConfig>,
    split: Option<SplitSpec>,
    balancing: Option<BalancingConfig>,
}

fn read_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::from(e).context(path.display()))
}

/// Where a command's data came from, as recorded in reports.
#[derive(Debug, Serialize)]
#[serde(tag = "source", rename_all = "lowercase")]
enum DataSource {
    Csv { path: PathBuf, label_column: LabelColumn },
    Synthetic { d: usize, counts: [usize; 3], seed: u64 },
}

fn counts3(counts: &[usize]) -> CliResult<[usize; 3]> {
    counts
        .try_into()
        .map_err(|_| CliError::validation(format!("--counts needs three class sizes (got {counts:?})")))
}

fn load_data(args: &DataArgs) -> CliResult<(LabeledDataset, DataSource)> {
    match &args.data {
        Some(path) => {
            let data =
                data::load_csv(path, args.label_column).map_err(|e| CliError::from(e).context(path.display()))?;
            let source = DataSource::Csv {
                path: path.clone(),
                label_column: args.label_column,
            };
            Ok((data, source))
        }
        None => {
            let counts = counts3(&args.counts)?;
            let data = data::make_synthetic(args.dim, counts, args.data_seed)?;
            let source = DataSource::Synthetic {
                d: args.dim,
                counts,
                seed: args.data_seed,
            };
            Ok((data, source))
        }
    }
}

fn resolve_wda(args: &ModelArgs, file: &FileConfig) -> CliResult<WdaConfig> {
    let mut cfg = file.wda.unwrap_or_default();
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.p {
        cfg.p = v;
    }
    if let Some(v) = args.tol {
        cfg.tol = v;
    }
    if let Some(v) = args.max_outer_iter {
        cfg.max_outer_iter = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.init {
        cfg.init = v.into();
    }
    if args.ridge {
        cfg.epsilon = 1.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_threads(threads: Option<usize>) -> CliResult<usize> {
    match threads {
        Some(0) => Err(CliError::validation("--threads must be at least 1")),
        Some(n) => {
            if n > 1 {
                log::info!("computations run on one thread; --threads {n} is recorded only");
            }
            Ok(n)
        }
        None => Ok(1),
    }
}

/// JSON report, or for `Format::Csv` a `#`-prefixed JSON line carrying the
/// tool, version and config followed by the CSV rows.
fn render<C: Serialize, R: Serialize>(
    format: Format,
    command: &str,
    config: &C,
    result: &R,
    csv: impl FnOnce() -> CliResult<Vec<u8>>,
) -> CliResult<Vec<u8>> {
    match format {
        Format::Json => report_json(command, config, result),
        Format::Csv => {
            let meta = serde_json::json!({
                "tool": output::TOOL,
                "version": output::VERSION,
                "command": command,
                "config": config,
            });
            let mut bytes = format!("# {meta}\n").into_bytes();
            bytes.extend(csv()?);
            Ok(bytes)
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<u8> {
    let threads = resolve_threads(cli.threads)?;
    match &cli.command {
        Command::Balance(a) => balance(a, threads),
        Command::Fit(a) => fit(a, threads),
        Command::Transform(a) => transform(a),
        Command::Eval(a) => evaluate(a, threads),
        Command::Bench(a) => bench(a, threads),
        Command::Tropt(a) => tropt(a, threads),
    }
}

fn exit_for(converged: bool) -> u8 {
    if converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    }
}

#[derive(Serialize)]
struct BalanceConfigOut<'a> {
    kernel: String,
    algorithm: &'a str,
    balancing: BalancingConfig,
    threads: usize,
}

#[derive(Serialize)]
struct BalanceResult {
    converged: bool,
    iterations: usize,
    /// Successive-iterate distances, one per iteration.
    history: Vec<f64>,
    distance: f64,
    residual: f64,
    total_mass: f64,
    matvecs: usize,
    eig_failures: usize,
    clamped_entries: usize,
    /// Plan rows, when requested.
    plan: Option<Vec<Vec<f64>>>,
}

fn balance(args: &BalanceArgs, threads: usize) -> CliResult<u8> {
    let file = read_config(args.config.as_deref())?;
    let mut cfg = file.balancing.unwrap_or_default();
    if let Some(t) = args.tol {
        cfg.tol = t;
        cfg.eig_tol = 1e-2 * t;
    }
    if let Some(m) = args.max_iter {
        cfg.max_iter = m;
    }
    cfg.validate()?;

    let (kernel, name) = match (&args.kernel, args.builtin) {
        (Some(path), _) => {
            let file = std::fs::File::open(path).map_err(|e| CliError::from(e).context(path.display()))?;
            let entries = data::read_matrix_csv(file).map_err(|e| CliError::from(e).context(path.display()))?;
            (KernelMatrix::from_entries(entries)?, path.display().to_string())
        }
        (None, Some(Builtin::K1)) => (
            balancing::stress_kernel(2, args.eps)?,
            format!("builtin:k1 (eps {})", args.eps),
        ),
        (None, Some(Builtin::K2)) => (
            balancing::stress_kernel(3, args.eps)?,
            format!("builtin:k2 (eps {})", args.eps),
        ),
        (None, Some(Builtin::Uniform)) => {
            if args.size == 0 {
                return Err(CliError::validation("--size must be at least 1"));
            }
            (
                KernelMatrix::from_entries(Array2::ones((args.size, args.size)))?,
                format!("builtin:uniform ({0}×{0})", args.size),
            )
        }
        (None, None) => return Err(CliError::validation("give --kernel or --builtin")),
    };

    let (report, algorithm) = match args.alg {
        Algorithm::Sk => (balancing::sk_iterate(&kernel, &cfg)?, "sk"),
        Algorithm::Accsk => (balancing::acc_sk(&kernel, &cfg, None)?, "accsk"),
    };
    let plan = balancing::assemble_plan(&kernel, &report.scaling)?;
    let result = BalanceResult {
        converged: report.converged,
        iterations: report.iterations,
        history: report.history,
        distance: report.distance,
        residual: plan.residual,
        total_mass: plan.total_mass(),
        matvecs: report.matvecs,
        eig_failures: report.eig_failures,
        clamped_entries: kernel.clamped_entries(),
        plan: args
            .plan
            .then(|| plan.entries.rows().into_iter().map(|r| r.to_vec()).collect()),
    };
    let config = BalanceConfigOut {
        kernel: name,
        algorithm,
        balancing: cfg,
        threads,
    };
    emit(args.out.as_deref(), &report_json("balance", &config, &result)?)?;
    Ok(exit_for(result.converged))
}

#[derive(Serialize)]
struct FitConfigOut<'a> {
    data: &'a DataSource,
    standardize: bool,
    wda: &'a WdaConfig,
    threads: usize,
}

#[derive(Serialize)]
struct FitResult<'a> {
    converged: bool,
    iterations: usize,
    objective: f64,
    nepv_residual: f64,
    cb_norm: f64,
    d: usize,
    p: usize,
    projection_file: &'a Path,
    labels: Vec<&'a str>,
    standardization: Option<&'a Standardization>,
    trace: &'a wda::ConvergenceTrace,
}

fn fit(args: &FitArgs, threads: usize) -> CliResult<u8> {
    let file = read_config(args.model.config.as_deref())?;
    let cfg = resolve_wda(&args.model, &file)?;
    let (raw, source) = load_data(&args.data)?;
    let data = if args.no_standardize {
        raw
    } else {
        data::standardize(&raw)?
    };
    let fitted = wda::fit(&data, &cfg, None)?;

    write_atomic(&args.out, output::format_projection(&fitted.projection).as_bytes())?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.trace.json", args.out.display())));
    let config = FitConfigOut {
        data: &source,
        standardize: !args.no_standardize,
        wda: &cfg,
        threads,
    };
    let result = FitResult {
        converged: fitted.converged,
        iterations: fitted.iterations,
        objective: fitted.objective,
        nepv_residual: fitted.nepv_residual,
        cb_norm: fitted.cb_norm,
        d: data.dim(),
        p: cfg.p,
        projection_file: &args.out,
        labels: data.labels(),
        standardization: data.standardization(),
        trace: &fitted.trace,
    };
    write_atomic(&report_path, &report_json("fit", &config, &result)?)?;
    if !fitted.converged {
        log::warn!(
            "fit stopped after {} outer iterations without converging",
            fitted.iterations
        );
    }
    Ok(exit_for(fitted.converged))
}

fn standardization_from_report(path: &Path) -> CliResult<Standardization> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::from(e).context(path.display()))?;
    let stats = value
        .pointer("/result/standardization")
        .filter(|v| !v.is_null())
        .ok_or_else(|| CliError::validation(format!("{}: no standardization recorded", path.display())))?;
    serde_json::from_value(stats.clone()).map_err(|e| CliError::from(e).context(path.display()))
}

fn transform(args: &TransformArgs) -> CliResult<u8> {
    let proj = output::read_projection(&args.projection)?;
    let (raw, _) = load_data(&args.data)?;
    let data = match (&args.fit_report, args.no_standardize) {
        (Some(path), _) => standardization_from_report(path)?.apply(&raw)?,
        (None, true) => raw,
        (None, false) => data::standardize(&raw)?,
    };
    let projected = data
        .classes()
        .iter()
        .map(|c| Ok((c.label.clone(), wda::transform(&proj, &c.points.view())?)))
        .collect::<CliResult<Vec<_>>>()?;
    let projected = LabeledDataset::new(projected)?;
    let mut bytes = Vec::new();
    data::write_csv_to(&projected, &mut bytes)?;
    emit(args.out.as_deref(), &bytes)?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalConfigOut<'a> {
    data: &'a DataSource,
    wda: &'a WdaConfig,
    split: &'a SplitSpec,
    k: usize,
    repeats: usize,
    threads: usize,
}

fn evaluate(args: &EvalArgs, threads: usize) -> CliResult<u8> {
    let file = read_config(args.model.config.as_deref())?;
    let cfg = resolve_wda(&args.model, &file)?;
    let mut split = file.split.unwrap_or_default();
    if let Some(f) = args.train_fraction {
        split.train_fraction = f;
    }
    if let Some(s) = args.split_seed {
        split.seed = s;
    }
    split.validate()?;
    if args.k == 0 {
        return Err(CliError::validation("--K must be at least 1"));
    }
    let (data, source) = load_data(&args.data)?;
    let report = eval::evaluate(&data, &cfg, &split, args.k, args.repeats)?;
    let config = EvalConfigOut {
        data: &source,
        wda: &cfg,
        split: &split,
        k: args.k,
        repeats: args.repeats,
        threads,
    };
    let bytes = render(args.format, "eval", &config, &report, || {
        let mut s = String::from("repeat,error,baseline_error\n");
        for (r, (e, b)) in report.per_repeat_errors.iter().zip(&report.baseline_errors).enumerate() {
            s.push_str(&format!("{r},{e},{b}\n"));
        }
        Ok(s.into_bytes())
    })?;
    emit(args.out.as_deref(), &bytes)?;
    Ok(0)
}

#[derive(Serialize)]
struct BenchConfigOut<'a> {
    axis: ScalingAxis,
    grid: &'a [usize],
    settings: &'a BenchSettings,
    threads: usize,
}

fn bench(args: &BenchArgs, threads: usize) -> CliResult<u8> {
    let file = read_config(args.model.config.as_deref())?;
    let mut cfg = resolve_wda(&args.model, &file)?;
    match args.epsilon {
        Some(e) => cfg.epsilon = e,
        // d > n leaves the within-class matrix singular without a ridge
        None if args.axis == ScalingAxis::D && cfg.epsilon == 0.0 => cfg.epsilon = 1.0,
        None => {}
    }
    cfg.validate()?;
    let settings = BenchSettings {
        cfg,
        d: args.dim,
        counts: counts3(&args.counts)?,
        data_seed: args.data_seed,
        repeats: args.repeats,
    };
    let table = eval::bench_scaling(args.axis, &args.grid, &settings)?;
    let config = BenchConfigOut {
        axis: args.axis,
        grid: &args.grid,
        settings: &settings,
        threads,
    };
    let bytes = render(args.format, "bench", &config, &table, || {
        let mut s = String::from("value,mean_wall_time,mean_outer_iterations\n");
        for row in &table.rows {
            s.push_str(&format!(
                "{},{},{}\n",
                row.value, row.mean_wall_time, row.mean_outer_iterations
            ));
        }
        Ok(s.into_bytes())
    })?;
    emit(args.out.as_deref(), &bytes)?;
    Ok(0)
}

#[derive(Serialize)]
struct TroptConfigOut<'a> {
    a: &'a Path,
    b: &'a Path,
    p: usize,
    tol: f64,
    max_iter: usize,
    p0: Option<&'a Path>,
    seed: u64,
    threads: usize,
}

fn read_matrix(path: &Path) -> CliResult<Array2<f64>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::from(e).context(path.display()))?;
    data::read_matrix_csv(file).map_err(|e| CliError::from(e).context(path.display()))
}

fn tropt(args: &TroptArgs, threads: usize) -> CliResult<u8> {
    let a = read_matrix(&args.a)?;
    let b = read_matrix(&args.b)?;
    let p0 = match &args.p0 {
        Some(path) => output::read_projection(path)?,
        None => Projection::seeded(a.nrows(), args.p, args.seed)?,
    };
    let res = traceratio::tropt_scf(&a.view(), &b.view(), args.p, &p0, args.tol, args.max_iter)?;
    if let Some(path) = &args.projection {
        write_atomic(path, output::format_projection(&res.projection).as_bytes())?;
    }
    let config = TroptConfigOut {
        a: &args.a,
        b: &args.b,
        p: args.p,
        tol: args.tol,
        max_iter: args.max_iter,
        p0: args.p0.as_deref(),
        seed: args.seed,
        threads,
    };
    emit(args.out.as_deref(), &report_json("tropt", &config, &res)?)?;
    Ok(exit_for(res.converged))
}
