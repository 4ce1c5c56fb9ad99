use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperlab_core::gradcheck;
use hyperlab_core::plotdata;
use hyperlab_core::scalefit::{self, PowerFit, QuadFit, SweepPoint};
use hyperlab_core::theoremlab::{self, Budget};
use hyperlab_core::train::{self, write_atomic, RunConfig, SweepResult};
use hyperlab_core::{Error, Scheme};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hyperlab", version, about = "Hypersphere optimization experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for logs, summaries and sweep tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the parameterization scheme: mup, muppp or hyperp.
    #[arg(long)]
    scheme: Option<Scheme>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and print its summary.
    Train(RunArgs),
    /// Train once per base learning rate and fit the optimum.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated base learning rates.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Quadratic fit of a sweep CSV (lr,loss), or a power law of a table CSV (x,y).
    Fit {
        input: PathBuf,
        #[arg(long)]
        power: bool,
        /// Fit an irreducible floor (power law only).
        #[arg(long)]
        floor: bool,
    },
    /// Compute efficiency leverage of one (FLOPs, loss) point against a baseline table.
    Cel {
        baseline: PathBuf,
        #[arg(long)]
        flops: f64,
        #[arg(long)]
        loss: f64,
        #[arg(long)]
        floor: bool,
    },
    /// Parameter count and training FLOPs of a configuration.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Training tokens; defaults to the config's budget.
        #[arg(long)]
        tokens: Option<f64>,
    },
    /// Subset sensitivity of a sweep CSV.
    Sensitivity {
        input: PathBuf,
        /// Subset size; every size from 3 to n when omitted.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Leave-one-out error of the floorless power law on a table CSV.
    Loo { input: PathBuf },
    /// Run the theorem checks and finite-difference gradient checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reduced trial counts.
        #[arg(long)]
        quick: bool,
    },
    /// Emit plot-ready CSV.
    Plotdata {
        #[command(subcommand)]
        kind: PlotKind,
    },
}

#[derive(Subcommand)]
enum PlotKind {
    /// Loss against learning rate from sweep output directories.
    Lr {
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss against FLOPs from table CSVs, with fitted power laws.
    Flops {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        #[arg(long)]
        floor: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leverage against FLOPs for each table, relative to a baseline table.
    Cel {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        #[arg(long)]
        floor: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit 2 for unusable inputs, 1 for fits and checks that ran but failed.
enum Failure {
    Config(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io(_) | Error::Serialize(_) => Failure::Config(e.to_string()),
            _ => Failure::Failed(e.to_string()),
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(format!("csv: {e}"))
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn say(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let s = serde_json::to_string_pretty(value).map_err(|e| Failure::Config(e.to_string()))?;
    say(&(s + "\n"))
}

fn emit(text: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_atomic(p, text.as_bytes())?;
        }
        None => say(text)?,
    }
    Ok(())
}

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(scheme) = args.scheme {
        cfg.model.scheme = scheme;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// First two columns of a headed CSV as numbers.
fn read_pairs(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> CliResult<f64> {
            rec.get(j)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Failure::Config(format!("{}: row {} column {} is not a number", path.display(), i + 1, j + 1)))
        };
        out.push((field(0)?, field(1)?));
    }
    if out.is_empty() {
        return Err(Failure::Config(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

/// Sweep CSV rows with a loss; rows whose `status` column is not `ok` are skipped.
fn read_sweep(path: &Path) -> CliResult<Vec<SweepPoint>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str, default: usize| headers.iter().position(|h| h.trim() == name).unwrap_or(default);
    let (lr_col, loss_col) = (col("lr", 0), col("loss", 1));
    let status_col = headers.iter().position(|h| h.trim() == "status");
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if let Some(s) = status_col.and_then(|c| rec.get(c)) {
            if s.trim() != "ok" {
                eprintln!("warning: skipping sweep row with status {s:?}");
                continue;
            }
        }
        let num = |c: usize| rec.get(c).and_then(|v| v.trim().parse::<f64>().ok());
        match (num(lr_col), num(loss_col)) {
            (Some(lr), Some(loss)) => out.push(SweepPoint::new(lr, loss)),
            _ => return Err(Failure::Config(format!("{}: malformed sweep row {:?}", path.display(), rec))),
        }
    }
    Ok(out)
}

fn label(path: &Path) -> String {
    let stem = path.file_stem().or_else(|| path.file_name()).map(|s| s.to_string_lossy().into_owned());
    stem.unwrap_or_else(|| "series".into()).replace([',', '"'], "_")
}

fn fit_table(path: &Path, floor: bool) -> CliResult<(Vec<(f64, f64)>, PowerFit)> {
    let pts = read_pairs(path)?;
    let fit = scalefit::fit_power_law(&pts, floor)?;
    Ok((pts, fit))
}

fn cmd_train(args: RunArgs) -> CliResult {
    let cfg = load_config(&args)?;
    let out = train::train(&cfg)?;
    print_json(&out.summary)
}

fn cmd_sweep(args: RunArgs, grid: Vec<f64>) -> CliResult {
    let cfg = load_config(&args)?;
    let res: SweepResult = train::sweep(&cfg, &grid)?;
    for o in res.outcomes.iter().filter(|o| o.loss.is_none()) {
        eprintln!("warning: lr {} excluded from fit: {}", o.lr, o.status);
    }
    say(&res.to_csv())?;
    match (&res.fit, &res.fit_error) {
        (Some(fit), _) => print_json(fit),
        (None, err) => Err(Failure::Failed(format!(
            "sweep fit failed: {}",
            err.as_deref().unwrap_or("no fit")
        ))),
    }
}

fn cmd_fit(input: &Path, power: bool, floor: bool) -> CliResult {
    if power {
        let (_, fit) = fit_table(input, floor)?;
        print_json(&fit)
    } else {
        if floor {
            return Err(Failure::Config("--floor applies to power-law fits; add --power".into()));
        }
        let fit: QuadFit = scalefit::fit_quadratic_loglr(&read_sweep(input)?)?;
        print_json(&fit)
    }
}

#[derive(Serialize)]
struct CelOutput {
    baseline: PowerFit,
    flops: f64,
    loss: f64,
    cel: f64,
}

fn cmd_cel(baseline: &Path, flops: f64, loss: f64, floor: bool) -> CliResult {
    let (_, fit) = fit_table(baseline, floor)?;
    let cel = scalefit::cel(&fit, flops, loss)?;
    print_json(&CelOutput {
        baseline: fit,
        flops,
        loss,
        cel,
    })
}

#[derive(Serialize)]
struct FlopsOutput {
    depth: usize,
    width: usize,
    vocab: usize,
    context: usize,
    tokens: f64,
    params: scalefit::ParamCount,
    flops: f64,
    note: String,
}

fn cmd_flops(config: &Path, tokens: Option<f64>) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let model = cfg.resolved_model();
    let tokens = tokens.unwrap_or(cfg.tokens as f64);
    let params = scalefit::param_count(&model)?;
    let flops = scalefit::chinchilla_flops(&model, tokens, model.context)?;
    print_json(&FlopsOutput {
        depth: model.depth,
        width: model.width(),
        vocab: model.vocab,
        context: model.context,
        tokens,
        params,
        flops,
        note: format!("embedding and unembedding counted at vocabulary size {}", model.vocab),
    })
}

fn cmd_sensitivity(input: &Path, k: Option<usize>) -> CliResult {
    let pts = read_sweep(input)?;
    let ks: Vec<usize> = match k {
        Some(k) => vec![k],
        None => (3..=pts.len()).collect(),
    };
    let rows = ks
        .into_iter()
        .map(|k| scalefit::sensitivity(&pts, k))
        .collect::<hyperlab_core::Result<Vec<_>>>()?;
    print_json(&rows)
}

fn cmd_loo(input: &Path) -> CliResult {
    let err = scalefit::loo_cv_power(&read_pairs(input)?)?;
    print_json(&serde_json::json!({ "loo_mean_abs_rel_err_pct": err }))
}

fn cmd_verify(seed: u64, out: Option<&Path>, quick: bool) -> CliResult {
    let budget = if quick { Budget::QUICK } else { Budget::FULL };
    let reports = theoremlab::run_all(seed, budget)?;
    say(&theoremlab::summary_table(&reports))?;
    let grads = gradcheck::check_all(if quick { 5 } else { 20 }, seed)?;
    let mut grads_ok = true;
    for g in &grads {
        let pass = g.max_rel_err < 1e-5;
        grads_ok &= pass;
        say(&format!(
            "{:<30} {:>8} {:>14.6e} <={:>10.3e}  {}\n",
            format!("grad:{}", g.primitive),
            g.instances,
            g.max_rel_err,
            1e-5,
            if pass { "PASS" } else { "FAIL" }
        ))?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let body = serde_json::to_string_pretty(&serde_json::json!({ "theorems": reports, "gradients": grads }))
            .map_err(|e| Failure::Config(e.to_string()))?;
        write_atomic(&dir.join("verify.json"), body.as_bytes())?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count() + usize::from(!grads_ok);
    if failed > 0 {
        return Err(Failure::Failed(format!("{failed} verification check(s) failed")));
    }
    Ok(())
}

fn cmd_plot(kind: PlotKind) -> CliResult {
    match kind {
        PlotKind::Lr { sweeps, out } => {
            let mut loaded = Vec::new();
            for dir in &sweeps {
                let pts = read_sweep(&dir.join("sweep.csv"))?;
                let fit_path = dir.join("sweep_fit.json");
                let fit = if fit_path.exists() {
                    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fit_path)?)
                        .map_err(|e| Failure::Config(format!("{}: {e}", fit_path.display())))?;
                    v.get("fit").cloned().and_then(|f| serde_json::from_value::<QuadFit>(f).ok())
                } else {
                    None
                };
                loaded.push((label(dir), pts, fit));
            }
            let series: Vec<(&str, &[SweepPoint], Option<&QuadFit>)> =
                loaded.iter().map(|(l, p, f)| (l.as_str(), p.as_slice(), f.as_ref())).collect();
            emit(&plotdata::loss_vs_lr(&series)?, out.as_deref())
        }
        PlotKind::Flops { tables, floor, out } => {
            let mut loaded = Vec::new();
            for t in &tables {
                let (pts, fit) = fit_table(t, floor)?;
                loaded.push((label(t), pts, fit));
            }
            let series: Vec<(&str, &[(f64, f64)], Option<&PowerFit>)> =
                loaded.iter().map(|(l, p, f)| (l.as_str(), p.as_slice(), Some(f))).collect();
            emit(&plotdata::loss_vs_flops(&series)?, out.as_deref())
        }
        PlotKind::Cel {
            baseline,
            tables,
            floor,
            out,
        } => {
            let (_, base) = fit_table(&baseline, floor)?;
            let mut loaded = Vec::new();
            for t in &tables {
                loaded.push((label(t), read_pairs(t)?));
            }
            let series: Vec<(&str, &[(f64, f64)])> = loaded.iter().map(|(l, p)| (l.as_str(), p.as_slice())).collect();
            emit(&plotdata::cel_vs_flops(&base, &series)?, out.as_deref())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep { run, grid } => cmd_sweep(run, grid),
        Command::Fit { input, power, floor } => cmd_fit(&input, power, floor),
        Command::Cel {
            baseline,
            flops,
            loss,
            floor,
        } => cmd_cel(&baseline, flops, loss, floor),
        Command::Flops { config, tokens } => cmd_flops(&config, tokens),
        Command::Sensitivity { input, k } => cmd_sensitivity(&input, k),
        Command::Loo { input } => cmd_loo(&input),
        Command::Verify { seed, out, quick } => cmd_verify(seed, out.as_deref(), quick),
        Command::Plotdata { kind } => cmd_plot(kind),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
