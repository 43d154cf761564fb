//! Command-line interface: fit CSV datasets, run simulation studies, emit
//! polytope vertices and plot-ready curve files.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure.

mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pqps::fit::{fit_dataset, FitConfig};
use pqps::model::RandomEffects;
use pqps::simharness::{generate, replicate_rng, run_study, StudyConfig};
use pqps::spline::KnotVector;
use pqps::{Dataset, Design, DesignSpec};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<pqps::Error> for CliError {
    fn from(e: pqps::Error) -> Self {
        match e {
            pqps::Error::InvalidInput(m) => CliError::Input(m),
            pqps::Error::Numerical(m) => CliError::Numerical(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pqps",
    about = "Simultaneous non-crossing Bayesian quantile curve estimation with penalised splines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit quantile curves to a CSV dataset (header `x,y`).
    Fit(FitArgs),
    /// Draw a dataset from one of the benchmark designs.
    Simulate(SimulateArgs),
    /// Run a replicate study on a benchmark design and report RMISE/coverage.
    Study(StudyArgs),
    /// Emit the enclosing-polytope vertices for a knot configuration.
    Vertices(VerticesArgs),
}

/// Sampler/model options shared by `fit` and `study`. Flags override the
/// config file, which overrides the defaults.
#[derive(Args, Debug, Clone)]
struct ModelOpts {
    /// JSON config file mirroring the fit configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated quantile levels in (0,1), strictly increasing.
    #[arg(long)]
    levels: Option<String>,
    /// Interior knots of the quantile/mean splines.
    #[arg(long)]
    knots: Option<usize>,
    /// Interior knots of the sd spline.
    #[arg(long = "sd-knots")]
    sd_knots: Option<usize>,
    /// Random-effect family: normal or cauchy.
    #[arg(long = "re-family")]
    re_family: Option<String>,
    /// Stage-1 (single-site) sweeps.
    #[arg(long)]
    iters1: Option<usize>,
    /// Stage-2 (block) iterations.
    #[arg(long)]
    iters2: Option<usize>,
    /// Thinning interval for retained draws.
    #[arg(long)]
    thin: Option<usize>,
    /// Stage-2 burn-in (adaptation freezes here).
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output grid size for curve summaries.
    #[arg(long)]
    grid: Option<usize>,
    /// Emit key=value progress lines on stderr.
    #[arg(long, default_value_t = false)]
    progress: bool,
}

impl ModelOpts {
    fn build(&self, default_levels: &[f64]) -> Result<FitConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str::<FitConfig>(&text).map_err(|e| {
                    CliError::Input(format!("{}: invalid config: {e}", path.display()))
                })?
            }
            None => FitConfig {
                levels: default_levels.to_vec(),
                ..FitConfig::default()
            },
        };
        if let Some(levels) = &self.levels {
            cfg.levels = parse_float_list(levels)?;
        }
        if let Some(k) = self.knots {
            cfg.knots = k;
        }
        if let Some(r) = self.sd_knots {
            cfg.sd_knots = r;
        }
        if let Some(f) = &self.re_family {
            cfg.re_family = match f.to_ascii_lowercase().as_str() {
                "normal" => RandomEffects::Normal,
                "cauchy" => RandomEffects::Cauchy,
                other => {
                    return Err(CliError::Input(format!(
                        "unknown random-effect family '{other}' (expected normal|cauchy)"
                    )))
                }
            };
        }
        if let Some(v) = self.iters1 {
            cfg.iters1 = v;
        }
        if let Some(v) = self.iters2 {
            cfg.iters2 = v;
        }
        if let Some(v) = self.thin {
            cfg.thin = v;
        }
        if let Some(v) = self.burnin {
            cfg.burnin = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.grid {
            cfg.grid = v;
        }
        cfg.progress = cfg.progress || self.progress;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FitArgs {
    /// CSV file with header `x,y`.
    data: PathBuf,
    /// Output directory for curves.csv and summary.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct SimulateArgs {
    /// Benchmark design 1..=4.
    #[arg(long)]
    design: u32,
    /// Sample size.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Levels written to truth.csv.
    #[arg(long)]
    levels: Option<String>,
    /// Output directory for data.csv, truth.csv and meta.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// Benchmark design 1..=4.
    #[arg(long)]
    design: u32,
    #[arg(long)]
    replicates: usize,
    /// Sample size per replicate.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Report CSV path.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Optional per-replicate metrics CSV.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct VerticesArgs {
    /// Number of interior knots (evenly spaced unless --interior is given).
    #[arg(long, default_value_t = 0)]
    knots: usize,
    /// Explicit interior knots, comma separated, strictly increasing in (0,1).
    #[arg(long)]
    interior: Option<String>,
    /// Output CSV path.
    #[arg(long, default_value = "vertices.csv")]
    out: PathBuf,
}

fn parse_float_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("cannot parse '{s}' as a number")))
        })
        .collect()
}

#[derive(Serialize)]
struct AcceptanceSummary {
    mean: f64,
    min: f64,
    max: f64,
}

impl AcceptanceSummary {
    fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return AcceptanceSummary {
                mean: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        AcceptanceSummary {
            mean: finite.iter().sum::<f64>() / finite.len() as f64,
            min: finite.iter().cloned().fold(f64::INFINITY, f64::min),
            max: finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Serialize)]
struct EssSummary {
    min: f64,
    median: f64,
    max: f64,
}

#[derive(Serialize)]
struct XMap {
    lo: f64,
    hi: f64,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    command: &'a str,
    config: &'a FitConfig,
    n: usize,
    x_map: XMap,
    stage1_acceptance: AcceptanceSummary,
    stage2_acceptance: AcceptanceSummary,
    blocks: usize,
    ess: EssSummary,
    vertex_basis_condition: f64,
    sd_vertex_basis_condition: f64,
    zero_width_bins: u64,
    warnings: &'a [String],
    runtime_seconds: f64,
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let cfg = args.model.build(&FitConfig::default().levels)?;
    let (x, y) = io::read_xy_csv(&args.data)?;
    let data = Dataset::from_raw(&x, &y)?;
    let mut rng = replicate_rng(cfg.seed, 0);
    let fit = fit_dataset(&data, &cfg, &mut rng)?;

    let curves = io::curves_csv(&fit.grid_original, &cfg.levels, &fit.grid_summary);
    io::write_file(&args.out.join("curves.csv"), &curves)?;

    let mut ess = fit.chain.ess.clone();
    ess.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let summary = FitSummary {
        command: "fit",
        config: &cfg,
        n: data.n(),
        x_map: XMap {
            lo: data.map().lo,
            hi: data.map().hi,
        },
        stage1_acceptance: AcceptanceSummary::of(&fit.stage1_acceptance),
        stage2_acceptance: AcceptanceSummary::of(&fit.chain.block_acceptance),
        blocks: fit.blocks,
        ess: EssSummary {
            min: ess.first().copied().unwrap_or(f64::NAN),
            median: ess.get(ess.len() / 2).copied().unwrap_or(f64::NAN),
            max: ess.last().copied().unwrap_or(f64::NAN),
        },
        vertex_basis_condition: fit.geometry.polytope.condition(),
        sd_vertex_basis_condition: fit.geometry.sd_polytope.condition(),
        zero_width_bins: fit.chain.zero_width_bins,
        warnings: &fit.warnings,
        runtime_seconds: fit.runtime_seconds,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Numerical(format!("summary serialisation failed: {e}")))?;
    io::write_file(&args.out.join("summary.json"), &json)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateMeta {
    command: &'static str,
    design: u32,
    n: usize,
    seed: u64,
    recommended_re_family: RandomEffects,
    levels: Vec<f64>,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let design = Design::from_id(args.design)?;
    let spec = DesignSpec::new(design, args.n)?;
    let levels = match &args.levels {
        Some(text) => parse_float_list(text)?,
        None => vec![0.5, 0.7, 0.9, 0.95, 0.99],
    };
    let mut rng = replicate_rng(args.seed, 0);
    let data = generate(spec, &mut rng)?;
    let x_original: Vec<f64> = data
        .x_unit()
        .iter()
        .map(|&u| data.map().from_unit(u))
        .collect();

    io::write_file(
        &args.out.join("data.csv"),
        &io::xy_csv(&x_original, data.y()),
    )?;
    io::write_file(
        &args.out.join("truth.csv"),
        &io::truth_csv(&x_original, &levels, design),
    )?;
    let meta = SimulateMeta {
        command: "simulate",
        design: args.design,
        n: args.n,
        seed: args.seed,
        recommended_re_family: design.recommended_family(),
        levels,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::Numerical(format!("meta serialisation failed: {e}")))?;
    io::write_file(&args.out.join("meta.json"), &json)?;
    Ok(())
}

fn cmd_study(args: &StudyArgs) -> Result<(), CliError> {
    let design = Design::from_id(args.design)?;
    let mut fit = args.model.build(&[0.5, 0.7, 0.9, 0.95, 0.99])?;
    if args.model.re_family.is_none() && args.model.config.is_none() {
        fit.re_family = design.recommended_family();
    }
    let cfg = StudyConfig {
        spec: DesignSpec::new(design, args.n)?,
        replicates: args.replicates,
        fit,
    };
    let report = run_study(&cfg)?;
    io::write_file(&args.out, &report.to_csv())?;
    if let Some(raw) = &args.raw {
        io::write_file(raw, &report.raw_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_vertices(args: &VerticesArgs) -> Result<(), CliError> {
    let knots = match &args.interior {
        Some(text) => KnotVector::from_interior(parse_float_list(text)?)?,
        None => KnotVector::uniform(args.knots),
    };
    let vertices = pqps::polytope::proposition_vertices(&knots)?;
    io::write_file(&args.out, &io::vertices_csv(&vertices))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Study(args) => cmd_study(args),
        Command::Vertices(args) => cmd_vertices(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Input(_) => ExitCode::from(2),
                CliError::Numerical(_) => ExitCode::from(3),
            }
        }
    }
}
