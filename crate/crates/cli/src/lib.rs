//! Argument parsing and dispatch for the `disclab` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use disclab::brownian::ExitLaw;
use disclab::harness::{
    run_and_write, ExperimentConfig, ExperimentKind, ExperimentOutput, ModelConfig, OutputFormat, SchemeConfig,
};
use disclab::moments::{bernoulli_mixture_decompose, kurtosis_skew_gap34, pearson_gap, FiniteDistribution, MeanZeroBernoulli};
use disclab::rng::split;
use disclab::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "disclab", version, about = "Discretization schemes for stochastic integrals: Monte Carlo experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML or JSON experiment file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated ε values, strictly decreasing.
    #[arg(long, value_delimiter = ',', alias = "eps-ladder")]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (or file for single-table commands).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads; `DISCLAB_THREADS` is used when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Horizon `t`.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample exit times and positions of Brownian motion from a symmetric or asymmetric interval.
    SampleExit {
        #[command(flatten)]
        common: Common,
        /// Lower barrier distance; symmetric `(-ε, ε)` when absent.
        #[arg(long)]
        down: Option<f64>,
    },
    /// Write the tabulated exit-time distribution function `G`.
    Gtable {
        #[command(flatten)]
        common: Common,
    },
    /// Check the moment inequalities on random finite mean-zero laws.
    InequalityCheck {
        #[command(flatten)]
        common: Common,
        /// Number of random laws.
        #[arg(long, default_value_t = 10_000)]
        random: usize,
        /// Atom count range `lo..hi` (inclusive).
        #[arg(long, default_value = "2..8")]
        atoms: String,
        /// Largest tolerated negative gap.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Decompose a mean-zero law into two-point laws.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Atoms as `x:w,x:w,...`.
        #[arg(long, allow_hyphen_values = true)]
        dist: Option<String>,
        /// JSON file `{"atoms": [[x, w], ...]}`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare schemes over an ε ladder.
    SchemeCompare(ExperimentArgs),
    /// Delta-hedging error experiment.
    HedgeSim {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Calibrate ε per scheme to these expected trade counts.
        #[arg(long, value_delimiter = ',')]
        trade_targets: Option<Vec<f64>>,
        /// Shared fine grid: steps per expected trade (with trade targets).
        #[arg(long)]
        steps_per_trade: Option<usize>,
    },
    /// Euler–Maruyama error experiment.
    EmSim(ExperimentArgs),
    /// Euler–Maruyama with the adaptive barrier scheme against the space scheme.
    EmAdaptive {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Floor on the squared radius; ε² when absent.
        #[arg(long)]
        floor: Option<f64>,
    },
}

#[derive(Debug, Args, Default)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: Common,
    /// `w-dw`, `em-geometric`, `em-ou`, `em-mean-reverting-geometric`, `em-relaxing-vol`, `em-stochvol`.
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated schemes, e.g. `time,space,asymmetric:1:1`.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Option<Vec<String>>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn cli_dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::SampleExit { common, down } => sample_exit(&common, down, out),
        Command::Gtable { common } => gtable(&common, out),
        Command::InequalityCheck { common, random, atoms, tol } => inequality_check(&common, random, &atoms, tol, out),
        Command::Decompose { dist, input, .. } => decompose(dist.as_deref(), input, out),
        Command::SchemeCompare(exp) => {
            let config = experiment_config(&exp, "w-dw", &["time", "space"])?;
            report(&run_and_write(&config)?, out)
        }
        Command::HedgeSim { exp, trade_targets, steps_per_trade } => {
            let mut config = experiment_config(&exp, "hedge", &["hedge-gamma", "karandikar", "time"])?;
            if trade_targets.is_some() {
                config.hedge.trade_targets = trade_targets;
            }
            if steps_per_trade.is_some() {
                config.hedge.steps_per_trade = steps_per_trade;
            }
            report(&run_and_write(&config)?, out)
        }
        Command::EmSim(exp) => {
            let config = experiment_config(&exp, "em-geometric", &["time", "space"])?;
            report(&run_and_write(&config)?, out)
        }
        Command::EmAdaptive { exp, floor } => {
            let mut config = experiment_config(&exp, "em-mean-reverting-geometric", &["adaptive", "space"])?;
            if floor.is_some() {
                for s in &mut config.schemes {
                    if let SchemeConfig::Adaptive { floor: f } = s {
                        *f = floor;
                    }
                }
            }
            report(&run_and_write(&config)?, out)
        }
    }
}

/// Experiment kind and default model for a `--model` name.
pub fn model_preset(name: &str) -> Result<(ExperimentKind, Option<ModelConfig>)> {
    Ok(match name {
        "w-dw" => (ExperimentKind::WDw, None),
        "hedge" => (ExperimentKind::Hedge, None),
        "em-geometric" => (ExperimentKind::Em, Some(ModelConfig::Geometric { x0: 1.0, drift: 0.0, vol: 1.0 })),
        "em-ou" => (ExperimentKind::Em, Some(ModelConfig::Ou { x0: 0.0, lambda: 1.0, mean: 0.0, vol: 1.0 })),
        "em-mean-reverting-geometric" => (
            ExperimentKind::Em,
            Some(ModelConfig::MeanRevertingGeometric { x0: 1.0, lambda: 3.0, mean: 1.0, vol: 0.3 }),
        ),
        "em-relaxing-vol" => {
            (ExperimentKind::Em, Some(ModelConfig::RelaxingVol { x0: 1.0, eta0: 1.0, kappa: 1.0, eta_inf: 0.5 }))
        }
        "em-stochvol" => (
            ExperimentKind::EmStochvol,
            Some(ModelConfig::StochvolHestonLike { xi0: 1.0, v0: 0.04, nu: 0.3, rho: -0.5 }),
        ),
        other => return Err(Error::Config(vec![format!("unknown model `{other}`")])),
    })
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Builds the experiment from the config file (if any), the command's
/// defaults and the flags, in increasing precedence.
pub fn experiment_config(exp: &ExperimentArgs, default_model: &str, default_schemes: &[&str]) -> Result<ExperimentConfig> {
    let mut config = base_config(&exp.common)?;
    let from_file = exp.common.config.is_some();
    if exp.model.is_some() || !from_file {
        let (kind, model) = model_preset(exp.model.as_deref().unwrap_or(default_model))?;
        config.kind = kind;
        config.model = model;
    }
    if let Some(list) = &exp.schemes {
        config.schemes = list.iter().map(|s| SchemeConfig::parse(s)).collect::<Result<_>>()?;
    } else if !from_file {
        config.schemes = default_schemes.iter().map(|s| SchemeConfig::parse(s)).collect::<Result<_>>()?;
    }
    let c = &exp.common;
    if let Some(e) = &c.eps {
        config.eps_ladder = e.clone();
    }
    if let Some(r) = c.reps {
        config.replications = r;
    }
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(t) = c.horizon {
        config.horizon = t;
    } else if !from_file && config.kind == ExperimentKind::Hedge {
        config.horizon = 0.5;
    }
    if c.out.is_some() {
        config.output = c.out.clone();
    }
    if let Some(f) = c.format {
        config.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
    }
    if c.threads.is_some() {
        config.threads = c.threads;
    }
    config.validate()?;
    Ok(config)
}

fn report(result: &ExperimentOutput, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{:<14} {:>10} {:>8} {:>12} {:>12} {:>12} {:>12}", "scheme", "epsilon", "reps", "mean N", "var z/eps", "N*z^2", "se")?;
    for c in &result.aggregate.cells {
        let n = c.stats.get("n").map_or(f64::NAN, |s| s.mean);
        let v = c.stats.get("z_scaled").map_or(f64::NAN, |s| s.variance);
        writeln!(
            out,
            "{:<14} {:>10.4e} {:>8} {:>12.3} {:>12.5} {:>12.5} {:>12.5}",
            c.scheme, c.epsilon, c.reps, n, v, c.product_n_z2, c.product_se
        )?;
    }
    for r in result.aggregate.ratios.iter().filter(|r| r.statistic == "product_n_z2") {
        writeln!(
            out,
            "rung {} {} / {}: {:.4} [{:.4}, {:.4}]",
            r.rung, r.numerator, r.denominator, r.ratio, r.ci_low, r.ci_high
        )?;
    }
    Ok(())
}

fn sample_exit(common: &Common, down: Option<f64>, out: &mut dyn Write) -> Result<()> {
    let eps = common.eps.as_ref().and_then(|e| e.first().copied()).unwrap_or(1.0);
    let reps = common.reps.unwrap_or(10_000);
    if reps == 0 {
        return Err(Error::Config(vec!["reps must be positive".into()]));
    }
    let seed = common.seed.unwrap_or(1);
    let law = ExitLaw::standard();
    let mut rows = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = split(seed, rep as u64);
        rows.push(match down {
            None => law.sample_symmetric_exit(&mut rng, eps)?,
            Some(d) => law.sample_asymmetric_exit(&mut rng, eps, d)?,
        });
    }
    let n = reps as f64;
    let m1 = rows.iter().map(|r| r.tau).sum::<f64>() / n;
    let m2 = rows.iter().map(|r| r.tau * r.tau).sum::<f64>() / n;
    let up = rows.iter().filter(|r| r.value > 0.0).count() as f64 / n;
    if let Some(path) = &common.out {
        let json = common.format == Some(Format::Json);
        let mut f = fs::File::create(path)?;
        if json {
            let v: Vec<[f64; 2]> = rows.iter().map(|r| [r.tau, r.value]).collect();
            f.write_all(serde_json::to_string(&v)?.as_bytes())?;
        } else {
            writeln!(f, "tau,value")?;
            for r in &rows {
                writeln!(f, "{},{}", r.tau, r.value)?;
            }
        }
    }
    writeln!(out, "samples {reps}  mean tau {m1:.6}  mean tau^2 {m2:.6}  P(up) {up:.4}")?;
    Ok(())
}

fn gtable(common: &Common, out: &mut dyn Write) -> Result<()> {
    let law = ExitLaw::standard();
    match &common.out {
        Some(p) => law.write_csv(fs::File::create(p)?)?,
        None => law.write_csv(&mut *out)?,
    }
    writeln!(out, "# stitch residual {:.3e}", law.stitch_residual())?;
    Ok(())
}

/// Parses `lo..hi` (inclusive) with `2 ≤ lo ≤ hi`.
pub fn parse_atom_range(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(vec![format!("atom range `{text}` must look like 2..8")]);
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
    if lo < 2 || hi < lo {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn inequality_check(common: &Common, count: usize, atoms: &str, tol: f64, out: &mut dyn Write) -> Result<()> {
    use rand::Rng;
    let (lo, hi) = parse_atom_range(atoms)?;
    let seed = common.seed.unwrap_or(1);
    let mut min_pearson = f64::INFINITY;
    let mut min_34 = f64::INFINITY;
    let mut violations = 0usize;
    for i in 0..count {
        let mut rng = split(seed, i as u64);
        let n = rng.random_range(lo..=hi);
        let d = FiniteDistribution::random_mean_zero(&mut rng, n);
        let (p, k) = (pearson_gap(&d)?, kurtosis_skew_gap34(&d)?);
        min_pearson = min_pearson.min(p);
        min_34 = min_34.min(k);
        if p < -tol || k < -tol {
            violations += 1;
        }
    }
    let mut two_point = 0.0f64;
    for i in 0..count.min(1000) {
        let mut rng = split(seed ^ 0x2b, i as u64);
        let b = MeanZeroBernoulli::new(rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let d = FiniteDistribution::new(vec![(b.up, b.weight_up), (-b.down, b.weight_down())])?;
        two_point = two_point.max(kurtosis_skew_gap34(&d)?.abs());
    }
    writeln!(out, "laws {count}  atoms {lo}..{hi}  min pearson gap {min_pearson:.3e}  min 3/4 gap {min_34:.3e}")?;
    writeln!(out, "two-point max |3/4 gap| {two_point:.3e}  violations {violations}")?;
    if violations > 0 {
        return Err(Error::Estimation(format!("{violations} laws violate an inequality beyond {tol}")));
    }
    Ok(())
}

/// Parses `x:w,x:w,...`.
pub fn parse_atoms(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|pair| {
            let (x, w) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(vec![format!("atom `{pair}` must look like x:w")]))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(vec![format!("bad number `{s}`")]));
            Ok((num(x)?, num(w)?))
        })
        .collect()
}

fn decompose(dist: Option<&str>, input: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let d = match (dist, input) {
        (Some(text), None) => FiniteDistribution::new(parse_atoms(text)?)?,
        (None, Some(p)) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(vec![format!("distribution file: {e}")]))?,
        _ => return Err(Error::Config(vec!["give exactly one of --dist or --input".into()])),
    };
    let mix = bernoulli_mixture_decompose(&d)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&mix)?)?;
    writeln!(out, "# components {}  max atom error {:.3e}", mix.components.len(), mix.max_error(&d))?;
    Ok(())
}
