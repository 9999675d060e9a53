//! Monte Carlo experiment orchestration: configuration, deterministic
//! replication, moment aggregation, variance ratios and output files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_lab::brownian_testbed;
use crate::euler::{
    em_stochvol_solve, run_em_path, EmOptions, Geometric, MeanRevertingGeometric, OrnsteinUhlenbeck,
    RelaxingVolGeometric, SdeModel, StochVolModel, Tabulated,
};
use crate::hedging::{calibrate_epsilon, simulate_hedge, HedgeModel, HedgeSimOptions, Payoff};
use crate::normal;
use crate::rng::split;
use crate::schemes::{SchemeKind, SchemeSpec, StopContext};

/// Replications per work unit; results are merged in unit order, so the
/// output does not depend on the number of threads.
pub const CHUNK: usize = 256;

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "DISCLAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// `∫W dW` with `X = Y = W`.
    #[default]
    WDw,
    Em,
    EmStochvol,
    Hedge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ModelConfig {
    Geometric {
        #[serde(default = "one")]
        x0: f64,
        #[serde(default)]
        drift: f64,
        #[serde(default = "one")]
        vol: f64,
    },
    Ou {
        x0: f64,
        lambda: f64,
        mean: f64,
        vol: f64,
    },
    MeanRevertingGeometric {
        x0: f64,
        lambda: f64,
        mean: f64,
        vol: f64,
    },
    RelaxingVol {
        x0: f64,
        eta0: f64,
        kappa: f64,
        eta_inf: f64,
    },
    Custom {
        x0: f64,
        grid: Vec<f64>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
    StochvolHestonLike {
        xi0: f64,
        v0: f64,
        nu: f64,
        rho: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn SdeModel>> {
        Ok(match self.clone() {
            ModelConfig::Geometric { x0, drift, vol } => Box::new(Geometric { x0, drift, vol }),
            ModelConfig::Ou { x0, lambda, mean, vol } => Box::new(OrnsteinUhlenbeck { x0, lambda, mean, vol }),
            ModelConfig::MeanRevertingGeometric { x0, lambda, mean, vol } => {
                Box::new(MeanRevertingGeometric { x0, lambda, mean, vol })
            }
            ModelConfig::RelaxingVol { x0, eta0, kappa, eta_inf } => {
                Box::new(RelaxingVolGeometric { x0, eta0, kappa, eta_inf })
            }
            ModelConfig::Custom { x0, grid, mu, sigma } => Box::new(Tabulated::new(x0, grid, mu, sigma)?),
            ModelConfig::StochvolHestonLike { .. } => {
                return Err(Error::Config(vec!["model stochvol-heston-like needs kind = \"em-stochvol\"".into()]))
            }
        })
    }

    pub fn stochvol(&self) -> Result<StochVolModel> {
        match *self {
            ModelConfig::StochvolHestonLike { xi0, v0, nu, rho } => Ok(StochVolModel::heston_like(xi0, v0, nu, rho)),
            _ => Err(Error::Config(vec!["kind = \"em-stochvol\" needs model stochvol-heston-like".into()])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum SchemeConfig {
    Time {
        #[serde(default)]
        n: Option<usize>,
    },
    Space,
    Asymmetric { beta: f64, delta: f64 },
    HedgeGamma,
    HedgeCost,
    Adaptive {
        #[serde(default)]
        floor: Option<f64>,
    },
}

impl SchemeConfig {
    pub fn kind(&self) -> SchemeKind {
        match *self {
            SchemeConfig::Time { n } => SchemeKind::TimeEquidistant { n },
            SchemeConfig::Space => SchemeKind::SpaceEquidistant,
            SchemeConfig::Asymmetric { beta, delta } => SchemeKind::constant_asymmetric(beta, delta),
            SchemeConfig::HedgeGamma => SchemeKind::HedgeGamma,
            SchemeConfig::HedgeCost => SchemeKind::HedgeCostOptimal,
            SchemeConfig::Adaptive { floor } => SchemeKind::AdaptiveEM { floor },
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Parses `time`, `time:64`, `space`, `asymmetric:1:1`, `hedge-gamma`,
    /// `karandikar` (space on the hedge ratio), `hedge-cost`, `adaptive`, `adaptive:0.0001`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::Config(vec![format!("scheme `{text}` is missing a parameter")]))?
                .parse::<f64>()
                .map_err(|_| Error::Config(vec![format!("scheme `{text}` has a non-numeric parameter")]))
        };
        Ok(match parts[0] {
            "time" if parts.len() == 1 => SchemeConfig::Time { n: None },
            "time" => SchemeConfig::Time { n: Some(num(1)? as usize) },
            "space" | "karandikar" => SchemeConfig::Space,
            "asymmetric" => SchemeConfig::Asymmetric { beta: num(1)?, delta: num(2)? },
            "hedge-gamma" => SchemeConfig::HedgeGamma,
            "hedge-cost" => SchemeConfig::HedgeCost,
            "adaptive" if parts.len() == 1 => SchemeConfig::Adaptive { floor: None },
            "adaptive" => SchemeConfig::Adaptive { floor: Some(num(1)?) },
            other => return Err(Error::Config(vec![format!("unknown scheme `{other}`")])),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HedgeConfig {
    pub spot: f64,
    pub strike: f64,
    pub sigma: f64,
    pub rate: f64,
    pub maturity: f64,
    pub drift: f64,
    /// `call` or `put`.
    pub payoff: String,
    /// Variance budget; `σ²T` when absent.
    pub budget: Option<f64>,
    /// Calibrate `ε` per scheme to these expected trade counts instead of using the ladder.
    pub trade_targets: Option<Vec<f64>>,
    pub pilot_reps: usize,
    /// With trade targets: share one fine grid with this many steps per expected trade.
    pub steps_per_trade: Option<usize>,
    pub sim: HedgeSimOptions,
}

impl Default for HedgeConfig {
    fn default() -> Self {
        HedgeConfig {
            spot: 100.0,
            strike: 100.0,
            sigma: 0.2,
            rate: 0.02,
            maturity: 0.75,
            drift: 0.0,
            payoff: "call".into(),
            budget: None,
            trade_targets: None,
            pilot_reps: 200,
            steps_per_trade: None,
            sim: HedgeSimOptions::default(),
        }
    }
}

impl HedgeConfig {
    pub fn model(&self) -> Result<HedgeModel> {
        let payoff = match self.payoff.as_str() {
            "call" => Payoff::call(self.strike)?,
            "put" => Payoff::put(self.strike)?,
            other => return Err(Error::Config(vec![format!("unknown payoff `{other}` (call or put)")])),
        };
        let mut m = HedgeModel::black_scholes(self.spot, self.sigma, self.rate, payoff, self.maturity);
        m.drift = self.drift;
        if let Some(b) = self.budget {
            m.budget = b;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: Option<ModelConfig>,
    pub hedge: HedgeConfig,
    pub em: EmOptions,
    pub schemes: Vec<SchemeConfig>,
    pub eps_ladder: Vec<f64>,
    pub replications: usize,
    pub horizon: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
    pub threads: Option<usize>,
    pub histogram_bins: usize,
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::WDw,
            model: None,
            hedge: HedgeConfig::default(),
            em: EmOptions::default(),
            schemes: vec![SchemeConfig::Time { n: None }, SchemeConfig::Space],
            eps_ladder: vec![0.1],
            replications: 1000,
            horizon: 1.0,
            seed: 1,
            output: None,
            format: OutputFormat::Csv,
            threads: None,
            histogram_bins: 40,
            tolerances: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Reads TOML, or JSON for files ending in `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    /// Checks every field and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.replications < 2 {
            errs.push(format!("replications must be at least 2, got {}", self.replications));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            errs.push(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.schemes.is_empty() {
            errs.push("schemes must not be empty".into());
        }
        let targets = self.kind == ExperimentKind::Hedge && self.hedge.trade_targets.is_some();
        if !targets {
            if self.eps_ladder.is_empty() {
                errs.push("eps_ladder must not be empty".into());
            }
            if let Some(e) = self.eps_ladder.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
                errs.push(format!("eps_ladder values must be positive, got {e}"));
            }
            if self.eps_ladder.windows(2).any(|w| !(w[1] < w[0])) {
                errs.push("eps_ladder must be strictly decreasing".into());
            }
        } else if let Some(t) = &self.hedge.trade_targets {
            if t.is_empty() || t.iter().any(|x| !(*x >= 1.0)) {
                errs.push("hedge.trade_targets must be non-empty and at least 1".into());
            }
        }
        if self.threads == Some(0) {
            errs.push("threads must be at least 1".into());
        }
        if self.histogram_bins == 0 {
            errs.push("histogram_bins must be at least 1".into());
        }
        match (self.kind, &self.model) {
            (ExperimentKind::Em, None) | (ExperimentKind::EmStochvol, None) => {
                errs.push("model section is required for Euler experiments".into())
            }
            (ExperimentKind::Em, Some(ModelConfig::StochvolHestonLike { .. })) => {
                errs.push("model stochvol-heston-like needs kind = \"em-stochvol\"".into())
            }
            (ExperimentKind::EmStochvol, Some(m)) if !matches!(m, ModelConfig::StochvolHestonLike { .. }) => {
                errs.push("kind = \"em-stochvol\" needs model stochvol-heston-like".into())
            }
            (ExperimentKind::Em, Some(m)) => {
                if let Err(e) = m.build() {
                    errs.push(e.to_string());
                }
            }
            _ => {}
        }
        if self.kind == ExperimentKind::Hedge {
            if let Err(e) = self.hedge.model() {
                errs.push(e.to_string());
            }
            if !(self.horizon < self.hedge.maturity) {
                errs.push(format!("horizon {} must be before the maturity {}", self.horizon, self.hedge.maturity));
            }
        }
        for s in &self.schemes {
            let hedge_only = matches!(s, SchemeConfig::HedgeGamma | SchemeConfig::HedgeCost);
            if hedge_only && self.kind != ExperimentKind::Hedge {
                errs.push(format!("scheme {} only applies to hedge experiments", s.name()));
            }
            if matches!(s, SchemeConfig::Adaptive { .. }) && self.kind != ExperimentKind::Em {
                errs.push("scheme adaptive only applies to Euler experiments".into());
            }
            if let SchemeConfig::Asymmetric { delta, .. } = s {
                if !(*delta > 0.0) {
                    errs.push(format!("asymmetric delta must be positive, got {delta}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn worker_count(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|n| *n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// One replication of one scheme at one rung of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub rep: usize,
    pub scheme: &'static str,
    pub epsilon: f64,
    pub t: f64,
    pub z: f64,
    pub n_stops: usize,
    pub u_cost: f64,
    pub c_cost: f64,
}

/// Per-replication conditional mean and variance of `z/ε`, when known.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Conditional {
    mean: f64,
    var: f64,
}

/// Streaming central moments up to order four, mergeable in any grouping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.merge(&Moments { n: 1, mean: x, m2: 0.0, m3: 0.0, m4: 0.0 });
    }

    pub fn merge(&mut self, b: &Moments) {
        if b.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *b;
            return;
        }
        let (na, nb) = (self.n as f64, b.n as f64);
        let n = na + nb;
        let d = b.mean - self.mean;
        let (d2, d3, d4) = (d * d, d * d * d, d * d * d * d);
        let m2 = self.m2 + b.m2 + d2 * na * nb / n;
        let m3 = self.m3 + b.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * b.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + b.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * b.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * b.m3 - nb * self.m3) / n;
        *self = Moments { n: self.n + b.n, mean: self.mean + d * nb / n, m2, m3, m4 };
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.m2 / (self.n as f64 - 1.0)
    }

    pub fn summary(&self) -> StatSummary {
        let n = self.n as f64;
        let var = self.variance();
        let (mu2, mu4) = (self.m2 / n, self.m4 / n);
        StatSummary {
            mean: self.mean,
            variance: var,
            se_mean: (var / n).sqrt(),
            se_variance: ((mu4 - mu2 * mu2).max(0.0) / n).sqrt(),
        }
    }
}

/// Co-moment of two streams.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct CoMoments {
    n: u64,
    mx: f64,
    my: f64,
    c: f64,
}

impl CoMoments {
    fn push(&mut self, x: f64, y: f64) {
        self.merge(&CoMoments { n: 1, mx: x, my: y, c: 0.0 });
    }

    fn merge(&mut self, b: &CoMoments) {
        if b.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *b;
            return;
        }
        let (na, nb) = (self.n as f64, b.n as f64);
        let n = na + nb;
        let (dx, dy) = (b.mx - self.mx, b.my - self.my);
        self.c += b.c + dx * dy * na * nb / n;
        self.mx += dx * nb / n;
        self.my += dy * nb / n;
        self.n += b.n;
    }

    fn covariance(&self) -> f64 {
        self.c / (self.n as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

/// Statistic names in summaries.
pub const STATS: [&str; 8] = ["z_scaled", "sqrt_n_z", "u_z", "c_z", "n", "z", "z_sq", "theory"];

#[derive(Debug, Clone, Default)]
struct CellAcc {
    moments: [Moments; 8],
    n_zsq: CoMoments,
    failures: usize,
}

impl CellAcc {
    fn push(&mut self, r: &Record, theory: Option<f64>) {
        let n = r.n_stops as f64;
        let vals = [r.z / r.epsilon, n.sqrt() * r.z, r.u_cost * r.z, r.c_cost * r.z, n, r.z, r.z * r.z];
        for (m, v) in self.moments.iter_mut().zip(vals) {
            m.push(v);
        }
        if let Some(t) = theory.filter(|t| t.is_finite()) {
            self.moments[7].push(t);
        }
        self.n_zsq.push(n, r.z * r.z);
    }

    fn merge(&mut self, other: &CellAcc) {
        for (a, b) in self.moments.iter_mut().zip(&other.moments) {
            a.merge(b);
        }
        self.n_zsq.merge(&other.n_zsq);
        self.failures += other.failures;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scheme: String,
    pub rung: usize,
    pub epsilon: f64,
    pub reps: u64,
    pub failures: usize,
    pub stats: BTreeMap<String, StatSummary>,
    /// `mean(N)·mean(z²)` with a delta-method standard error.
    pub product_n_z2: f64,
    pub product_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub statistic: String,
    pub rung: usize,
    pub numerator: String,
    pub denominator: String,
    pub ratio: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub cells: Vec<CellSummary>,
    pub ratios: Vec<RatioSummary>,
}

impl AggregateResult {
    pub fn cell(&self, scheme: &str, rung: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.scheme == scheme && c.rung == rung)
    }

    pub fn ratio(&self, statistic: &str, numerator: &str, denominator: &str, rung: usize) -> Option<&RatioSummary> {
        self.ratios
            .iter()
            .find(|r| r.statistic == statistic && r.numerator == numerator && r.denominator == denominator && r.rung == rung)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub scheme: String,
    pub epsilon: f64,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
    pub density: f64,
    /// Mixed-normal density fitted from the per-replication conditional
    /// moments when available, else the normal with the sample moments.
    pub fitted: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub aggregate: AggregateResult,
    pub records: Vec<Record>,
    pub histogram: Vec<HistogramRow>,
}

struct RepOutcome {
    record: Record,
    theory: Option<f64>,
    conditional: Option<Conditional>,
}

/// Everything one cell needs to simulate a replication.
struct CellPlan {
    scheme: SchemeConfig,
    rung: usize,
    spec: SchemeSpec,
    hedge_opts: HedgeSimOptions,
}

enum Prepared {
    WDw,
    Em(Box<dyn SdeModel>),
    StochVol(StochVolModel),
    Hedge(HedgeModel),
}

fn simulate_rep(config: &ExperimentConfig, prepared: &Prepared, plan: &CellPlan, rep: usize) -> Result<RepOutcome> {
    let mut rng = split(config.seed, rep as u64);
    let t = config.horizon;
    let eps = plan.spec.epsilon;
    let base = Record { rep, scheme: plan.scheme.name(), epsilon: eps, t, z: 0.0, n_stops: 0, u_cost: 0.0, c_cost: 0.0 };
    Ok(match prepared {
        Prepared::WDw => {
            let (stats, seq) = brownian_testbed(&mut rng, &plan.spec, t)?;
            let coeffs = plan.spec.realized_coefficients(&StopContext::at(0.0, 0.0))?;
            let w_t = *seq.values.last().unwrap();
            RepOutcome {
                record: Record { z: stats.z, n_stops: stats.n_stops, u_cost: stats.u_cost, c_cost: stats.c_cost, ..base },
                theory: Some(coeffs.c_sq() * t / 6.0),
                conditional: Some(Conditional { mean: coeffs.b * w_t / 3.0, var: coeffs.c_sq() * t / 6.0 }),
            }
        }
        Prepared::Em(model) => {
            let (path, r) = run_em_path(&mut rng, model.as_ref(), &plan.spec, t, &config.em)?;
            let u: f64 = path.driver.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
            RepOutcome {
                record: Record { z: eps * r.l_t, n_stops: r.n_steps, u_cost: u, c_cost: u, ..base },
                theory: Some(r.limit_variance),
                conditional: r.limit_variance.is_finite().then_some(Conditional { mean: 0.0, var: r.limit_variance }),
            }
        }
        Prepared::StochVol(model) => {
            let refinement = match config.em.reference {
                crate::euler::Reference::FineGrid { refinement } => refinement,
                crate::euler::Reference::Exact => 256,
            };
            let r = em_stochvol_solve(&mut rng, model, &plan.spec, t, refinement)?;
            RepOutcome {
                record: Record { z: eps * r.l_t, n_stops: r.n_steps, u_cost: f64::NAN, c_cost: f64::NAN, ..base },
                theory: None,
                conditional: None,
            }
        }
        Prepared::Hedge(model) => {
            let r = simulate_hedge(&mut rng, model, &plan.spec, t, &plan.hedge_opts)?;
            let theory = r.theory.map(|v| match plan.scheme {
                SchemeConfig::HedgeGamma => v.gamma_scheme,
                SchemeConfig::Space => v.karandikar,
                SchemeConfig::Time { .. } => v.equidistant,
                SchemeConfig::HedgeCost => v.cost_bound,
                _ => f64::NAN,
            });
            RepOutcome {
                record: Record {
                    z: r.z_error,
                    n_stops: r.n_trades,
                    u_cost: r.rebalance_volume,
                    c_cost: r.turnover_cost,
                    ..base
                },
                theory,
                conditional: None,
            }
        }
    })
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    Ok(match config.kind {
        ExperimentKind::WDw => Prepared::WDw,
        ExperimentKind::Em => Prepared::Em(config.model.as_ref().unwrap().build()?),
        ExperimentKind::EmStochvol => Prepared::StochVol(config.model.as_ref().unwrap().stochvol()?),
        ExperimentKind::Hedge => Prepared::Hedge(config.hedge.model()?),
    })
}

fn plans(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<CellPlan>> {
    let mut out = Vec::new();
    match (prepared, &config.hedge.trade_targets) {
        (Prepared::Hedge(model), Some(targets)) => {
            for (rung, &target) in targets.iter().enumerate() {
                let mut hedge_opts = config.hedge.sim.clone();
                if let Some(steps) = config.hedge.steps_per_trade {
                    hedge_opts.fine_dt = Some(config.horizon / (target * steps as f64));
                }
                for scheme in &config.schemes {
                    let eps = calibrate_epsilon(
                        model,
                        &scheme.kind(),
                        config.horizon,
                        target,
                        config.hedge.pilot_reps.max(1),
                        config.seed ^ 0xca11_b4a7,
                    )?;
                    out.push(CellPlan {
                        scheme: scheme.clone(),
                        rung,
                        spec: SchemeSpec::new(scheme.kind(), eps)?,
                        hedge_opts: hedge_opts.clone(),
                    });
                }
            }
        }
        _ => {
            for (rung, &eps) in config.eps_ladder.iter().enumerate() {
                for scheme in &config.schemes {
                    out.push(CellPlan {
                        scheme: scheme.clone(),
                        rung,
                        spec: SchemeSpec::new(scheme.kind(), eps)?,
                        hedge_opts: config.hedge.sim.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Runs every (scheme, ε) cell of the experiment. Replication `r` of every
/// cell draws from `split(seed, r)`, so the result is identical for any
/// worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_count())
        .build()
        .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))?;
    pool.install(|| run_in_pool(config))
}

fn run_in_pool(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let prepared = prepare(config)?;
    let plans = plans(config, &prepared)?;
    let reps = config.replications;
    let mut cells = Vec::new();
    let mut records = Vec::with_capacity(reps * plans.len());
    let mut per_cell: Vec<Vec<RepOutcome>> = Vec::new();
    for plan in &plans {
        let chunks: Vec<usize> = (0..reps.div_ceil(CHUNK)).collect();
        let parts: Vec<Result<(CellAcc, Vec<RepOutcome>)>> = chunks
            .par_iter()
            .map(|&c| {
                let mut acc = CellAcc::default();
                let mut outs = Vec::with_capacity(CHUNK);
                for rep in c * CHUNK..((c + 1) * CHUNK).min(reps) {
                    match simulate_rep(config, &prepared, plan, rep) {
                        Ok(o) => {
                            acc.push(&o.record, o.theory);
                            outs.push(o);
                        }
                        Err(e) if e.is_numerical() => acc.failures += 1,
                        Err(e) => return Err(e),
                    }
                }
                Ok((acc, outs))
            })
            .collect();
        let mut acc = CellAcc::default();
        let mut outs = Vec::with_capacity(reps);
        for part in parts {
            let (a, o) = part?;
            acc.merge(&a);
            outs.extend(o);
        }
        if outs.len() < 2 {
            return Err(Error::Estimation(format!(
                "scheme {} at epsilon {}: {} of {reps} replications failed",
                plan.scheme.name(),
                plan.spec.epsilon,
                acc.failures
            )));
        }
        cells.push(summarize(plan, &acc));
        records.extend(outs.iter().map(|o| o.record));
        per_cell.push(outs);
    }
    let ratios = pairwise_ratios(&plans, &per_cell);
    let histogram = histograms(&plans, &per_cell, config.histogram_bins);
    Ok(ExperimentOutput { aggregate: AggregateResult { cells, ratios }, records, histogram })
}

fn summarize(plan: &CellPlan, acc: &CellAcc) -> CellSummary {
    let stats: BTreeMap<String, StatSummary> = STATS
        .iter()
        .zip(&acc.moments)
        .filter(|(_, m)| m.n > 0)
        .map(|(k, m)| (k.to_string(), m.summary()))
        .collect();
    let (mn, mz) = (acc.moments[4].mean, acc.moments[6].mean);
    let n = acc.moments[4].n as f64;
    let var = (mz * mz * acc.moments[4].variance()
        + mn * mn * acc.moments[6].variance()
        + 2.0 * mn * mz * acc.n_zsq.covariance())
        / n;
    CellSummary {
        scheme: plan.scheme.name().to_string(),
        rung: plan.rung,
        epsilon: plan.spec.epsilon,
        reps: acc.moments[0].n,
        failures: acc.failures,
        stats,
        product_n_z2: mn * mz,
        product_se: var.max(0.0).sqrt(),
    }
}

/// Delta-method ratios between every pair of schemes on the same rung,
/// paired by replication index so that shared random numbers are accounted for.
fn pairwise_ratios(plans: &[CellPlan], per_cell: &[Vec<RepOutcome>]) -> Vec<RatioSummary> {
    let mut out = Vec::new();
    for (i, a) in plans.iter().enumerate() {
        for (j, b) in plans.iter().enumerate() {
            if i == j || a.rung != b.rung || a.scheme.name() == b.scheme.name() {
                continue;
            }
            let xa: BTreeMap<usize, &Record> = per_cell[i].iter().map(|o| (o.record.rep, &o.record)).collect();
            let pairs: Vec<(&Record, &Record)> =
                per_cell[j].iter().filter_map(|o| xa.get(&o.record.rep).map(|ra| (*ra, &o.record))).collect();
            if pairs.len() < 2 {
                continue;
            }
            let scaled = |r: &Record| r.z / r.epsilon;
            for statistic in ["var_z_scaled", "product_n_z2"] {
                let (ratio, se) = match statistic {
                    "var_z_scaled" => variance_ratio(&pairs, scaled),
                    _ => product_ratio(&pairs),
                };
                out.push(RatioSummary {
                    statistic: statistic.into(),
                    rung: a.rung,
                    numerator: a.scheme.name().into(),
                    denominator: b.scheme.name().into(),
                    ratio,
                    se,
                    ci_low: ratio - 1.96 * se,
                    ci_high: ratio + 1.96 * se,
                });
            }
        }
    }
    out
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for v in values {
        s += v;
        n += 1.0;
    }
    s / n
}

fn sd_over_root_n(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
}

fn variance_ratio(pairs: &[(&Record, &Record)], f: impl Fn(&Record) -> f64) -> (f64, f64) {
    let ma = mean_of(pairs.iter().map(|p| f(p.0)));
    let mb = mean_of(pairs.iter().map(|p| f(p.1)));
    let va = mean_of(pairs.iter().map(|p| (f(p.0) - ma).powi(2)));
    let vb = mean_of(pairs.iter().map(|p| (f(p.1) - mb).powi(2)));
    let ratio = va / vb;
    let lin: Vec<f64> =
        pairs.iter().map(|p| ((f(p.0) - ma).powi(2) - va) / vb - va * ((f(p.1) - mb).powi(2) - vb) / (vb * vb)).collect();
    (ratio, sd_over_root_n(&lin))
}

fn product_ratio(pairs: &[(&Record, &Record)]) -> (f64, f64) {
    let n_of = |r: &Record| r.n_stops as f64;
    let z2 = |r: &Record| r.z * r.z;
    let (na, za) = (mean_of(pairs.iter().map(|p| n_of(p.0))), mean_of(pairs.iter().map(|p| z2(p.0))));
    let (nb, zb) = (mean_of(pairs.iter().map(|p| n_of(p.1))), mean_of(pairs.iter().map(|p| z2(p.1))));
    let (pa, pb) = (na * za, nb * zb);
    let ratio = pa / pb;
    let lin: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let da = za * (n_of(p.0) - na) + na * (z2(p.0) - za);
            let db = zb * (n_of(p.1) - nb) + nb * (z2(p.1) - zb);
            da / pb - pa * db / (pb * pb)
        })
        .collect();
    (ratio, sd_over_root_n(&lin))
}

fn histograms(plans: &[CellPlan], per_cell: &[Vec<RepOutcome>], bins: usize) -> Vec<HistogramRow> {
    let mut rows = Vec::new();
    for (plan, outs) in plans.iter().zip(per_cell) {
        let xs: Vec<f64> = outs.iter().map(|o| o.record.z / o.record.epsilon).filter(|x| x.is_finite()).collect();
        if xs.len() < 2 {
            continue;
        }
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        let sd = m.variance().sqrt();
        if !(sd > 0.0) {
            continue;
        }
        let (lo, hi) = (m.mean - 4.0 * sd, m.mean + 4.0 * sd);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &x in &xs {
            if x >= lo && x < hi {
                counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
        let conds: Vec<Conditional> = outs.iter().filter_map(|o| o.conditional).filter(|c| c.var > 0.0).collect();
        for (k, &count) in counts.iter().enumerate() {
            let mid = lo + (k as f64 + 0.5) * width;
            let fitted = if conds.len() == outs.len() {
                conds.iter().map(|c| normal::pdf((mid - c.mean) / c.var.sqrt()) / c.var.sqrt()).sum::<f64>()
                    / conds.len() as f64
            } else {
                normal::pdf((mid - m.mean) / sd) / sd
            };
            rows.push(HistogramRow {
                scheme: plan.scheme.name().into(),
                epsilon: plan.spec.epsilon,
                bin_left: lo + k as f64 * width,
                bin_right: lo + (k + 1) as f64 * width,
                count,
                density: count as f64 / (xs.len() as f64 * width),
                fitted,
            });
        }
    }
    rows
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    scheme: &'a str,
    rung: usize,
    epsilon: f64,
    reps: u64,
    failures: usize,
    statistic: &'a str,
    mean: f64,
    variance: f64,
    se_mean: f64,
    se_variance: f64,
}

fn summary_rows(agg: &AggregateResult) -> Vec<SummaryRow<'_>> {
    let mut rows = Vec::new();
    for c in &agg.cells {
        for (name, s) in &c.stats {
            rows.push(SummaryRow {
                scheme: &c.scheme,
                rung: c.rung,
                epsilon: c.epsilon,
                reps: c.reps,
                failures: c.failures,
                statistic: name,
                mean: s.mean,
                variance: s.variance,
                se_mean: s.se_mean,
                se_variance: s.se_variance,
            });
        }
        rows.push(SummaryRow {
            scheme: &c.scheme,
            rung: c.rung,
            epsilon: c.epsilon,
            reps: c.reps,
            failures: c.failures,
            statistic: "product_n_z2",
            mean: c.product_n_z2,
            variance: f64::NAN,
            se_mean: c.product_se,
            se_variance: f64::NAN,
        });
    }
    rows
}

/// Writes records, summary, ratios and histogram into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let p = dir.join("records.csv");
            write_csv_rows(&p, &out.records)?;
            written.push(p);
            let p = dir.join("summary.csv");
            write_csv_rows(&p, &summary_rows(&out.aggregate))?;
            written.push(p);
            let p = dir.join("ratios.csv");
            write_csv_rows(&p, &out.aggregate.ratios)?;
            written.push(p);
            let p = dir.join("histogram.csv");
            write_csv_rows(&p, &out.histogram)?;
            written.push(p);
        }
        OutputFormat::Json => {
            let p = dir.join("records.json");
            fs::File::create(&p)?.write_all(serde_json::to_string_pretty(&out.records)?.as_bytes())?;
            written.push(p);
            let p = dir.join("histogram.json");
            fs::File::create(&p)?.write_all(serde_json::to_string_pretty(&out.histogram)?.as_bytes())?;
            written.push(p);
        }
    }
    // The JSON summary mirrors the CSV tables in both formats.
    let p = dir.join("summary.json");
    fs::File::create(&p)?.write_all(serde_json::to_string_pretty(&out.aggregate)?.as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Runs the experiment and writes its files when `output` is set.
pub fn run_and_write(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let out = run_experiment(config)?;
    if let Some(dir) = &config.output {
        write_outputs(&out, dir, config.format)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { replications: 600, eps_ladder: vec![0.2, 0.1], threads: Some(1), ..Default::default() }
    }

    #[test]
    fn moments_merge_matches_direct() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sqrt() - 3.0).collect();
        let mut whole = Moments::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..313].iter().for_each(|&x| a.push(x));
        xs[313..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m4: f64 = xs.iter().map(|x| (x - mean).powi(4)).sum();
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((a.m4 - m4).abs() < 1e-9 * m4);
        assert!((a.variance() - whole.variance()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn merge_is_grouping_independent(xs in prop::collection::vec(-10.0f64..10.0, 4..60), cut in 1usize..3) {
            let k = xs.len() / (cut + 1);
            let mut left = Moments::default();
            let mut right = Moments::default();
            xs[..k].iter().for_each(|&x| left.push(x));
            xs[k..].iter().for_each(|&x| right.push(x));
            let mut ab = left;
            ab.merge(&right);
            let mut ba = right;
            ba.merge(&left);
            prop_assert!((ab.mean - ba.mean).abs() < 1e-10);
            prop_assert!((ab.m2 - ba.m2).abs() < 1e-8 * ab.m2.max(1.0));
            prop_assert!((ab.m4 - ba.m4).abs() < 1e-8 * ab.m4.max(1.0));
        }
    }

    #[test]
    fn validation_lists_every_problem() {
        let bad = ExperimentConfig {
            replications: 1,
            eps_ladder: vec![0.1, 0.2],
            horizon: -1.0,
            schemes: vec![SchemeConfig::HedgeGamma],
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 4, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        assert!(small().validate().is_ok());
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let a = run_experiment(&small()).unwrap();
        let b = run_experiment(&ExperimentConfig { threads: Some(3), ..small() }).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.aggregate, b.aggregate);
    }

    #[test]
    fn time_scheme_matches_exact_finite_n_value() {
        let config = ExperimentConfig {
            schemes: vec![SchemeConfig::Time { n: Some(16) }],
            replications: 4000,
            ..small()
        };
        let out = run_experiment(&config).unwrap();
        let z2 = &out.aggregate.cells[0].stats["z_sq"];
        assert!((16.0 * z2.mean - 0.5).abs() < 4.0 * 16.0 * z2.se_mean, "{z2:?}");
    }

    #[test]
    fn config_parses_from_toml() {
        let c = ExperimentConfig::from_toml(
            r#"
kind = "em"
replications = 10
eps_ladder = [0.2]
schemes = [{ name = "space" }, { name = "time" }, { name = "adaptive", floor = 0.001 }]
[model]
name = "mean-reverting-geometric"
x0 = 1.0
lambda = 3.0
mean = 1.0
vol = 0.3
[em]
reference = { fine-grid = { refinement = 64 } }
"#,
        )
        .unwrap();
        assert_eq!(c.kind, ExperimentKind::Em);
        assert!(c.validate().is_ok());
        assert_eq!(SchemeConfig::parse("asymmetric:1:2").unwrap(), SchemeConfig::Asymmetric { beta: 1.0, delta: 2.0 });
        assert!(SchemeConfig::parse("zigzag").is_err());
        assert!(ExperimentConfig::from_toml("replications = \"many\"").is_err());
    }
}
