//! Discretization schemes as stopping-rule generators.
//!
//! A [`SchemeRunner`] turns the state at the current stop into the rule for
//! the next one: a fixed time step, or a barrier (symmetric or asymmetric) on
//! the increment of the driving process. Drivers that are Brownian motion can
//! be advanced exactly with [`advance_brownian`]; other drivers (the hedge
//! ratio, an Euler state) are handled by the modules that own them.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::brownian::{self, ExitLaw};
use crate::error::{domain, Error, Result};

/// Evaluates a scheme parameter at the left endpoint of the current interval.
pub type StateFn = Arc<dyn Fn(&StopContext) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum SchemeKind {
    /// Fixed step `1/n`, or `ε²` when `n` is `None`.
    TimeEquidistant { n: Option<usize> },
    /// Symmetric barrier of radius `ε`.
    SpaceEquidistant,
    /// Symmetric barrier of radius `ε·g(state)`.
    GModulated { g: StateFn },
    /// Exit from `(−ε√δ/k, ε k√δ)` with `k = k_factor(β, δ)`.
    AsymmetricBarrier { beta: StateFn, delta: StateFn },
    /// Barrier on the hedge ratio with `radius² = ε² e^{rτ} Γ`.
    HedgeGamma,
    /// Barrier on the hedge ratio with `radius³ = ε³ e^{2rτ} S Γ²`.
    HedgeCostOptimal,
    /// Barrier with `radius² = max(ε² ê / |σ∂σ|, floor)`; floor defaults to `ε²`.
    AdaptiveEM { floor: Option<f64> },
}

impl fmt::Debug for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeKind::TimeEquidistant { n } => f.debug_struct("TimeEquidistant").field("n", n).finish(),
            SchemeKind::AdaptiveEM { floor } => f.debug_struct("AdaptiveEM").field("floor", floor).finish(),
            other => f.write_str(other.name()),
        }
    }
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::TimeEquidistant { .. } => "time",
            SchemeKind::SpaceEquidistant => "space",
            SchemeKind::GModulated { .. } => "g-modulated",
            SchemeKind::AsymmetricBarrier { .. } => "asymmetric",
            SchemeKind::HedgeGamma => "hedge-gamma",
            SchemeKind::HedgeCostOptimal => "hedge-cost",
            SchemeKind::AdaptiveEM { .. } => "adaptive",
        }
    }

    pub fn constant_asymmetric(beta: f64, delta: f64) -> Self {
        SchemeKind::AsymmetricBarrier {
            beta: Arc::new(move |_| beta),
            delta: Arc::new(move |_| delta),
        }
    }
}

/// One discretization rule with its scale `ε`.
#[derive(Debug, Clone)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub epsilon: f64,
    /// Barrier radii are capped at this multiple of the first radius of a path.
    pub radius_cap: f64,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return domain(format!("epsilon must be positive, got {epsilon}"));
        }
        match &kind {
            SchemeKind::TimeEquidistant { n: Some(0) } => return domain("time-equidistant scheme needs n >= 1"),
            SchemeKind::AdaptiveEM { floor: Some(f) } if !(*f > 0.0) => {
                return domain(format!("adaptive floor must be positive, got {f}"))
            }
            _ => {}
        }
        Ok(SchemeSpec { kind, epsilon, radius_cap: 50.0 })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Step of the time-equidistant scheme.
    pub fn time_step(&self) -> Option<f64> {
        match self.kind {
            SchemeKind::TimeEquidistant { n: Some(n) } => Some(1.0 / n as f64),
            SchemeKind::TimeEquidistant { n: None } => Some(self.epsilon * self.epsilon),
            _ => None,
        }
    }

    pub fn adaptive_floor(&self) -> Option<f64> {
        match self.kind {
            SchemeKind::AdaptiveEM { floor } => Some(floor.unwrap_or(self.epsilon * self.epsilon)),
            _ => None,
        }
    }

    /// Theoretical moment coefficients of the scheme's increments at `ctx`.
    pub fn realized_coefficients(&self, ctx: &StopContext) -> Result<SchemeCoefficients> {
        let eps = self.epsilon;
        let symmetric = |g: f64| SchemeCoefficients { a_sq: g * g, b: 0.0, q_sq: g * g, zeta: 1.0 / g };
        Ok(match &self.kind {
            SchemeKind::TimeEquidistant { .. } => {
                let ratio = self.time_step().unwrap() / (eps * eps);
                SchemeCoefficients {
                    a_sq: 3.0 * ratio,
                    b: 0.0,
                    q_sq: ratio,
                    zeta: (2.0 / (std::f64::consts::PI * ratio)).sqrt(),
                }
            }
            SchemeKind::SpaceEquidistant => symmetric(1.0),
            SchemeKind::GModulated { g } => symmetric(g(ctx)),
            SchemeKind::AsymmetricBarrier { beta, delta } => {
                let (beta, delta) = (beta(ctx), delta(ctx));
                if !(delta > 0.0) {
                    return domain(format!("delta must be positive, got {delta}"));
                }
                SchemeCoefficients {
                    a_sq: beta * beta + delta,
                    b: beta,
                    q_sq: delta,
                    zeta: 2.0 / (beta * beta + 4.0 * delta).sqrt(),
                }
            }
            SchemeKind::HedgeGamma => {
                let h = ctx.hedge.ok_or_else(|| Error::Input("hedge scheme needs gamma, spot and rate".into()))?;
                symmetric((h.rate * ctx.time).exp().sqrt() * h.gamma.sqrt())
            }
            SchemeKind::HedgeCostOptimal => {
                let h = ctx.hedge.ok_or_else(|| Error::Input("hedge scheme needs gamma, spot and rate".into()))?;
                symmetric(((2.0 * h.rate * ctx.time).exp() * h.spot * h.gamma * h.gamma).cbrt())
            }
            SchemeKind::AdaptiveEM { .. } => {
                let em = ctx.em.ok_or_else(|| Error::Input("adaptive scheme needs e-hat and sigma*dsigma".into()))?;
                let floor = self.adaptive_floor().unwrap() / (eps * eps);
                symmetric((em.e_hat / em.sigma_dsigma.abs()).max(floor).sqrt())
            }
        })
    }
}

/// Moment coefficients of a scheme: `a²`, `b`, `q²`, `ζ`, and `c² = a² − (2/3)b²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeCoefficients {
    pub a_sq: f64,
    pub b: f64,
    pub q_sq: f64,
    pub zeta: f64,
}

impl SchemeCoefficients {
    pub fn c_sq(&self) -> f64 {
        self.a_sq - 2.0 / 3.0 * self.b * self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedgeQuantities {
    pub gamma: f64,
    pub spot: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmQuantities {
    pub e_hat: f64,
    pub sigma_dsigma: f64,
}

/// State at the left endpoint of the current interval.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopContext {
    pub time: f64,
    pub driver: f64,
    pub state: f64,
    pub hedge: Option<HedgeQuantities>,
    pub em: Option<EmQuantities>,
}

impl StopContext {
    pub fn at(time: f64, driver: f64) -> Self {
        StopContext { time, driver, state: driver, ..Default::default() }
    }
}

/// `k` with `k − 1/k = β/√δ`.
pub fn k_factor(beta: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return domain(format!("k_factor requires delta > 0, got {delta}"));
    }
    let x = beta / delta.sqrt();
    let root = (x * x + 4.0).sqrt();
    // Avoid cancellation for negative x.
    Ok(if x >= 0.0 { (x + root) / 2.0 } else { 2.0 / (root - x) })
}

/// How the driver must move before the next stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Deterministic step, already clipped at the horizon.
    Fixed { dt: f64 },
    Symmetric { radius: f64 },
    Asymmetric { up: f64, down: f64 },
}

/// Per-path generator of step rules.
#[derive(Debug, Clone)]
pub struct SchemeRunner {
    spec: SchemeSpec,
    steps: usize,
    reference: Option<f64>,
    sign: Option<bool>,
    sign_changes: usize,
}

impl SchemeRunner {
    pub fn new(spec: SchemeSpec) -> Self {
        SchemeRunner { spec, steps: 0, reference: None, sign: None, sign_changes: 0 }
    }

    pub fn spec(&self) -> &SchemeSpec {
        &self.spec
    }

    /// Number of times σ∂σ changed sign along the path (adaptive scheme only).
    pub fn sign_changes(&self) -> usize {
        self.sign_changes
    }

    /// Rule for the interval starting at `ctx.time`, or `None` once the horizon is reached.
    pub fn next_rule(&mut self, ctx: &StopContext, horizon: f64) -> Result<Option<StepRule>> {
        if ctx.time >= horizon {
            return Ok(None);
        }
        let eps = self.spec.epsilon;
        let rule = match &self.spec.kind {
            SchemeKind::TimeEquidistant { .. } => {
                let h = self.spec.time_step().unwrap();
                let mut next = (self.steps + 1) as f64 * h;
                if next > horizon || (horizon - next) <= 1e-12 * horizon.max(1.0) {
                    next = horizon;
                }
                StepRule::Fixed { dt: next - ctx.time }
            }
            SchemeKind::AsymmetricBarrier { beta, delta } => {
                let (beta, delta) = (beta(ctx), delta(ctx));
                let k = k_factor(beta, delta)?;
                let scale = eps * delta.sqrt();
                let up = self.guard(scale * k)?;
                let down = self.guard(scale / k)?;
                StepRule::Asymmetric { up, down }
            }
            SchemeKind::AdaptiveEM { .. } => {
                let em = ctx.em.ok_or_else(|| Error::Input("adaptive scheme needs e-hat and sigma*dsigma".into()))?;
                let positive = em.sigma_dsigma > 0.0;
                match self.sign {
                    None => self.sign = Some(positive),
                    Some(s) if s != positive => {
                        self.sign_changes += 1;
                        self.sign = Some(positive);
                    }
                    _ => {}
                }
                let floor = self.spec.adaptive_floor().unwrap();
                let r2 = (eps * eps * em.e_hat / em.sigma_dsigma.abs()).max(floor);
                StepRule::Symmetric { radius: self.guard(r2.sqrt())? }
            }
            _ => {
                let g = self.spec.realized_coefficients(ctx)?.q_sq.sqrt();
                StepRule::Symmetric { radius: self.guard(eps * g)? }
            }
        };
        self.steps += 1;
        Ok(Some(rule))
    }

    fn guard(&mut self, radius: f64) -> Result<f64> {
        if !(radius > 0.0) || radius.is_nan() {
            return Err(Error::DegenerateBarrier(format!(
                "barrier radius {radius} at step {} of scheme {}",
                self.steps,
                self.spec.name()
            )));
        }
        match self.reference {
            None if radius.is_finite() => {
                self.reference = Some(radius);
                Ok(radius)
            }
            None => Err(Error::DegenerateBarrier(format!(
                "first barrier radius of scheme {} is infinite",
                self.spec.name()
            ))),
            Some(r) => Ok(radius.min(self.spec.radius_cap * r)),
        }
    }
}

/// Outcome of one interval on a Brownian driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advance {
    pub dt: f64,
    pub increment: f64,
    /// The interval was cut at the horizon before the rule completed.
    pub partial: bool,
}

/// Advances a standard Brownian driver by one rule, exactly. Barrier exits that
/// would land after `remaining` are replaced by the position at the horizon,
/// drawn from the law conditioned on no exit before then.
pub fn advance_brownian<R: Rng + ?Sized>(rng: &mut R, law: &ExitLaw, rule: StepRule, remaining: f64) -> Result<Advance> {
    let (up, down, exit) = match rule {
        StepRule::Fixed { dt } => {
            let z: f64 = rng.sample(StandardNormal);
            return Ok(Advance { dt, increment: dt.sqrt() * z, partial: false });
        }
        StepRule::Symmetric { radius } => (radius, radius, law.sample_symmetric_exit(rng, radius)?),
        StepRule::Asymmetric { up, down } => (up, down, law.sample_asymmetric_exit(rng, up, down)?),
    };
    if exit.tau <= remaining {
        return Ok(Advance { dt: exit.tau, increment: exit.value, partial: false });
    }
    let increment = brownian::sample_killed_position(rng, up, down, remaining)?;
    Ok(Advance { dt: remaining, increment, partial: true })
}

/// Stops `τ_j` and driver values `W_{τ_j}` on `[0, horizon]`, with the final
/// entry at the horizon itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopSequence {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub truncated_at: f64,
    /// The last interval was cut at the horizon, so its right end is not a stop.
    pub partial: bool,
}

impl StopSequence {
    /// Number of completed intervals `N[τ]_t` (the partial one at the horizon excluded
    /// unless it ended exactly on a stop).
    pub fn count(&self) -> usize {
        self.times.len() - 1 - usize::from(self.partial)
    }

    pub fn increments(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.windows(2).map(|w| w[1] - w[0])
    }
}

/// Runs `spec` on a standard Brownian driver over `[0, horizon]`, with the
/// state passed to the scheme equal to the driver value.
pub fn simulate_brownian_stops<R: Rng + ?Sized>(rng: &mut R, spec: &SchemeSpec, horizon: f64) -> Result<StopSequence> {
    if !(horizon > 0.0) {
        return domain(format!("horizon must be positive, got {horizon}"));
    }
    let law = ExitLaw::standard();
    let mut runner = SchemeRunner::new(spec.clone());
    let (mut t, mut w) = (0.0_f64, 0.0_f64);
    let mut times = vec![0.0];
    let mut values = vec![0.0];
    let mut partial = false;
    while let Some(rule) = runner.next_rule(&StopContext::at(t, w), horizon)? {
        let step = advance_brownian(rng, law, rule, horizon - t)?;
        w += step.increment;
        partial = step.partial;
        if let (StepRule::Fixed { dt }, Some(h)) = (rule, spec.time_step()) {
            partial = dt < h * (1.0 - 1e-9);
        }
        t = if partial || horizon - (t + step.dt) <= 1e-12 * horizon.max(1.0) {
            horizon
        } else {
            t + step.dt
        };
        times.push(t);
        values.push(w);
        if partial {
            break;
        }
    }
    Ok(StopSequence { times, values, truncated_at: horizon, partial })
}
