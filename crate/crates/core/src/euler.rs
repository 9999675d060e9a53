//! Euler–Maruyama approximation on the stops of a discretization scheme, its
//! scaled pathwise error against a coupled reference solution, and the
//! two-driver stochastic-volatility variant.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{em_limit_variance, em_lower_bound_count, EmPathPoint};
use crate::brownian::{bridge_point, ExitLaw};
use crate::error::{domain, Error, Result};
use crate::schemes::{advance_brownian, EmQuantities, SchemeKind, SchemeRunner, SchemeSpec, StepRule, StopContext};

/// `dΞ = μ(Ξ, η) dt + σ(Ξ, η) dW`, `dη = θ(η) dt`.
pub trait SdeModel: Send + Sync + fmt::Debug {
    fn mu(&self, x: f64, eta: f64) -> f64;
    fn sigma(&self, x: f64, eta: f64) -> f64;
    fn d_mu(&self, x: f64, eta: f64) -> f64;
    fn d_sigma(&self, x: f64, eta: f64) -> f64;
    fn theta(&self, _eta: f64) -> f64 {
        0.0
    }
    fn initial(&self) -> (f64, f64);
    /// `(Ξ_t, e_t)` as a function of `W_t`, when the model has such a solution.
    fn exact(&self, _t: f64, _w: f64) -> Option<(f64, f64)> {
        None
    }
}

/// `dΞ = a Ξ dt + s Ξ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometric {
    pub x0: f64,
    pub drift: f64,
    pub vol: f64,
}

impl Geometric {
    /// `dΞ = Ξ dW`.
    pub fn standard(x0: f64) -> Self {
        Geometric { x0, drift: 0.0, vol: 1.0 }
    }
}

impl SdeModel for Geometric {
    fn mu(&self, x: f64, _: f64) -> f64 {
        self.drift * x
    }
    fn sigma(&self, x: f64, _: f64) -> f64 {
        self.vol * x
    }
    fn d_mu(&self, _: f64, _: f64) -> f64 {
        self.drift
    }
    fn d_sigma(&self, _: f64, _: f64) -> f64 {
        self.vol
    }
    fn initial(&self) -> (f64, f64) {
        (self.x0, 0.0)
    }
    fn exact(&self, t: f64, w: f64) -> Option<(f64, f64)> {
        let e = (self.drift * t + self.vol * w - 0.5 * self.vol * self.vol * t).exp();
        Some((self.x0 * e, e))
    }
}

/// `dΞ = −λ(Ξ − m) dt + s dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrnsteinUhlenbeck {
    pub x0: f64,
    pub lambda: f64,
    pub mean: f64,
    pub vol: f64,
}

impl SdeModel for OrnsteinUhlenbeck {
    fn mu(&self, x: f64, _: f64) -> f64 {
        -self.lambda * (x - self.mean)
    }
    fn sigma(&self, _: f64, _: f64) -> f64 {
        self.vol
    }
    fn d_mu(&self, _: f64, _: f64) -> f64 {
        -self.lambda
    }
    fn d_sigma(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn initial(&self) -> (f64, f64) {
        (self.x0, 0.0)
    }
}

/// `dΞ = −λ(Ξ − m) dt + s Ξ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRevertingGeometric {
    pub x0: f64,
    pub lambda: f64,
    pub mean: f64,
    pub vol: f64,
}

impl SdeModel for MeanRevertingGeometric {
    fn mu(&self, x: f64, _: f64) -> f64 {
        -self.lambda * (x - self.mean)
    }
    fn sigma(&self, x: f64, _: f64) -> f64 {
        self.vol * x
    }
    fn d_mu(&self, _: f64, _: f64) -> f64 {
        -self.lambda
    }
    fn d_sigma(&self, _: f64, _: f64) -> f64 {
        self.vol
    }
    fn initial(&self) -> (f64, f64) {
        (self.x0, 0.0)
    }
}

/// `dΞ = η Ξ dW` with the volatility level relaxing as `dη = κ(η_∞ − η) dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxingVolGeometric {
    pub x0: f64,
    pub eta0: f64,
    pub kappa: f64,
    pub eta_inf: f64,
}

impl SdeModel for RelaxingVolGeometric {
    fn mu(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn sigma(&self, x: f64, eta: f64) -> f64 {
        eta * x
    }
    fn d_mu(&self, _: f64, _: f64) -> f64 {
        0.0
    }
    fn d_sigma(&self, _: f64, eta: f64) -> f64 {
        eta
    }
    fn theta(&self, eta: f64) -> f64 {
        self.kappa * (self.eta_inf - eta)
    }
    fn initial(&self) -> (f64, f64) {
        (self.x0, self.eta0)
    }
}

/// Coefficients given on an ascending grid, interpolated linearly and
/// extrapolated with the end slopes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tabulated {
    x0: f64,
    grid: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl Tabulated {
    pub fn new(x0: f64, grid: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || mu.len() != grid.len() || sigma.len() != grid.len() {
            return Err(Error::Input("coefficient tables need matching lengths of at least 2".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("coefficient grid must be strictly increasing".into()));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) || !x0.is_finite() {
            return Err(Error::Input("coefficient tables must be finite".into()));
        }
        Ok(Tabulated { x0, grid, mu, sigma })
    }

    fn segment(&self, x: f64) -> usize {
        self.grid.partition_point(|&g| g <= x).clamp(1, self.grid.len() - 1) - 1
    }

    fn interp(&self, table: &[f64], x: f64) -> (f64, f64) {
        let i = self.segment(x);
        let slope = (table[i + 1] - table[i]) / (self.grid[i + 1] - self.grid[i]);
        (table[i] + slope * (x - self.grid[i]), slope)
    }
}

impl SdeModel for Tabulated {
    fn mu(&self, x: f64, _: f64) -> f64 {
        self.interp(&self.mu, x).0
    }
    fn sigma(&self, x: f64, _: f64) -> f64 {
        self.interp(&self.sigma, x).0
    }
    fn d_mu(&self, x: f64, _: f64) -> f64 {
        self.interp(&self.mu, x).1
    }
    fn d_sigma(&self, x: f64, _: f64) -> f64 {
        self.interp(&self.sigma, x).1
    }
    fn initial(&self) -> (f64, f64) {
        (self.x0, 0.0)
    }
}

/// How the reference solution `Ξ` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Closed form in `W_t`; the driver is advanced by exact exit sampling.
    Exact,
    /// Milstein on a grid `refinement` times finer than the first scheme step,
    /// with the scheme stops detected on that grid.
    FineGrid { refinement: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub reference: Reference,
    pub bisection_levels: u32,
    /// Fine steps starting or ending within this many step standard deviations
    /// of a barrier are refined by Brownian-bridge bisection.
    pub refine_zone: f64,
    /// Path samples kept for the limit-variance quadrature.
    pub limit_points: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { reference: Reference::FineGrid { refinement: 256 }, bisection_levels: 3, refine_zone: 3.0, limit_points: 1024 }
    }
}

/// Euler approximation at the scheme stops, horizon appended.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EmPath {
    pub times: Vec<f64>,
    pub driver: Vec<f64>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    /// The last interval was cut at the horizon.
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmErrorRecord {
    /// `ε⁻¹(Ξⁿ_t − Ξ_t)`.
    pub l_t: f64,
    pub e_t: f64,
    pub n_steps: usize,
    pub xi_scheme: f64,
    pub xi_reference: f64,
    /// `(1/6) e_t² ∫ e⁻² σ² (∂σ)² c² ds` along the reference path.
    pub limit_variance: f64,
    /// `(1/6) e_t² (∫ e⁻¹ |σ ∂σ| ds)²`.
    pub count_bound: f64,
    pub sign_changes: usize,
}

/// Frozen-coefficient Euler state with the running `log ê`.
struct EulerState {
    time: f64,
    w: f64,
    xi: f64,
    eta: f64,
    log_e_hat: f64,
}

impl EulerState {
    fn new(model: &dyn SdeModel) -> Self {
        let (xi, eta) = model.initial();
        EulerState { time: 0.0, w: 0.0, xi, eta, log_e_hat: 0.0 }
    }

    fn step(&mut self, model: &dyn SdeModel, time: f64, w: f64) {
        let (dt, dw) = (time - self.time, w - self.w);
        let (x, e) = (self.xi, self.eta);
        let ds = model.d_sigma(x, e);
        self.log_e_hat += model.d_mu(x, e) * dt + ds * dw - 0.5 * ds * ds * dt;
        self.xi = x + model.mu(x, e) * dt + model.sigma(x, e) * dw;
        self.eta = e + model.theta(e) * dt;
        self.time = time;
        self.w = w;
    }

    fn context(&self, model: &dyn SdeModel) -> StopContext {
        StopContext {
            time: self.time,
            driver: self.w,
            state: self.xi,
            hedge: None,
            em: Some(EmQuantities {
                e_hat: self.log_e_hat.exp(),
                sigma_dsigma: model.sigma(self.xi, self.eta) * model.d_sigma(self.xi, self.eta),
            }),
        }
    }
}

fn limit_point(model: &dyn SdeModel, t: f64, xi: f64, eta: f64, e: f64) -> EmPathPoint {
    EmPathPoint { t, e, sigma: model.sigma(xi, eta), d_sigma: model.d_sigma(xi, eta) }
}

fn c_sq_at(spec: &SchemeSpec, p: &EmPathPoint, w: f64, xi: f64) -> f64 {
    let ctx = StopContext {
        time: p.t,
        driver: w,
        state: xi,
        hedge: None,
        em: Some(EmQuantities { e_hat: p.e, sigma_dsigma: p.sigma * p.d_sigma }),
    };
    spec.realized_coefficients(&ctx).map(|c| c.c_sq()).unwrap_or(f64::NAN)
}

fn finish_limits(points: &[EmPathPoint], c_sq: &[f64], t: f64) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Ok((f64::NAN, f64::NAN));
    }
    let lookup = |p: &EmPathPoint| {
        let i = points.partition_point(|q| q.t < p.t).min(c_sq.len() - 1);
        c_sq[i]
    };
    Ok((em_limit_variance(points, &lookup, t)?, em_lower_bound_count(points, t)?))
}

fn check_horizon(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("horizon must be positive, got {t}"));
    }
    Ok(())
}

/// Euler approximation on the stops of `scheme`, with the Brownian driver
/// advanced exactly (exit sampling for barriers, Gaussian steps otherwise).
pub fn em_solve<R: Rng + ?Sized>(rng: &mut R, model: &dyn SdeModel, scheme: &SchemeSpec, t: f64) -> Result<EmPath> {
    Ok(run_exact(rng, model, scheme, t, false)?.0)
}

fn run_exact<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    scheme: &SchemeSpec,
    t: f64,
    with_limits: bool,
) -> Result<(EmPath, usize, Vec<EmPathPoint>, Vec<f64>, usize)> {
    check_horizon(t)?;
    let law = ExitLaw::standard();
    let mut runner = SchemeRunner::new(scheme.clone());
    let mut st = EulerState::new(model);
    let mut path = EmPath { times: vec![0.0], driver: vec![0.0], xi: vec![st.xi], eta: vec![st.eta], partial: false };
    let (mut points, mut c_sq) = (Vec::new(), Vec::new());
    let mut push_limit = |time: f64, w: f64| {
        if let Some((xi, e)) = model.exact(time, w) {
            let eta = model.initial().1;
            let p = limit_point(model, time, xi, eta, e);
            c_sq.push(c_sq_at(scheme, &p, w, xi));
            points.push(p);
        }
    };
    if with_limits {
        push_limit(0.0, 0.0);
    }
    let mut n = 0;
    while let Some(rule) = runner.next_rule(&st.context(model), t)? {
        let step = advance_brownian(rng, law, rule, t - st.time)?;
        let mut partial = step.partial;
        if let (StepRule::Fixed { dt }, Some(h)) = (rule, scheme.time_step()) {
            partial = dt < h * (1.0 - 1e-9);
        }
        let time = if partial || t - (st.time + step.dt) <= 1e-12 * t.max(1.0) { t } else { st.time + step.dt };
        st.step(model, time, st.w + step.increment);
        path.times.push(time);
        path.driver.push(st.w);
        path.xi.push(st.xi);
        path.eta.push(st.eta);
        if with_limits {
            push_limit(time, st.w);
        }
        if partial {
            path.partial = true;
            break;
        }
        n += 1;
    }
    Ok((path, n, points, c_sq, runner.sign_changes()))
}

/// Milstein reference with the exponential factor accumulated at the same states.
struct ReferenceState {
    xi: f64,
    eta: f64,
    log_e: f64,
}

impl ReferenceState {
    fn step(&mut self, model: &dyn SdeModel, dt: f64, dw: f64) {
        let (x, e) = (self.xi, self.eta);
        let (s, ds) = (model.sigma(x, e), model.d_sigma(x, e));
        self.log_e += model.d_mu(x, e) * dt + ds * dw - 0.5 * ds * ds * dt;
        self.xi = x + model.mu(x, e) * dt + s * dw + 0.5 * s * ds * (dw * dw - dt);
        // Heun for the deterministic component.
        let k1 = model.theta(e);
        let k2 = model.theta(e + dt * k1);
        self.eta = e + 0.5 * dt * (k1 + k2);
    }
}

/// Scheme stop detection on a fine Brownian grid shared with a reference.
struct FineStops {
    runner: SchemeRunner,
    rule: Option<StepRule>,
    anchor: f64,
    stop_time: f64,
}

impl FineStops {
    fn crosses(&self, time: f64, w: f64) -> bool {
        match self.rule {
            Some(StepRule::Fixed { dt }) => time >= self.stop_time + dt - 1e-9 * dt,
            Some(StepRule::Symmetric { radius }) => (w - self.anchor).abs() >= radius,
            Some(StepRule::Asymmetric { up, down }) => w - self.anchor >= up || self.anchor - w >= down,
            None => false,
        }
    }

    fn gap(&self, w: f64) -> f64 {
        match self.rule {
            Some(StepRule::Symmetric { radius }) => radius - (w - self.anchor).abs(),
            Some(StepRule::Asymmetric { up, down }) => (self.anchor + up - w).min(w - self.anchor + down),
            _ => f64::INFINITY,
        }
    }
}

fn fine_dt(rule: StepRule, refinement: usize) -> f64 {
    let first = match rule {
        StepRule::Fixed { dt } => dt,
        StepRule::Symmetric { radius } => radius * radius,
        StepRule::Asymmetric { up, down } => up * down,
    };
    first / refinement.max(1) as f64
}

/// Fills `(t0, w0) → (t0 + h, w1)` with `2^levels − 1` bridge points (interior only).
fn bridge_fill<R: Rng + ?Sized>(rng: &mut R, h: f64, w0: f64, w1: f64, levels: u32) -> Vec<f64> {
    let m = 1usize << levels;
    let mut ws = vec![f64::NAN; m + 1];
    ws[0] = w0;
    ws[m] = w1;
    let mut span = m;
    while span > 1 {
        let half = span / 2;
        for left in (0..m).step_by(span) {
            let (a, b, mid) = (left as f64 / m as f64, (left + span) as f64 / m as f64, (left + half) as f64 / m as f64);
            ws[left + half] = bridge_point(rng, a * h, ws[left], b * h, ws[left + span], mid * h, 1.0);
        }
        span = half;
    }
    ws[1..m].to_vec()
}

struct FineRun<'a> {
    model: &'a dyn SdeModel,
    horizon: f64,
    eul: EulerState,
    reference: ReferenceState,
    stops: FineStops,
    path: EmPath,
    time: f64,
    w: f64,
    n_steps: usize,
}

impl FineRun<'_> {
    fn visit(&mut self, time: f64, w: f64) -> Result<()> {
        self.reference.step(self.model, time - self.time, w - self.w);
        self.time = time;
        self.w = w;
        if self.stops.crosses(time, w) {
            self.eul.step(self.model, time, w);
            self.n_steps += 1;
            self.record_stop();
            self.stops.anchor = w;
            self.stops.stop_time = time;
            self.stops.rule = self.stops.runner.next_rule(&self.eul.context(self.model), self.horizon)?;
        }
        Ok(())
    }

    fn record_stop(&mut self) {
        self.path.times.push(self.eul.time);
        self.path.driver.push(self.eul.w);
        self.path.xi.push(self.eul.xi);
        self.path.eta.push(self.eul.eta);
    }
}

fn run_fine<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    scheme: &SchemeSpec,
    t: f64,
    refinement: usize,
    opts: &EmOptions,
) -> Result<(EmPath, EmErrorRecord)> {
    check_horizon(t)?;
    let eul = EulerState::new(model);
    let (xi0, eta0) = model.initial();
    let mut stops = FineStops { runner: SchemeRunner::new(scheme.clone()), rule: None, anchor: 0.0, stop_time: 0.0 };
    stops.rule = stops.runner.next_rule(&eul.context(model), t)?;
    let record_every = t / opts.limit_points.max(1) as f64;
    let mut run = FineRun {
        model,
        horizon: t,
        path: EmPath { times: vec![0.0], driver: vec![0.0], xi: vec![eul.xi], eta: vec![eul.eta], partial: false },
        eul,
        reference: ReferenceState { xi: xi0, eta: eta0, log_e: 0.0 },
        stops,
        time: 0.0,
        w: 0.0,
        n_steps: 0,
    };
    let mut points = vec![limit_point(model, 0.0, xi0, eta0, 1.0)];
    let mut c_sq = vec![c_sq_at(scheme, &points[0], 0.0, xi0)];
    let mut bridge_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let levels = opts.bisection_levels.min(10);
    let mut next_record = record_every;
    // The fine step follows the current rule, so that every scheme interval
    // spans about `refinement` fine steps even when the radius drifts.
    while let Some(rule) = run.stops.rule {
        let (t0, w0) = (run.time, run.w);
        let mut t1 = (t0 + fine_dt(rule, refinement)).min(t);
        if let StepRule::Fixed { dt } = rule {
            let stop = run.stops.stop_time + dt;
            if t1 >= stop - 1e-9 * dt {
                t1 = stop;
            }
        }
        if t - t1 <= 1e-12 * t.max(1.0) {
            t1 = t;
        }
        let h = t1 - t0;
        let z: f64 = rng.sample(StandardNormal);
        let w1 = w0 + h.sqrt() * z;
        if levels > 0 && run.stops.gap(w0).min(run.stops.gap(w1)) < opts.refine_zone * h.sqrt() {
            let m = 1usize << levels;
            for (i, wi) in bridge_fill(&mut bridge_rng, h, w0, w1, levels).into_iter().enumerate() {
                run.visit(t0 + (i + 1) as f64 / m as f64 * h, wi)?;
            }
        }
        run.visit(t1, w1)?;
        if run.time >= next_record || t1 == t {
            next_record += record_every;
            let r = &run.reference;
            let p = limit_point(model, run.time, r.xi, r.eta, r.log_e.exp());
            c_sq.push(c_sq_at(scheme, &p, run.w, r.xi));
            points.push(p);
        }
        if t1 == t {
            break;
        }
    }
    if run.stops.rule.is_some() {
        // Frozen-coefficient interpolation over the interval cut at the horizon.
        run.eul.step(model, t, run.w);
        run.record_stop();
        run.path.partial = true;
    }
    let (limit_variance, count_bound) = finish_limits(&points, &c_sq, t)?;
    let record = EmErrorRecord {
        l_t: (run.eul.xi - run.reference.xi) / scheme.epsilon,
        e_t: run.reference.log_e.exp(),
        n_steps: run.n_steps,
        xi_scheme: run.eul.xi,
        xi_reference: run.reference.xi,
        limit_variance,
        count_bound,
        sign_changes: run.stops.runner.sign_changes(),
    };
    Ok((run.path, record))
}

fn run_with_reference<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    scheme: &SchemeSpec,
    t: f64,
    opts: &EmOptions,
) -> Result<(EmPath, EmErrorRecord)> {
    match opts.reference {
        Reference::Exact => {
            let (path, n_steps, points, c_sq, sign_changes) = run_exact(rng, model, scheme, t, true)?;
            let w_t = *path.driver.last().unwrap();
            let (xi, e) = model
                .exact(t, w_t)
                .ok_or_else(|| Error::Input("model has no closed-form solution; use the fine-grid reference".into()))?;
            let xi_n = *path.xi.last().unwrap();
            let (limit_variance, count_bound) = finish_limits(&points, &c_sq, t)?;
            let record = EmErrorRecord {
                l_t: (xi_n - xi) / scheme.epsilon,
                e_t: e,
                n_steps,
                xi_scheme: xi_n,
                xi_reference: xi,
                limit_variance,
                count_bound,
                sign_changes,
            };
            Ok((path, record))
        }
        Reference::FineGrid { refinement } => {
            if refinement < 64 {
                return domain(format!("reference refinement must be at least 64, got {refinement}"));
            }
            run_fine(rng, model, scheme, t, refinement, opts)
        }
    }
}

/// Euler path at the scheme stops together with its error record.
pub fn run_em_path<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    scheme: &SchemeSpec,
    t: f64,
    opts: &EmOptions,
) -> Result<(EmPath, EmErrorRecord)> {
    run_with_reference(rng, model, scheme, t, opts)
}

/// Scaled Euler error at `t` against a coupled reference solution.
pub fn em_error<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    scheme: &SchemeSpec,
    t: f64,
    opts: &EmOptions,
) -> Result<EmErrorRecord> {
    Ok(run_with_reference(rng, model, scheme, t, opts)?.1)
}

/// Euler approximation on the adaptive barrier scheme
/// `radius² = max(ε² ê / |σ ∂σ|, floor)` with `ê` from the Euler states.
pub fn em_adaptive_solve<R: Rng + ?Sized>(
    rng: &mut R,
    model: &dyn SdeModel,
    epsilon: f64,
    floor: Option<f64>,
    t: f64,
    opts: &EmOptions,
) -> Result<(EmPath, EmErrorRecord)> {
    let spec = SchemeSpec::new(SchemeKind::AdaptiveEM { floor }, epsilon)?;
    run_with_reference(rng, model, &spec, t, opts)
}

/// Function of `(t, v)`.
pub type VolSurface = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// `dΞ = a Ξ dt + σ̂(t, V)[ρ dW¹ + √(1 − ρ²) dW²]` with
/// `V_t = (√v₀ + ν W¹_t / 2)²`, a zero-reversion square-root process
/// (`dV = ν²/4 dt + ν √V dW¹` while `√v₀ + ν W¹/2 > 0`).
#[derive(Clone)]
pub struct StochVolModel {
    pub xi0: f64,
    pub drift: f64,
    pub v0: f64,
    pub nu: f64,
    pub sigma_hat: VolSurface,
    pub rho: VolSurface,
}

impl fmt::Debug for StochVolModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StochVolModel")
            .field("xi0", &self.xi0)
            .field("drift", &self.drift)
            .field("v0", &self.v0)
            .field("nu", &self.nu)
            .finish_non_exhaustive()
    }
}

impl StochVolModel {
    /// `σ̂(t, v) = √v`, constant correlation.
    pub fn heston_like(xi0: f64, v0: f64, nu: f64, rho: f64) -> Self {
        StochVolModel {
            xi0,
            drift: 0.0,
            v0,
            nu,
            sigma_hat: Arc::new(|_, v: f64| v.max(0.0).sqrt()),
            rho: Arc::new(move |_, _| rho),
        }
    }

    pub fn variance(&self, w1: f64) -> f64 {
        let y = self.v0.sqrt() + 0.5 * self.nu * w1;
        y * y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StochVolRecord {
    pub l_t: f64,
    pub n_steps: usize,
    pub xi_scheme: f64,
    pub xi_reference: f64,
}

/// Euler error for the stochastic-volatility model with the scheme on `W¹`.
/// `W¹` lives on a fine grid (stops detected there), `W²` is drawn on the same
/// grid and summed over the stop intervals; the reference is the fine-grid Euler.
pub fn em_stochvol_solve<R: Rng + ?Sized>(
    rng: &mut R,
    model: &StochVolModel,
    scheme: &SchemeSpec,
    t: f64,
    refinement: usize,
) -> Result<StochVolRecord> {
    check_horizon(t)?;
    if refinement < 64 {
        return domain(format!("reference refinement must be at least 64, got {refinement}"));
    }
    let mut stops = FineStops { runner: SchemeRunner::new(scheme.clone()), rule: None, anchor: 0.0, stop_time: 0.0 };
    stops.rule = stops.runner.next_rule(&StopContext::at(0.0, 0.0), t)?;
    let mut dt = fine_dt(stops.rule.unwrap(), refinement).min(t);
    if let Some(StepRule::Fixed { dt: h }) = stops.rule {
        dt = h / (h / dt).ceil().max(1.0);
    }
    let n_fine = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
    let (mut time, mut w1, mut w2) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut xi_ref = model.xi0;
    let mut xi_n = model.xi0;
    let (mut stop_w1, mut stop_w2) = (0.0, 0.0);
    let mut n_steps = 0;
    let coeffs = |time: f64, w1: f64| -> Result<(f64, f64)> {
        let v = model.variance(w1);
        let rho = (model.rho)(time, v);
        if !(rho.abs() <= 1.0) {
            return domain(format!("correlation must lie in [-1, 1], got {rho}"));
        }
        Ok(((model.sigma_hat)(time, v), rho))
    };
    let (mut s_n, mut rho_n) = coeffs(0.0, 0.0)?;
    for k in 1..=n_fine {
        let t1 = if k == n_fine { t } else { k as f64 * dt };
        let h = t1 - time;
        let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let (d1, d2) = (h.sqrt() * z1, h.sqrt() * z2);
        let (s, rho) = coeffs(time, w1)?;
        xi_ref += model.drift * xi_ref * h + s * (rho * d1 + (1.0 - rho * rho).sqrt() * d2);
        time = t1;
        w1 += d1;
        w2 += d2;
        let last = k == n_fine;
        if stops.crosses(time, w1) || (last && stops.rule.is_some()) {
            let span = time - stops.stop_time;
            xi_n += model.drift * xi_n * span
                + s_n * (rho_n * (w1 - stop_w1) + (1.0 - rho_n * rho_n).sqrt() * (w2 - stop_w2));
            if stops.crosses(time, w1) {
                n_steps += 1;
            }
            (stop_w1, stop_w2) = (w1, w2);
            (s_n, rho_n) = coeffs(time, w1)?;
            stops.anchor = w1;
            stops.stop_time = time;
            stops.rule = stops.runner.next_rule(&StopContext::at(time, w1), t)?;
        }
    }
    Ok(StochVolRecord { l_t: (xi_n - xi_ref) / scheme.epsilon, n_steps, xi_scheme: xi_n, xi_reference: xi_ref })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split;

    fn space(eps: f64) -> SchemeSpec {
        SchemeSpec::new(SchemeKind::SpaceEquidistant, eps).unwrap()
    }

    fn time(eps: f64) -> SchemeSpec {
        SchemeSpec::new(SchemeKind::TimeEquidistant { n: None }, eps).unwrap()
    }

    #[derive(Debug)]
    struct Additive;

    impl SdeModel for Additive {
        fn mu(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn sigma(&self, _: f64, _: f64) -> f64 {
            1.0
        }
        fn d_mu(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn d_sigma(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn initial(&self) -> (f64, f64) {
            (0.5, 0.0)
        }
        fn exact(&self, _: f64, w: f64) -> Option<(f64, f64)> {
            Some((0.5 + w, 1.0))
        }
    }

    #[test]
    fn additive_model_has_no_error() {
        for reference in [Reference::Exact, Reference::FineGrid { refinement: 64 }] {
            let opts = EmOptions { reference, ..Default::default() };
            for spec in [space(0.1), time(0.1)] {
                let r = em_error(&mut split(1, 0), &Additive, &spec, 1.0, &opts).unwrap();
                assert!(r.l_t.abs() < 1e-12, "{r:?}");
                assert_eq!(r.e_t, 1.0);
                assert_eq!(r.limit_variance, 0.0);
            }
        }
    }

    #[test]
    fn single_geometric_step() {
        let spec = SchemeSpec::new(SchemeKind::TimeEquidistant { n: Some(1) }, 1.0).unwrap();
        let path = em_solve(&mut split(2, 0), &Geometric::standard(2.0), &spec, 1.0).unwrap();
        assert_eq!(path.times, vec![0.0, 1.0]);
        assert!((path.xi[1] - 2.0 * (1.0 + path.driver[1])).abs() < 1e-15);
        let relax = RelaxingVolGeometric { x0: 1.0, eta0: 0.3, kappa: 0.0, eta_inf: 0.1 };
        let path = em_solve(&mut split(2, 1), &relax, &time(0.1), 1.0).unwrap();
        assert!(path.eta.iter().all(|&e| e == 0.3));
    }

    #[test]
    fn exponential_factor_for_geometric() {
        let model = Geometric { x0: 1.0, drift: 0.1, vol: 0.4 };
        let opts = EmOptions { reference: Reference::FineGrid { refinement: 256 }, ..Default::default() };
        let r = em_error(&mut split(3, 0), &model, &space(0.1), 1.0, &opts).unwrap();
        // e_t = Ξ_t / ξ₀ for the linear model, and the Milstein reference is exact
        // up to the drift discretization.
        assert!((r.e_t - r.xi_reference).abs() < 1e-3 * r.e_t, "{r:?}");
        assert!(r.limit_variance > 0.0 && r.count_bound <= r.limit_variance * (1.0 + 1e-9));
    }

    #[test]
    fn fine_grid_matches_exact_reference_in_variance() {
        let model = Geometric::standard(1.0);
        let fine = EmOptions::default();
        let exact = EmOptions { reference: Reference::Exact, ..Default::default() };
        let n = 1500;
        let var = |opts: &EmOptions, seed| {
            let mut s = 0.0;
            for rep in 0..n {
                let r = em_error(&mut split(seed, rep), &model, &space(0.1), 0.5, opts).unwrap();
                s += r.l_t * r.l_t;
            }
            s / n as f64
        };
        let (a, b) = (var(&fine, 4), var(&exact, 5));
        assert!((a / b - 1.0).abs() < 0.2, "{a} {b}");
    }

    #[test]
    fn huge_floor_gives_fixed_barrier() {
        // A floor far above the natural radius² pins the radius at √floor.
        let exact = EmOptions { reference: Reference::Exact, ..Default::default() };
        let (huge, _) = em_adaptive_solve(&mut split(7, 0), &Geometric::standard(1.0), 0.1, Some(0.04), 1.0, &exact).unwrap();
        let incs: Vec<f64> = huge.driver.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let full = &incs[..incs.len() - usize::from(huge.partial)];
        assert!(full.len() > 5);
        assert!(full.iter().all(|d| (d - 0.2).abs() < 1e-9), "{full:?}");
    }

    #[test]
    fn stochvol_degenerate_cases() {
        let frozen = StochVolModel::heston_like(1.0, 0.04, 0.0, 0.3);
        let r = em_stochvol_solve(&mut split(8, 0), &frozen, &space(0.1), 1.0, 64).unwrap();
        assert!(r.l_t.abs() < 1e-10, "{r:?}");
        let bad = StochVolModel::heston_like(1.0, 0.04, 0.1, 1.5);
        assert!(em_stochvol_solve(&mut split(8, 1), &bad, &space(0.1), 1.0, 64).is_err());
    }

    #[test]
    fn tabulated_interpolation() {
        let m = Tabulated::new(1.0, vec![0.0, 1.0, 2.0], vec![0.0, -1.0, -4.0], vec![0.5, 1.0, 1.0]).unwrap();
        assert!((m.mu(1.5, 0.0) + 2.5).abs() < 1e-15);
        assert_eq!(m.d_mu(1.5, 0.0), -3.0);
        assert_eq!(m.d_sigma(0.5, 0.0), 0.5);
        assert!((m.sigma(-1.0, 0.0) - 0.0).abs() < 1e-15);
        assert!(Tabulated::new(1.0, vec![0.0, 0.0], vec![0.0; 2], vec![1.0; 2]).is_err());
    }
}
