//! Black–Scholes-type pricing with a variance budget and the discrete
//! delta-hedging simulator.
//!
//! Prices are `p(S, R, Σ) = e^{−R} E f(S e^{R − Σ/2 + √Σ Z})` with `R` the
//! accumulated rate and `Σ` the remaining variance. The hedge keeps the value
//! `V_t = p(S_t, r(T − t), K − ⟨log S⟩_t)` and holds `π = ∂p/∂S` units, which
//! is self-financing and super-replicates convex payoffs while the realized
//! variance stays under the budget `K`.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{hedge_variances, HedgePoint, HedgeVariances};
use crate::brownian::bridge_point;
use crate::error::{domain, Error, Result};
use crate::normal;
use crate::rng::split;
use crate::schemes::{HedgeQuantities, SchemeKind, SchemeRunner, SchemeSpec, StepRule, StopContext};

/// Convex piecewise-linear payoff `f(x) = a + b x + Σ cᵢ (x − kᵢ)⁺` with `cᵢ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payoff {
    intercept: f64,
    slope: f64,
    kinks: Vec<(f64, f64)>,
}

impl Payoff {
    pub fn call(strike: f64) -> Result<Self> {
        Payoff::piecewise_linear(0.0, 0.0, vec![(strike, 1.0)])
    }

    pub fn put(strike: f64) -> Result<Self> {
        Payoff::piecewise_linear(strike, -1.0, vec![(strike, 1.0)])
    }

    /// `kinks` are `(kᵢ, cᵢ)`: strike and slope increase at the strike.
    pub fn piecewise_linear(intercept: f64, slope: f64, mut kinks: Vec<(f64, f64)>) -> Result<Self> {
        if !intercept.is_finite() || !slope.is_finite() {
            return domain("payoff intercept and slope must be finite");
        }
        for &(k, c) in &kinks {
            if !(k > 0.0) || !k.is_finite() {
                return domain(format!("kink location must be positive, got {k}"));
            }
            if !(c >= 0.0) || !c.is_finite() {
                return domain(format!("payoff is not convex: slope change {c} at {k}"));
            }
        }
        kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Payoff { intercept, slope, kinks })
    }

    pub fn value(&self, x: f64) -> f64 {
        self.intercept + self.slope * x + self.kinks.iter().map(|&(k, c)| c * (x - k).max(0.0)).sum::<f64>()
    }

    /// Right derivative.
    pub fn slope_at(&self, x: f64) -> f64 {
        self.slope + self.kinks.iter().filter(|&&(k, _)| x >= k).map(|&(_, c)| c).sum::<f64>()
    }

    pub fn kinks(&self) -> &[(f64, f64)] {
        &self.kinks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Greeks {
    pub price: f64,
    pub delta: f64,
    pub gamma: f64,
}

fn check_args(s: f64, sigma_acc: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return domain(format!("spot must be positive, got {s}"));
    }
    if !(sigma_acc >= 0.0) || !sigma_acc.is_finite() {
        return domain(format!("remaining variance must be non-negative, got {sigma_acc}"));
    }
    Ok(())
}

/// Closed-form price and greeks: affine part plus a sum of calls.
pub fn bs_greeks_closed(s: f64, r_acc: f64, sigma_acc: f64, payoff: &Payoff) -> Result<Greeks> {
    check_args(s, sigma_acc)?;
    let disc = (-r_acc).exp();
    let mut g = Greeks { price: disc * payoff.intercept + payoff.slope * s, delta: payoff.slope, gamma: 0.0 };
    if sigma_acc == 0.0 {
        let fwd = s / disc;
        for &(k, c) in &payoff.kinks {
            if fwd > k {
                g.price += c * (s - k * disc);
                g.delta += c;
            }
        }
        return Ok(g);
    }
    let sq = sigma_acc.sqrt();
    for &(k, c) in &payoff.kinks {
        let d1 = ((s / k).ln() + r_acc) / sq + 0.5 * sq;
        let d2 = d1 - sq;
        let n1 = normal::cdf(d1);
        g.price += c * (s * n1 - k * disc * normal::cdf(d2));
        g.delta += c * n1;
        g.gamma += c * normal::pdf(d1) / (s * sq);
    }
    Ok(g)
}

struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Gauss–Legendre rule on `[-1, 1]`, roots by Newton on the three-term recurrence.
fn gauss_legendre(n: usize) -> GaussLegendre {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    GaussLegendre { nodes, weights }
}

fn rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(12))
}

/// `∫ h(z) φ(z) dz` over the effective support, with panels split at `breaks`.
fn gaussian_integral(breaks: &[f64], upper: f64, h: impl Fn(f64) -> f64) -> f64 {
    let gl = rule();
    let mut cuts = vec![-12.0];
    cuts.extend(breaks.iter().copied().filter(|z| *z > -12.0 && *z < upper));
    cuts.push(upper);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let panels = ((w[1] - w[0]) / 0.5).ceil().max(1.0) as usize;
        let width = (w[1] - w[0]) / panels as f64;
        for p in 0..panels {
            let mid = w[0] + (p as f64 + 0.5) * width;
            for (x, wt) in gl.nodes.iter().zip(&gl.weights) {
                let z = mid + 0.5 * width * x;
                total += 0.5 * width * wt * h(z) * normal::pdf(z);
            }
        }
    }
    total
}

fn kink_points(s: f64, r_acc: f64, sigma_acc: f64, payoff: &Payoff) -> Vec<f64> {
    let sq = sigma_acc.sqrt();
    payoff.kinks.iter().map(|&(k, _)| ((k / s).ln() - r_acc + 0.5 * sigma_acc) / sq).collect()
}

/// Price by composite Gauss–Legendre quadrature in the Gaussian variable,
/// split at the payoff kinks.
pub fn bs_price(s: f64, r_acc: f64, sigma_acc: f64, payoff: &Payoff) -> Result<f64> {
    check_args(s, sigma_acc)?;
    if sigma_acc == 0.0 {
        return Ok((-r_acc).exp() * payoff.value(s * r_acc.exp()));
    }
    let sq = sigma_acc.sqrt();
    let breaks = kink_points(s, r_acc, sigma_acc, payoff);
    let drift = r_acc - 0.5 * sigma_acc;
    let integral = gaussian_integral(&breaks, 12.0 + sq, |z| payoff.value(s * (drift + sq * z).exp()));
    Ok((-r_acc).exp() * integral)
}

/// Price, delta by quadrature of `f'`, and gamma from the kink masses of `f''`.
pub fn bs_greeks(s: f64, r_acc: f64, sigma_acc: f64, payoff: &Payoff) -> Result<Greeks> {
    let price = bs_price(s, r_acc, sigma_acc, payoff)?;
    if sigma_acc == 0.0 {
        return Ok(Greeks { price, delta: payoff.slope_at(s * r_acc.exp()), gamma: 0.0 });
    }
    let sq = sigma_acc.sqrt();
    let breaks = kink_points(s, r_acc, sigma_acc, payoff);
    let drift = r_acc - 0.5 * sigma_acc;
    let delta = (-r_acc).exp()
        * gaussian_integral(&breaks, 12.0 + sq, |z| {
            let growth = (drift + sq * z).exp();
            payoff.slope_at(s * growth) * growth
        });
    let gamma = (-r_acc).exp()
        * payoff
            .kinks
            .iter()
            .zip(&breaks)
            .map(|(&(k, c), &z)| c * k * normal::pdf(z) / (s * s * sq))
            .sum::<f64>();
    Ok(Greeks { price, delta, gamma })
}

/// Relative residuals of `∂p/∂Σ = S²Γ/2` and `∂p/∂R = S ∂p/∂S − p`, with the
/// left sides from five-point central differences of the closed-form price.
pub fn pde_residuals(s: f64, r_acc: f64, sigma_acc: f64, payoff: &Payoff) -> Result<(f64, f64)> {
    if !(sigma_acc > 0.0) {
        return domain("pde check needs positive remaining variance");
    }
    let price = |s: f64, r: f64, v: f64| bs_greeks_closed(s, r, v, payoff).map(|g| g.price);
    let five = |f: &dyn Fn(f64) -> Result<f64>, x: f64, h: f64| -> Result<f64> {
        Ok((f(x - 2.0 * h)? - 8.0 * f(x - h)? + 8.0 * f(x + h)? - f(x + 2.0 * h)?) / (12.0 * h))
    };
    let g = bs_greeks_closed(s, r_acc, sigma_acc, payoff)?;
    let dp_dsigma = five(&|v| price(s, r_acc, v), sigma_acc, 1e-3 * sigma_acc)?;
    let dp_dr = five(&|r| price(s, r, sigma_acc), r_acc, 1e-3 * r_acc.abs().max(0.1))?;
    let rel = |a: f64, b: f64| {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    };
    Ok((rel(dp_dsigma, 0.5 * s * s * g.gamma), rel(dp_dr, s * g.delta - g.price)))
}

/// Local volatility `σ(t, S)`.
pub type VolFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct HedgeModel {
    pub rate: f64,
    pub payoff: Payoff,
    pub spot: f64,
    pub vol: VolFn,
    /// Physical drift `μ` of `S`.
    pub drift: f64,
    /// Variance budget `K` for `⟨log S⟩`.
    pub budget: f64,
    pub horizon: f64,
}

impl std::fmt::Debug for HedgeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HedgeModel")
            .field("rate", &self.rate)
            .field("payoff", &self.payoff)
            .field("spot", &self.spot)
            .field("drift", &self.drift)
            .field("budget", &self.budget)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl HedgeModel {
    /// Constant volatility, zero drift and budget `σ²T`.
    pub fn black_scholes(spot: f64, sigma: f64, rate: f64, payoff: Payoff, horizon: f64) -> Self {
        HedgeModel {
            rate,
            payoff,
            spot,
            vol: Arc::new(move |_, _| sigma),
            drift: 0.0,
            budget: sigma * sigma * horizon,
            horizon,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) {
            return domain(format!("variance budget must be positive, got {}", self.budget));
        }
        if !(self.spot > 0.0) || !(self.horizon > 0.0) {
            return domain("spot and horizon must be positive");
        }
        if !self.rate.is_finite() || !self.drift.is_finite() {
            return domain("rate and drift must be finite");
        }
        Ok(())
    }

    fn greeks(&self, time: f64, s: f64, qv: f64) -> Result<Greeks> {
        bs_greeks_closed(s, self.rate * (self.horizon - time), (self.budget - qv).max(0.0), &self.payoff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HedgeSimOptions {
    /// Fine grid step; by default the expected first trade interval over `steps_per_interval`.
    pub fine_dt: Option<f64>,
    pub steps_per_interval: usize,
    /// Brownian-bridge bisection levels inside fine steps close to the barrier.
    pub bisection_levels: u32,
    /// A step is refined when an endpoint lies within this many step standard
    /// deviations of `π` from the barrier.
    pub refine_zone: f64,
    pub max_fine_steps: usize,
    /// Number of path samples kept for the limit-variance functionals; 0 disables them.
    pub theory_points: usize,
}

impl Default for HedgeSimOptions {
    fn default() -> Self {
        HedgeSimOptions { fine_dt: None, steps_per_interval: 32, bisection_levels: 3, refine_zone: 3.0, max_fine_steps: 1 << 22, theory_points: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeReport {
    /// `Zⁿ_t = e^{−rt}(V_t − Vⁿ_t)`.
    pub z_error: f64,
    pub n_trades: usize,
    /// `Cⁿ_t = Σ |Δπⁿ| S` at the rebalancing times.
    pub turnover_cost: f64,
    /// `Σ |Δπⁿ|`, the turnover at unit price.
    pub rebalance_volume: f64,
    /// `(√N·Z, C·Z)`.
    pub scaled: (f64, f64),
    /// The realized variance exhausted the budget before `t`.
    pub budget_exhausted: bool,
    pub stopped_at: f64,
    /// `V` at `stopped_at`.
    pub value: f64,
    /// `Ṽ_t − Ṽ_0 − Σ π ΔS̃` on the fine grid (refinement points excluded).
    pub self_financing_residual: f64,
    pub fine_steps: usize,
    pub theory: Option<HedgeVariances>,
}

struct HedgeState<'a> {
    model: &'a HedgeModel,
    runner: SchemeRunner,
    rule: Option<StepRule>,
    horizon: f64,
    time: f64,
    s: f64,
    s_disc: f64,
    qv: f64,
    pi: f64,
    holding: f64,
    anchor: f64,
    stop_time: f64,
    gain: f64,
    fine_gain: f64,
    n_trades: usize,
    cost: f64,
    volume: f64,
}

impl HedgeState<'_> {
    fn crosses(&self, time: f64, pi: f64) -> bool {
        match self.rule {
            Some(StepRule::Fixed { dt }) => time >= self.stop_time + dt - 1e-9 * dt,
            Some(StepRule::Symmetric { radius }) => (pi - self.anchor).abs() >= radius,
            Some(StepRule::Asymmetric { up, down }) => pi - self.anchor >= up || self.anchor - pi >= down,
            None => false,
        }
    }

    /// Distance of `pi` to the nearest barrier edge (negative once crossed).
    fn barrier_gap(&self, pi: f64) -> f64 {
        match self.rule {
            Some(StepRule::Symmetric { radius }) => radius - (pi - self.anchor).abs(),
            Some(StepRule::Asymmetric { up, down }) => (self.anchor + up - pi).min(pi - self.anchor + down),
            _ => f64::INFINITY,
        }
    }

    fn context(&self, gamma: f64) -> StopContext {
        StopContext {
            time: self.time,
            driver: self.pi,
            state: self.s,
            hedge: Some(HedgeQuantities { gamma, spot: self.s, rate: self.model.rate }),
            em: None,
        }
    }

    fn visit(&mut self, time: f64, s: f64, qv: f64, g: Greeks) -> Result<()> {
        let s_disc = (-self.model.rate * time).exp() * s;
        self.gain += self.holding * (s_disc - self.s_disc);
        let crossed = self.crosses(time, g.delta);
        (self.time, self.s, self.s_disc, self.qv, self.pi) = (time, s, s_disc, qv, g.delta);
        if crossed {
            self.n_trades += 1;
            self.cost += (g.delta - self.holding).abs() * s;
            self.volume += (g.delta - self.holding).abs();
            self.holding = g.delta;
            self.anchor = g.delta;
            self.stop_time = time;
            self.rule = self.runner.next_rule(&self.context(g.gamma), self.horizon)?;
        }
        Ok(())
    }
}

fn first_interval(rule: StepRule, pi_vol: f64, fallback: f64) -> f64 {
    match rule {
        StepRule::Fixed { dt } => dt,
        _ if !(pi_vol > 0.0) => fallback,
        StepRule::Symmetric { radius } => radius * radius / (pi_vol * pi_vol),
        StepRule::Asymmetric { up, down } => up * down / (pi_vol * pi_vol),
    }
}

/// Simulates the hedge of `model` rebalanced at the stops of `scheme` (a
/// scheme on `π` for barrier kinds) up to time `t`.
pub fn simulate_hedge<R: Rng + ?Sized>(
    rng: &mut R,
    model: &HedgeModel,
    scheme: &SchemeSpec,
    t: f64,
    opts: &HedgeSimOptions,
) -> Result<HedgeReport> {
    model.validate()?;
    if !(t > 0.0 && t < model.horizon) {
        return domain(format!("hedge time must lie in (0, T) = (0, {}), got {t}", model.horizon));
    }
    let g0 = model.greeks(0.0, model.spot, 0.0)?;
    let mut st = HedgeState {
        model,
        runner: SchemeRunner::new(scheme.clone()),
        rule: None,
        horizon: t,
        time: 0.0,
        s: model.spot,
        s_disc: model.spot,
        qv: 0.0,
        pi: g0.delta,
        holding: g0.delta,
        anchor: g0.delta,
        stop_time: 0.0,
        gain: 0.0,
        fine_gain: 0.0,
        n_trades: 0,
        cost: 0.0,
        volume: 0.0,
    };
    st.rule = st.runner.next_rule(&st.context(g0.gamma), t)?;

    let sigma0 = (model.vol)(0.0, model.spot);
    let first = first_interval(st.rule.unwrap(), g0.gamma * sigma0 * model.spot, t / 64.0).min(t);
    let mut dt = opts.fine_dt.unwrap_or(first / opts.steps_per_interval.max(1) as f64);
    if let Some(StepRule::Fixed { dt: h }) = st.rule {
        dt = h / (h / dt).ceil().max(1.0);
    }
    if (t / dt).ceil() as usize > opts.max_fine_steps {
        dt = t / opts.max_fine_steps as f64;
    }
    let n_fine = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
    let stride = if opts.theory_points > 0 { (n_fine / opts.theory_points).max(1) } else { usize::MAX };
    let mut theory_path = Vec::new();
    if opts.theory_points > 0 {
        theory_path.push(HedgePoint { t: 0.0, s: model.spot, sigma: sigma0, gamma: g0.gamma });
    }

    let levels = opts.bisection_levels.min(10);
    // Bridge refinements draw from their own stream so that schemes sharing a
    // fine grid see the same market path.
    let mut bridge_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut w = 0.0;
    let mut budget_exhausted = false;
    let mut gamma0 = g0.gamma;
    for k in 1..=n_fine {
        let (t0, s0, qv0, w0, s_disc0, pi0) = (st.time, st.s, st.qv, w, st.s_disc, st.pi);
        let t1 = if k == n_fine { t } else { k as f64 * dt };
        let h = t1 - t0;
        let sigma = (model.vol)(t0, s0);
        if !sigma.is_finite() || sigma < 0.0 {
            return domain(format!("volatility must be finite and non-negative, got {sigma} at t = {t0}"));
        }
        let z: f64 = rng.sample(StandardNormal);
        let w1 = w0 + h.sqrt() * z;
        let mu = model.drift - 0.5 * sigma * sigma;
        let s_at = |frac: f64, wv: f64| s0 * (mu * frac * h + sigma * (wv - w0)).exp();
        let qv1 = qv0 + sigma * sigma * h;
        if qv1 > model.budget {
            budget_exhausted = true;
            break;
        }
        let s1 = s_at(1.0, w1);
        let g1 = model.greeks(t1, s1, qv1)?;
        // Refine every step that starts or ends near the barrier, not only the
        // ones whose endpoint crossed: choosing on the endpoint alone would put
        // the stops where the path is known to keep moving.
        let near = opts.refine_zone * gamma0.abs() * sigma * s0 * h.sqrt();
        if levels > 0 && st.barrier_gap(st.pi).min(st.barrier_gap(g1.delta)) < near {
            let m = 1usize << levels;
            let mut ws = vec![f64::NAN; m + 1];
            ws[0] = w0;
            ws[m] = w1;
            let mut span = m;
            while span > 1 {
                let half = span / 2;
                for left in (0..m).step_by(span) {
                    let (a, b) = (left as f64 / m as f64, (left + span) as f64 / m as f64);
                    let mid = (left + half) as f64 / m as f64;
                    ws[left + half] = bridge_point(&mut bridge_rng, a * h, ws[left], b * h, ws[left + span], mid * h, 1.0);
                }
                span = half;
            }
            for (i, &wv) in ws.iter().enumerate().take(m).skip(1) {
                let frac = i as f64 / m as f64;
                let (ti, si, qi) = (t0 + frac * h, s_at(frac, wv), qv0 + sigma * sigma * frac * h);
                let gi = model.greeks(ti, si, qi)?;
                st.visit(ti, si, qi, gi)?;
            }
        }
        st.visit(t1, s1, qv1, g1)?;
        st.fine_gain += pi0 * (st.s_disc - s_disc0);
        w = w1;
        gamma0 = g1.gamma;
        if opts.theory_points > 0 && (k % stride == 0 || k == n_fine) {
            theory_path.push(HedgePoint { t: t1, s: s1, sigma: (model.vol)(t1, s1), gamma: g1.gamma });
        }
    }

    if st.rule.is_some() || budget_exhausted {
        // The final interval did not end on a stop: count the unwinding turnover.
        st.cost += (st.pi - st.holding).abs() * st.s;
        st.volume += (st.pi - st.holding).abs();
    }
    let end = model.greeks(st.time, st.s, st.qv)?;
    if opts.theory_points > 0 && theory_path.last().is_some_and(|p| p.t < st.time) {
        theory_path.push(HedgePoint { t: st.time, s: st.s, sigma: (model.vol)(st.time, st.s), gamma: end.gamma });
    }
    let value = end.price;
    let v_disc = (-model.rate * st.time).exp() * value;
    let z = v_disc - g0.price - st.gain;
    let theory = if opts.theory_points > 0 && theory_path.len() >= 2 {
        Some(hedge_variances(&theory_path, model.rate, st.time)?)
    } else {
        None
    };
    Ok(HedgeReport {
        z_error: z,
        n_trades: st.n_trades,
        turnover_cost: st.cost,
        rebalance_volume: st.volume,
        scaled: ((st.n_trades as f64).sqrt() * z, st.cost * z),
        budget_exhausted,
        stopped_at: st.time,
        value,
        self_financing_residual: v_disc - g0.price - st.fine_gain,
        fine_steps: n_fine,
        theory,
    })
}

/// Chooses `ε` so that the scheme makes about `target_trades` trades by `t`:
/// exact for the time-equidistant scheme, two pilot rounds for barrier schemes.
pub fn calibrate_epsilon(
    model: &HedgeModel,
    kind: &SchemeKind,
    t: f64,
    target_trades: f64,
    pilot_reps: usize,
    seed: u64,
) -> Result<f64> {
    if !(target_trades >= 1.0) || pilot_reps == 0 {
        return domain("calibration needs target_trades >= 1 and pilot_reps >= 1");
    }
    if matches!(kind, SchemeKind::TimeEquidistant { .. }) {
        return Ok((t / target_trades).sqrt());
    }
    let g0 = model.greeks(0.0, model.spot, 0.0)?;
    let pi_vol = g0.gamma * (model.vol)(0.0, model.spot) * model.spot;
    let probe = SchemeSpec::new(kind.clone(), 1.0)?;
    let ctx = StopContext {
        time: 0.0,
        driver: g0.delta,
        state: model.spot,
        hedge: Some(HedgeQuantities { gamma: g0.gamma, spot: model.spot, rate: model.rate }),
        em: None,
    };
    let g = probe.realized_coefficients(&ctx)?.q_sq.sqrt();
    if !(pi_vol > 0.0 && g > 0.0) {
        return Err(Error::DegenerateBarrier("hedge ratio has no volatility at the start".into()));
    }
    let mut eps = (t / target_trades).sqrt() * pi_vol / g;
    let opts = HedgeSimOptions { theory_points: 0, steps_per_interval: 16, ..Default::default() };
    for round in 0..2 {
        let spec = SchemeSpec::new(kind.clone(), eps)?;
        let mut total = 0.0;
        for rep in 0..pilot_reps {
            let mut rng = split(seed ^ (0x9e37_79b9 + round), rep as u64);
            total += simulate_hedge(&mut rng, model, &spec, t, &opts)?.n_trades as f64;
        }
        let mean = (total / pilot_reps as f64).max(0.5);
        eps *= (mean / target_trades).sqrt();
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split;

    fn call() -> Payoff {
        Payoff::call(100.0).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let g = bs_greeks_closed(100.0, 0.0, 0.04, &call()).unwrap();
        assert!((g.price - 7.965567455405804).abs() < 1e-10, "{}", g.price);
        let q = bs_greeks(100.0, 0.0, 0.04, &call()).unwrap();
        assert!((q.price - g.price).abs() < 1e-10);
        assert!((q.delta - g.delta).abs() < 1e-10);
        assert!((q.gamma - g.gamma).abs() < 1e-12);
        let flat = bs_price(100.0, 0.05, 0.0, &call()).unwrap();
        assert!((flat - (-0.05f64).exp() * (100.0 * 0.05f64.exp() - 100.0)).abs() < 1e-12);
        let deep = bs_greeks_closed(1000.0, 0.01, 0.001, &call()).unwrap();
        assert!((deep.delta - 1.0).abs() < 1e-12);
        assert!(bs_price(100.0, 0.0, -0.1, &call()).is_err());
    }

    #[test]
    fn quadrature_matches_closed_form_for_piecewise_payoffs() {
        let butterflyish = Payoff::piecewise_linear(5.0, -0.5, vec![(80.0, 0.3), (100.0, 0.7), (130.0, 1.5)]).unwrap();
        let put = Payoff::put(90.0).unwrap();
        for payoff in [&butterflyish, &put, &call()] {
            for &(s, r, v) in &[(60.0, 0.0, 0.01), (100.0, 0.05, 0.09), (140.0, 0.1, 0.25), (100.0, 0.02, 1.0)] {
                let c = bs_greeks_closed(s, r, v, payoff).unwrap();
                let q = bs_greeks(s, r, v, payoff).unwrap();
                assert!((c.price - q.price).abs() < 1e-9 * c.price.abs().max(1.0), "{c:?} {q:?}");
                assert!((c.delta - q.delta).abs() < 1e-9);
                assert!((c.gamma - q.gamma).abs() < 1e-12);
            }
        }
        assert!(Payoff::piecewise_linear(0.0, 0.0, vec![(100.0, -1.0)]).is_err());
    }

    #[test]
    fn put_call_parity_and_monotonicity() {
        let (s, r, v) = (95.0, 0.03, 0.07);
        let c = bs_greeks_closed(s, r, v, &call()).unwrap();
        let p = bs_greeks_closed(s, r, v, &Payoff::put(100.0).unwrap()).unwrap();
        assert!((c.price - p.price - (s - 100.0 * (-r as f64).exp())).abs() < 1e-10);
        let mut last = 0.0;
        for i in 0..50 {
            let price = bs_price(s, r, 0.005 * i as f64, &call()).unwrap();
            assert!(price >= last - 1e-12);
            last = price;
            assert!(bs_greeks_closed(s, r, 0.005 * i as f64, &call()).unwrap().gamma >= 0.0);
        }
    }

    #[test]
    fn pde_identities_hold() {
        for &s in &[50.0, 80.0, 100.0, 150.0] {
            for &r in &[0.0, 0.05, 0.1] {
                for &v in &[0.01, 0.1, 0.25] {
                    let (a, b) = pde_residuals(s, r, v, &call()).unwrap();
                    assert!(a < 1e-5 && b < 1e-5, "{s} {r} {v}: {a} {b}");
                }
            }
        }
    }

    fn model() -> HedgeModel {
        HedgeModel::black_scholes(100.0, 0.2, 0.02, call(), 0.75)
    }

    #[test]
    fn self_financing_and_super_replication() {
        let m = model();
        let spec = SchemeSpec::new(SchemeKind::HedgeGamma, 0.05).unwrap();
        let opts = HedgeSimOptions::default();
        for rep in 0..20 {
            let r = simulate_hedge(&mut split(5, rep), &m, &spec, 0.5, &opts).unwrap();
            assert!(r.self_financing_residual.abs() < 0.05, "{r:?}");
            assert!(!r.budget_exhausted);
            assert!(r.n_trades > 0);
        }
        // At maturity with an unspent budget the value dominates the payoff.
        for &s in &[70.0, 100.0, 130.0] {
            for &left in &[0.0, 1e-4, 0.01] {
                let v = bs_price(s, 0.0, left, &call()).unwrap();
                assert!(v >= call().value(s) - 1e-8);
            }
        }
    }

    #[test]
    fn zero_volatility_never_trades() {
        let m = HedgeModel { vol: Arc::new(|_, _| 0.0), budget: 0.03, rate: 0.0, ..model() };
        let spec = SchemeSpec::new(SchemeKind::HedgeGamma, 0.05).unwrap();
        let r = simulate_hedge(&mut split(6, 0), &m, &spec, 0.5, &HedgeSimOptions::default()).unwrap();
        assert_eq!(r.n_trades, 0);
        assert_eq!(r.z_error, 0.0);
        let budget = HedgeModel { budget: 0.01, ..model() };
        let r = simulate_hedge(&mut split(6, 1), &budget, &spec, 0.5, &HedgeSimOptions::default()).unwrap();
        assert!(r.budget_exhausted);
        assert!(r.stopped_at < 0.5);
    }

    #[test]
    fn zero_rate_error_is_undiscounted() {
        let m = HedgeModel { rate: 0.0, ..model() };
        let spec = SchemeSpec::new(SchemeKind::TimeEquidistant { n: Some(50) }, 0.1).unwrap();
        let r = simulate_hedge(&mut split(7, 0), &m, &spec, 0.5, &HedgeSimOptions::default()).unwrap();
        assert_eq!(r.n_trades, 25);
        assert!(r.theory.unwrap().equidistant > 0.0);
    }

    #[test]
    fn calibration_hits_target_roughly() {
        let m = model();
        let eps = calibrate_epsilon(&m, &SchemeKind::HedgeGamma, 0.5, 40.0, 100, 3).unwrap();
        let spec = SchemeSpec::new(SchemeKind::HedgeGamma, eps).unwrap();
        let mut total = 0.0;
        for rep in 0..200 {
            total += simulate_hedge(&mut split(8, rep), &m, &spec, 0.5, &HedgeSimOptions::default()).unwrap().n_trades as f64;
        }
        let mean = total / 200.0;
        assert!((mean - 40.0).abs() < 6.0, "{mean}");
    }
}
