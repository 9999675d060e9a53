//! Asymptotic conditional means, variances and lower bounds, evaluated as
//! path functionals on a fine simulated path.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schemes::SchemeCoefficients;

/// Fine-path sample: time, driving martingale `M`, its bracket `⟨M⟩`, the
/// integrand `X` and the integrator `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PathPoint {
    pub t: f64,
    pub m: f64,
    pub qv: f64,
    pub x: f64,
    pub y: f64,
}

impl PathPoint {
    fn lerp(&self, other: &PathPoint, a: f64) -> PathPoint {
        let mix = |p: f64, q: f64| p + a * (q - p);
        PathPoint {
            t: mix(self.t, other.t),
            m: mix(self.m, other.m),
            qv: mix(self.qv, other.qv),
            x: mix(self.x, other.x),
            y: mix(self.y, other.y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinePath {
    pub points: Vec<PathPoint>,
}

impl FinePath {
    /// `X = Y = M = W` sampled at `times` with values `w`.
    pub fn brownian(times: &[f64], w: &[f64]) -> Self {
        FinePath {
            points: times
                .iter()
                .zip(w)
                .map(|(&t, &w)| PathPoint { t, m: w, qv: t, x: w, y: w })
                .collect(),
        }
    }

    /// Segments of the path restricted to `[0, t]`, the last one interpolated.
    fn segments(&self, t: f64) -> Result<Vec<(PathPoint, PathPoint)>> {
        let pts = &self.points;
        let covered = pts.last().map_or(f64::NEG_INFINITY, |p| p.t);
        if pts.len() < 2 || covered < t * (1.0 - 1e-12) {
            return Err(Error::Input(format!("path covers [0, {covered}], shorter than t = {t}")));
        }
        let mut out = Vec::with_capacity(pts.len());
        for w in pts.windows(2) {
            let (p0, p1) = (w[0], w[1]);
            if p0.t >= t {
                break;
            }
            if p1.t > t {
                out.push((p0, p0.lerp(&p1, (t - p0.t) / (p1.t - p0.t))));
                break;
            }
            out.push((p0, p1));
        }
        Ok(out)
    }
}

pub type PathFn = Arc<dyn Fn(&PathPoint) -> f64 + Send + Sync>;

/// Coefficients of `X = X₀ + ψ·⟨M⟩ + γ·M`, `Y = Y₀ + φ·⟨M⟩ + M^Y` with
/// `d⟨M^Y⟩ = κ d⟨M⟩` and correlation `ρ` between `M` and `M^Y`.
#[derive(Clone)]
pub struct ModelSpec {
    pub psi: PathFn,
    pub gamma: PathFn,
    pub phi: PathFn,
    pub kappa: PathFn,
    pub rho: PathFn,
    pub horizon: f64,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec").field("horizon", &self.horizon).finish_non_exhaustive()
    }
}

fn constant(v: f64) -> PathFn {
    Arc::new(move |_| v)
}

impl ModelSpec {
    /// `X = Y = M = W`.
    pub fn brownian(horizon: f64) -> Self {
        ModelSpec {
            psi: constant(0.0),
            gamma: constant(1.0),
            phi: constant(0.0),
            kappa: constant(1.0),
            rho: constant(1.0),
            horizon,
        }
    }

    fn check(&self, p: &PathPoint) -> Result<(f64, f64)> {
        let kappa = (self.kappa)(p);
        let rho = (self.rho)(p);
        if !(kappa >= 0.0) {
            return Err(Error::Input(format!("kappa must be non-negative, got {kappa} at t = {}", p.t)));
        }
        if !(rho.abs() <= 1.0) {
            return Err(Error::Input(format!("|rho| must be at most 1, got {rho} at t = {}", p.t)));
        }
        Ok(((self.gamma)(p), kappa))
    }
}

/// Conditional summaries of the mixed-normal limit of `Zⁿ/ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixedNormalSummary {
    /// `(1/3)(bγ)·Y_t`.
    pub cond_mean: f64,
    /// `(1/6)(c²γ²)·⟨Y⟩_t`.
    pub cond_var: f64,
    /// `q⁻²·⟨M⟩_t`, the limit of `ε² N_t`.
    pub n_limit: f64,
    /// `cond_var · n_limit`, the limit conditional variance of `√N·Zⁿ`.
    pub count_weighted_var: f64,
    /// `(1/6)((|γ|√κ)·⟨M⟩_t)²`.
    pub lower_bound: f64,
}

/// Trapezoid integral `∫ f d⟨M⟩` over `[0, t]`.
fn integrate_qv(segments: &[(PathPoint, PathPoint)], mut f: impl FnMut(&PathPoint) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (p0, p1) in segments {
        let d = p1.qv - p0.qv;
        total += 0.5 * (f(p0)? + f(p1)?) * d;
    }
    Ok(total)
}

pub fn limit_mean_variance(
    model: &ModelSpec,
    coeffs: &dyn Fn(&PathPoint) -> SchemeCoefficients,
    path: &FinePath,
    t: f64,
) -> Result<MixedNormalSummary> {
    let segs = path.segments(t)?;
    let mut cond_mean = 0.0;
    for (p0, p1) in &segs {
        let (gamma, _) = model.check(p0)?;
        cond_mean += coeffs(p0).b * gamma * (p1.y - p0.y);
    }
    cond_mean /= 3.0;
    let cond_var = integrate_qv(&segs, |p| {
        let (gamma, kappa) = model.check(p)?;
        Ok(coeffs(p).c_sq() * gamma * gamma * kappa)
    })? / 6.0;
    let n_limit = integrate_qv(&segs, |p| Ok(1.0 / coeffs(p).q_sq))?;
    let lower_bound = lower_bound_count(model, path, t)?;
    Ok(MixedNormalSummary { cond_mean, cond_var, n_limit, count_weighted_var: cond_var * n_limit, lower_bound })
}

/// `(1/6)((|γ|√κ)·⟨M⟩_t)²`.
pub fn lower_bound_count(model: &ModelSpec, path: &FinePath, t: f64) -> Result<f64> {
    let segs = path.segments(t)?;
    let i = integrate_qv(&segs, |p| {
        let (gamma, kappa) = model.check(p)?;
        Ok(gamma.abs() * kappa.sqrt())
    })?;
    Ok(i * i / 6.0)
}

/// `(1/6)|(|uγ|^{2/3} κ^{1/3})·⟨M⟩_t|³`.
pub fn lower_bound_cost(model: &ModelSpec, weight_u: &dyn Fn(&PathPoint) -> f64, path: &FinePath, t: f64) -> Result<f64> {
    let segs = path.segments(t)?;
    let i = integrate_qv(&segs, |p| {
        let (gamma, kappa) = model.check(p)?;
        Ok((weight_u(p) * gamma).abs().powf(2.0 / 3.0) * kappa.cbrt())
    })?;
    Ok(i.abs().powi(3) / 6.0)
}

/// Limit conditional variance of `Uⁿ_t Zⁿ_t`: `cond_var · ((|u|ζ)·⟨M⟩_t)²`.
pub fn cost_weighted_variance(
    model: &ModelSpec,
    coeffs: &dyn Fn(&PathPoint) -> SchemeCoefficients,
    weight_u: &dyn Fn(&PathPoint) -> f64,
    path: &FinePath,
    t: f64,
) -> Result<f64> {
    let summary = limit_mean_variance(model, coeffs, path, t)?;
    let segs = path.segments(t)?;
    let u = integrate_qv(&segs, |p| Ok(weight_u(p).abs() * coeffs(p).zeta))?;
    Ok(summary.cond_var * u * u)
}

/// Market path sample for the hedging functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HedgePoint {
    pub t: f64,
    pub s: f64,
    pub sigma: f64,
    pub gamma: f64,
}

/// Limit conditional variances of `√N·Zⁿ` (and of `C·Zⁿ` for the cost bound)
/// along one market path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HedgeVariances {
    /// `(1/6)(∫e^{−ru}Γ d⟨S⟩)²`.
    pub gamma_scheme: f64,
    /// `(t/2)∫e^{−2ru}Γ²σ²S² d⟨S⟩`.
    pub equidistant: f64,
    /// `(∫Γ² d⟨S⟩)·(1/6)∫e^{−2ru} d⟨S⟩`.
    pub karandikar: f64,
    /// `(1/6)|∫|e^{−ru}SΓ²|^{2/3} d⟨S⟩|³`.
    pub cost_bound: f64,
}

/// Trapezoid in calendar time with `d⟨S⟩ = σ²S² du`, so that both
/// Cauchy–Schwarz orderings also hold for the discretized integrals.
pub fn hedge_variances(path: &[HedgePoint], rate: f64, t: f64) -> Result<HedgeVariances> {
    if path.len() < 2 || path.last().unwrap().t < t * (1.0 - 1e-12) {
        return Err(Error::Input(format!("market path does not cover [0, {t}]")));
    }
    if let Some(p) = path.iter().find(|p| !p.gamma.is_finite() || !p.s.is_finite() || !p.sigma.is_finite()) {
        return Err(Error::Input(format!("market path has missing gamma, spot or volatility at t = {}", p.t)));
    }
    let (mut a, mut eq, mut g2, mut disc, mut cost, mut span) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let point = |p: &HedgePoint| {
        let dqv = p.sigma * p.sigma * p.s * p.s;
        let d = (-rate * p.t).exp();
        [
            d * p.gamma * dqv,
            d * d * p.gamma * p.gamma * dqv * dqv,
            p.gamma * p.gamma * dqv,
            d * d * dqv,
            (d * p.s * p.gamma * p.gamma).abs().powf(2.0 / 3.0) * dqv,
        ]
    };
    for w in path.windows(2) {
        let (p0, mut p1) = (w[0], w[1]);
        if p0.t >= t {
            break;
        }
        if p1.t > t {
            let a = (t - p0.t) / (p1.t - p0.t);
            p1 = HedgePoint {
                t,
                s: p0.s + a * (p1.s - p0.s),
                sigma: p0.sigma + a * (p1.sigma - p0.sigma),
                gamma: p0.gamma + a * (p1.gamma - p0.gamma),
            };
        }
        let h = 0.5 * (p1.t - p0.t);
        let (f0, f1) = (point(&p0), point(&p1));
        a += h * (f0[0] + f1[0]);
        eq += h * (f0[1] + f1[1]);
        g2 += h * (f0[2] + f1[2]);
        disc += h * (f0[3] + f1[3]);
        cost += h * (f0[4] + f1[4]);
        span += 2.0 * h;
    }
    Ok(HedgeVariances {
        gamma_scheme: a * a / 6.0,
        equidistant: span / 2.0 * eq,
        karandikar: g2 * disc / 6.0,
        cost_bound: cost.abs().powi(3) / 6.0,
    })
}

/// Euler-state path sample: time, exponential factor `e`, `σ` and `∂₁σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmPathPoint {
    pub t: f64,
    pub e: f64,
    pub sigma: f64,
    pub d_sigma: f64,
}

fn em_segments(path: &[EmPathPoint], t: f64) -> Result<&[EmPathPoint]> {
    if path.len() < 2 || path.last().unwrap().t < t * (1.0 - 1e-12) {
        return Err(Error::Input(format!("Euler path does not cover [0, {t}]")));
    }
    if path.iter().any(|p| !(p.e > 0.0)) {
        return Err(Error::Input("exponential factor e must be positive along the path".into()));
    }
    let end = path.iter().position(|p| p.t >= t * (1.0 - 1e-12)).unwrap();
    Ok(&path[..=end])
}

/// `(1/6) e_t² ∫ e_s⁻² σ² (∂₁σ)² c² ds`.
pub fn em_limit_variance(path: &[EmPathPoint], c_sq: &dyn Fn(&EmPathPoint) -> f64, t: f64) -> Result<f64> {
    let seg = em_segments(path, t)?;
    let f = |p: &EmPathPoint| (p.sigma * p.d_sigma / p.e).powi(2) * c_sq(p);
    let mut total = 0.0;
    for w in seg.windows(2) {
        total += 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].t - w[0].t);
    }
    let e_t = seg.last().unwrap().e;
    Ok(e_t * e_t * total / 6.0)
}

/// `(1/6) e_t² (∫ e_s⁻¹ |σ ∂₁σ| ds)²`, the count-weighted bound for the
/// Euler error on a Brownian driver.
pub fn em_lower_bound_count(path: &[EmPathPoint], t: f64) -> Result<f64> {
    let seg = em_segments(path, t)?;
    let f = |p: &EmPathPoint| (p.sigma * p.d_sigma / p.e).abs();
    let mut total = 0.0;
    for w in seg.windows(2) {
        total += 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].t - w[0].t);
    }
    let e_t = seg.last().unwrap().e;
    Ok(e_t * e_t * total * total / 6.0)
}
