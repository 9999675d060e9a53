//! Exact simulation of Brownian motion at fixed times and at barrier exits.
//!
//! The exit time `τ` of `W` from `(-ε, ε)` has distribution function
//! `F_ε(t) = G(ε/√t)` where `G(x) = 4 Σ_{n≥0} (Φ((4n+3)x) − Φ((4n+1)x))`.
//! `G` does not depend on `ε`, so a single precomputed [`ExitLaw`] serves every
//! barrier width, including widths that change from one stop to the next.

use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, Result};
use crate::normal;
use crate::rng::uniform_open01;

const TABLE_NODES: usize = 4096;
const TABLE_X_MAX: f64 = 8.0;

/// Tabulated scaled exit-time law `G` together with its numerical inverse.
#[derive(Debug, Clone)]
pub struct ExitLaw {
    table_x: Vec<f64>,
    table_g: Vec<f64>,
    table_dg: Vec<f64>,
    cutoff_low: f64,
    cutoff_high: f64,
    series_terms: f64,
}

/// One barrier exit: elapsed time and increment of the driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitSample {
    pub tau: f64,
    pub value: f64,
}

impl Default for ExitLaw {
    fn default() -> Self {
        Self::new(0.1, 3.0, 3)
    }
}

impl ExitLaw {
    pub fn new(cutoff_low: f64, cutoff_high: f64, series_terms: u32) -> Self {
        assert!(0.0 < cutoff_low && cutoff_low < cutoff_high && cutoff_high < TABLE_X_MAX);
        let mut law = ExitLaw {
            table_x: Vec::with_capacity(TABLE_NODES),
            table_g: Vec::with_capacity(TABLE_NODES),
            table_dg: Vec::with_capacity(TABLE_NODES),
            cutoff_low,
            cutoff_high,
            series_terms: f64::from(series_terms),
        };
        let ratio = (TABLE_X_MAX / cutoff_low).powf(1.0 / (TABLE_NODES - 1) as f64);
        let mut prev = 1.0_f64;
        for i in 0..TABLE_NODES {
            let x = if i == TABLE_NODES - 1 {
                TABLE_X_MAX
            } else {
                cutoff_low * ratio.powi(i as i32)
            };
            // Rounding in the series can wiggle by an ulp; keep the table monotone.
            let g = law.eval(x).min(prev);
            prev = g;
            law.table_x.push(x);
            law.table_g.push(g);
            law.table_dg.push(law.eval_derivative(x));
        }
        law
    }

    /// Shared instance with the default cutoffs.
    pub fn standard() -> &'static ExitLaw {
        static LAW: OnceLock<ExitLaw> = OnceLock::new();
        LAW.get_or_init(ExitLaw::default)
    }

    pub fn cutoff_low(&self) -> f64 {
        self.cutoff_low
    }

    pub fn cutoff_high(&self) -> f64 {
        self.cutoff_high
    }

    pub fn table(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.table_x.iter().copied().zip(self.table_g.iter().copied())
    }

    fn series(&self, x: f64) -> f64 {
        let last = (self.series_terms / x).floor() as usize;
        let mut sum = 0.0;
        for n in 0..=last {
            let k = (4 * n) as f64;
            // Φ(b) − Φ(a) = sf(a) − sf(b), which keeps precision for large arguments.
            sum += normal::sf((k + 1.0) * x) - normal::sf((k + 3.0) * x);
        }
        (4.0 * sum).min(1.0)
    }

    fn eval(&self, x: f64) -> f64 {
        if x < self.cutoff_low {
            1.0
        } else if x > self.cutoff_high {
            4.0 * normal::sf(x)
        } else {
            self.series(x)
        }
    }

    fn eval_derivative(&self, x: f64) -> f64 {
        if x < self.cutoff_low {
            0.0
        } else if x > self.cutoff_high {
            -4.0 * normal::pdf(x)
        } else {
            let last = (self.series_terms / x).floor() as usize;
            let mut sum = 0.0;
            for n in 0..=last {
                let k = (4 * n) as f64;
                sum += (k + 3.0) * normal::pdf((k + 3.0) * x) - (k + 1.0) * normal::pdf((k + 1.0) * x);
            }
            4.0 * sum
        }
    }

    /// `G(x)`: probability that the exit time from `(-ε, ε)` is at most `ε²/x²`.
    pub fn g(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return domain(format!("G requires x >= 0, got {x}"));
        }
        Ok(self.eval(x))
    }

    /// Distribution function of the exit time from `(-eps, eps)`.
    pub fn f_eps(&self, eps: f64, t: f64) -> Result<f64> {
        if !(eps > 0.0) || !(t >= 0.0) {
            return domain(format!("F_eps requires eps > 0 and t >= 0, got eps={eps}, t={t}"));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        self.g(eps / t.sqrt())
    }

    /// Difference between the tabulated plateau value and the series just above
    /// the lower cutoff. Zero to machine precision for the default law.
    pub fn stitch_residual(&self) -> f64 {
        (1.0 - self.series(self.cutoff_low)).abs()
    }

    /// Inverse of `G`. Returns `0.0` on the plateau `y = 1`.
    pub fn g_inverse(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y <= 1.0) {
            return domain(format!("G inverse requires 0 < y <= 1, got {y}"));
        }
        if y == 1.0 {
            return Ok(0.0);
        }
        let tail_start = 4.0 * normal::sf(self.cutoff_high);
        if y < tail_start {
            return Ok(normal::inv_sf(y / 4.0));
        }
        if y >= self.table_g[0] {
            return Ok(self.table_x[0]);
        }
        // Largest i with table_g[i] >= y; table_g is non-increasing.
        let i = self.table_g.partition_point(|&g| g >= y) - 1;
        Ok(self.invert_cell(i, y))
    }

    /// `1 − G(x)` from the large-time series
    /// `(4/π) Σ (−1)ⁿ/(2n+1) exp(−(2n+1)²π²/(8x²))`, accurate where `G` rounds to one.
    pub fn g_complement(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return domain(format!("G complement requires x >= 0, got {x}"));
        }
        if x > 1.5 {
            return Ok(1.0 - self.eval(x));
        }
        Ok(survival_series(x))
    }

    /// Inverse of [`Self::g_complement`].
    pub fn g_complement_inverse(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return domain(format!("G complement inverse requires 0 < q < 1, got {q}"));
        }
        if q > 1.0 - survival_series(1.5) {
            return self.g_inverse(1.0 - q);
        }
        // survival_series is increasing in x; bisect on ln q.
        let target = q.ln();
        let (mut lo, mut hi) = (1e-3_f64, 1.5_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if survival_series(mid).ln() < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    fn invert_cell(&self, i: usize, y: f64) -> f64 {
        let (x0, x1) = (self.table_x[i], self.table_x[i + 1]);
        let (g0, g1) = (self.table_g[i], self.table_g[i + 1]);
        if g0 <= g1 {
            return x0;
        }
        let h = x1 - x0;
        let (m0, m1) = (self.table_dg[i] * h, self.table_dg[i + 1] * h);
        let cubic = |t: f64| {
            let t2 = t * t;
            let t3 = t2 * t;
            let value = (2.0 * t3 - 3.0 * t2 + 1.0) * g0
                + (t3 - 2.0 * t2 + t) * m0
                + (-2.0 * t3 + 3.0 * t2) * g1
                + (t3 - t2) * m1;
            let slope = (6.0 * t2 - 6.0 * t) * g0
                + (3.0 * t2 - 4.0 * t + 1.0) * m0
                + (-6.0 * t2 + 6.0 * t) * g1
                + (3.0 * t2 - 2.0 * t) * m1;
            (value, slope)
        };
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let mut t = ((g0 - y) / (g0 - g1)).clamp(0.0, 1.0);
        for _ in 0..60 {
            let (value, slope) = cubic(t);
            let f = value - y;
            if f > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = if slope < 0.0 { t - f / slope } else { f64::NAN };
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - t).abs() <= 1e-16 {
                t = next;
                break;
            }
            t = next;
        }
        x0 + t * h
    }

    /// Writes the `(x, G(x))` table as CSV with columns `x,g`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,g")?;
        for (x, g) in self.table() {
            writeln!(out, "{x:.9},{g:.9}")?;
        }
        Ok(())
    }

    /// Exit time and position of `W` from `(-eps, eps)`, drawn from a single
    /// uniform: the fractional part of `2U` gives the time, the integer part the sign.
    pub fn sample_symmetric_exit<R: Rng + ?Sized>(&self, rng: &mut R, eps: f64) -> Result<ExitSample> {
        if !(eps > 0.0) || !eps.is_finite() {
            return domain(format!("exit radius must be positive and finite, got {eps}"));
        }
        let (frac, upper) = loop {
            let v = 2.0 * uniform_open01(rng);
            let upper = v >= 1.0;
            let frac = if upper { v - 1.0 } else { v };
            if frac > 0.0 {
                break (frac, upper);
            }
        };
        let x = self.g_inverse(frac)?;
        Ok(ExitSample {
            tau: eps * eps / (x * x),
            value: if upper { eps } else { -eps },
        })
    }

    /// Exit of `W` from `(-down, up)`, sampled by chaining symmetric exits of
    /// radius equal to the distance to the nearer barrier.
    pub fn sample_asymmetric_exit<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        up: f64,
        down: f64,
    ) -> Result<ExitSample> {
        if !(up > 0.0 && down > 0.0) || !up.is_finite() || !down.is_finite() {
            return domain(format!("barriers must be positive, got up={up}, down={down}"));
        }
        let mut w = 0.0_f64;
        let mut tau = 0.0_f64;
        loop {
            let to_up = up - w;
            let to_down = down + w;
            let radius = to_up.min(to_down);
            let step = self.sample_symmetric_exit(rng, radius)?;
            tau += step.tau;
            if step.value > 0.0 && to_up <= to_down {
                return Ok(ExitSample { tau, value: up });
            }
            if step.value < 0.0 && to_down <= to_up {
                return Ok(ExitSample { tau, value: -down });
            }
            w += step.value;
        }
    }
}

/// `G(x)` with the default law.
pub fn g_exit_cdf(x: f64) -> Result<f64> {
    ExitLaw::standard().g(x)
}

/// `F_ε(t) = G(ε/√t)` with the default law.
pub fn exit_time_cdf(eps: f64, t: f64) -> Result<f64> {
    ExitLaw::standard().f_eps(eps, t)
}

pub fn g_inverse(y: f64) -> Result<f64> {
    ExitLaw::standard().g_inverse(y)
}

fn survival_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let a = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
    let mut sum = 0.0;
    for n in 0..40 {
        let k = (2 * n + 1) as f64;
        let term = (-k * k * a).exp() / k;
        sum += if n % 2 == 0 { term } else { -term };
        if term < 1e-18 * sum.abs() {
            break;
        }
    }
    4.0 / std::f64::consts::PI * sum
}

/// `x` recovered from `G(x)`, through `1 − G` where `G` is within rounding of one.
pub fn g_round_trip(x: f64) -> Result<f64> {
    let law = ExitLaw::standard();
    if x < 1.15 {
        law.g_complement_inverse(law.g_complement(x)?)
    } else {
        law.g_inverse(law.g(x)?)
    }
}

pub fn sample_symmetric_exit<R: Rng + ?Sized>(rng: &mut R, eps: f64) -> Result<ExitSample> {
    ExitLaw::standard().sample_symmetric_exit(rng, eps)
}

pub fn sample_asymmetric_exit<R: Rng + ?Sized>(rng: &mut R, up: f64, down: f64) -> Result<ExitSample> {
    ExitLaw::standard().sample_asymmetric_exit(rng, up, down)
}

/// Values of a standard Brownian motion (started at 0 at time 0) on `times`.
pub fn sample_path_grid<R: Rng + ?Sized>(rng: &mut R, times: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len());
    let mut t_prev = 0.0;
    let mut w = 0.0;
    for &t in times {
        if !(t >= t_prev) || !t.is_finite() {
            return domain(format!("time grid must be ascending and start at or after 0 (saw {t} after {t_prev})"));
        }
        let z: f64 = rng.sample(StandardNormal);
        w += (t - t_prev).sqrt() * z;
        out.push(w);
        t_prev = t;
    }
    Ok(out)
}

/// Brownian-bridge draw at time `t` between `(t0, w0)` and `(t1, w1)`, with
/// variance parameter `var_rate` per unit time.
pub fn bridge_point<R: Rng + ?Sized>(rng: &mut R, t0: f64, w0: f64, t1: f64, w1: f64, t: f64, var_rate: f64) -> f64 {
    let span = t1 - t0;
    let a = (t - t0) / span;
    let var = var_rate * (t - t0) * (t1 - t) / span;
    let z: f64 = rng.sample(StandardNormal);
    w0 + a * (w1 - w0) + var.max(0.0).sqrt() * z
}

/// Position of `W` at time `duration`, started at 0 and conditioned not to
/// have left `(-down, up)` by then.
///
/// Short durations use a Gaussian proposal accepted with the bridge survival
/// probability (method of images); long durations use the leading sine mode
/// as proposal and the full eigenfunction series for acceptance.
pub fn sample_killed_position<R: Rng + ?Sized>(rng: &mut R, up: f64, down: f64, duration: f64) -> Result<f64> {
    if !(up > 0.0 && down > 0.0) || !(duration >= 0.0) {
        return domain(format!(
            "killed sampler requires up, down > 0 and duration >= 0, got up={up}, down={down}, s={duration}"
        ));
    }
    if duration == 0.0 {
        return Ok(0.0);
    }
    let width = up + down;
    if duration < width * width / 8.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = duration.sqrt() * z;
            if x <= -down || x >= up {
                continue;
            }
            if uniform_open01(rng) < killed_survival_ratio(x, up, down, duration) {
                return Ok(x);
            }
        }
    }
    let alpha = std::f64::consts::PI.powi(2) * duration / (2.0 * width * width);
    let mut envelope = 1.0;
    let mut k = 2.0_f64;
    loop {
        let term = k * k * (-(k * k - 1.0) * alpha).exp();
        envelope += term;
        if term < 1e-18 {
            break;
        }
        k += 1.0;
    }
    let theta0 = std::f64::consts::PI * down / width;
    loop {
        let u = uniform_open01(rng);
        let theta = (1.0 - 2.0 * u).acos();
        let ratio = sine_series_ratio(theta0, theta, alpha);
        if uniform_open01(rng) * envelope < ratio {
            return Ok(theta * width / std::f64::consts::PI - down);
        }
    }
}

/// `p_killed(x) / φ_s(x)` for the strip `(-down, up)`, start 0.
pub(crate) fn killed_survival_ratio(x: f64, up: f64, down: f64, s: f64) -> f64 {
    let width = up + down;
    let mut total = 0.0;
    for n in -5i32..=5 {
        let shift = 2.0 * f64::from(n) * width;
        let reflected = shift - 2.0 * up;
        if n != 0 {
            total += (-(2.0 * x * shift + shift * shift) / (2.0 * s)).exp();
        } else {
            total += 1.0;
        }
        total -= (-(2.0 * x * reflected + reflected * reflected) / (2.0 * s)).exp();
    }
    total.clamp(0.0, 1.0)
}

/// Eigen-series density divided by its leading term, in angle coordinates.
fn sine_series_ratio(theta0: f64, theta: f64, alpha: f64) -> f64 {
    let lead = theta0.sin() * theta.sin();
    let mut sum = lead;
    let mut k = 2.0_f64;
    loop {
        let damp = (-(k * k - 1.0) * alpha).exp();
        sum += (k * theta0).sin() * (k * theta).sin() * damp;
        if k * k * damp < 1e-18 {
            break;
        }
        k += 1.0;
    }
    sum / lead
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split;

    /// Killed transition density (unnormalized survival mass included), used by tests.
    fn killed_density_images(x: f64, up: f64, down: f64, s: f64) -> f64 {
        if x <= -down || x >= up {
            return 0.0;
        }
        let phi = (-(x * x) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt();
        phi * killed_survival_ratio(x, up, down, s)
    }
    
    fn killed_density_eigen(x: f64, up: f64, down: f64, s: f64) -> f64 {
        if x <= -down || x >= up {
            return 0.0;
        }
        let width = up + down;
        let pi = std::f64::consts::PI;
        let mut sum = 0.0;
        for k in 1..400 {
            let k = f64::from(k);
            let damp = (-(k * k * pi * pi * s) / (2.0 * width * width)).exp();
            sum += (k * pi * down / width).sin() * (k * pi * (x + down) / width).sin() * damp;
            if damp < 1e-20 {
                break;
            }
        }
        2.0 * sum / width
    }

    #[test]
    fn plateau_and_tail() {
        let law = ExitLaw::standard();
        assert_eq!(law.g(0.05).unwrap(), 1.0);
        assert_eq!(law.g(0.0).unwrap(), 1.0);
        // 4(1 − Φ(3)) with 1 − Φ(3) = 1.3498980316300945e-3.
        assert!((law.g(3.0).unwrap() - 5.399_592_126_520_378e-3).abs() < 1e-15);
        assert!(law.g(0.5).unwrap() > law.g(1.0).unwrap());
        assert!(law.g(-1e-3).is_err());
        assert!(law.g(f64::NAN).is_err());
    }

    #[test]
    fn stitch_points_are_continuous() {
        let law = ExitLaw::standard();
        assert!(law.stitch_residual() <= 1e-9);
        let below = 4.0 * normal::sf(3.0);
        assert!((law.series(3.0) - below).abs() < 1e-12);
    }

    #[test]
    fn table_is_monotone_and_under_tail_bound() {
        let law = ExitLaw::standard();
        let mut prev = f64::INFINITY;
        for (x, g) in law.table() {
            assert!(g <= prev);
            assert!(g > 0.0 && g <= 1.0);
            assert!(g <= 4.0 * normal::sf(x) + 1e-15, "x={x}");
            // strictly decreasing wherever 1 − G is representable
            if g < 1.0 - 1e-12 && prev < 1.0 - 1e-12 {
                assert!(g < prev);
            }
            prev = g;
        }
    }

    #[test]
    fn inverse_matches_forward() {
        let law = ExitLaw::standard();
        assert_eq!(law.g_inverse(1.0).unwrap(), 0.0);
        for &x in &[0.25, 0.4, 0.77, 1.3, 2.2, 2.99, 3.5, 4.9] {
            let y = law.g(x).unwrap();
            let back = law.g_inverse(y).unwrap();
            assert!((back - x).abs() < 1e-6, "x={x} back={back}");
            assert!((law.g(back).unwrap() - y).abs() <= 1e-8);
        }
        let y = 1e-4;
        let expected = normal::inv_cdf(1.0 - 2.5e-5);
        assert!((law.g_inverse(y).unwrap() - expected).abs() < 1e-9);
        assert!(law.g_inverse(0.0).is_err());
        assert!(law.g_inverse(1.5).is_err());
    }

    #[test]
    fn inverse_is_accurate_in_probability_space() {
        let law = ExitLaw::standard();
        let mut worst = 0.0_f64;
        for i in 1..20_000 {
            let y = i as f64 / 20_000.0;
            let x = law.g_inverse(y).unwrap();
            worst = worst.max((law.g(x).unwrap() - y).abs());
        }
        assert!(worst <= 1e-8, "worst {worst}");
    }

    #[test]
    fn exit_time_cdf_wraps_g() {
        let eps = 0.3;
        let t = 0.05;
        assert_eq!(exit_time_cdf(eps, t).unwrap(), g_exit_cdf(eps / t.sqrt()).unwrap());
        assert_eq!(exit_time_cdf(eps, 0.0).unwrap(), 0.0);
        assert!(exit_time_cdf(0.0, 1.0).is_err());
    }

    #[test]
    fn symmetric_exit_moments() {
        let mut rng = split(11, 0);
        let eps = 0.7;
        let reps = 100_000;
        let (mut s1, mut s2, mut ups, mut vsum) = (0.0, 0.0, 0usize, 0.0);
        for _ in 0..reps {
            let e = sample_symmetric_exit(&mut rng, eps).unwrap();
            assert_eq!(e.value.abs(), eps);
            assert!(e.tau > 0.0);
            s1 += e.tau;
            s2 += e.tau * e.tau;
            vsum += e.value;
            if e.value > 0.0 {
                ups += 1;
            }
        }
        let r = reps as f64;
        let mean = s1 / r;
        let sd = (s2 / r - mean * mean).sqrt();
        let e2 = eps * eps;
        assert!((mean / e2 - 1.0).abs() <= 4.0 / r.sqrt() * sd / mean);
        let p = ups as f64 / r;
        assert!((p - 0.5).abs() <= 4.0 * (0.25 / r).sqrt());
        assert!((vsum / r).abs() <= 4.0 * eps / r.sqrt());
        assert!(sample_symmetric_exit(&mut rng, 0.0).is_err());
    }

    #[test]
    fn asymmetric_exit_hits_with_gamblers_ruin_odds() {
        let mut rng = split(12, 0);
        let reps = 60_000;
        let (up, down) = (2.0, 1.0);
        let (mut hits_up, mut m2, mut tsum) = (0usize, 0.0, 0.0);
        for _ in 0..reps {
            let e = sample_asymmetric_exit(&mut rng, up, down).unwrap();
            assert!(e.value == up || e.value == -down);
            if e.value == up {
                hits_up += 1;
            }
            m2 += e.value * e.value;
            tsum += e.tau;
        }
        let r = reps as f64;
        let p = down / (up + down);
        assert!((hits_up as f64 / r - p).abs() <= 4.0 * (p * (1.0 - p) / r).sqrt());
        // E[W_τ²] = E[τ] = up·down; Var(W_τ²) = (4-1)²·p(1-p)
        assert!((m2 / r - up * down).abs() <= 4.0 * 3.0 * (p * (1.0 - p) / r).sqrt());
        assert!((tsum / r - up * down).abs() < 0.05);
        assert!(sample_asymmetric_exit(&mut rng, 1.0, -1.0).is_err());
    }

    #[test]
    fn asymmetric_with_equal_barriers_is_one_symmetric_step() {
        let mut a = split(5, 9);
        let mut b = split(5, 9);
        for _ in 0..100 {
            let x = sample_asymmetric_exit(&mut a, 0.4, 0.4).unwrap();
            let y = sample_symmetric_exit(&mut b, 0.4).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn path_grid_is_deterministic_and_validates() {
        let times = [0.1, 0.5, 0.5, 2.0];
        let a = sample_path_grid(&mut split(3, 1), &times).unwrap();
        let b = sample_path_grid(&mut split(3, 1), &times).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1], a[2]);
        assert!(sample_path_grid(&mut split(3, 1), &[0.5, 0.4]).is_err());
        assert!(sample_path_grid(&mut split(3, 1), &[-0.1]).is_err());
    }

    #[test]
    fn path_grid_covariance() {
        let mut rng = split(4, 0);
        let reps = 40_000;
        let (mut ss, mut tt, mut st) = (0.0, 0.0, 0.0);
        for _ in 0..reps {
            let w = sample_path_grid(&mut rng, &[0.3, 1.2]).unwrap();
            ss += w[0] * w[0];
            tt += w[1] * w[1];
            st += w[0] * w[1];
        }
        let r = reps as f64;
        assert!((ss / r - 0.3).abs() < 4.0 * 0.3 * (2.0 / r).sqrt());
        assert!((tt / r - 1.2).abs() < 4.0 * 1.2 * (2.0 / r).sqrt());
        assert!((st / r - 0.3).abs() < 4.0 * (0.3 * 1.2 + 0.09_f64).sqrt() / r.sqrt());
    }

    #[test]
    fn image_and_eigen_densities_agree() {
        for &(up, down) in &[(1.0, 1.0), (1.6, 0.6)] {
            let width: f64 = up + down;
            for &s in &[0.05 * width * width, width * width / 8.0, 0.4 * width * width] {
                for i in 1..40 {
                    let x = -down + (i as f64) * width / 40.0;
                    let a = killed_density_images(x, up, down, s);
                    let b = killed_density_eigen(x, up, down, s);
                    assert!((a - b).abs() < 1e-10, "x={x} s={s}: {a} vs {b}");
                }
            }
        }
    }

    fn conditional_moment(up: f64, down: f64, s: f64, power: i32) -> f64 {
        // midpoint quadrature of the killed density, normalised by survival mass
        let n = 20_000;
        let h = (up + down) / n as f64;
        let (mut mass, mut m) = (0.0, 0.0);
        for i in 0..n {
            let x = -down + (i as f64 + 0.5) * h;
            let p = killed_density_eigen(x, up, down, s);
            mass += p * h;
            m += p * x.powi(power) * h;
        }
        m / mass
    }

    #[test]
    fn killed_sampler_matches_density_moments() {
        let mut rng = split(21, 0);
        for &(up, down, s) in &[(1.0, 1.0, 0.1), (1.0, 1.0, 0.9), (1.6, 0.6, 0.2), (1.6, 0.6, 2.0)] {
            let reps = 40_000;
            let (mut m1, mut m2) = (0.0, 0.0);
            for _ in 0..reps {
                let x = sample_killed_position(&mut rng, up, down, s).unwrap();
                assert!(x > -down && x < up);
                m1 += x;
                m2 += x * x;
            }
            let r = reps as f64;
            let e1 = conditional_moment(up, down, s, 1);
            let e2 = conditional_moment(up, down, s, 2);
            let sd1 = (e2 - e1 * e1).sqrt();
            assert!((m1 / r - e1).abs() < 4.0 * sd1 / r.sqrt(), "mean {} vs {e1}", m1 / r);
            let sd2 = (up.max(down)).powi(2) / r.sqrt();
            assert!((m2 / r - e2).abs() < 4.0 * sd2, "second {} vs {e2}", m2 / r);
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mut buf = Vec::new();
        ExitLaw::standard().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,g"));
        assert_eq!(lines.count(), TABLE_NODES);
    }
}
