//! Discretization error `Zⁿ`, stop counts, cost functionals and empirical
//! estimates of the increment-moment coefficients.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::schemes::{simulate_brownian_stops, SchemeCoefficients, SchemeSpec, StopSequence};

/// Per-path error statistics at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub epsilon: f64,
    pub t: f64,
    pub z: f64,
    pub n_stops: usize,
    pub u_cost: f64,
    pub c_cost: f64,
}

impl ErrorStats {
    /// `(√N·Z, U·Z, C·Z, Z/ε)`.
    pub fn scaled_products(&self) -> [f64; 4] {
        [
            (self.n_stops as f64).sqrt() * self.z,
            self.u_cost * self.z,
            self.c_cost * self.z,
            self.z / self.epsilon,
        ]
    }
}

fn check_stop_times(times: &[f64], t: f64) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Input("need at least the start and the horizon".into()));
    }
    if times[0] != 0.0 {
        return Err(Error::Input(format!("first stop must be 0, got {}", times[0])));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("stop times must be strictly increasing".into()));
    }
    let last = *times.last().unwrap();
    if (last - t).abs() > 1e-12 * t.max(1.0) {
        return Err(Error::Input(format!("stops cover [0, {last}] but the horizon is {t}")));
    }
    Ok(())
}

/// `∫₀ᵗ X dY − Σ_j X_{τ_j}(Y_{τ_{j+1}∧t} − Y_{τ_j∧t})`.
///
/// `times` are the stops with the horizon appended last; `x` and `y` are the
/// process values there (`x` at the horizon is not used).
pub fn riemann_error(times: &[f64], x: &[f64], y: &[f64], true_integral: f64, t: f64) -> Result<f64> {
    check_stop_times(times, t)?;
    if y.len() != times.len() || x.len() + 1 < times.len() {
        return Err(Error::Input(format!(
            "stop arrays misaligned: {} times, {} x values, {} y values",
            times.len(),
            x.len(),
            y.len()
        )));
    }
    let sum: f64 = y.windows(2).zip(x).map(|(w, xj)| xj * (w[1] - w[0])).sum();
    Ok(true_integral - sum)
}

/// Error of the scheme for `∫W dW`, using `∫₀ᵗ W dW = (W_t² − t)/2`, which
/// reduces to `(Σ (ΔW)² − t)/2`.
pub fn w_dw_error(seq: &StopSequence) -> f64 {
    let qv: f64 = seq.increments().map(|d| d * d).sum();
    0.5 * (qv - seq.truncated_at)
}

/// Error computed on a fine grid with stops at a subset of its nodes:
/// `Σ_i (X_i − X_{last stop ≤ i})(Y_{i+1} − Y_i)`. The fine left-point sum
/// stands in for the integral, so only the difference is accumulated.
pub fn fine_path_error(x_fine: &[f64], y_fine: &[f64], stop_idx: &[usize]) -> Result<f64> {
    if x_fine.len() != y_fine.len() || stop_idx.first() != Some(&0) {
        return Err(Error::Input("fine path arrays misaligned or stops do not start at node 0".into()));
    }
    if stop_idx.windows(2).any(|w| w[1] <= w[0]) || stop_idx.iter().any(|&i| i >= x_fine.len()) {
        return Err(Error::Input("stop indices must be increasing and inside the grid".into()));
    }
    let mut z = 0.0;
    let mut next = 1;
    let mut held = x_fine[0];
    for i in 0..x_fine.len() - 1 {
        if next < stop_idx.len() && stop_idx[next] == i {
            held = x_fine[i];
            next += 1;
        }
        z += (x_fine[i] - held) * (y_fine[i + 1] - y_fine[i]);
    }
    Ok(z)
}

/// Cost functionals on aligned stop arrays (horizon appended last).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostFunctionals {
    /// `Σ |u_{τ_j}| |Δπ_j|`.
    pub u_cost: f64,
    /// `Σ |Δπ_j| S_{τ_{j+1}∧t}`.
    pub c_cost: f64,
    /// `Σ |Δπ_j| S_{τ_j}`, the left-endpoint variant.
    pub c_cost_left: f64,
}

pub fn cost_functionals(pi: &[f64], s: &[f64], u: &[f64]) -> Result<CostFunctionals> {
    if pi.len() != s.len() || u.len() + 1 < pi.len() {
        return Err(Error::Input(format!(
            "cost arrays misaligned: {} pi, {} s, {} u values",
            pi.len(),
            s.len(),
            u.len()
        )));
    }
    let mut out = CostFunctionals { u_cost: 0.0, c_cost: 0.0, c_cost_left: 0.0 };
    for j in 0..pi.len().saturating_sub(1) {
        let d = (pi[j + 1] - pi[j]).abs();
        out.u_cost += u[j].abs() * d;
        out.c_cost += d * s[j + 1];
        out.c_cost_left += d * s[j];
    }
    Ok(out)
}

/// Runs `spec` on `X = Y = W` over `[0, t]`. The cost functionals use
/// `u ≡ 1` and unit price, so both equal the driver's total variation along the stops.
pub fn brownian_testbed<R: Rng + ?Sized>(rng: &mut R, spec: &SchemeSpec, t: f64) -> Result<(ErrorStats, StopSequence)> {
    let seq = simulate_brownian_stops(rng, spec, t)?;
    let z = w_dw_error(&seq);
    let u_cost: f64 = seq.increments().map(f64::abs).sum();
    let stats = ErrorStats { epsilon: spec.epsilon, t, z, n_stops: seq.count(), u_cost, c_cost: u_cost };
    Ok((stats, seq))
}

/// Empirical moments of increments: `g1 = mean|Δ|`, `gk = mean Δ^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IncrementMoments {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub g6: f64,
    pub g12: f64,
    pub count: usize,
}

impl IncrementMoments {
    pub fn from_increments(incs: &[f64]) -> Self {
        let mut s = [0.0; 6];
        for &d in incs {
            let d2 = d * d;
            let d4 = d2 * d2;
            let d6 = d4 * d2;
            s[0] += d.abs();
            s[1] += d2;
            s[2] += d2 * d;
            s[3] += d4;
            s[4] += d6;
            s[5] += d6 * d6;
        }
        let n = incs.len().max(1) as f64;
        IncrementMoments {
            g1: s[0] / n,
            g2: s[1] / n,
            g3: s[2] / n,
            g4: s[3] / n,
            g6: s[4] / n,
            g12: s[5] / n,
            count: incs.len(),
        }
    }
}

/// Coefficient estimates with grouped-jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientEstimate {
    pub coefficients: SchemeCoefficients,
    pub se_a_sq: f64,
    pub se_b: f64,
    pub se_q_sq: f64,
    pub se_zeta: f64,
    pub count: usize,
}

const MIN_BUCKET: usize = 100;
const JACKKNIFE_GROUPS: usize = 100;

fn coefficients_from_sums(s: &[f64; 4], n: f64, eps: f64) -> [f64; 4] {
    let (g1, g2, g3, g4) = (s[0] / n, s[1] / n, s[2] / n, s[3] / n);
    [g4 / (g2 * eps * eps), g3 / (g2 * eps), g2 / (eps * eps), eps * g1 / g2]
}

/// `â² = ĝ⁴/(ĝ²ε²)`, `b̂ = ĝ³/(ĝ²ε)`, `q̂² = ĝ²/ε²`, `ζ̂ = εĝ¹/ĝ²` from one bucket of increments.
pub fn estimate_coefficients(increments: &[f64], epsilon: f64) -> Result<CoefficientEstimate> {
    let n = increments.len();
    if n < MIN_BUCKET {
        return Err(Error::Estimation(format!("bucket has {n} increments, need at least {MIN_BUCKET}")));
    }
    let groups = JACKKNIFE_GROUPS.min(n);
    let mut group_sums = vec![[0.0; 4]; groups];
    let mut group_counts = vec![0usize; groups];
    let mut total = [0.0; 4];
    for (i, &d) in increments.iter().enumerate() {
        let g = i * groups / n;
        let d2 = d * d;
        let row = [d.abs(), d2, d2 * d, d2 * d2];
        for k in 0..4 {
            group_sums[g][k] += row[k];
            total[k] += row[k];
        }
        group_counts[g] += 1;
    }
    let full = coefficients_from_sums(&total, n as f64, epsilon);
    if full.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("increments have zero second moment".into()));
    }
    let leave_out: Vec<[f64; 4]> = (0..groups)
        .map(|g| {
            let mut s = total;
            for k in 0..4 {
                s[k] -= group_sums[g][k];
            }
            coefficients_from_sums(&s, (n - group_counts[g]) as f64, epsilon)
        })
        .collect();
    let mut se = [0.0; 4];
    for k in 0..4 {
        let mean = leave_out.iter().map(|v| v[k]).sum::<f64>() / groups as f64;
        let ss: f64 = leave_out.iter().map(|v| (v[k] - mean).powi(2)).sum();
        se[k] = ((groups as f64 - 1.0) / groups as f64 * ss).sqrt();
    }
    Ok(CoefficientEstimate {
        coefficients: SchemeCoefficients { a_sq: full[0], b: full[1], q_sq: full[2], zeta: full[3] },
        se_a_sq: se[0],
        se_b: se[1],
        se_q_sq: se[2],
        se_zeta: se[3],
        count: n,
    })
}

/// Splits `(left_state, increment)` samples into `buckets` quantile buckets of
/// the left-endpoint state and estimates coefficients in each.
pub fn estimate_bucketed(samples: &[(f64, f64)], epsilon: f64, buckets: usize) -> Result<Vec<(f64, CoefficientEstimate)>> {
    if buckets == 0 {
        return Err(Error::Input("need at least one bucket".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    (0..buckets)
        .map(|b| {
            let chunk = &sorted[b * n / buckets..(b + 1) * n / buckets];
            let incs: Vec<f64> = chunk.iter().map(|s| s.1).collect();
            let centre = chunk.get(chunk.len() / 2).map_or(f64::NAN, |s| s.0);
            estimate_coefficients(&incs, epsilon).map(|e| (centre, e))
        })
        .collect()
}
