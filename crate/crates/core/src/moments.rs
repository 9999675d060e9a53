//! Finite-support distributions, the Pearson and kurtosis–skewness moment
//! inequalities, and decomposition of a mean-zero law into two-point laws.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-12;

/// Distribution with finitely many atoms `(point, weight)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct FiniteDistribution {
    atoms: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct RawDistribution {
    atoms: Vec<(f64, f64)>,
}

impl TryFrom<RawDistribution> for FiniteDistribution {
    type Error = Error;
    fn try_from(raw: RawDistribution) -> Result<Self> {
        FiniteDistribution::new(raw.atoms)
    }
}

impl From<FiniteDistribution> for RawDistribution {
    fn from(d: FiniteDistribution) -> Self {
        RawDistribution { atoms: d.atoms }
    }
}

/// Which moment to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    Power(u32),
    AbsFirst,
}

/// Two-point law on `{up, -down}` with mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanZeroBernoulli {
    pub up: f64,
    pub down: f64,
    pub weight_up: f64,
}

impl MeanZeroBernoulli {
    pub fn new(up: f64, down: f64) -> Self {
        MeanZeroBernoulli { up, down, weight_up: down / (up + down) }
    }

    pub fn weight_down(&self) -> f64 {
        self.up / (self.up + self.down)
    }
}

/// Result of [`bernoulli_mixture_decompose`]: the mass at zero plus weighted
/// two-point components. `zero_weight + Σ weights = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDecomposition {
    pub zero_weight: f64,
    pub components: Vec<(f64, MeanZeroBernoulli)>,
}

impl MixtureDecomposition {
    /// Atom-wise recombination of the mixture, sorted by point.
    pub fn recompose(&self) -> Vec<(f64, f64)> {
        let mut mass: BTreeMap<OrderedPoint, f64> = BTreeMap::new();
        if self.zero_weight > 0.0 {
            mass.insert(OrderedPoint(0.0), self.zero_weight);
        }
        for (w, c) in &self.components {
            *mass.entry(OrderedPoint(c.up)).or_insert(0.0) += w * c.weight_up;
            *mass.entry(OrderedPoint(-c.down)).or_insert(0.0) += w * c.weight_down();
        }
        mass.into_iter().map(|(k, v)| (k.0, v)).collect()
    }

    /// Largest atom-wise discrepancy between the recombined mixture and `dist`.
    pub fn max_error(&self, dist: &FiniteDistribution) -> f64 {
        let mine = self.recompose();
        let mut theirs = dist.atoms.clone();
        theirs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if mine.len() != theirs.len() {
            return f64::INFINITY;
        }
        mine.iter()
            .zip(&theirs)
            .map(|(a, b)| if a.0 == b.0 { (a.1 - b.1).abs() } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedPoint(f64);
impl Eq for OrderedPoint {}
impl PartialOrd for OrderedPoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedPoint {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl FiniteDistribution {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Input("distribution needs at least one atom".into()));
        }
        let mut total = 0.0;
        for &(x, w) in &atoms {
            if !x.is_finite() {
                return Err(Error::Input(format!("atom point {x} is not finite")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Input(format!("atom weight {w} must be positive")));
            }
            total += w;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Input(format!("weights sum to {total}, not 1")));
        }
        let mut points: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        points.sort_by(f64::total_cmp);
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("atom points must be distinct".into()));
        }
        Ok(FiniteDistribution { atoms })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn moment(&self, m: Moment) -> f64 {
        match m {
            Moment::Power(k) => self.atoms.iter().map(|&(x, w)| w * x.powi(k as i32)).sum(),
            Moment::AbsFirst => self.atoms.iter().map(|&(x, w)| w * x.abs()).sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(Moment::Power(1))
    }

    fn scale(&self) -> f64 {
        self.atoms.iter().map(|a| a.0.abs()).fold(1.0, f64::max)
    }

    fn require_mean_zero(&self) -> Result<()> {
        let mean = self.mean();
        if mean.abs() > 1e-12 * self.scale() {
            return Err(Error::Precondition(format!("distribution has mean {mean}, expected 0")));
        }
        Ok(())
    }

    /// `E|X − m|` and `E(X − m)^k` for k = 2, 3, 4, where `m` is the computed mean.
    /// The gap functions use these so that the residual mean left by rounding
    /// does not leak into the inequalities when the variance is small.
    fn central_moments(&self) -> [f64; 4] {
        let m = self.mean();
        let mut out = [0.0; 4];
        for &(x, w) in &self.atoms {
            let d = x - m;
            let d2 = d * d;
            out[0] += w * d.abs();
            out[1] += w * d2;
            out[2] += w * d2 * d;
            out[3] += w * d2 * d2;
        }
        out
    }

    /// Same law mapped through `x -> lambda * x`.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        FiniteDistribution::new(self.atoms.iter().map(|&(x, w)| (lambda * x, w)).collect())
    }

    /// Random mean-zero law with `n` atoms: points uniform on (-1, 1) and
    /// Dirichlet(1) weights, then shifted so the mean vanishes.
    pub fn random_mean_zero<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        assert!(n >= 2);
        loop {
            let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let points: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean: f64 = points.iter().zip(&weights).map(|(x, w)| x * w).sum();
            let atoms: Vec<(f64, f64)> = points.iter().zip(&weights).map(|(x, &w)| (x - mean, w)).collect();
            if let Ok(d) = FiniteDistribution::new(atoms) {
                if d.atoms.iter().all(|a| a.0 != 0.0) && d.require_mean_zero().is_ok() {
                    return d;
                }
            }
        }
    }
}

/// `Σ w x^k`, or `Σ w |x|` for [`Moment::AbsFirst`].
pub fn moment(dist: &FiniteDistribution, m: Moment) -> f64 {
    dist.moment(m)
}

/// `E[X⁴]/E[X²]² − E[X³]²/E[X²]³ − 1`, non-negative for every mean-zero law.
pub fn pearson_gap(dist: &FiniteDistribution) -> Result<f64> {
    dist.require_mean_zero()?;
    let [_, e2, _, _] = dist.central_moments();
    if !(e2 > 0.0) {
        return Err(Error::Precondition("second moment must be positive".into()));
    }
    // e2·e4 − e3² − e2³ is the Hankel determinant of the moments, which equals
    // Σ_{i<j<k} w_i w_j w_k (x_i−x_j)²(x_i−x_k)²(x_j−x_k)². Summing that form
    // avoids the cancellation between e4/e2² and e3²/e2³ for skewed laws.
    let a = &dist.atoms;
    let mut hankel = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            for k in j + 1..a.len() {
                let v = (a[i].0 - a[j].0) * (a[i].0 - a[k].0) * (a[j].0 - a[k].0);
                hankel += a[i].1 * a[j].1 * a[k].1 * v * v;
            }
        }
    }
    Ok(hankel / (e2 * e2 * e2))
}

/// `E[X⁴]/E[X²]² − (3/4)E[X³]²/E[X²]³ − E[X²]/E[|X|]²`, non-negative for every
/// mean-zero law and zero exactly for two-point laws.
pub fn kurtosis_skew_gap34(dist: &FiniteDistribution) -> Result<f64> {
    dist.require_mean_zero()?;
    let [e1, e2, e3, e4] = dist.central_moments();
    if !(e2 > 0.0) || !(e1 > 0.0) {
        return Err(Error::Precondition("second and absolute first moments must be positive".into()));
    }
    Ok(e4 / (e2 * e2) - 0.75 * e3 * e3 / (e2 * e2 * e2) - e2 / (e1 * e1))
}

/// Writes a mean-zero law as a mixture of mean-zero two-point laws by merging
/// the two largest positive atoms into their barycenter, decomposing the smaller
/// law, and splitting each component on the merged atom back into two.
pub fn bernoulli_mixture_decompose(dist: &FiniteDistribution) -> Result<MixtureDecomposition> {
    dist.require_mean_zero()?;
    let zero_weight: f64 = dist.atoms.iter().filter(|a| a.0 == 0.0).map(|a| a.1).sum();
    let rest: Vec<(f64, f64)> = dist.atoms.iter().copied().filter(|a| a.0 != 0.0).collect();
    let has_pos = rest.iter().any(|a| a.0 > 0.0);
    let has_neg = rest.iter().any(|a| a.0 < 0.0);
    if !has_pos || !has_neg {
        if rest.is_empty() {
            return Ok(MixtureDecomposition { zero_weight, components: Vec::new() });
        }
        return Err(Error::Precondition("need at least one positive and one negative atom".into()));
    }
    let mass = 1.0 - zero_weight;
    let normalized: Vec<(f64, f64)> = rest.iter().map(|&(x, w)| (x, w / mass)).collect();
    let components = decompose_nonzero(&normalized)
        .into_iter()
        .map(|(w, c)| (w * mass, c))
        .collect();
    Ok(MixtureDecomposition { zero_weight, components })
}

fn decompose_nonzero(atoms: &[(f64, f64)]) -> Vec<(f64, MeanZeroBernoulli)> {
    let mut pos: Vec<(f64, f64)> = atoms.iter().copied().filter(|a| a.0 > 0.0).collect();
    let neg_count = atoms.len() - pos.len();
    if pos.len() == 1 && neg_count == 1 {
        let up = pos[0].0;
        let down = -atoms.iter().find(|a| a.0 < 0.0).unwrap().0;
        return vec![(1.0, MeanZeroBernoulli::new(up, down))];
    }
    if pos.len() == 1 {
        let mirrored: Vec<(f64, f64)> = atoms.iter().map(|&(x, w)| (-x, w)).collect();
        return decompose_nonzero(&mirrored)
            .into_iter()
            .map(|(w, c)| (w, MeanZeroBernoulli { up: c.down, down: c.up, weight_up: c.weight_down() }))
            .collect();
    }
    pos.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (a0, p0) = pos[0];
    let (a1, p1) = pos[1];
    let merged_weight = p0 + p1;
    let merged = (a0 * p0 + a1 * p1) / merged_weight;
    let mut reduced: Vec<(f64, f64)> = atoms
        .iter()
        .copied()
        .filter(|a| a.0 != a0 && a.0 != a1)
        .collect();
    match reduced.iter_mut().find(|a| a.0 == merged) {
        Some(existing) => existing.1 += merged_weight,
        None => reduced.push((merged, merged_weight)),
    }
    let share0 = p0 / merged_weight;
    let mut out = Vec::new();
    for (lambda, c) in decompose_nonzero(&reduced) {
        if c.up != merged {
            out.push((lambda, c));
            continue;
        }
        // Three-point law on {a0, a1, -down}: mass on the merged atom is shared
        // in proportion p0 : p1; split it as μ P(a0, -down) + (1 − μ) P(a1, -down).
        let down = c.down;
        let q0 = share0 * c.weight_up;
        let first = MeanZeroBernoulli::new(a0, down);
        let mu = (q0 / first.weight_up).clamp(0.0, 1.0);
        if mu > 0.0 {
            out.push((lambda * mu, first));
        }
        if mu < 1.0 {
            out.push((lambda * (1.0 - mu), MeanZeroBernoulli::new(a1, down)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::split;
    use proptest::prelude::*;

    fn dist(atoms: &[(f64, f64)]) -> FiniteDistribution {
        FiniteDistribution::new(atoms.to_vec()).unwrap()
    }

    #[test]
    fn moment_examples() {
        let sym = dist(&[(1.0, 0.5), (-1.0, 0.5)]);
        assert_eq!(moment(&sym, Moment::Power(2)), 1.0);
        assert_eq!(moment(&sym, Moment::Power(3)), 0.0);
        let skew = dist(&[(2.0, 1.0 / 3.0), (-1.0, 2.0 / 3.0)]);
        assert!((moment(&skew, Moment::Power(3)) - 2.0).abs() < 1e-15);
        assert!((moment(&skew, Moment::AbsFirst) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(FiniteDistribution::new(vec![]).is_err());
        assert!(FiniteDistribution::new(vec![(1.0, 0.5), (1.0, 0.5)]).is_err());
        assert!(FiniteDistribution::new(vec![(1.0, 0.6), (-1.0, 0.5)]).is_err());
        assert!(FiniteDistribution::new(vec![(1.0, 1.5), (-1.0, -0.5)]).is_err());
        let json = r#"{"atoms": [[1.0, 0.5], [-1.0, 0.5]]}"#;
        let d: FiniteDistribution = serde_json::from_str(json).unwrap();
        assert_eq!(d.atoms().len(), 2);
        assert!(serde_json::from_str::<FiniteDistribution>(r#"{"atoms": [[1.0, 0.7]]}"#).is_err());
    }

    #[test]
    fn two_point_gaps_vanish() {
        let skew = dist(&[(2.0, 1.0 / 3.0), (-1.0, 2.0 / 3.0)]);
        assert!(pearson_gap(&skew).unwrap().abs() <= 1e-12);
        assert!(kurtosis_skew_gap34(&skew).unwrap().abs() <= 1e-12);
        let eps = 0.01;
        let sym = dist(&[(eps, 0.5), (-eps, 0.5)]);
        assert!(kurtosis_skew_gap34(&sym).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn discretized_normal_pearson_gap() {
        // three-point Gauss–Hermite rule matches the normal's moments up to order 5
        let s3 = 3f64.sqrt();
        let d = dist(&[(-s3, 1.0 / 6.0), (0.0, 2.0 / 3.0), (s3, 1.0 / 6.0)]);
        assert!((pearson_gap(&d).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nonzero_mean_is_rejected() {
        let d = dist(&[(2.0, 0.2), (1.0, 0.3), (-1.0, 0.5)]);
        assert!(matches!(pearson_gap(&d), Err(Error::Precondition(_))));
        assert!(matches!(bernoulli_mixture_decompose(&d), Err(Error::Precondition(_))));
    }

    #[test]
    fn decomposition_examples() {
        let two = dist(&[(3.0, 0.25), (-1.0, 0.75)]);
        let m = bernoulli_mixture_decompose(&two).unwrap();
        assert_eq!(m.components.len(), 1);
        assert!((m.components[0].0 - 1.0).abs() < 1e-15);

        let four = dist(&[(2.0, 0.3), (1.0, 0.1), (-1.0, 0.55), (-3.0, 0.05)]);
        let m = bernoulli_mixture_decompose(&four).unwrap();
        assert!(m.max_error(&four) <= 1e-12);
        let total: f64 = m.components.iter().map(|c| c.0).sum();
        assert!((total - 1.0).abs() <= 1e-12);
        assert!(m.components.iter().all(|c| c.0 > 0.0));

        let with_zero = dist(&[(1.0, 0.25), (0.0, 0.5), (-1.0, 0.25)]);
        let m = bernoulli_mixture_decompose(&with_zero).unwrap();
        assert_eq!(m.zero_weight, 0.5);
        assert!(m.max_error(&with_zero) <= 1e-12);
    }

    #[test]
    fn single_positive_atom_mirrors() {
        let d = dist(&[(3.0, 0.5), (-1.0, 0.25), (-5.0, 0.25)]);
        let m = bernoulli_mixture_decompose(&d).unwrap();
        assert_eq!(m.components.len(), 2);
        assert!(m.max_error(&d) <= 1e-12);
    }

    #[test]
    fn random_laws_satisfy_both_inequalities() {
        let mut rng = split(99, 0);
        for i in 0..5000 {
            let d = FiniteDistribution::random_mean_zero(&mut rng, 2 + i % 7);
            assert!(pearson_gap(&d).unwrap() >= -1e-10);
            assert!(kurtosis_skew_gap34(&d).unwrap() >= -1e-10, "{d:?} {}", kurtosis_skew_gap34(&d).unwrap());
            let m = bernoulli_mixture_decompose(&d).unwrap();
            assert!(m.max_error(&d) <= 1e-12, "{d:?}");
        }
    }

    proptest! {
        #[test]
        fn gaps_are_scale_invariant(seed in 0u64..1000, n in 2usize..9, lambda in 0.01f64..100.0) {
            let d = FiniteDistribution::random_mean_zero(&mut split(seed, 1), n);
            let s = d.scaled(lambda).unwrap();
            prop_assert!((pearson_gap(&d).unwrap() - pearson_gap(&s).unwrap()).abs() <= 1e-10);
            prop_assert!((kurtosis_skew_gap34(&d).unwrap() - kurtosis_skew_gap34(&s).unwrap()).abs() <= 1e-10);
        }

        #[test]
        fn components_have_mean_zero(seed in 0u64..1000, n in 2usize..9) {
            let d = FiniteDistribution::random_mean_zero(&mut split(seed, 2), n);
            let m = bernoulli_mixture_decompose(&d).unwrap();
            for (w, c) in &m.components {
                prop_assert!(*w > 0.0);
                prop_assert!((c.up * c.weight_up - c.down * c.weight_down()).abs() <= 1e-12);
            }
        }

        #[test]
        fn gaps_vanish_iff_two_atoms(seed in 0u64..1000, n in 2usize..9) {
            let d = FiniteDistribution::random_mean_zero(&mut split(seed, 3), n);
            let g = pearson_gap(&d).unwrap();
            if n == 2 {
                prop_assert!(g.abs() <= 1e-12);
            } else {
                // Nearly coincident atoms make the true gap tiny but still positive.
                prop_assert!(g > 0.0);
            }
        }
    }
}
