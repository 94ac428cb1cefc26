//! A desk-scale synthetic world with a closed-form quality law.
//!
//! Inputs are drawn from an equal-weight two-component Gaussian mixture in
//! the unit square, classified by the fixed linear rule `g(x) = w·x + b`
//! with `w = (3, −3)`, `b = 0` (component means sit on opposite sides of the
//! decision line). The paired classifier is a single-affine-layer network
//! with logits `(−g, g)`, so:
//!
//! * confidence is `κ(m) = 1 / (1 + e^{−2m})` with margin `m = |g(x)|`;
//! * the exact L∞ robustness radius is `ρ(m) = 2m / ‖W₀ − W₁‖₁ = m/6`.
//!
//! Both are strictly increasing in `m`, and `g(X)` is itself a Gaussian
//! mixture, so the margin CDF — and with it the probability of any
//! counterexample range — has a closed form: a range `R(ρ, κ)` corresponds
//! exactly to the margin interval `[t_κ, 6ρ)` with `t_κ = ½·ln(κ/(1−κ))`.
//! That makes this world a ground-truth fixture for Monte-Carlo checks of
//! the coverage and quantile laws and for end-to-end certification trials.
//!
//! Component means are ~7 standard deviations from the box walls, so the
//! unclamped mixture leaves `[0,1]²` with probability below `1e-10`;
//! closed-form probabilities ignore clamping (and the fact that the
//! pipeline's oracle saturates radii at 0.5, which would require `|g| ≥ 3`,
//! a `~1e-23` event). Emitted datasets clamp rows into the box.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PagError, Result};
use crate::model::{Activation, AffineLayer, MlpModel};
use crate::quality::{CounterexampleRange, Dataset, QualityPoint};

/// The fixed synthetic binary-classification world.
#[derive(Debug, Clone)]
pub struct SyntheticLinearWorld {
    /// Decision weights of `g(x) = w·x + b`.
    pub w: [f64; 2],
    pub b: f64,
    /// Mean of the class-0 component (negative margin side).
    pub mu0: [f64; 2],
    /// Mean of the class-1 component (positive margin side).
    pub mu1: [f64; 2],
    /// Per-coordinate standard deviation of both components.
    pub sigma: f64,
}

impl Default for SyntheticLinearWorld {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticLinearWorld {
    /// The canonical instance used throughout tests and the CLI.
    pub fn new() -> Self {
        SyntheticLinearWorld {
            w: [3.0, -3.0],
            b: 0.0,
            mu0: [0.35, 0.62],
            mu1: [0.66, 0.37],
            sigma: 0.05,
        }
    }

    /// The signed margin `g(x) = w·x + b`.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.w[0] * x[0] + self.w[1] * x[1] + self.b
    }

    /// True class of a point: 1 on the positive-margin side.
    pub fn label_of(&self, x: &[f64]) -> usize {
        usize::from(self.margin(x) > 0.0)
    }

    /// The quality `(ρ, κ)` of an input, mirroring bit-for-bit what the
    /// paired network plus the closed-form distance oracle produce: the
    /// radius saturates at the oracle's default cap of 0.5.
    pub fn quality_of(&self, x: &[f64]) -> QualityPoint {
        let m = self.margin(x).abs();
        let rho = ((m + m) / 12.0).min(0.5);
        let kappa = 1.0 / (1.0 + (-(m + m)).exp());
        QualityPoint { rho, kappa }
    }

    /// One draw from the input distribution (unclamped; see module docs).
    pub fn draw_input(&self, rng: &mut impl Rng) -> [f64; 2] {
        let mu = if rng.gen_range(0..2) == 0 { &self.mu0 } else { &self.mu1 };
        let n0: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        [mu[0] + self.sigma * n0, mu[1] + self.sigma * n1]
    }

    /// One draw mapped straight into quality space.
    pub fn draw_quality(&self, rng: &mut impl Rng) -> QualityPoint {
        let x = self.draw_input(rng);
        self.quality_of(&x)
    }

    /// A deterministic quality point for draw `index` under `seed`:
    /// every index owns an independent random stream, so the set is the
    /// same for any evaluation order or worker count.
    pub fn quality_at_index(&self, seed: u64, index: u64) -> QualityPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.draw_quality(&mut rng)
    }

    /// Standard deviation of the margin `g(X)` within one component.
    fn margin_sd(&self) -> f64 {
        self.sigma * (self.w[0] * self.w[0] + self.w[1] * self.w[1]).sqrt()
    }

    /// CDF of the absolute margin `m = |g(X)|`: an equal mixture of two
    /// folded normals centered at the component margins.
    pub fn margin_cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let s = self.margin_sd();
        let mut acc = 0.0;
        for mu in [&self.mu0, &self.mu1] {
            let a = self.margin(&mu[..]);
            acc += 0.5 * (std_normal.cdf((t - a) / s) - std_normal.cdf((-t - a) / s));
        }
        acc.clamp(0.0, 1.0)
    }

    /// Inverse margin CDF by bisection: the smallest `t` with
    /// `margin_cdf(t) ≥ q`, to ~1e-13 absolute precision.
    pub fn margin_quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&q) {
            return Err(PagError::range("q", q, "0 <= q < 1"));
        }
        let (mut lo, mut hi) = (0.0_f64, 16.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.margin_cdf(mid) >= q {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * hi.max(1.0) {
                break;
            }
        }
        Ok(hi)
    }

    /// Exact probability that a fresh draw lands in the counterexample
    /// range: `Pr(ρ(X) < ρ ∧ κ(X) ≥ κ) = Pr(m ∈ [t_κ, 6ρ))`.
    pub fn range_prob(&self, range: &CounterexampleRange) -> f64 {
        if range.kappa >= 1.0 {
            return 0.0;
        }
        let lower = if range.kappa <= 0.5 {
            0.0
        } else {
            let t = 0.5 * (range.kappa / (1.0 - range.kappa)).ln();
            self.margin_cdf(t)
        };
        // Radii at or above the oracle cap cover every margin value.
        let upper = if range.rho > 0.5 { 1.0 } else { self.margin_cdf(6.0 * range.rho) };
        (upper - lower).max(0.0)
    }

    /// A family of up to `count` counterexample ranges sitting exactly at
    /// the ε-probability contour: each returned range has
    /// `range_prob ≥ epsilon` (verified), spread across the margin
    /// distribution's quantiles. Ranges whose tail cannot reach mass ε are
    /// dropped, so fewer than `count` may come back for large ε.
    pub fn witness_family(&self, count: usize, epsilon: f64) -> Result<Vec<CounterexampleRange>> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(PagError::range("epsilon", epsilon, "0 < epsilon < 1/2"));
        }
        let lo = 0.01_f64;
        let hi = (1.0 - 2.0 * epsilon - 0.01).max(lo);
        let mut family = Vec::with_capacity(count);
        for j in 0..count {
            let frac = if count <= 1 { 0.0 } else { j as f64 / (count - 1) as f64 };
            let level = lo + (hi - lo) * frac;
            let t = self.margin_quantile(level)?;
            let kappa = 1.0 / (1.0 + (-(t + t)).exp());
            let target = level + epsilon + 1e-9;
            if target >= 1.0 {
                continue;
            }
            // Invert the CDF again for the range's upper margin edge.
            let u = self.margin_quantile(target)?;
            let range = CounterexampleRange { rho: u / 6.0, kappa };
            if self.range_prob(&range) >= epsilon {
                family.push(range);
            }
        }
        Ok(family)
    }

    /// The single-layer network whose confidences and analytic radii
    /// realize this world's quality law.
    pub fn to_mlp_model(&self) -> MlpModel {
        MlpModel {
            input_dim: 2,
            num_classes: 2,
            layers: vec![AffineLayer {
                rows: 2,
                cols: 2,
                activation: Activation::Identity,
                weight: vec![-self.w[0], -self.w[1], self.w[0], self.w[1]],
                bias: vec![-self.b, self.b],
            }],
            input_box: Some(vec![[0.0, 1.0], [0.0, 1.0]]),
        }
    }

    /// Draws a labeled dataset, clamped into the unit box (labels are
    /// assigned after clamping so files are self-consistent).
    pub fn make_dataset(&self, rows: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            let raw = self.draw_input(&mut rng);
            let row = vec![raw[0].clamp(0.0, 1.0), raw[1].clamp(0.0, 1.0)];
            labels.push(self.label_of(&row));
            features.push(row);
        }
        Dataset { dim: 2, features, labels: Some(labels) }
    }
}

/// A one-dimensional distribution with a known CDF, for quantile-law
/// Monte-Carlo checks.
#[derive(Debug, Clone)]
pub enum Dist1D {
    /// Uniform on [0, 1).
    Uniform01,
    /// A finite support of `(value, probability)` atoms, values strictly
    /// increasing, probabilities summing to 1.
    Discrete(Vec<(f64, f64)>),
}

impl Dist1D {
    /// Validates and builds a discrete distribution.
    pub fn discrete(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(PagError::EmptyInput("discrete distribution atoms"));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut total = 0.0;
        for (i, (v, p)) in atoms.iter().enumerate() {
            if !v.is_finite() || !(*p > 0.0) {
                return Err(PagError::range("atom", *p, "finite value, probability > 0"));
            }
            if i > 0 && atoms[i - 1].0 == *v {
                return Err(PagError::InconsistentParams("duplicate atom value".into()));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(PagError::range("total probability", total, "sums to 1"));
        }
        Ok(Dist1D::Discrete(atoms))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Dist1D::Uniform01 => rng.gen::<f64>(),
            Dist1D::Discrete(atoms) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (v, p) in atoms {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                atoms.last().expect("validated non-empty").0
            }
        }
    }

    /// `Pr(X ≤ v)`.
    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            Dist1D::Uniform01 => v.clamp(0.0, 1.0),
            Dist1D::Discrete(atoms) => {
                atoms.iter().take_while(|(value, _)| *value <= v).map(|(_, p)| p).sum()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{run_oracle, OracleChoice, OracleConfig};

    #[test]
    fn boundary_points_have_zero_radius_and_half_confidence() {
        let world = SyntheticLinearWorld::new();
        let q = world.quality_of(&[0.5, 0.5]);
        assert_eq!(q.rho, 0.0);
        assert_eq!(q.kappa, 0.5);
    }

    #[test]
    fn confidence_is_strictly_monotone_in_radius() {
        let world = SyntheticLinearWorld::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<QualityPoint> = (0..500).map(|_| world.draw_quality(&mut rng)).collect();
        for a in &points {
            for b in &points {
                if a.rho < b.rho {
                    assert!(a.kappa < b.kappa, "rho and kappa order disagree: {a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn closed_form_quality_matches_the_model_pipeline_exactly() {
        let world = SyntheticLinearWorld::new();
        let model = world.to_mlp_model();
        model.validate().unwrap();
        let cfg = OracleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let raw = world.draw_input(&mut rng);
            let x = [raw[0].clamp(0.0, 1.0), raw[1].clamp(0.0, 1.0)];
            let fast = world.quality_of(&x);
            let oracle = run_oracle(&model, &x, OracleChoice::AnalyticLinear, &cfg).unwrap();
            let prediction = model.forward(&x);
            assert_eq!(fast.rho, oracle.radius, "radius mismatch at {x:?}");
            assert_eq!(fast.kappa, prediction.confidence, "confidence mismatch at {x:?}");
            assert_eq!(world.label_of(&x), prediction.class_index, "class mismatch at {x:?}");
        }
    }

    #[test]
    fn margin_cdf_is_a_proper_cdf_and_quantile_inverts_it() {
        let world = SyntheticLinearWorld::new();
        assert_eq!(world.margin_cdf(0.0), 0.0);
        assert!((world.margin_cdf(16.0) - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 0..=200 {
            let t = i as f64 * 0.01;
            let c = world.margin_cdf(t);
            assert!(c >= prev, "cdf decreased at {t}");
            prev = c;
        }
        for q in [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99] {
            let t = world.margin_quantile(q).unwrap();
            assert!((world.margin_cdf(t) - q).abs() < 1e-10, "roundtrip failed at {q}");
        }
        assert!(world.margin_quantile(1.0).is_err());
        assert!(world.margin_quantile(-0.1).is_err());
    }

    #[test]
    fn range_probabilities_match_monte_carlo_within_three_standard_errors() {
        let world = SyntheticLinearWorld::new();
        let n = 1_000_000_u64;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let draws: Vec<QualityPoint> = (0..n).map(|_| world.draw_quality(&mut rng)).collect();
        for &(rho, kappa) in &[
            (0.05, 0.55),
            (0.10, 0.60),
            (0.16, 0.80),
            (0.20, 0.90),
            (0.30, 0.95),
            (0.50, 0.50),
            (0.02, 0.99),
        ] {
            let range = CounterexampleRange { rho, kappa };
            let exact = world.range_prob(&range);
            let hits = draws.iter().filter(|q| range.contains(q)).count() as f64;
            let empirical = hits / n as f64;
            let se = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!(
                (empirical - exact).abs() <= 3.0 * se + 1e-4,
                "range ({rho}, {kappa}): exact {exact}, empirical {empirical}, se {se}"
            );
        }
    }

    #[test]
    fn witness_families_sit_at_the_epsilon_contour() {
        let world = SyntheticLinearWorld::new();
        let epsilon = 0.05;
        let family = world.witness_family(16, epsilon).unwrap();
        assert_eq!(family.len(), 16);
        for range in &family {
            let prob = world.range_prob(range);
            assert!(prob >= epsilon, "witness below the contour: {prob}");
            assert!(prob <= epsilon + 1e-6, "witness far above the contour: {prob}");
            assert!(range.kappa > 0.5 && range.kappa < 1.0);
            assert!(range.rho > 0.0 && range.rho < 0.5);
        }
        // Distinct confidence cuts across the family.
        for pair in family.windows(2) {
            assert!(pair[0].kappa < pair[1].kappa);
        }
        assert!(world.witness_family(8, 0.6).is_err());
    }

    #[test]
    fn datasets_are_clamped_labeled_and_seeded() {
        let world = SyntheticLinearWorld::new();
        let a = world.make_dataset(500, 7);
        let b = world.make_dataset(500, 7);
        let c = world.make_dataset(500, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let labels = a.labels.as_ref().unwrap();
        for (row, label) in a.features.iter().zip(labels) {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(*label, world.label_of(row));
        }
        // Both classes actually appear.
        assert!(labels.iter().any(|l| *l == 0) && labels.iter().any(|l| *l == 1));
    }

    #[test]
    fn per_index_streams_are_order_independent() {
        let world = SyntheticLinearWorld::new();
        let forward: Vec<QualityPoint> = (0..50).map(|i| world.quality_at_index(3, i)).collect();
        let mut backward: Vec<QualityPoint> =
            (0..50).rev().map(|i| world.quality_at_index(3, i)).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn discrete_distribution_validates_samples_and_integrates() {
        assert!(Dist1D::discrete(vec![]).is_err());
        assert!(Dist1D::discrete(vec![(0.3, 0.5), (0.3, 0.5)]).is_err());
        assert!(Dist1D::discrete(vec![(0.3, 0.2), (0.7, 0.2)]).is_err());

        let dist = Dist1D::discrete(vec![(0.7, 0.12), (0.3, 0.88)]).unwrap();
        assert_eq!(dist.cdf(0.2), 0.0);
        assert!((dist.cdf(0.3) - 0.88).abs() < 1e-15);
        assert!((dist.cdf(0.69) - 0.88).abs() < 1e-15);
        assert!((dist.cdf(0.7) - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let lows = (0..n).filter(|_| dist.sample(&mut rng) == 0.3).count() as f64;
        let freq = lows / n as f64;
        let se = (0.88_f64 * 0.12 / n as f64).sqrt();
        assert!((freq - 0.88).abs() < 4.0 * se, "frequency {freq}");

        let uniform = Dist1D::Uniform01;
        assert_eq!(uniform.cdf(-1.0), 0.0);
        assert_eq!(uniform.cdf(0.25), 0.25);
        assert_eq!(uniform.cdf(2.0), 1.0);
        let v = uniform.sample(&mut rng);
        assert!((0.0..1.0).contains(&v));
    }
}
