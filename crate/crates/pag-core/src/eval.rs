//! Empirical evaluation of certified maps and Monte-Carlo checks of the
//! coverage and quantile laws.
//!
//! Given a held-out test set of quality points, the central estimator is
//! the conditional violation rate at a confidence cut `κ`:
//!
//! ```text
//! p_κ = #{ ROB < M(κ) ∧ conf ≥ κ } / #{ conf ≥ κ }
//! ```
//!
//! and its supremum `p̂ = max_κ p_κ` over an evaluation grid holding every
//! distinct test confidence at or below `κ_max`, every map step confidence,
//! and `κ_max` itself — the step confidences matter because `p_κ` can jump
//! at a step even when no test point sits exactly there. A companion count
//! `n_c` tallies test points that are counterexamples at their own
//! confidence. A run is *good* when `p̂ ≤ ε/p_min` and
//! `n_c ≤ |test|·|M|·ε`.
//!
//! The sweep visits grid cuts in descending order, inserting test points
//! into a Fenwick tree keyed by radius rank as they qualify, so the whole
//! report costs `O((n + g)·log n)` instead of the naive `O(n·g)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{guarantee_bound, quantile_index, solve_sample_size, CertificateParams};
use crate::certifier::{build_map, compute_kappa_max, RobustnessMap};
use crate::error::{PagError, Result};
use crate::quality::QualityPoint;
use crate::world::{Dist1D, SyntheticLinearWorld};

/// One evaluation-grid row: the violation estimate at confidence cut
/// `kappa`. `p_kappa` is `None` when no test point reaches the cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerKappaRow {
    pub kappa: f64,
    pub p_kappa: Option<f64>,
    pub num: u64,
    pub den: u64,
}

/// The pass thresholds a report was judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// Certified ceiling for `p̂`: `ε / p_min`.
    pub p_hat_max: f64,
    /// Union-bound ceiling for the counterexample count: `|test|·|M|·ε`.
    pub n_c_max: f64,
}

/// Full evaluation of a robustness map against a held-out test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `max_κ p_κ` over the evaluation grid (0 when undefined everywhere).
    pub p_hat: f64,
    pub per_kappa: Vec<PerKappaRow>,
    /// Test points that are counterexamples at their own confidence.
    pub n_c: u64,
    pub map_size: usize,
    pub test_size: usize,
    pub good_run: bool,
    pub thresholds: EvalThresholds,
}

/// Prefix-sum counter over radius ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    /// Adds one point at rank `i` (0-based).
    fn add(&mut self, i: usize) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += 1;
            j += j & j.wrapping_neg();
        }
    }

    /// Counts points with rank `< i` (0-based exclusive prefix).
    fn prefix(&self, i: usize) -> u64 {
        let mut j = i;
        let mut acc = 0;
        while j > 0 {
            acc += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        acc
    }
}

/// Evaluates a robustness map on a test set of quality points.
///
/// Grid rows come back in ascending confidence order. Rows whose cut lies
/// above every map step keep `p_kappa = None` and do not contribute to
/// `p̂` (a map built from a sample order statistic always has a step at or
/// above any in-range cut, so this only happens for hand-built maps).
pub fn evaluate_on_test(
    map: &RobustnessMap,
    test: &[QualityPoint],
    params: &CertificateParams,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(PagError::EmptyInput("test set"));
    }
    for q in test {
        if !q.rho.is_finite() || !q.kappa.is_finite() {
            return Err(PagError::range("test point", q.rho, "finite rho and kappa"));
        }
    }

    // Evaluation grid: distinct in-range test confidences, step
    // confidences, and kappa_max, ascending.
    let mut grid: Vec<f64> = test
        .iter()
        .map(|q| q.kappa)
        .filter(|k| *k <= map.kappa_max)
        .chain(map.steps.iter().map(|s| s.kappa))
        .chain(std::iter::once(map.kappa_max))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    // Radius ranks for the Fenwick tree.
    let mut rho_ranks: Vec<f64> = test.iter().map(|q| q.rho).collect();
    rho_ranks.sort_by(f64::total_cmp);
    rho_ranks.dedup();

    // Test points in descending confidence order for incremental inclusion.
    let mut by_kappa: Vec<&QualityPoint> = test.iter().collect();
    by_kappa.sort_by(|a, b| b.kappa.total_cmp(&a.kappa));

    let mut fenwick = Fenwick::new(rho_ranks.len());
    let mut included = 0_u64;
    let mut next = 0_usize;
    let mut per_kappa = Vec::with_capacity(grid.len());
    for &kappa in grid.iter().rev() {
        while next < by_kappa.len() && by_kappa[next].kappa >= kappa {
            let rank = rho_ranks.partition_point(|r| *r < by_kappa[next].rho);
            fenwick.add(rank);
            included += 1;
            next += 1;
        }
        match map.lookup(kappa) {
            Some(threshold) => {
                let num = fenwick.prefix(rho_ranks.partition_point(|r| *r < threshold));
                let den = included;
                let p_kappa = (den > 0).then(|| num as f64 / den as f64);
                per_kappa.push(PerKappaRow { kappa, p_kappa, num, den });
            }
            None => per_kappa.push(PerKappaRow { kappa, p_kappa: None, num: 0, den: included }),
        }
    }
    per_kappa.reverse();

    let p_hat = per_kappa.iter().filter_map(|row| row.p_kappa).fold(0.0, f64::max);
    let n_c = test
        .iter()
        .filter(|q| {
            q.kappa <= map.kappa_max
                && map.lookup(q.kappa).map_or(false, |threshold| q.rho < threshold)
        })
        .count() as u64;

    let thresholds = EvalThresholds {
        p_hat_max: guarantee_bound(params),
        n_c_max: test.len() as f64 * map.codomain_size() as f64 * params.epsilon,
    };
    let good_run = p_hat <= thresholds.p_hat_max && (n_c as f64) <= thresholds.n_c_max;

    Ok(EvalReport {
        p_hat,
        per_kappa,
        n_c,
        map_size: map.codomain_size(),
        test_size: test.len(),
        good_run,
        thresholds,
    })
}

/// Monte-Carlo check of the coverage law: draws `trials` independent
/// samples of the certified size for `(epsilon, delta)` from the synthetic
/// world and reports the fraction of samples that *miss* at least one
/// witness range of probability ≥ ε. The law promises this fraction stays
/// near or below δ.
pub fn monte_carlo_epsnet_check(
    world: &SyntheticLinearWorld,
    epsilon: f64,
    delta: f64,
    witnesses: &[crate::quality::CounterexampleRange],
    trials: u64,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(PagError::range("trials", 0.0, "at least 1"));
    }
    let s = solve_sample_size(epsilon, delta, 2)?.size;
    if witnesses.is_empty() {
        return Ok(0.0);
    }
    let failures: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let mut hit = vec![false; witnesses.len()];
            let mut remaining = witnesses.len();
            for _ in 0..s {
                let q = world.draw_quality(&mut rng);
                for (i, w) in witnesses.iter().enumerate() {
                    if !hit[i] && w.contains(&q) {
                        hit[i] = true;
                        remaining -= 1;
                    }
                }
                if remaining == 0 {
                    break;
                }
            }
            u64::from(remaining > 0)
        })
        .sum();
    Ok(failures as f64 / trials as f64)
}

/// Monte-Carlo check of the quantile law: draws `trials` samples of size
/// `s` from `dist`, takes the certified order statistic for `(p, delta)`,
/// and reports the fraction of trials where its CDF value exceeds `p`.
/// The law promises this fraction stays near or below δ.
pub fn monte_carlo_quantile_check(
    dist: &Dist1D,
    s: u64,
    p: f64,
    delta: f64,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(PagError::range("trials", 0.0, "at least 1"));
    }
    let i = quantile_index(s, p, delta)?;
    let failures: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t);
            let mut draws: Vec<f64> = (0..s).map(|_| dist.sample(&mut rng)).collect();
            let (_, v, _) = draws.select_nth_unstable_by((i - 1) as usize, f64::total_cmp);
            u64::from(dist.cdf(*v) > p)
        })
        .sum();
    Ok(failures as f64 / trials as f64)
}

/// Outcome of one full certify-then-evaluate round trip on the synthetic
/// world with fresh sample and test draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndTrial {
    pub kappa_max: f64,
    pub map_size: usize,
    pub p_hat: f64,
    /// Whether any grid row significantly exceeded the certified bound:
    /// `p_κ − slack_sds·SE(p_κ) > ε/p_min` for some cut with data.
    pub any_row_violates: bool,
    pub good_run: bool,
}

/// Certifies a fresh size-`sample_size` sample from the world, evaluates
/// the resulting map on a fresh `test_size` draw, and flags rows whose
/// violation estimate exceeds the certified bound by more than
/// `slack_sds` binomial standard errors. Draw `i` of the sample uses
/// random stream `i`; test draw `j` uses stream `sample_size + j`, so
/// trials with different seeds are fully independent.
pub fn end_to_end_trial(
    world: &SyntheticLinearWorld,
    params: &CertificateParams,
    sample_size: u64,
    test_size: u64,
    seed: u64,
    slack_sds: f64,
) -> Result<EndToEndTrial> {
    let sample: Vec<QualityPoint> = (0..sample_size)
        .into_par_iter()
        .map(|i| world.quality_at_index(seed, i))
        .collect();
    let test: Vec<QualityPoint> = (0..test_size)
        .into_par_iter()
        .map(|j| world.quality_at_index(seed, sample_size + j))
        .collect();

    let kappa_max = compute_kappa_max(&sample, params)?;
    let map = build_map(&sample, kappa_max, None)?;
    let report = evaluate_on_test(&map, &test, params)?;

    let bound = guarantee_bound(params);
    let any_row_violates = report.per_kappa.iter().any(|row| match row.p_kappa {
        Some(p) if row.den > 0 => {
            let se = (p * (1.0 - p) / row.den as f64).sqrt();
            p - slack_sds * se > bound
        }
        _ => false,
    });

    Ok(EndToEndTrial {
        kappa_max,
        map_size: map.codomain_size(),
        p_hat: report.p_hat,
        any_row_violates,
        good_run: report.good_run,
    })
}
