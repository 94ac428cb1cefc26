//! Local robustness oracles: given a model and an input, estimate or certify
//! the L∞ distance to the nearest class change.
//!
//! Four oracle families with different soundness characters:
//!
//! * `analytic_linear_oracle` — closed form for single-affine-layer models:
//!   the L∞ distance from `x` to the hyperplane `v·y + β = 0` is
//!   `|v·x + β| / ‖v‖₁`; exact.
//! * `exact_grid_oracle` — exhaustive grid search over L∞ shells for inputs
//!   of dimension ≤ 3; exact up to one grid resolution step.
//! * `pgd_oracle` — projected signed-gradient ascent on the margin loss; any
//!   class change it finds upper-bounds the true distance.
//! * `ibp_local_check` / `certified_binsearch_oracle` — interval bound
//!   propagation decides "robust at radius ρ" soundly; a short binary search
//!   over [0, radius_cap] turns the decision procedure into a certified
//!   lower bound on the distance.
//!
//! Soundness ordering (up to grid resolution): certified ≤ exact ≤
//! adversarial upper bound. All radii saturate at `radius_cap`.

use serde::{Deserialize, Serialize};

use crate::error::{PagError, Result};
use crate::model::{Activation, LossKind, MlpModel};

/// What a reported radius means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// True distance (up to stated resolution for the grid oracle).
    Exact,
    /// Sound lower bound: the model is verified robust within this radius.
    CertifiedLower,
    /// Distance to a concrete misclassified input: upper bound on the truth.
    AdversarialUpper,
}

impl OracleKind {
    /// Claim strength: an exact radius says more than a certified lower
    /// bound, which says more than an attack-based upper estimate.
    fn strength(self) -> u8 {
        match self {
            OracleKind::AdversarialUpper => 0,
            OracleKind::CertifiedLower => 1,
            OracleKind::Exact => 2,
        }
    }

    /// The weaker of two claims — what a mixed batch of results can honestly
    /// be labeled as in aggregate.
    pub fn weaker(self, other: OracleKind) -> OracleKind {
        if self.strength() <= other.strength() {
            self
        } else {
            other
        }
    }
}

/// Outcome of a local robustness query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Estimated or certified L∞ robustness radius, in [0, radius_cap].
    pub radius: f64,
    pub kind: OracleKind,
    /// The misclassified input witnessing an adversarial upper bound, when
    /// one was found. Always inside the model's input box, and its L∞
    /// distance to the query equals `radius`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub found_adversarial: Option<Vec<f64>>,
}

/// Tuning knobs shared by the local oracles. All distances are L∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Largest radius any oracle searches or certifies (reported radii
    /// saturate here).
    pub radius_cap: f64,
    /// Per-iteration step size of the signed-gradient attack.
    pub pgd_step: f64,
    /// Iteration budget of the signed-gradient attack.
    pub pgd_max_steps: usize,
    /// Halvings performed by the certified binary search.
    pub binsearch_bits: u32,
    /// Lattice pitch of the exhaustive grid search.
    pub grid_resolution: f64,
}

impl Default for OracleConfig {
    /// Defaults sized for unit-box image inputs: 0.5/256 attack steps with a
    /// 200-iteration budget, radius cap 0.5, 4-bit certified search, 1e-3
    /// grid pitch.
    fn default() -> Self {
        OracleConfig {
            radius_cap: 0.5,
            pgd_step: 0.5 / 256.0,
            pgd_max_steps: 200,
            binsearch_bits: 4,
            grid_resolution: 1e-3,
        }
    }
}

impl OracleConfig {
    /// Heavier attack schedule for harder inputs: finer 0.1/256 steps with a
    /// 500-iteration budget.
    pub fn fine_attack() -> Self {
        OracleConfig { pgd_step: 0.1 / 256.0, pgd_max_steps: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_cap > 0.0 && self.radius_cap.is_finite()) {
            return Err(PagError::range("radius_cap", self.radius_cap, "finite > 0"));
        }
        if !(self.pgd_step > 0.0 && self.pgd_step < self.radius_cap) {
            return Err(PagError::range("pgd_step", self.pgd_step, "0 < step < radius_cap"));
        }
        if self.pgd_max_steps < 1 {
            return Err(PagError::range("pgd_max_steps", self.pgd_max_steps as f64, ">= 1"));
        }
        if self.binsearch_bits < 1 {
            return Err(PagError::range("binsearch_bits", self.binsearch_bits as f64, ">= 1"));
        }
        if !(self.grid_resolution > 0.0 && self.grid_resolution.is_finite()) {
            return Err(PagError::range("grid_resolution", self.grid_resolution, "finite > 0"));
        }
        Ok(())
    }
}

/// Which local oracle to run; the unit of selection for sampling runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    AnalyticLinear,
    ExactGrid,
    Pgd,
    CertifiedBinsearch,
}

/// Dispatches a query to the selected oracle.
pub fn run_oracle(
    model: &MlpModel,
    x: &[f64],
    choice: OracleChoice,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    match choice {
        OracleChoice::AnalyticLinear => analytic_linear_oracle(model, x, cfg),
        OracleChoice::ExactGrid => exact_grid_oracle(model, x, cfg),
        OracleChoice::Pgd => pgd_oracle(model, x, cfg),
        OracleChoice::CertifiedBinsearch => certified_binsearch_oracle(model, x, cfg),
    }
}

fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Closed form for linear models
// ---------------------------------------------------------------------------

/// Exact L∞ robustness radius of a single-affine-layer classifier.
///
/// For the predicted class `c`, the decision boundary against class `j` is
/// the hyperplane `(W_c − W_j)·x + (b_c − b_j) = 0`, at L∞ distance
/// `|margin| / ‖W_c − W_j‖₁`; the radius is the minimum over competitors,
/// saturated at `radius_cap`.
///
/// Errors with `ZeroWeightVector` when every competitor's weight difference
/// is identically zero (the margins are constant and no boundary exists);
/// with `Unsupported` for models with hidden layers.
pub fn analytic_linear_oracle(
    model: &MlpModel,
    x: &[f64],
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    cfg.validate()?;
    if model.layers.len() != 1 || model.layers[0].activation != Activation::Identity {
        return Err(PagError::Unsupported(
            "closed-form distances need a single identity-activated layer".into(),
        ));
    }
    let layer = &model.layers[0];
    let logits = model.logits(x);
    let c = crate::model::argmax(&logits);

    let mut best = f64::INFINITY;
    let mut saw_boundary = false;
    for j in 0..model.num_classes {
        if j == c {
            continue;
        }
        let row_c = &layer.weight[c * layer.cols..(c + 1) * layer.cols];
        let row_j = &layer.weight[j * layer.cols..(j + 1) * layer.cols];
        let norm1: f64 = row_c.iter().zip(row_j).map(|(a, b)| (a - b).abs()).sum();
        if norm1 == 0.0 {
            continue; // constant margin: no boundary against j
        }
        saw_boundary = true;
        let margin = logits[c] - logits[j];
        best = best.min(margin.abs() / norm1);
    }
    if !saw_boundary {
        return Err(PagError::ZeroWeightVector);
    }
    Ok(OracleResult {
        radius: best.min(cfg.radius_cap),
        kind: OracleKind::Exact,
        found_adversarial: None,
    })
}

// ---------------------------------------------------------------------------
// Exhaustive grid search (input_dim <= 3)
// ---------------------------------------------------------------------------

/// Visits every lattice offset with max-coordinate exactly `k` (the L∞ shell
/// of radius `k` in grid units) for dimensions 1–3.
fn for_each_shell_offset(dim: usize, k: i64, mut visit: impl FnMut(&[i64])) {
    match dim {
        1 => {
            visit(&[-k]);
            visit(&[k]);
        }
        2 => {
            for t in -k..=k {
                visit(&[-k, t]);
                visit(&[k, t]);
            }
            for t in -k + 1..=k - 1 {
                visit(&[t, -k]);
                visit(&[t, k]);
            }
        }
        3 => {
            for u in -k..=k {
                for v in -k..=k {
                    visit(&[-k, u, v]);
                    visit(&[k, u, v]);
                }
            }
            for u in -k + 1..=k - 1 {
                for v in -k..=k {
                    visit(&[u, -k, v]);
                    visit(&[u, k, v]);
                }
            }
            for u in -k + 1..=k - 1 {
                for v in -k + 1..=k - 1 {
                    visit(&[u, v, -k]);
                    visit(&[u, v, k]);
                }
            }
        }
        _ => unreachable!("grid search is restricted to dim <= 3"),
    }
}

/// Exhaustive L∞ grid search, exact up to one `grid_resolution` step.
///
/// Scans lattice shells of increasing radius around `x` (candidates clamped
/// into the input box); at the first shell containing a class change, the
/// reported radius is the smallest changing candidate's distance minus one
/// resolution step — a conservative floor, since the true boundary may sit
/// anywhere past the last clean shell. `radius_cap` if no change is found.
///
/// Restricted to input dimension ≤ 3; the shell sizes explode beyond that.
pub fn exact_grid_oracle(model: &MlpModel, x: &[f64], cfg: &OracleConfig) -> Result<OracleResult> {
    cfg.validate()?;
    if model.input_dim > 3 {
        return Err(PagError::Unsupported(format!(
            "grid search supports input_dim <= 3, model has {}",
            model.input_dim
        )));
    }
    let res = cfg.grid_resolution;
    let original = model.forward(x).class_index;
    let max_k = (cfg.radius_cap / res).ceil() as i64;

    let mut candidate = vec![0.0; model.input_dim];
    for k in 1..=max_k {
        let mut min_changed = f64::INFINITY;
        for_each_shell_offset(model.input_dim, k, |offset| {
            for (j, (xo, o)) in x.iter().zip(offset).enumerate() {
                let (lo, hi) = model.box_bounds(j);
                candidate[j] = (xo + *o as f64 * res).clamp(lo, hi);
            }
            let dist = linf_distance(&candidate, x);
            if dist == 0.0 || dist >= min_changed {
                return;
            }
            if model.forward(&candidate).class_index != original {
                min_changed = dist;
            }
        });
        if min_changed.is_finite() {
            return Ok(OracleResult {
                radius: (min_changed - res).max(0.0).min(cfg.radius_cap),
                kind: OracleKind::Exact,
                found_adversarial: None,
            });
        }
    }
    Ok(OracleResult {
        radius: cfg.radius_cap,
        kind: OracleKind::Exact,
        found_adversarial: None,
    })
}

// ---------------------------------------------------------------------------
// Signed-gradient attack
// ---------------------------------------------------------------------------

/// Signed-gradient ascent on the margin loss; reports the distance to the
/// first class-changing iterate.
///
/// Starting at `x` with predicted class `c`, each iteration steps every
/// coordinate by `pgd_step` in the sign of the margin-loss gradient, then
/// projects back into the `radius_cap` ball around `x` intersected with the
/// input box. The first iterate classified differently from `c` is returned
/// as a concrete adversarial witness; its distance upper-bounds the true
/// robustness radius. `radius_cap` (with no witness) if the budget runs out.
pub fn pgd_oracle(model: &MlpModel, x: &[f64], cfg: &OracleConfig) -> Result<OracleResult> {
    cfg.validate()?;
    let c = model.forward(x).class_index;
    let loss = LossKind::MarginToRunnerUp { reference_class: c };

    let mut z = x.to_vec();
    for _ in 0..cfg.pgd_max_steps {
        let grad = model.input_gradient(&z, loss)?;
        for (j, (zj, g)) in z.iter_mut().zip(&grad).enumerate() {
            let dir = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let (lo, hi) = model.box_bounds(j);
            let ball_lo = (x[j] - cfg.radius_cap).max(lo);
            let ball_hi = (x[j] + cfg.radius_cap).min(hi);
            *zj = (*zj + dir * cfg.pgd_step).clamp(ball_lo, ball_hi);
        }
        if model.forward(&z).class_index != c {
            let radius = linf_distance(&z, x);
            return Ok(OracleResult {
                radius,
                kind: OracleKind::AdversarialUpper,
                found_adversarial: Some(z),
            });
        }
    }
    Ok(OracleResult {
        radius: cfg.radius_cap,
        kind: OracleKind::AdversarialUpper,
        found_adversarial: None,
    })
}

// ---------------------------------------------------------------------------
// Interval bound propagation + certified search
// ---------------------------------------------------------------------------

/// Image of an interval vector under one affine layer: each output interval
/// takes the row's positive weights at the upper ends and negative weights
/// at the lower ends (and vice versa for its own lower end).
fn affine_interval(layer: &crate::model::AffineLayer, lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out_lo = Vec::with_capacity(layer.rows);
    let mut out_hi = Vec::with_capacity(layer.rows);
    for r in 0..layer.rows {
        let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
        let mut a = layer.bias[r];
        let mut b = layer.bias[r];
        for ((w, l), h) in row.iter().zip(lo).zip(hi) {
            if *w >= 0.0 {
                a += w * l;
                b += w * h;
            } else {
                a += w * h;
                b += w * l;
            }
        }
        out_lo.push(a);
        out_hi.push(b);
    }
    (out_lo, out_hi)
}

/// Sound robustness decision by interval bound propagation.
///
/// Propagates the box `[x−ρ, x+ρ] ∩ input_box` through the network and
/// answers `true` only if every competitor logit provably stays below the
/// predicted class's logit: for all `j ≠ c`, UB(logit_j − logit_c) < 0.
/// When the final layer is identity-activated, the difference is bounded by
/// propagating the row difference `W_j − W_c` through the last hidden box
/// (exact for single-layer models); otherwise the looser pairwise interval
/// difference is used.
///
/// A `false` answer means "not verified", not "not robust".
pub fn ibp_local_check(model: &MlpModel, x: &[f64], rho: f64, _cfg: &OracleConfig) -> Result<bool> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(PagError::range("rho", rho, "finite >= 0"));
    }
    let c = model.forward(x).class_index;

    let mut lo: Vec<f64> = Vec::with_capacity(model.input_dim);
    let mut hi: Vec<f64> = Vec::with_capacity(model.input_dim);
    for (j, xj) in x.iter().enumerate() {
        let (bl, bh) = model.box_bounds(j);
        lo.push((xj - rho).max(bl).min(bh));
        hi.push((xj + rho).min(bh).max(bl));
    }

    let last = model.layers.len() - 1;
    for layer in &model.layers[..last] {
        let (mut l, mut h) = affine_interval(layer, &lo, &hi);
        debug_assert_eq!(layer.activation, Activation::Relu);
        for v in l.iter_mut().chain(h.iter_mut()) {
            *v = v.max(0.0);
        }
        lo = l;
        hi = h;
    }

    let final_layer = &model.layers[last];
    if final_layer.activation == Activation::Identity {
        // Bound (W_j − W_c)·h + (b_j − b_c) directly over the hidden box.
        let cols = final_layer.cols;
        let row_c = &final_layer.weight[c * cols..(c + 1) * cols];
        for j in 0..model.num_classes {
            if j == c {
                continue;
            }
            let row_j = &final_layer.weight[j * cols..(j + 1) * cols];
            let mut ub = final_layer.bias[j] - final_layer.bias[c];
            for (((wj, wc), l), h) in row_j.iter().zip(row_c).zip(&lo).zip(&hi) {
                let w = wj - wc;
                ub += if w >= 0.0 { w * h } else { w * l };
            }
            if !(ub < 0.0) {
                return Ok(false);
            }
        }
    } else {
        let (mut l, mut h) = affine_interval(final_layer, &lo, &hi);
        for v in l.iter_mut().chain(h.iter_mut()) {
            *v = v.max(0.0);
        }
        for j in 0..model.num_classes {
            if j != c && !(h[j] - l[c] < 0.0) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Certified lower bound on the robustness radius: binary search over
/// [0, radius_cap] driven by the interval-propagation decision.
///
/// Checks `radius_cap` itself first (verified there means verified
/// everywhere searched); otherwise `binsearch_bits` halvings narrow the
/// bracket, and the largest radius that was actually verified is returned —
/// 0 if every probe failed, which claims nothing.
pub fn certified_binsearch_oracle(
    model: &MlpModel,
    x: &[f64],
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    cfg.validate()?;
    if ibp_local_check(model, x, cfg.radius_cap, cfg)? {
        return Ok(OracleResult {
            radius: cfg.radius_cap,
            kind: OracleKind::CertifiedLower,
            found_adversarial: None,
        });
    }
    let mut verified = 0.0f64;
    let mut failed = cfg.radius_cap;
    for _ in 0..cfg.binsearch_bits {
        let mid = 0.5 * (verified + failed);
        if ibp_local_check(model, x, mid, cfg)? {
            verified = mid;
        } else {
            failed = mid;
        }
    }
    Ok(OracleResult {
        radius: verified,
        kind: OracleKind::CertifiedLower,
        found_adversarial: None,
    })
}
