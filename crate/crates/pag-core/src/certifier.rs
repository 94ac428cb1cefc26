//! The robustness lower-bound map and certificate assembly.
//!
//! From a quality sample the certifier derives:
//!
//! * `κ_max` — the largest confidence level at which the sample's order
//!   statistics still certify `Pr(conf ≥ κ) > 0`: the i-th smallest sample
//!   confidence with `i = quantile_index(s, 1 − p_min, δ/2)`;
//! * the map `M(κ)` — for `κ ≤ κ_max`, the smallest robustness radius
//!   observed among sample points with confidence at least κ (undefined
//!   above `κ_max`), stored as a step function;
//! * certificates — the map plus parameters, bounds, and provenance, as a
//!   versioned JSON document.
//!
//! By construction, `ρ = M(κ)` is the largest radius for which the sample
//! contains no counterexample in `R(ρ, κ)`; that absence is exactly the
//! event the sample-size bound turns into the global statement
//! `Pr(ROB < ρ ∧ conf ≥ κ) < ε`, and hence
//! `Pr(ROB < ρ | conf ≥ κ) < ε/p_min` for all `κ ≤ κ_max`, with probability
//! at least `1 − δ` over the draw of the sample (δ split evenly between the
//! coverage half and the quantile half).
//!
//! Radii may optionally be quantized — rounded *down* to a multiple of
//! `rho_quantum` — before the map is built. Rounding down commutes with the
//! min, so the quantized map is exactly the pointwise-rounded original:
//! claims only shrink, the guarantee is preserved, and the step count `|M|`
//! (which enters the union bound `|M|·ε`) can only decrease.

use serde::{Deserialize, Serialize};

use crate::bounds::{
    guarantee_bound, quantile_index, shift_adjusted_bound, solve_sample_size,
    union_bound_violation, CertificateParams,
};
use crate::error::{PagError, Result};
use crate::oracles::{OracleConfig, OracleKind};
use crate::quality::{find_counterexample, CounterexampleRange, QualityPoint, QualitySample};

/// One step of the map: every queried confidence in `(previous step's κ,
/// this κ]` is answered with this ρ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStep {
    pub kappa: f64,
    pub rho: f64,
}

/// The confidence → robustness-radius lower-bound map: a step function,
/// strictly increasing in both coordinates, undefined above `kappa_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessMap {
    /// Steps in ascending order of both `kappa` and `rho`, all with
    /// `kappa ≤ kappa_max`.
    pub steps: Vec<MapStep>,
    /// Largest confidence the map is defined at.
    pub kappa_max: f64,
}

impl RobustnessMap {
    /// Number of distinct radii the map can return (`|M|`), the size that
    /// enters the union bound `|M|·ε`.
    pub fn codomain_size(&self) -> usize {
        self.steps.len()
    }

    /// The certified radius at confidence `kappa`: the ρ of the first step
    /// with step-κ ≥ `kappa` — equivalently the smallest sample radius among
    /// points at least that confident. `None` above `kappa_max` (no claim is
    /// made there), on an empty map, or for NaN.
    pub fn lookup(&self, kappa: f64) -> Option<f64> {
        if kappa.is_nan() || kappa > self.kappa_max {
            return None;
        }
        let idx = self.steps.partition_point(|s| s.kappa < kappa);
        self.steps.get(idx).map(|s| s.rho)
    }

    /// Compatibility lookup: the ρ of the *largest* step-κ ≤ `kappa`. At
    /// exact step confidences it agrees with [`Self::lookup`]; between steps
    /// it returns the previous (smaller) radius, and below the first step it
    /// returns `None`. Strictly more conservative, never required.
    pub fn lookup_floor(&self, kappa: f64) -> Option<f64> {
        if kappa.is_nan() || kappa > self.kappa_max {
            return None;
        }
        let idx = self.steps.partition_point(|s| s.kappa <= kappa);
        idx.checked_sub(1).map(|i| self.steps[i].rho)
    }

    fn check_invariants(&self) -> Result<()> {
        if !self.kappa_max.is_finite() {
            return Err(PagError::range("kappa_max", self.kappa_max, "finite"));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if !(step.kappa.is_finite() && step.rho.is_finite() && step.rho >= 0.0) {
                return Err(PagError::InconsistentParams(format!(
                    "map step {i} has non-finite or negative coordinates"
                )));
            }
            if step.kappa > self.kappa_max {
                return Err(PagError::InconsistentParams(format!(
                    "map step {i} lies above kappa_max"
                )));
            }
            if i > 0 {
                let prev = &self.steps[i - 1];
                if !(step.kappa > prev.kappa && step.rho > prev.rho) {
                    return Err(PagError::InconsistentParams(format!(
                        "map steps must be strictly increasing in both coordinates at step {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rounds `rho` down to a multiple of `quantum`, never up, guarding the
/// float cases where `rho/quantum` rounds across an integer boundary.
pub fn quantize_down(rho: f64, quantum: f64) -> f64 {
    let mut k = (rho / quantum).floor();
    if (k + 1.0) * quantum <= rho {
        k += 1.0;
    }
    while k > 0.0 && k * quantum > rho {
        k -= 1.0;
    }
    (k * quantum).max(0.0)
}

/// The largest confidence level with certified positive mass: the i-th
/// smallest sample confidence, `i = quantile_index(s, 1 − p_min, δ/2)`.
pub fn compute_kappa_max(points: &[QualityPoint], params: &CertificateParams) -> Result<f64> {
    if points.is_empty() {
        return Err(PagError::EmptyInput("quality sample"));
    }
    let i = quantile_index(points.len() as u64, 1.0 - params.p_min, params.delta / 2.0)?;
    let mut kappas: Vec<f64> = points.iter().map(|q| q.kappa).collect();
    let (_, value, _) = kappas.select_nth_unstable_by((i - 1) as usize, f64::total_cmp);
    Ok(*value)
}

/// Builds the step map from a quality sample.
///
/// Points are sorted by increasing `(ρ, κ)` and swept once: a point becomes
/// a step when its confidence (capped at `kappa_max`) exceeds every earlier
/// step's, so the steps are exactly the running confidence records in radius
/// order, and looking up the first step with step-κ ≥ κ reproduces the
/// smallest radius among all sample points with confidence ≥ κ — including
/// points whose own confidence lies above `kappa_max`, which cap into a step
/// at `kappa_max` itself when they set a record. Equal-radius steps merge
/// into the one with the largest confidence.
///
/// If no sample point's confidence reaches down to `kappa_max` (impossible
/// when `kappa_max` is this sample's own order statistic), the map is empty:
/// defined nowhere, claiming nothing.
///
/// With `rho_quantum`, every radius is first rounded down to a multiple of
/// the quantum.
pub fn build_map(
    points: &[QualityPoint],
    kappa_max: f64,
    rho_quantum: Option<f64>,
) -> Result<RobustnessMap> {
    if points.is_empty() {
        return Err(PagError::EmptyInput("quality sample"));
    }
    if !kappa_max.is_finite() {
        return Err(PagError::range("kappa_max", kappa_max, "finite"));
    }
    if let Some(q) = rho_quantum {
        if !(q > 0.0 && q.is_finite()) {
            return Err(PagError::range("rho_quantum", q, "finite > 0"));
        }
    }
    for q in points {
        if !(q.rho.is_finite() && q.rho >= 0.0 && q.kappa.is_finite()) {
            return Err(PagError::InconsistentParams(
                "quality points must have finite kappa and finite nonnegative rho".into(),
            ));
        }
    }
    if !points.iter().any(|q| q.kappa <= kappa_max) {
        return Ok(RobustnessMap { steps: Vec::new(), kappa_max });
    }

    let mut pairs: Vec<(f64, f64)> = points
        .iter()
        .map(|q| {
            let rho = match rho_quantum {
                Some(quantum) => quantize_down(q.rho, quantum),
                None => q.rho,
            };
            (rho, q.kappa)
        })
        .collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut steps: Vec<MapStep> = Vec::new();
    for (rho, kappa) in pairs {
        let capped = kappa.min(kappa_max);
        match steps.last_mut() {
            Some(last) if capped <= last.kappa => {}
            Some(last) if last.rho == rho => *last = MapStep { kappa: capped, rho },
            _ => steps.push(MapStep { kappa: capped, rho }),
        }
    }
    let map = RobustnessMap { steps, kappa_max };
    map.check_invariants()?;
    Ok(map)
}

/// The three possible answers to "is the model (ρ, κ)-robust?".
#[derive(Debug, Clone, PartialEq)]
pub enum CertifyOutcome {
    /// No sample point contradicts the claim; the violation mass among
    /// inputs at least as confident is below `bound` (= ε/p_min), with
    /// probability ≥ 1 − δ over the sample draw.
    Certified { bound: f64 },
    /// A sample point sits inside `R(ρ, κ)`; the strongest one (smallest
    /// radius) is returned.
    NotCertified { witness_index: usize, witness: QualityPoint },
    /// κ exceeds κ_max: the sample cannot certify positive mass at this
    /// confidence, so no conditional claim is made. (The joint statement
    /// `Pr(ROB < ρ ∧ conf ≥ κ) < ε` still holds.)
    OutOfRange { kappa_max: f64 },
}

/// Decides (ρ, κ)-robustness against a quality sample.
///
/// Requires the sample to be at least as large as the certified minimum for
/// `(ε, δ/2)`; the out-of-range check runs before the counterexample scan.
pub fn certify(
    points: &[QualityPoint],
    params: &CertificateParams,
    rho: f64,
    kappa: f64,
) -> Result<CertifyOutcome> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(PagError::range("rho", rho, "finite >= 0"));
    }
    if !kappa.is_finite() {
        return Err(PagError::range("kappa", kappa, "finite"));
    }
    let required = solve_sample_size(params.epsilon, params.delta / 2.0, params.vc_dim)?;
    if (points.len() as u64) < required.size {
        return Err(PagError::InconsistentParams(format!(
            "sample has {} points but the guarantee needs at least {}",
            points.len(),
            required.size
        )));
    }
    let kappa_max = compute_kappa_max(points, params)?;
    if kappa > kappa_max {
        return Ok(CertifyOutcome::OutOfRange { kappa_max });
    }
    match find_counterexample(points, &CounterexampleRange { rho, kappa }) {
        Some((witness_index, witness)) => Ok(CertifyOutcome::NotCertified { witness_index, witness }),
        None => Ok(CertifyOutcome::Certified { bound: guarantee_bound(params) }),
    }
}

/// The λ-shift rider on a certificate: the bound that survives deployment
/// on a distribution within total-variation distance λ of the sampled one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftAdjustment {
    pub lambda: f64,
    pub adjusted_bound: f64,
}

/// A complete, self-describing certification artifact.
///
/// Embeds the parameters, the map, the derived bounds, and enough
/// provenance (seed, noise scale, oracle identity and configuration, model
/// hash) that the certificate cannot be silently re-attached to a different
/// classifier or pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagCertificate {
    /// Schema version of this document; currently 1.
    pub format_version: u32,
    /// RFC 3339 creation timestamp.
    pub created_at: String,
    pub params: CertificateParams,
    /// Number of points actually sampled.
    pub sample_size: u64,
    /// Certified minimum sample size for (ε, δ/2, d).
    pub required_sample_size: u64,
    pub kappa_max: f64,
    /// ε / p_min.
    pub bound: f64,
    /// min(1, |M|·ε).
    pub union_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftAdjustment>,
    /// Weakest oracle result kind that entered the sample.
    pub oracle_kind: OracleKind,
    /// Distance norm the radii are measured in.
    pub norm: String,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Which oracle produced the radii (identifier or external command).
    pub oracle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_config: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_quantum: Option<f64>,
    /// Map steps as ascending `[kappa, rho]` pairs.
    pub map: Vec<[f64; 2]>,
}

impl PagCertificate {
    /// Reconstructs the step map carried by this certificate.
    pub fn robustness_map(&self) -> RobustnessMap {
        RobustnessMap {
            steps: self.map.iter().map(|[kappa, rho]| MapStep { kappa: *kappa, rho: *rho }).collect(),
            kappa_max: self.kappa_max,
        }
    }

    /// Re-derives every derived field and checks internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(PagError::Unsupported(format!(
                "certificate format_version {} (this build reads version 1)",
                self.format_version
            )));
        }
        if self.norm != "linf" {
            return Err(PagError::Unsupported(format!(
                "certificate norm `{}` (this build produces `linf` radii)",
                self.norm
            )));
        }
        let params =
            CertificateParams::with_vc_dim(self.params.epsilon, self.params.delta, self.params.p_min, self.params.vc_dim)?;
        let required = solve_sample_size(params.epsilon, params.delta / 2.0, params.vc_dim)?;
        if self.required_sample_size != required.size {
            return Err(PagError::InconsistentParams(format!(
                "certificate states required sample size {}, parameters demand {}",
                self.required_sample_size, required.size
            )));
        }
        if self.sample_size < required.size {
            return Err(PagError::InconsistentParams(format!(
                "certificate sample size {} is below the required {}",
                self.sample_size, required.size
            )));
        }
        if self.bound != guarantee_bound(&params) {
            return Err(PagError::InconsistentParams(
                "certificate bound does not equal epsilon / p_min".into(),
            ));
        }
        if self.union_bound != union_bound_violation(self.map.len() as u64, params.epsilon)? {
            return Err(PagError::InconsistentParams(
                "certificate union bound does not equal min(1, |M| * epsilon)".into(),
            ));
        }
        if let Some(shift) = &self.shift {
            if shift.adjusted_bound != shift_adjusted_bound(&params, shift.lambda)? {
                return Err(PagError::InconsistentParams(
                    "certificate shift-adjusted bound does not match its lambda".into(),
                ));
            }
        }
        self.robustness_map().check_invariants()
    }
}

/// Assembles a certificate from a completed quality sample.
///
/// Fails when the sample is smaller than the certified minimum for
/// `(ε, δ/2, d)` or carries no oracle provenance.
pub fn emit_certificate(
    sample: &QualitySample,
    params: &CertificateParams,
    rho_quantum: Option<f64>,
    shift_lambda: Option<f64>,
) -> Result<PagCertificate> {
    // Computing kappa_max first lets a pathologically small sample fail
    // with the sharper no-valid-index diagnostic instead of the generic
    // size one.
    let kappa_max = compute_kappa_max(&sample.points, params)?;
    let required = solve_sample_size(params.epsilon, params.delta / 2.0, params.vc_dim)?;
    if (sample.points.len() as u64) < required.size {
        return Err(PagError::InconsistentParams(format!(
            "sample has {} points but (epsilon, delta/2) requires at least {}",
            sample.points.len(),
            required.size
        )));
    }
    if let Some(meta_params) = &sample.meta.params {
        if meta_params != params {
            return Err(PagError::InconsistentParams(
                "sample was built for different certificate parameters".into(),
            ));
        }
    }
    let oracle_kind = sample.meta.oracle_result_kind.ok_or_else(|| {
        PagError::InconsistentParams("sample metadata lacks an oracle result kind".into())
    })?;
    let map = build_map(&sample.points, kappa_max, rho_quantum)?;
    let shift = match shift_lambda {
        Some(lambda) => Some(ShiftAdjustment {
            lambda,
            adjusted_bound: shift_adjusted_bound(params, lambda)?,
        }),
        None => None,
    };
    let certificate = PagCertificate {
        format_version: 1,
        created_at: chrono::Utc::now().to_rfc3339(),
        params: *params,
        sample_size: sample.points.len() as u64,
        required_sample_size: required.size,
        kappa_max,
        bound: guarantee_bound(params),
        union_bound: union_bound_violation(map.codomain_size() as u64, params.epsilon)?,
        shift,
        oracle_kind,
        norm: "linf".into(),
        seed: sample.meta.seed,
        noise_sigma: sample.meta.noise_sigma,
        oracle: sample.meta.oracle.clone(),
        oracle_config: sample.meta.oracle_config,
        model_hash: sample.meta.model_hash.clone(),
        rho_quantum,
        map: map.steps.iter().map(|s| [s.kappa, s.rho]).collect(),
    };
    certificate.validate()?;
    Ok(certificate)
}

/// Writes a certificate as pretty-printed JSON.
pub fn save_certificate(certificate: &PagCertificate, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), certificate)?;
    Ok(())
}

/// Reads and validates a certificate document.
pub fn load_certificate(path: &std::path::Path) -> Result<PagCertificate> {
    let file = std::fs::File::open(path)?;
    let certificate: PagCertificate = serde_json::from_reader(std::io::BufReader::new(file))?;
    certificate.validate()?;
    Ok(certificate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::SampleMeta;
    use proptest::prelude::*;

    fn qp(rho: f64, kappa: f64) -> QualityPoint {
        QualityPoint { rho, kappa }
    }

    /// The map definition, evaluated the slow way: smallest radius among
    /// sample points at least as confident, undefined above kappa_max.
    fn brute_force_lookup(points: &[QualityPoint], kappa_max: f64, kappa: f64) -> Option<f64> {
        if kappa > kappa_max {
            return None;
        }
        points
            .iter()
            .filter(|q| q.kappa >= kappa)
            .map(|q| q.rho)
            .min_by(f64::total_cmp)
    }

    #[test]
    fn three_point_trace_builds_three_steps() {
        let points = [qp(0.1, 0.3), qp(0.2, 0.7), qp(0.3, 0.9)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(
            map.steps,
            vec![
                MapStep { kappa: 0.3, rho: 0.1 },
                MapStep { kappa: 0.7, rho: 0.2 },
                MapStep { kappa: 0.9, rho: 0.3 },
            ]
        );
        assert_eq!(map.codomain_size(), 3);
    }

    #[test]
    fn dominated_and_overconfident_points_collapse_to_one_step() {
        let points = [qp(0.1, 0.9), qp(0.2, 0.5), qp(0.3, 0.95)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(map.steps, vec![MapStep { kappa: 0.9, rho: 0.1 }]);
        assert_eq!(map.codomain_size(), 1);
    }

    #[test]
    fn kappa_max_below_every_confidence_gives_the_empty_map() {
        let points = [qp(0.1, 0.9), qp(0.2, 0.95)];
        let map = build_map(&points, 0.5, None).unwrap();
        assert!(map.steps.is_empty());
        assert_eq!(map.codomain_size(), 0);
        assert_eq!(map.lookup(0.4), None);
        assert_eq!(map.lookup(0.5), None);
    }

    #[test]
    fn lookup_matches_the_worked_examples() {
        let points = [qp(0.1, 0.3), qp(0.2, 0.7), qp(0.3, 0.9)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(map.lookup(0.5), Some(0.2));
        assert_eq!(map.lookup(0.95), None);
        assert_eq!(map.lookup(0.2), Some(0.1));
        // Step boundaries are inclusive: exactly at a step's confidence the
        // step answers.
        assert_eq!(map.lookup(0.7), Some(0.2));
        assert_eq!(map.lookup(0.9), Some(0.3));
        // Below every step the smallest radius answers.
        assert_eq!(map.lookup(0.0), Some(0.1));
    }

    #[test]
    fn floor_lookup_is_more_conservative_between_steps() {
        let points = [qp(0.1, 0.3), qp(0.2, 0.7), qp(0.3, 0.9)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(map.lookup_floor(0.7), Some(0.2));
        assert_eq!(map.lookup_floor(0.5), Some(0.1)); // lookup says 0.2
        assert_eq!(map.lookup_floor(0.2), None); // lookup says 0.1
        assert_eq!(map.lookup_floor(0.95), None);
    }

    #[test]
    fn confident_but_fragile_points_still_constrain_the_map() {
        // A point more confident than kappa_max with a *small* radius must
        // cap into the map, otherwise lookups would claim radii the sample
        // itself refutes.
        let points = [qp(0.05, 0.95), qp(0.2, 0.6)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(map.steps, vec![MapStep { kappa: 0.9, rho: 0.05 }]);
        assert_eq!(map.lookup(0.6), Some(0.05));
        assert_eq!(map.lookup(0.6), brute_force_lookup(&points, 0.9, 0.6));
    }

    #[test]
    fn equal_radius_steps_merge_keeping_the_highest_confidence() {
        let points = [qp(0.1, 0.3), qp(0.1, 0.8), qp(0.4, 0.85)];
        let map = build_map(&points, 0.9, None).unwrap();
        assert_eq!(
            map.steps,
            vec![MapStep { kappa: 0.8, rho: 0.1 }, MapStep { kappa: 0.85, rho: 0.4 }]
        );
        for kappa in [0.1, 0.3, 0.5, 0.8, 0.82, 0.85] {
            assert_eq!(map.lookup(kappa), brute_force_lookup(&points, 0.9, kappa), "at {kappa}");
        }
    }

    #[test]
    fn quantization_rounds_radii_down_and_shrinks_the_codomain() {
        let points = [qp(0.11, 0.3), qp(0.19, 0.7), qp(0.31, 0.9)];
        let plain = build_map(&points, 0.9, None).unwrap();
        let coarse = build_map(&points, 0.9, Some(0.1)).unwrap();
        // 0.11 and 0.19 both floor to 0.1 (their steps merge); 0.31 floors
        // to the representable multiple at 3·0.1.
        assert_eq!(
            coarse.steps,
            vec![
                MapStep { kappa: 0.7, rho: 0.1 },
                MapStep { kappa: 0.9, rho: quantize_down(0.31, 0.1) },
            ]
        );
        assert!(coarse.codomain_size() <= plain.codomain_size());
        for kappa in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let (q, p) = (coarse.lookup(kappa).unwrap(), plain.lookup(kappa).unwrap());
            assert!(q <= p, "quantized radius grew at {kappa}: {q} > {p}");
        }
    }

    #[test]
    fn quantize_down_never_rounds_up() {
        for &(rho, quantum) in &[
            (0.3, 0.1),
            (0.30000000000000004, 0.1),
            (0.1 + 0.2, 0.1),
            (1.0, 0.1),
            (0.0999999999999999, 0.1),
            (5e-324, 0.25),
            (0.0, 0.5),
            (123.456, 0.001),
        ] {
            let q = quantize_down(rho, quantum);
            assert!(q <= rho, "{q} > {rho}");
            assert!(q >= 0.0);
            assert!(rho - q < quantum + 1e-12, "dropped more than one quantum");
            let k = (q / quantum).round();
            assert!((k * quantum - q).abs() <= f64::EPSILON * k.abs().max(1.0) * quantum);
        }
    }

    #[test]
    fn kappa_max_is_the_ith_smallest_confidence() {
        // quantile_index(10, 0.95, 0.2) = 3: bound 9.5 − sqrt(19·ln 5) ≈ 3.97.
        let params = CertificateParams::new(0.01, 0.4, 0.05).unwrap();
        let points: Vec<QualityPoint> =
            (1..=10).map(|j| qp(j as f64 / 100.0, j as f64 / 10.0)).collect();
        assert_eq!(compute_kappa_max(&points, &params).unwrap(), 0.3);

        let uniform: Vec<QualityPoint> = (0..10).map(|_| qp(0.1, 0.7)).collect();
        assert_eq!(compute_kappa_max(&uniform, &params).unwrap(), 0.7);
    }

    #[test]
    fn kappa_max_propagates_no_valid_index() {
        // 10 points with delta = 0.01: 9.5 − sqrt(19·ln 200) ≈ −0.52 ≤ 1.
        let params = CertificateParams::new(0.01, 0.01, 0.05).unwrap();
        let points: Vec<QualityPoint> = (1..=10).map(|j| qp(0.1, j as f64 / 10.0)).collect();
        assert!(matches!(
            compute_kappa_max(&points, &params),
            Err(PagError::NoValidIndex { .. })
        ));
    }

    /// A monotone 1000-point sample (ρ and κ both j/1000) with parameters
    /// loose enough that 1000 points satisfy the sample-size precondition:
    /// required size for (ε = 0.49, δ/2 = 0.2, d = 2) is well under 1000.
    fn monotone_sample() -> (Vec<QualityPoint>, CertificateParams) {
        let points: Vec<QualityPoint> =
            (1..=1000).map(|j| qp(j as f64 / 1000.0, j as f64 / 1000.0)).collect();
        let params = CertificateParams::new(0.49, 0.4, 0.05).unwrap();
        (points, params)
    }

    #[test]
    fn certify_distinguishes_the_three_outcomes() {
        let (points, params) = monotone_sample();
        // quantile_index(1000, 0.95, 0.2) → 950 − sqrt(1900·ln 5) ≈ 894.7 → 894.
        let kappa_max = compute_kappa_max(&points, &params).unwrap();
        assert_eq!(kappa_max, 0.894);

        match certify(&points, &params, 0.5, 0.9).unwrap() {
            CertifyOutcome::OutOfRange { kappa_max } => assert_eq!(kappa_max, 0.894),
            other => panic!("expected out-of-range, got {other:?}"),
        }
        match certify(&points, &params, 0.5, 0.5).unwrap() {
            CertifyOutcome::Certified { bound } => {
                assert!((bound - 0.49 / 0.05).abs() < 1e-12);
            }
            other => panic!("expected certified, got {other:?}"),
        }
        match certify(&points, &params, 0.5001, 0.5).unwrap() {
            CertifyOutcome::NotCertified { witness, .. } => {
                assert_eq!(witness, qp(0.5, 0.5));
            }
            other => panic!("expected not-certified, got {other:?}"),
        }
    }

    #[test]
    fn certify_requires_the_minimum_sample_size() {
        let params = CertificateParams::new(0.49, 0.4, 0.05).unwrap();
        let points: Vec<QualityPoint> = (1..=10).map(|j| qp(0.1, j as f64 / 10.0)).collect();
        assert!(matches!(
            certify(&points, &params, 0.1, 0.5),
            Err(PagError::InconsistentParams(_))
        ));
    }

    #[test]
    fn out_of_range_takes_precedence_over_counterexamples() {
        let (mut points, params) = monotone_sample();
        // Make a blatant counterexample for any query — but query above
        // kappa_max, which must answer out-of-range, not not-certified.
        points[0] = qp(0.0, 1.0);
        match certify(&points, &params, 1.0, 0.99).unwrap() {
            CertifyOutcome::OutOfRange { .. } => {}
            other => panic!("expected out-of-range, got {other:?}"),
        }
    }

    fn sample_meta_for_tests() -> SampleMeta {
        SampleMeta {
            seed: 7,
            noise_sigma: 8.0 / 256.0,
            oracle: "analytic_linear".into(),
            oracle_config: None,
            model_hash: Some("ab".repeat(32)),
            oracle_result_kind: Some(OracleKind::Exact),
            requested_size: 1000,
            params: None,
            complete: true,
        }
    }

    #[test]
    fn certificates_assemble_validate_and_round_trip() {
        let (points, params) = monotone_sample();
        let sample = QualitySample { points, meta: sample_meta_for_tests() };
        let certificate = emit_certificate(&sample, &params, None, Some(0.01)).unwrap();
        assert_eq!(certificate.sample_size, 1000);
        assert_eq!(certificate.kappa_max, 0.894);
        assert_eq!(certificate.bound, 0.49 / 0.05);
        assert_eq!(certificate.oracle_kind, OracleKind::Exact);
        let shift = certificate.shift.unwrap();
        assert_eq!(shift.adjusted_bound, (0.49 + 0.01) / (0.05 - 0.01));
        // The embedded map answers exactly like one built directly.
        let direct = build_map(&sample.points, certificate.kappa_max, None).unwrap();
        assert_eq!(certificate.robustness_map(), direct);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("certificate.json");
        save_certificate(&certificate, &path).unwrap();
        let loaded = load_certificate(&path).unwrap();
        assert_eq!(loaded, certificate);
    }

    #[test]
    fn tampered_certificates_fail_validation() {
        let (points, params) = monotone_sample();
        let sample = QualitySample { points, meta: sample_meta_for_tests() };
        let good = emit_certificate(&sample, &params, None, None).unwrap();

        let mut wrong_bound = good.clone();
        wrong_bound.bound *= 2.0;
        assert!(wrong_bound.validate().is_err());

        let mut wrong_union = good.clone();
        wrong_union.union_bound = 0.0;
        assert!(wrong_union.validate().is_err());

        let mut shrunk = good.clone();
        shrunk.sample_size = 3;
        assert!(shrunk.validate().is_err());

        let mut disordered = good.clone();
        if disordered.map.len() >= 2 {
            disordered.map.swap(0, 1);
        }
        assert!(disordered.validate().is_err());

        let mut future = good.clone();
        future.format_version = 2;
        assert!(matches!(future.validate(), Err(PagError::Unsupported(_))));

        let mut alien_norm = good;
        alien_norm.norm = "l2".into();
        assert!(matches!(alien_norm.validate(), Err(PagError::Unsupported(_))));
    }

    #[test]
    fn emit_refuses_undersized_samples() {
        let params = CertificateParams::new(0.49, 0.4, 0.05).unwrap();
        let sample = QualitySample {
            points: (1..=10).map(|j| qp(0.1, j as f64 / 10.0)).collect(),
            meta: sample_meta_for_tests(),
        };
        assert!(matches!(
            emit_certificate(&sample, &params, None, None),
            Err(PagError::InconsistentParams(_))
        ));
    }

    proptest! {
        /// Lookup equals the brute-force definition at every sample
        /// confidence at or below kappa_max, the map is monotone, no sample
        /// point contradicts its own map, and certify agrees.
        #[test]
        fn map_matches_brute_force_on_random_samples(
            raw in proptest::collection::vec((0u32..=1000, 0u32..=1000), 1..200),
            kappa_max_millis in 0u32..=1000,
        ) {
            let points: Vec<QualityPoint> = raw
                .iter()
                .map(|(r, k)| qp(*r as f64 / 1000.0, *k as f64 / 1000.0))
                .collect();
            let kappa_max = kappa_max_millis as f64 / 1000.0;
            let map = build_map(&points, kappa_max, None).unwrap();

            let mut last = None;
            for step in &map.steps {
                prop_assert!(step.kappa <= kappa_max);
                if let Some((pk, pr)) = last {
                    prop_assert!(step.kappa > pk && step.rho > pr);
                }
                last = Some((step.kappa, step.rho));
            }

            for q in &points {
                let direct = map.lookup(q.kappa);
                let brute = brute_force_lookup(&points, kappa_max, q.kappa);
                if q.kappa <= kappa_max {
                    prop_assert_eq!(direct, brute);
                    // No sample point is a counterexample to its own map.
                    if let Some(rho) = direct {
                        prop_assert!(q.rho >= rho);
                        let range = CounterexampleRange { rho, kappa: q.kappa };
                        prop_assert!(find_counterexample(&points, &range).is_none());
                    }
                } else {
                    prop_assert_eq!(direct, None);
                }
            }
        }

        /// Quantization: pointwise never larger, codomain never bigger, and
        /// still counterexample-free.
        #[test]
        fn quantized_maps_stay_sound(
            raw in proptest::collection::vec((0u32..=1000, 0u32..=1000), 1..120),
            quantum_millis in 1u32..200,
        ) {
            let points: Vec<QualityPoint> = raw
                .iter()
                .map(|(r, k)| qp(*r as f64 / 1000.0, *k as f64 / 1000.0))
                .collect();
            let quantum = quantum_millis as f64 / 1000.0;
            let plain = build_map(&points, 0.9, None).unwrap();
            let coarse = build_map(&points, 0.9, Some(quantum)).unwrap();
            prop_assert!(coarse.codomain_size() <= plain.codomain_size());
            for q in &points {
                if q.kappa <= 0.9 {
                    match (coarse.lookup(q.kappa), plain.lookup(q.kappa)) {
                        (Some(c), Some(p)) => {
                            prop_assert!(c <= p);
                            let range = CounterexampleRange { rho: c, kappa: q.kappa };
                            prop_assert!(find_counterexample(&points, &range).is_none());
                        }
                        (c, p) => prop_assert_eq!(c.is_some(), p.is_some()),
                    }
                }
            }
        }
    }
}
