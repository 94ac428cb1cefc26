//! Distribution-level robustness certification for classifiers.
//!
//! This crate certifies statements of the form: *with probability at least
//! `1 − δ` over the drawing of a calibration sample, at most an `ε/p_min`
//! fraction of inputs at any certified confidence level are less robust
//! than the published per-confidence radius.* The certificate is global in
//! distribution rather than local to individual inputs: it is built from
//! finitely many draws, yet speaks about the whole input distribution.
//!
//! The pipeline has four stages, one module each:
//!
//! 1. [`bounds`] — closed-form sample-size and order-statistic indices
//!    that make the finite-sample guarantee valid;
//! 2. [`quality`] — mapping draws through a model and a robustness oracle
//!    ([`oracles`], or an external tool via [`external`]) into quality
//!    space `(ρ, κ)` = (robustness radius, prediction confidence);
//! 3. [`certifier`] — compressing the sample into a monotone step map
//!    `M(κ)` with its certified confidence ceiling `κ_max`, packaged and
//!    validated as a [`certifier::PagCertificate`];
//! 4. [`eval`] — empirical validation: violation-rate estimators on
//!    held-out data and Monte-Carlo checks of the two probabilistic laws,
//!    against the ground-truth synthetic world in [`world`].
//!
//! Models are small ReLU/identity multilayer perceptrons ([`model`]);
//! errors across the crate share one [`error::PagError`] type.

pub mod bounds;
pub mod certifier;
pub mod error;
pub mod eval;
pub mod external;
pub mod model;
pub mod oracles;
pub mod quality;
pub mod world;

pub use bounds::{
    guarantee_bound, quantile_index, shift_adjusted_bound, solve_sample_size,
    union_bound_violation, CertificateParams, SampleSize,
};
pub use certifier::{
    build_map, certify, compute_kappa_max, emit_certificate, load_certificate, quantize_down,
    save_certificate, CertifyOutcome, MapStep, PagCertificate, RobustnessMap,
};
pub use error::{PagError, Result};
pub use eval::{
    end_to_end_trial, evaluate_on_test, monte_carlo_epsnet_check, monte_carlo_quantile_check,
    EndToEndTrial, EvalReport, PerKappaRow,
};
pub use external::{external_oracle, query_pool, ExternalAnswer, ExternalClient, ExternalOracleCmd};
pub use model::{load_model, save_model, Activation, AffineLayer, LossKind, MlpModel, Prediction};
pub use oracles::{run_oracle, OracleChoice, OracleConfig, OracleKind, OracleResult};
pub use quality::{
    build_quality_sample, draw_input, evaluate_rows, load_dataset, save_dataset,
    CounterexampleRange, Dataset, QualityPoint, QualitySample, SampleBackend, SampleMeta,
    SampleStore, DEFAULT_NOISE_SIGMA,
};
pub use world::{Dist1D, SyntheticLinearWorld};
