//! Causal-effect estimation, refutation, feature sensitivity and saliency.

pub mod ate;
pub mod gradcam;
pub mod latents;
pub mod refute;
pub mod tfr;

pub use ate::{
    estimate_ate_interventional, estimate_ate_observational, interventional_outcomes, observational_from_correctness,
    observational_from_predictions, report_from_units, AteReport, Estimand, InterventionalOptions, OutcomeFunctional,
    Predictor, UnitOutcomes, DEFAULT_BOOTSTRAP,
};
pub use gradcam::{combine, grad_cam, resample_mask, saliency_alignment, sample_mask, write_saliency, Alignment, SaliencyMap};
pub use latents::{centroid_distance, centroid_permutation_test, export_latents, LatentTable, PermutationTest};
pub use refute::{
    refutation_report, refute, stratified_effect, tolerances, RefutationEntry, RefutationKind, RefutationReport,
    RefuteOptions,
};
pub use tfr::{layer_features, tfr_from_features, tfr_score, TfrReport, TFR_DENOMINATOR_GUARD};
