//! Synthetic causal-pair datasets: scene rendering, visual treatments,
//! treatment-label flipping, the tabular SCM and manifest persistence.

pub mod manifest;
pub mod sample;
pub mod scene;
pub mod scm;
pub mod treatment;

pub use manifest::{
    build_causal_pairs, build_matched_pairs, empirical_treated_fraction, flip_treatments, read_f64_sidecar,
    stratified_folds, write_f64_sidecar, CausalPairConfig, DatasetManifest, MANIFEST_FORMAT,
};
pub use sample::{DataMode, Sample};
pub use scene::{generate_scene, SceneConfig, Shape};
pub use scm::{generate_tabular_scm, ScmCoefficients, ScmConfig};
pub use treatment::{
    apply_fgsm, apply_treatment, invert_scramble, InputGradient, TreatmentKind, TreatmentSpec, IDENTITY_KEY,
    OBJECT_MASK_FILL,
};
