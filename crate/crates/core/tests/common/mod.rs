#![allow(dead_code)]

use rand::Rng as _;
use tlt_core::data::{build_causal_pairs, CausalPairConfig, SceneConfig, Sample, TreatmentSpec};
use tlt_core::model::{ModelConfig, TltModel};
use tlt_core::seed;

pub fn micro(seed_value: u64) -> TltModel {
    TltModel::new(ModelConfig { seed: seed_value, ..ModelConfig::micro() }).unwrap()
}

/// Uniform-noise 8x8 single-channel images with random labels and treatments.
pub fn noise_images(n: usize, seed_value: u64) -> Vec<Sample> {
    let mut rng = seed::rng(seed_value);
    (0..n)
        .map(|i| Sample {
            id: format!("noise-{i}"),
            shape: vec![8, 8, 1],
            x: (0..64).map(|_| rng.random::<f64>()).collect(),
            y: rng.random_range(0..2),
            t: u8::from(rng.random_bool(0.5)),
            mask: None,
        })
        .collect()
}

pub fn micro_scenes(n: usize, seed_value: u64) -> Vec<Sample> {
    build_causal_pairs(&CausalPairConfig {
        scene: SceneConfig::with_size(8, 8, 1),
        num_samples: n,
        treatment: Some(TreatmentSpec::scramble(7)),
        seed: seed_value,
        ..CausalPairConfig::default()
    })
    .unwrap()
    .records
}

pub fn bits(t: &candle_core::Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
}

pub fn values(t: &candle_core::Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

/// Adds `N(0, scale^2)` noise to every parameter whose name starts with one of `prefixes`.
pub fn perturb(model: &TltModel, prefixes: &[&str], scale: f64, rng: &mut seed::Rng) {
    use rand_distr::{Distribution, StandardNormal};
    for name in model.params().names() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            let v: Vec<f64> = model
                .params()
                .values(&name)
                .unwrap()
                .iter()
                .map(|x| x + scale * { let e: f64 = StandardNormal.sample(rng); e })
                .collect();
            model.params().set_values(&name, &v).unwrap();
        }
    }
}
