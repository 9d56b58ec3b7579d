use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tlt_core::data::{
    apply_fgsm, apply_treatment, build_causal_pairs, flip_treatments, generate_scene, generate_tabular_scm,
    invert_scramble, CausalPairConfig, InputGradient, Sample, ScmCoefficients, ScmConfig, SceneConfig, TreatmentSpec,
};
use tlt_core::{seed, TltError};

fn random_image(rng: &mut seed::Rng, h: usize, w: usize, c: usize) -> Sample {
    Sample {
        id: "img".into(),
        shape: vec![h, w, c],
        x: (0..h * w * c).map(|_| rng.random::<f64>()).collect(),
        y: rng.random_range(0..2),
        t: 0,
        mask: Some((0..h * w).map(|_| u8::from(rng.random_bool(0.3))).collect()),
    }
}

// ---------------------------------------------------------------------------
// scenes

#[test]
fn scene_masks_are_nonempty_with_area_in_band() {
    let cfg = SceneConfig::default();
    for class in 0..2 {
        let mut area_sum = 0.0;
        for seed_value in 0..1000u64 {
            let s = generate_scene(class, seed_value, &cfg).unwrap();
            let mask = s.mask.as_ref().unwrap();
            let on = mask.iter().filter(|m| **m == 1).count();
            assert!(on > 0, "class {class} seed {seed_value}");
            assert!(mask.iter().all(|m| *m <= 1));
            assert!(s.x.iter().all(|v| (0.0..=1.0).contains(v)));
            area_sum += on as f64 / mask.len() as f64;
        }
        let mean = area_sum / 1000.0;
        assert!((0.05..=0.30).contains(&mean), "class {class}: mean area {mean}");
    }
}

#[test]
fn scenes_are_deterministic_and_reject_unknown_classes() {
    let cfg = SceneConfig::default();
    assert_eq!(generate_scene(0, 7, &cfg).unwrap(), generate_scene(0, 7, &cfg).unwrap());
    assert!(matches!(generate_scene(2, 7, &cfg), Err(TltError::Domain(_))));
}

// ---------------------------------------------------------------------------
// treatments

fn non_adversarial_spec() -> impl Strategy<Value = TreatmentSpec> {
    prop_oneof![
        any::<u64>().prop_map(TreatmentSpec::scramble),
        (0.0f64..=1.0).prop_map(TreatmentSpec::object_mask),
        (0.0f64..=1.0).prop_map(TreatmentSpec::background_refill),
        (0.0f64..2.0).prop_map(TreatmentSpec::gaussian),
    ]
}

proptest! {
    #[test]
    fn treatments_keep_pixels_in_range_and_labels_fixed(
        spec in non_adversarial_spec(),
        seed_value in any::<u64>(),
        (h, w, c) in (1usize..10, 1usize..10, prop_oneof![Just(1usize), Just(3usize)]),
    ) {
        let mut rng = seed::rng(seed_value);
        let mut s = random_image(&mut rng, h, w, c);
        // Keep one background pixel so refilling has a source.
        s.mask.as_mut().unwrap()[0] = 0;
        let out = apply_treatment(&s, &spec, &mut rng).unwrap();
        prop_assert!(out.x.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out.y, s.y);
        prop_assert_eq!(&out.shape, &s.shape);
        prop_assert_eq!(out.t, 1);
    }

    #[test]
    fn scramble_inverts_exactly(key in any::<u64>(), seed_value in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = seed::rng(seed_value);
        let s = random_image(&mut rng, h, w, 3);
        let scrambled = apply_treatment(&s, &TreatmentSpec::scramble(key), &mut rng).unwrap();
        let back = invert_scramble(&scrambled, key).unwrap();
        prop_assert_eq!(back.x, s.x);
        prop_assert_eq!(back.mask, s.mask);
    }

    #[test]
    fn masked_pixel_count_grows_with_ratio(seed_value in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s = generate_scene((seed_value % 2) as usize, seed_value, &SceneConfig::with_size(16, 16, 1)).unwrap();
        let mut rng = seed::rng(0);
        let altered = |r: f64, rng: &mut seed::Rng| {
            let out = apply_treatment(&s, &TreatmentSpec::object_mask(r), rng).unwrap();
            out.x.iter().zip(&s.x).filter(|(u, v)| u != v).count()
        };
        prop_assert!(altered(lo, &mut rng) <= altered(hi, &mut rng));
    }
}

#[test]
fn hundred_random_scramble_round_trips_are_exact() {
    let mut rng = seed::rng(99);
    let mut failures = 0;
    for _ in 0..100 {
        let key: u64 = rng.random();
        let s = random_image(&mut rng, 32, 32, 3);
        let back = invert_scramble(&apply_treatment(&s, &TreatmentSpec::scramble(key), &mut rng).unwrap(), key).unwrap();
        failures += usize::from(back.x != s.x);
    }
    assert_eq!(failures, 0);
}

#[test]
fn mask_treatments_need_a_mask() {
    let mut s = random_image(&mut seed::rng(1), 4, 4, 1);
    s.mask = None;
    for spec in [TreatmentSpec::object_mask(0.5), TreatmentSpec::background_refill(0.5)] {
        assert!(matches!(apply_treatment(&s, &spec, &mut seed::rng(0)), Err(TltError::Precondition(_))));
    }
    assert!(matches!(apply_treatment(&s, &TreatmentSpec::object_mask(1.5), &mut seed::rng(0)), Err(TltError::Domain(_))));
}

// ---------------------------------------------------------------------------
// FGSM

/// `J(x) = w . x`; the gradient is `w`.
struct LinearScorer {
    w: Vec<f64>,
}

impl LinearScorer {
    fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

impl InputGradient for LinearScorer {
    fn input_gradient(&self, _: &Sample) -> tlt_core::Result<Vec<f64>> {
        Ok(self.w.clone())
    }
}

struct NoGradient;
impl InputGradient for NoGradient {}

proptest! {
    #[test]
    fn fgsm_respects_the_budget(seed_value in any::<u64>(), eps in 0.0f64..1.0) {
        let mut rng = seed::rng(seed_value);
        let s = random_image(&mut rng, 5, 5, 1);
        let scorer = LinearScorer { w: (0..25).map(|_| { let e: f64 = StandardNormal.sample(&mut rng); e }).collect() };
        let out = apply_fgsm(&s, &scorer, eps).unwrap();
        for (u, v) in out.x.iter().zip(&s.x) {
            prop_assert!((u - v).abs() <= eps);
            prop_assert!((0.0..=1.0).contains(u));
        }
    }
}

#[test]
fn fgsm_moves_interior_pixels_along_finite_difference_signs() {
    let mut rng = seed::rng(5);
    let w: Vec<f64> = (0..64).map(|i| if i % 7 == 3 { 0.0 } else { StandardNormal.sample(&mut rng) }).collect();
    let scorer = LinearScorer { w };
    let s = Sample {
        id: "interior".into(),
        shape: vec![8, 8, 1],
        x: (0..64).map(|_| rng.random_range(0.35..0.65)).collect(),
        y: 0,
        t: 0,
        mask: None,
    };
    for eps in [0.1, 0.3] {
        let out = apply_fgsm(&s, &scorer, eps).unwrap();
        for i in 0..64 {
            let h = 1e-6;
            let (mut up, mut down) = (s.x.clone(), s.x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (scorer.score(&up) - scorer.score(&down)) / (2.0 * h);
            let expected = if fd.abs() < 1e-9 { 0.0 } else { eps * fd.signum() };
            assert!((out.x[i] - s.x[i] - expected).abs() < 1e-12, "pixel {i}");
        }
    }
    assert_eq!(apply_fgsm(&s, &scorer, 0.0).unwrap().x, s.x);
    assert!(matches!(apply_fgsm(&s, &NoGradient, 0.1), Err(TltError::Capability(_))));
}

// ---------------------------------------------------------------------------
// flipping

fn clean(n: usize) -> tlt_core::data::DatasetManifest {
    build_causal_pairs(&CausalPairConfig {
        scene: SceneConfig::with_size(4, 4, 1),
        num_samples: n,
        seed: 3,
        ..CausalPairConfig::default()
    })
    .unwrap()
}

#[test]
fn flip_counts_stay_within_binomial_bounds() {
    let data = clean(10_000);
    for (i, rate) in [0.01, 0.05, 0.2].into_iter().enumerate() {
        let flipped = flip_treatments(&data, rate, &mut seed::rng(i as u64)).unwrap();
        let changed = flipped.records.iter().zip(&data.records).filter(|(a, b)| a.t != b.t).count();
        assert_eq!(changed, flipped.flip_count);
        let n = data.len() as f64;
        let sd = (n * rate * (1.0 - rate)).sqrt();
        assert!((changed as f64 - n * rate).abs() <= 3.0 * sd, "rate {rate}: {changed}");
    }
}

#[test]
fn flip_rate_extremes() {
    let data = clean(200);
    let none = flip_treatments(&data, 0.0, &mut seed::rng(0)).unwrap();
    assert_eq!(none.records, data.records);
    let all = flip_treatments(&data, 1.0, &mut seed::rng(0)).unwrap();
    assert!(all.records.iter().zip(&data.records).all(|(a, b)| a.t == 1 - b.t));
    for bad in [-0.1, 1.1, f64::NAN] {
        assert!(matches!(flip_treatments(&data, bad, &mut seed::rng(0)), Err(TltError::Domain(_))));
    }
}

// ---------------------------------------------------------------------------
// SCM

#[test]
fn planted_effect_matches_brute_force_simulation() {
    let cfg = ScmConfig::default();
    let coef = ScmCoefficients::from_config(&cfg).unwrap();
    let mut rng = seed::rng(1234);
    let draws = 10_000_000usize;
    let mut hits = 0i64;
    for _ in 0..draws {
        let mut score = 0.0;
        for b in &coef.outcome_weights {
            let z: f64 = StandardNormal.sample(&mut rng);
            score += b * z;
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        // Common random numbers under both interventions.
        let y1 = score + coef.tau + e > 0.0;
        let y0 = score + e > 0.0;
        hits += i64::from(y1) - i64::from(y0);
    }
    let simulated = hits as f64 / draws as f64;
    let planted = generate_tabular_scm(&ScmConfig { num_samples: 10, ..cfg }).unwrap().planted_ate.unwrap();
    assert!((simulated - planted).abs() <= 0.003, "{simulated} vs {planted}");
}
