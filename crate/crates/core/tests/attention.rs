use candle_core::{Device, Tensor};
use proptest::prelude::*;
use tlt_core::model::attention::scaled_dot_product_attention;
use tlt_core::model::ops::softmax_last;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let last = *t.dims().last().unwrap();
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap().chunks(last).map(<[f64]>::to_vec).collect()
}

fn tensor(values: &[f64], shape: (usize, usize, usize)) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

proptest! {
    #[test]
    fn attention_output_lies_in_the_value_hull(
        p in 1usize..4,
        s in 1usize..5,
        heads in 1usize..3,
        seed_values in proptest::collection::vec(-3.0f64..3.0, 200),
    ) {
        let (dk, dv) = (2 * heads, 2 * heads);
        let q = tensor(&seed_values[..p * dk], (1, p, dk));
        let k = tensor(&seed_values[50..50 + s * dk], (1, s, dk));
        let v = tensor(&seed_values[100..100 + s * dv], (1, s, dv));
        let att = scaled_dot_product_attention(&q, &k, &v, heads).unwrap();
        for row in rows(&att.weights) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|w| *w >= 0.0));
        }
        let values = rows(&v);
        for out in rows(&att.output) {
            for (j, o) in out.iter().enumerate() {
                let lo = values.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = values.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ignores_constant_shifts(
        logits in proptest::collection::vec(-20.0f64..20.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let n = logits.len();
        let a = Tensor::from_vec(logits.clone(), (1, n), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(logits.iter().map(|l| l + shift).collect::<Vec<_>>(), (1, n), &Device::Cpu).unwrap();
        let (pa, pb) = (rows(&softmax_last(&a).unwrap()), rows(&softmax_last(&b).unwrap()));
        for (u, v) in pa[0].iter().zip(&pb[0]) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
