//! Differentiable helpers missing from the tensor crate's core op set.

use candle_core::{Tensor, D};

use crate::error::Result;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `log(sigmoid(x))`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mixes two arms row-wise: `t * arm1 + (1 - t) * arm0` with `t` of shape `(B,)`.
pub fn switch_rows(t: &Tensor, arm0: &Tensor, arm1: &Tensor) -> Result<Tensor> {
    let mut shape = vec![t.dim(0)?];
    shape.extend(std::iter::repeat_n(1, arm0.rank() - 1));
    let t = t.reshape(shape)?;
    let one_minus = t.affine(-1.0, 1.0)?;
    Ok((arm1.broadcast_mul(&t)? + arm0.broadcast_mul(&one_minus)?)?)
}

/// Global average pool over the two trailing spatial axes of `(B, C, H, W)`.
pub fn pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?.flatten_from(1)?)
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter()
        .map(|r| {
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn to_f64_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(x.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
}

pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn logistic_edges() {
        let s = to_f64_vec(&sigmoid(&t(&[0.0, 20.0, -800.0])).unwrap()).unwrap();
        assert_eq!(s[0], 0.5);
        assert!(s[1] > 1.0 - 1e-8);
        assert_eq!(s[2], 0.0);
        let sp = to_f64_vec(&softplus(&t(&[0.0, 800.0, -800.0])).unwrap()).unwrap();
        assert!((sp[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sp[1], 800.0);
        assert_eq!(sp[2], 0.0);
    }

    #[test]
    fn softmax_closed_form_and_shift() {
        let x = Tensor::new(&[[2.0f64, 0.0]], &Device::Cpu).unwrap();
        let p = to_f64_rows(&softmax_last(&x).unwrap()).unwrap();
        assert!((p[0][0] - 0.8808).abs() < 1e-4);
        assert!((p[0][1] - 0.1192).abs() < 1e-4);
        let shifted = to_f64_rows(&softmax_last(&(x.clone() + 123.0).unwrap()).unwrap()).unwrap();
        assert!((shifted[0][0] - p[0][0]).abs() < 1e-12);
        let lp = to_f64_rows(&log_softmax_last(&x).unwrap()).unwrap();
        assert!((lp[0][0] - p[0][0].ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[vec![0.6, 0.4], vec![0.5, 0.5], vec![0.1, 0.9]]), vec![0, 0, 1]);
    }

    #[test]
    fn switch_selects_exactly() {
        let a0 = Tensor::new(&[[1.5f64, -2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let a1 = Tensor::new(&[[7.25f64, 8.0], [9.0, -0.5]], &Device::Cpu).unwrap();
        let sel = switch_rows(&t(&[1.0, 0.0]), &a0, &a1).unwrap();
        assert_eq!(to_f64_rows(&sel).unwrap(), vec![vec![7.25, 8.0], vec![3.0, 4.0]]);
    }
}
