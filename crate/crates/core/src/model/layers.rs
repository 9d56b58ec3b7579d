use candle_core::{Tensor, Var};

use super::params::ParameterStore;
use crate::error::Result;

/// Affine map `x W^T + b` over the last axis of a `(B, in)` input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Weights drawn with standard deviation `gain / sqrt(fan_in)`.
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[fan_out, fan_in], gain / (fan_in as f64).sqrt())?;
        let bias = store.zeros(&format!("{name}.bias"), &[fan_out])?;
        Ok(Self { weight, bias })
    }

    /// Like [`Linear::new`] with every bias entry starting at `bias`.
    pub fn with_bias(
        store: &mut ParameterStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: f64,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[fan_out, fan_in], gain / (fan_in as f64).sqrt())?;
        let bias = store.constant(&format!("{name}.bias"), &[fan_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Square-kernel 2-D convolution with bias over `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            gain / (fan_in as f64).sqrt(),
        )?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.bias.dim(0)?;
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c_out, 1, 1))?)?)
    }
}

/// Two 3x3 convolutions with a residual connection; the skip path is a
/// strided 1x1 projection whenever the shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParameterStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 2f64.sqrt())?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1.0)?;
        let skip = if c_in != c_out || stride != 1 {
            Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, stride, 1.0)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, skip })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?.silu()?)?;
        let shortcut = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.silu()?)
    }
}

/// `Linear -> SiLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), fan_in, hidden, 2f64.sqrt())?,
            out: Linear::new(store, &format!("{name}.out"), hidden, fan_out, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.silu()?)
    }
}
