//! The treatment-learning network.
//!
//! Inference path: residual encoder `H_x` -> treatment head `g1` and the two
//! outcome arms `g2`/`g3` -> bilinear fusion `g0 = H_x * proj(y_pre)` ->
//! conditional-query attention (queries from the fused map, keys and values
//! from `H_x`) -> per-arm Gaussian posterior heads `g4..g7`, switched by the
//! treatment. Generative path: `p(t|z)` head `f1`, outcome arms `f2`/`f3` and
//! a reconstruction network for `p(x|z)`.
//!
//! Switching always evaluates both arms and mixes them as
//! `t * arm1 + (1 - t) * arm0`, so with a hard `t` the unused arm contributes
//! an exact zero.

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use super::attention::{scaled_dot_product_attention, Attention};
use super::config::{ModelConfig, PosteriorInput, Variant};
use super::layers::{Conv2d, Linear, Mlp, ResidualBlock};
use super::ops::{self, pool, softmax_last, softplus, switch_rows};
use super::params::ParameterStore;
use crate::data::{DataMode, InputGradient, Sample};
use crate::error::{Result, TltError};
use crate::seed;

/// Lower bound applied to posterior variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const EVAL_BATCH: usize = 256;

#[derive(Debug)]
enum Encoder {
    Image(Vec<ResidualBlock>),
    Tabular { first: Linear, second: Linear },
}

#[derive(Debug)]
enum OutcomeHeads {
    /// `g3` (t = 0) and `g2` (t = 1).
    Switching { arm0: Mlp, arm1: Mlp },
    /// One head reading `[features, t]`.
    Concat(Mlp),
}

#[derive(Debug)]
struct AttentionMaps {
    fusion: Linear,
    query_lift: Conv2d,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
}

#[derive(Debug)]
enum PosteriorHeads {
    /// `g4`/`g5` for t = 0 and `g6`/`g7` for t = 1.
    Switching { mu0: Mlp, var0: Mlp, mu1: Mlp, var1: Mlp },
    /// Shared heads reading `[features, one_hot(y), t]`.
    Concat { mu: Mlp, var: Mlp },
}

#[derive(Debug)]
enum DecoderOutcome {
    /// `f3` (t = 0) and `f2` (t = 1).
    Switching { arm0: Linear, arm1: Linear },
    Concat(Linear),
}

#[derive(Debug)]
enum Reconstruction {
    Image { lift: Linear, up1: Conv2d, up2: Conv2d, out: Conv2d },
    Tabular(Mlp),
}

/// Observed labels wired through the network in training mode.
#[derive(Debug, Clone, Copy)]
pub struct Observed<'a> {
    pub y: &'a [usize],
    pub t: &'a [u8],
}

impl<'a> Observed<'a> {
    /// Training mode needs both labels; evaluation mode needs neither.
    pub fn from_parts(y: Option<&'a [usize]>, t: Option<&'a [u8]>) -> Result<Option<Self>> {
        match (y, t) {
            (Some(y), Some(t)) => Ok(Some(Self { y, t })),
            (None, None) => Ok(None),
            _ => Err(TltError::Precondition("training mode needs both y and t observed".into())),
        }
    }
}

/// Logits of both outcome arms and the treatment-selected mix.
#[derive(Debug, Clone)]
pub struct OutcomeLogits {
    pub arm0: Tensor,
    pub arm1: Tensor,
    pub selected: Tensor,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    /// Fused map `g0`, shaped like `H_x`.
    pub fused: Tensor,
    /// Conditional query map `H_z` (TLT only).
    pub query_map: Option<Tensor>,
    pub attention: Option<Attention>,
    /// Attention output `a` reshaped to `(B, C, H', W')`; equals `g0` when
    /// attention is disabled.
    pub output: Tensor,
}

/// Per-arm Gaussian posterior parameters and their treatment-switched mix.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mu0: Tensor,
    pub mu1: Tensor,
    pub var0: Tensor,
    pub var1: Tensor,
    pub mu: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderOutputs {
    pub x_recon: Tensor,
    pub t_logit: Tensor,
    pub t_prob: Tensor,
    pub y_logits_arm0: Tensor,
    pub y_logits_arm1: Tensor,
    pub y_logits: Tensor,
}

/// Everything one forward pass produces, batched along the first axis.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub features: Tensor,
    pub t_logit: Tensor,
    /// `q(t=1|x)`.
    pub t_prob: Tensor,
    /// Treatment routed through the network: observed `t` in training mode,
    /// `1[q(t|x) >= 0.5]` at evaluation.
    pub t_used: Vec<u8>,
    /// Label routed through the network: observed `y` or the predicted one.
    pub y_used: Vec<usize>,
    pub outcome: OutcomeLogits,
    pub y_prob: Tensor,
    pub fusion: Fusion,
    pub posterior: PosteriorParams,
    pub z: Tensor,
    pub decoder: DecoderOutputs,
    /// Decoder outcome probabilities mixed by the routed treatment.
    pub delta: Tensor,
}

/// Evaluation-mode predictions for a list of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub t_prob: Vec<f64>,
    pub t_hat: Vec<u8>,
    pub y_prob: Vec<Vec<f64>>,
    pub y_hat: Vec<usize>,
}

#[derive(Debug)]
pub struct TltModel {
    config: ModelConfig,
    store: ParameterStore,
    encoder: Encoder,
    g1: Mlp,
    outcome: OutcomeHeads,
    attention: Option<AttentionMaps>,
    posterior: PosteriorHeads,
    f1: Linear,
    decoder_outcome: DecoderOutcome,
    reconstruction: Reconstruction,
    trained: bool,
}

fn binary_check(t: &[u8]) -> Result<()> {
    if let Some(v) = t.iter().find(|v| **v > 1) {
        return Err(TltError::Domain(format!("treatment {v} is not in {{0, 1}}")));
    }
    Ok(())
}

impl TltModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new(config.dtype(), config.seed);
        let s = &mut store;
        let feat = config.feature_channels();
        let k = config.num_classes;
        let hh = config.head_hidden;
        let latent = config.latent_dim;

        let encoder = match config.mode {
            DataMode::Image => {
                let c = &config.channels;
                Encoder::Image(vec![
                    ResidualBlock::new(s, "encoder.block1", config.input_channels, c[0], 2)?,
                    ResidualBlock::new(s, "encoder.block2", c[0], c[1], 2)?,
                    ResidualBlock::new(s, "encoder.block3", c[1], c[2], 1)?,
                ])
            }
            DataMode::Tabular => Encoder::Tabular {
                first: Linear::new(s, "encoder.layer1", config.input_channels, config.channels[0], 2f64.sqrt())?,
                second: Linear::new(s, "encoder.layer2", config.channels[0], config.channels[1], 2f64.sqrt())?,
            },
        };
        let g1 = Mlp::new(s, "g1", feat, hh, 1)?;
        let outcome = match config.variant {
            Variant::CvaePrime => OutcomeHeads::Concat(Mlp::new(s, "g_y", feat + 1, hh, k)?),
            _ => OutcomeHeads::Switching {
                arm1: Mlp::new(s, "g2", feat, hh, k)?,
                arm0: Mlp::new(s, "g3", feat, hh, k)?,
            },
        };
        let attention = match config.variant {
            Variant::Tlt => Some(AttentionMaps {
                // Gate starts near 1 so the fused map starts near H_x.
                fusion: Linear::with_bias(s, "g0.fusion", k, feat, 1.0, 1.0)?,
                query_lift: Conv2d::new(s, "attention.query_map", feat, feat, 1, 1, 1.0)?,
                query: Conv2d::new(s, "attention.f_q", feat, config.key_dim, 1, 1, 1.0)?,
                key: Conv2d::new(s, "attention.f_k", feat, config.key_dim, 1, 1, 1.0)?,
                value: Conv2d::new(s, "attention.f_v", feat, feat, 1, 1, 1.0)?,
            }),
            _ => None,
        };
        let post_in = match (config.variant, config.posterior_input) {
            (Variant::Tlt, PosteriorInput::AttentionAndFused) => 2 * feat,
            _ => feat,
        };
        let posterior = match config.variant {
            Variant::CvaePrime => PosteriorHeads::Concat {
                mu: Mlp::new(s, "posterior.mu", feat + k + 1, hh, latent)?,
                var: Mlp::new(s, "posterior.var", feat + k + 1, hh, latent)?,
            },
            _ => PosteriorHeads::Switching {
                mu0: Mlp::new(s, "g4", post_in, hh, latent)?,
                var0: Mlp::new(s, "g5", post_in, hh, latent)?,
                mu1: Mlp::new(s, "g6", post_in, hh, latent)?,
                var1: Mlp::new(s, "g7", post_in, hh, latent)?,
            },
        };
        let f1 = Linear::new(s, "f1", latent, 1, 1.0)?;
        let decoder_outcome = match config.variant {
            Variant::CvaePrime => DecoderOutcome::Concat(Linear::new(s, "f_y", latent + 1, k, 1.0)?),
            _ => DecoderOutcome::Switching {
                arm1: Linear::new(s, "f2", latent, k, 1.0)?,
                arm0: Linear::new(s, "f3", latent, k, 1.0)?,
            },
        };
        let reconstruction = match config.mode {
            DataMode::Image => {
                let d = &config.decoder_channels;
                let (gh, gw) = config.grid();
                Reconstruction::Image {
                    lift: Linear::new(s, "recon.lift", latent, d[0] * gh * gw, 2f64.sqrt())?,
                    up1: Conv2d::new(s, "recon.up1", d[0], d[1], 3, 1, 2f64.sqrt())?,
                    up2: Conv2d::new(s, "recon.up2", d[1], d[2], 3, 1, 2f64.sqrt())?,
                    out: Conv2d::new(s, "recon.out", d[2], config.input_channels, 3, 1, 1.0)?,
                }
            }
            DataMode::Tabular => Reconstruction::Tabular(Mlp::new(
                s,
                "recon.mlp",
                latent,
                config.decoder_channels[0],
                config.input_channels,
            )?),
        };
        Ok(Self {
            config,
            store,
            encoder,
            g1,
            outcome,
            attention,
            posterior,
            f1,
            decoder_outcome,
            reconstruction,
            trained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.store.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Number of encoder stages addressable by layer id (`1..=n`).
    pub fn encoder_layers(&self) -> usize {
        match &self.encoder {
            Encoder::Image(blocks) => blocks.len(),
            Encoder::Tabular { .. } => 2,
        }
    }

    // ------------------------------------------------------------------
    // input handling

    /// Packs samples into the network input layout: `(B, C, H, W)` for
    /// images, `(B, D)` for tabular rows. Inputs with extra trailing
    /// channels or features (appended covariates) are truncated to the
    /// configured width.
    pub fn input_tensor(&self, samples: &[Sample]) -> Result<Tensor> {
        let cfg = &self.config;
        let c = cfg.input_channels;
        let mut values = Vec::with_capacity(samples.len() * cfg.height * cfg.width * c);
        for s in samples {
            if s.mode() != cfg.mode {
                return Err(TltError::Domain(format!("sample {} does not match model input mode", s.id)));
            }
            let (h, w, sc) = (s.height(), s.width(), s.channels());
            if h != cfg.height || w != cfg.width || sc < c || s.x.len() != h * w * sc {
                return Err(TltError::Domain(format!(
                    "sample {} has shape {:?}, model expects {}x{}x{}",
                    s.id, s.shape, cfg.height, cfg.width, c
                )));
            }
            match cfg.mode {
                DataMode::Image => {
                    for ch in 0..c {
                        for p in 0..h * w {
                            values.push(s.x[p * sc + ch]);
                        }
                    }
                }
                DataMode::Tabular => values.extend_from_slice(&s.x[..c]),
            }
        }
        let t = match cfg.mode {
            DataMode::Image => Tensor::from_vec(values, (samples.len(), c, cfg.height, cfg.width), &Device::Cpu)?,
            DataMode::Tabular => Tensor::from_vec(values, (samples.len(), c), &Device::Cpu)?,
        };
        Ok(t.to_dtype(self.dtype())?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cfg = &self.config;
        let ok = match cfg.mode {
            DataMode::Image => {
                x.rank() == 4 && x.dims()[1..] == [cfg.input_channels, cfg.height, cfg.width]
            }
            DataMode::Tabular => x.rank() == 2 && x.dims()[1] == cfg.input_channels,
        };
        if !ok {
            return Err(TltError::Domain(format!("input shape {:?} does not match the model", x.dims())));
        }
        Ok(())
    }

    /// A float vector tensor in the model dtype.
    pub fn vector(&self, values: &[f64]) -> Result<Tensor> {
        Ok(Tensor::from_slice(values, values.len(), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn treatment_tensor(&self, t: &[u8]) -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|x| f64::from(*x)).collect();
        self.vector(&v)
    }

    fn one_hot(&self, y: &[usize]) -> Result<Tensor> {
        let k = self.config.num_classes;
        let mut v = vec![0.0; y.len() * k];
        for (i, c) in y.iter().enumerate() {
            if *c >= k {
                return Err(TltError::Domain(format!("label {c} outside [0, {k})")));
            }
            v[i * k + c] = 1.0;
        }
        Ok(Tensor::from_vec(v, (y.len(), k), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn with_column(&self, x: &Tensor, value: f64) -> Result<Tensor> {
        let col = Tensor::full(value, (x.dim(0)?, 1), &Device::Cpu)?.to_dtype(self.dtype())?;
        Ok(Tensor::cat(&[x, &col], 1)?)
    }

    /// Standard normal draws of shape `(batch, latent_dim)`.
    pub fn draw_noise(&self, batch: usize, rng: &mut seed::Rng) -> Result<Tensor> {
        let n = batch * self.config.latent_dim;
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Tensor::from_vec(v, (batch, self.config.latent_dim), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    // ------------------------------------------------------------------
    // encoder

    /// Runs the encoder up to and including stage `layer` (1-based).
    pub fn encode_prefix(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if layer == 0 || layer > self.encoder_layers() {
            return Err(TltError::Domain(format!("encoder layer {layer} does not exist")));
        }
        match &self.encoder {
            Encoder::Image(blocks) => {
                let mut h = x.clone();
                for b in &blocks[..layer] {
                    h = b.forward(&h)?;
                }
                Ok(h)
            }
            Encoder::Tabular { first, second } => {
                let h = first.forward(x)?.silu()?;
                if layer == 1 {
                    return Ok(h);
                }
                let h = second.forward(&h)?.silu()?;
                let c = h.dim(1)?;
                Ok(h.reshape((h.dim(0)?, c, 1, 1))?)
            }
        }
    }

    /// Continues the encoder from the output of stage `layer` to `H_x`.
    pub fn encode_suffix(&self, a: &Tensor, layer: usize) -> Result<Tensor> {
        match &self.encoder {
            Encoder::Image(blocks) => {
                let mut h = a.clone();
                for b in blocks.iter().skip(layer) {
                    h = b.forward(&h)?;
                }
                Ok(h)
            }
            Encoder::Tabular { second, .. } => {
                if layer >= 2 {
                    return Ok(a.clone());
                }
                let h = second.forward(a)?.silu()?;
                let c = h.dim(1)?;
                Ok(h.reshape((h.dim(0)?, c, 1, 1))?)
            }
        }
    }

    /// Feature map `H_x`: `(B, C, H/4, W/4)` for images, `(B, C, 1, 1)` for
    /// tabular rows.
    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_prefix(x, self.encoder_layers())
    }

    // ------------------------------------------------------------------
    // inference heads

    /// Pre-activation of `g1` and `q(t=1|x)`.
    pub fn infer_treatment(&self, h_x: &Tensor) -> Result<(Tensor, Tensor)> {
        let logit = self.g1.forward(&pool(h_x)?)?.squeeze(1)?;
        let prob = ops::sigmoid(&logit)?;
        Ok((logit, prob))
    }

    /// Both outcome arms of `q(y|x,t)` and the arm selected by the hard
    /// treatment vector `t`.
    pub fn infer_outcome(&self, h_x: &Tensor, t: &[u8]) -> Result<OutcomeLogits> {
        binary_check(t)?;
        let pooled = pool(h_x)?;
        let (arm0, arm1) = match &self.outcome {
            OutcomeHeads::Switching { arm0, arm1 } => (arm0.forward(&pooled)?, arm1.forward(&pooled)?),
            OutcomeHeads::Concat(head) => (
                head.forward(&self.with_column(&pooled, 0.0)?)?,
                head.forward(&self.with_column(&pooled, 1.0)?)?,
            ),
        };
        let selected = switch_rows(&self.treatment_tensor(t)?, &arm0, &arm1)?;
        Ok(OutcomeLogits { arm0, arm1, selected })
    }

    /// Bilinear fusion of `H_x` with the selected outcome logits, followed by
    /// attention with queries from the fused map and keys/values from `H_x`.
    pub fn fuse_and_attend(&self, h_x: &Tensor, y_pre: &Tensor) -> Result<Fusion> {
        let Some(maps) = &self.attention else {
            return Ok(Fusion { fused: h_x.clone(), query_map: None, attention: None, output: h_x.clone() });
        };
        let (b, c, gh, gw) = h_x.dims4()?;
        let gate = maps.fusion.forward(y_pre)?.reshape((b, c, 1, 1))?;
        let fused = h_x.broadcast_mul(&gate)?;
        let query_map = maps.query_lift.forward(&fused)?;
        let unroll = |t: Tensor| -> Result<Tensor> {
            let d = t.dim(1)?;
            Ok(t.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?)
        };
        let q = unroll(maps.query.forward(&query_map)?)?;
        let k = unroll(maps.key.forward(h_x)?)?;
        let v = unroll(maps.value.forward(h_x)?)?;
        let attention = scaled_dot_product_attention(&q, &k, &v, self.config.attention_heads)?;
        let output = attention.output.transpose(1, 2)?.contiguous()?.reshape((b, c, gh, gw))?;
        Ok(Fusion { fused, query_map: Some(query_map), attention: Some(attention), output })
    }

    fn positive(x: &Tensor) -> Result<Tensor> {
        Ok(softplus(x)?.maximum(VARIANCE_FLOOR)?)
    }

    /// Treatment-switched posterior `q(z|x,y,t)`. `y_onehot` is read only by
    /// the concatenation variant.
    pub fn infer_posterior(
        &self,
        h_x: &Tensor,
        fusion: &Fusion,
        t: &[u8],
        y_onehot: &Tensor,
    ) -> Result<PosteriorParams> {
        binary_check(t)?;
        let (mu0, var0, mu1, var1) = match &self.posterior {
            PosteriorHeads::Switching { mu0, var0, mu1, var1 } => {
                let input = match self.config.posterior_input {
                    PosteriorInput::AttentionAndFused if self.attention.is_some() => {
                        Tensor::cat(&[&pool(&fusion.output)?, &pool(&fusion.fused)?], 1)?
                    }
                    _ => pool(&fusion.output)?,
                };
                (
                    mu0.forward(&input)?,
                    Self::positive(&var0.forward(&input)?)?,
                    mu1.forward(&input)?,
                    Self::positive(&var1.forward(&input)?)?,
                )
            }
            PosteriorHeads::Concat { mu, var } => {
                let base = Tensor::cat(&[&pool(h_x)?, y_onehot], 1)?;
                let in0 = self.with_column(&base, 0.0)?;
                let in1 = self.with_column(&base, 1.0)?;
                (
                    mu.forward(&in0)?,
                    Self::positive(&var.forward(&in0)?)?,
                    mu.forward(&in1)?,
                    Self::positive(&var.forward(&in1)?)?,
                )
            }
        };
        let tt = self.treatment_tensor(t)?;
        let mu = switch_rows(&tt, &mu0, &mu1)?;
        let var = switch_rows(&tt, &var0, &var1)?;
        let post = PosteriorParams { mu0, mu1, var0, var1, mu, var };
        self.check_posterior(&post)?;
        Ok(post)
    }

    fn check_posterior(&self, p: &PosteriorParams) -> Result<()> {
        let bad = |t: &Tensor| -> Result<bool> { Ok(ops::to_f64_vec(t)?.iter().any(|v| !v.is_finite())) };
        if bad(&p.mu0)? || bad(&p.mu1)? || bad(&p.var0)? || bad(&p.var1)? {
            let mut culprits = Vec::new();
            for (name, v) in self.store.iter() {
                if ops::to_f64_vec(v.as_tensor())?.iter().any(|x| !x.is_finite()) {
                    culprits.push(name.clone());
                }
            }
            return Err(TltError::Numeric(format!(
                "posterior head produced non-finite values; non-finite parameters: [{}]",
                culprits.join(", ")
            )));
        }
        Ok(())
    }

    /// Reparameterized draw `z = mu + sqrt(var) * xi`.
    pub fn sample_latent(&self, p: &PosteriorParams, xi: &Tensor) -> Result<Tensor> {
        Ok((&p.mu + p.var.sqrt()?.mul(xi)?)?)
    }

    /// Both outcome arms of `p(y|z,t)`.
    pub fn decode_outcome_arms(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok(match &self.decoder_outcome {
            DecoderOutcome::Switching { arm0, arm1 } => (arm0.forward(z)?, arm1.forward(z)?),
            DecoderOutcome::Concat(head) => (
                head.forward(&self.with_column(z, 0.0)?)?,
                head.forward(&self.with_column(z, 1.0)?)?,
            ),
        })
    }

    /// Mean of `p(x|z)`: squashed into `(0, 1)` for images.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        match &self.reconstruction {
            Reconstruction::Image { lift, up1, up2, out } => {
                let (gh, gw) = self.config.grid();
                let d0 = self.config.decoder_channels[0];
                let b = z.dim(0)?;
                let h = lift.forward(z)?.silu()?.reshape((b, d0, gh, gw))?;
                let h = up1.forward(&h.upsample_nearest2d(gh * 2, gw * 2)?)?.silu()?;
                let h = up2.forward(&h.upsample_nearest2d(gh * 4, gw * 4)?)?.silu()?;
                ops::sigmoid(&out.forward(&h)?)
            }
            Reconstruction::Tabular(mlp) => mlp.forward(z),
        }
    }

    /// Generative heads: reconstruction, `p(t|z)` and the switched `p(y|z,t)`.
    pub fn decode(&self, z: &Tensor, t: &[u8]) -> Result<DecoderOutputs> {
        binary_check(t)?;
        let t_logit = self.f1.forward(z)?.squeeze(1)?;
        let t_prob = ops::sigmoid(&t_logit)?;
        let (y_logits_arm0, y_logits_arm1) = self.decode_outcome_arms(z)?;
        let y_logits = switch_rows(&self.treatment_tensor(t)?, &y_logits_arm0, &y_logits_arm1)?;
        Ok(DecoderOutputs { x_recon: self.reconstruct(z)?, t_logit, t_prob, y_logits_arm0, y_logits_arm1, y_logits })
    }

    // ------------------------------------------------------------------
    // full passes

    /// Forward pass with caller-supplied standard normal noise `xi`.
    ///
    /// With `observed` the observed `(y, t)` drive the switches (training
    /// mode). Without it the treatment is inferred as `1[q(t|x) >= 0.5]` and
    /// the label as the argmax of `q(y|x, t_hat)`.
    pub fn forward_with_noise(&self, x: &Tensor, observed: Option<Observed<'_>>, xi: &Tensor) -> Result<ForwardOutputs> {
        let b = x.dim(0)?;
        if let Some(obs) = observed {
            if obs.y.len() != b || obs.t.len() != b {
                return Err(TltError::Precondition(format!(
                    "observed labels cover {} / {} rows, batch has {b}",
                    obs.y.len(),
                    obs.t.len()
                )));
            }
        }
        let features = self.encode_features(x)?;
        let (t_logit, t_prob) = self.infer_treatment(&features)?;
        let t_prob_values = ops::to_f64_vec(&t_prob)?;
        let t_used: Vec<u8> = match observed {
            Some(obs) => obs.t.to_vec(),
            None => t_prob_values.iter().map(|p| u8::from(*p >= 0.5)).collect(),
        };
        let outcome = self.infer_outcome(&features, &t_used)?;
        let y_used: Vec<usize> = match observed {
            Some(obs) => obs.y.to_vec(),
            None => ops::argmax_rows(&ops::to_f64_rows(&outcome.selected)?),
        };
        let y_onehot = self.one_hot(&y_used)?;
        let fusion = self.fuse_and_attend(&features, &outcome.selected)?;
        let posterior = self.infer_posterior(&features, &fusion, &t_used, &y_onehot)?;
        let z = self.sample_latent(&posterior, xi)?;
        let decoder = self.decode(&z, &t_used)?;

        let soft = observed.is_none() && self.config.soft_treatment;
        let mix = if soft { t_prob.clone() } else { self.treatment_tensor(&t_used)? };
        let y_prob = if soft {
            switch_rows(&mix, &softmax_last(&outcome.arm0)?, &softmax_last(&outcome.arm1)?)?
        } else {
            softmax_last(&outcome.selected)?
        };
        let delta = switch_rows(
            &mix,
            &softmax_last(&decoder.y_logits_arm0)?,
            &softmax_last(&decoder.y_logits_arm1)?,
        )?;
        Ok(ForwardOutputs {
            features,
            t_logit,
            t_prob,
            t_used,
            y_used,
            outcome,
            y_prob,
            fusion,
            posterior,
            z,
            decoder,
            delta,
        })
    }

    /// Forward pass drawing the latent noise from `rng`.
    pub fn forward(&self, x: &Tensor, observed: Option<Observed<'_>>, rng: &mut seed::Rng) -> Result<ForwardOutputs> {
        let xi = self.draw_noise(x.dim(0)?, rng)?;
        self.forward_with_noise(x, observed, &xi)
    }

    /// Evaluation-mode treatment and class predictions. Only the encoder and
    /// inference heads run; the values equal those of [`Self::forward`].
    pub fn predict_batch(&self, x: &Tensor) -> Result<Predictions> {
        let features = self.encode_features(x)?;
        let (_, t_prob) = self.infer_treatment(&features)?;
        let t_prob = ops::to_f64_vec(&t_prob)?;
        let t_hat: Vec<u8> = t_prob.iter().map(|p| u8::from(*p >= 0.5)).collect();
        let outcome = self.infer_outcome(&features, &t_hat)?;
        let y_prob = if self.config.soft_treatment {
            let p0 = ops::to_f64_rows(&softmax_last(&outcome.arm0)?)?;
            let p1 = ops::to_f64_rows(&softmax_last(&outcome.arm1)?)?;
            p0.iter()
                .zip(&p1)
                .zip(&t_prob)
                .map(|((a, b), w)| a.iter().zip(b).map(|(u, v)| w * v + (1.0 - w) * u).collect())
                .collect()
        } else {
            ops::to_f64_rows(&softmax_last(&outcome.selected)?)?
        };
        let y_hat = ops::argmax_rows(&y_prob);
        Ok(Predictions { t_prob, t_hat, y_prob, y_hat })
    }

    /// [`Self::predict_batch`] over any number of samples.
    pub fn predict_samples(&self, samples: &[Sample]) -> Result<Predictions> {
        let mut out = Predictions { t_prob: Vec::new(), t_hat: Vec::new(), y_prob: Vec::new(), y_hat: Vec::new() };
        for chunk in samples.chunks(EVAL_BATCH) {
            let p = self.predict_batch(&self.input_tensor(chunk)?)?;
            out.t_prob.extend(p.t_prob);
            out.t_hat.extend(p.t_hat);
            out.y_prob.extend(p.y_prob);
            out.y_hat.extend(p.y_hat);
        }
        Ok(out)
    }

    /// Class labels: argmax of the selected arm, ties to the lowest index.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        Ok(self.predict_samples(samples)?.y_hat)
    }

    /// Evaluation-mode posterior means, one row per sample.
    pub fn posterior_means(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let x = self.input_tensor(chunk)?;
            let xi = Tensor::zeros((chunk.len(), self.config.latent_dim), self.dtype(), &Device::Cpu)?;
            let out = self.forward_with_noise(&x, None, &xi)?;
            rows.extend(ops::to_f64_rows(&out.posterior.mu)?);
        }
        Ok(rows)
    }

    /// Class-`class` logit of the selected inference arm, computed from the
    /// output of encoder stage `layer`. The treatment arm is chosen by the
    /// thresholded `q(t|x)` of the same forward pass.
    pub fn class_logit_from_layer(&self, a: &Tensor, layer: usize, class: usize) -> Result<Tensor> {
        if class >= self.config.num_classes {
            return Err(TltError::Domain(format!("class {class} outside [0, {})", self.config.num_classes)));
        }
        let features = self.encode_suffix(a, layer)?;
        let (_, t_prob) = self.infer_treatment(&features)?;
        let t_hat: Vec<u8> = ops::to_f64_vec(&t_prob)?.iter().map(|p| u8::from(*p >= 0.5)).collect();
        let outcome = self.infer_outcome(&features, &t_hat)?;
        Ok(outcome.selected.narrow(1, class, 1)?.squeeze(1)?)
    }
}

impl InputGradient for TltModel {
    /// Gradient of `-log q(y|x, t_hat)` with respect to the pixels.
    fn input_gradient(&self, sample: &Sample) -> Result<Vec<f64>> {
        if self.config.mode != DataMode::Image {
            return Err(TltError::Capability("input gradients are provided for image models".into()));
        }
        let x = Var::from_tensor(&self.input_tensor(std::slice::from_ref(sample))?)?;
        let features = self.encode_features(x.as_tensor())?;
        let (_, t_prob) = self.infer_treatment(&features)?;
        let t_hat: Vec<u8> = ops::to_f64_vec(&t_prob)?.iter().map(|p| u8::from(*p >= 0.5)).collect();
        let outcome = self.infer_outcome(&features, &t_hat)?;
        let logp = ops::log_softmax_last(&outcome.selected)?;
        let loss = logp.narrow(1, sample.y, 1)?.sum_all()?.neg()?;
        let grads = loss.backward()?;
        let g = grads
            .get(x.as_tensor())
            .ok_or_else(|| TltError::Numeric("no gradient reached the input".into()))?;
        // (1, C, H, W) -> H x W x C
        let chw = ops::to_f64_vec(g)?;
        let (c, hw) = (self.config.input_channels, self.config.height * self.config.width);
        let sc = sample.channels();
        let mut out = vec![0.0; sample.x.len()];
        for ch in 0..c {
            for p in 0..hw {
                out[p * sc + ch] = chw[ch * hw + p];
            }
        }
        Ok(out)
    }
}
