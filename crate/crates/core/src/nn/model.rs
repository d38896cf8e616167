//! Encoder f(·), projection head g(·) and linear classifier.
//!
//! The encoder is a stack of `conv3x3 → ReLU → maxpool2x2` blocks, a global
//! average pool, a dense layer to `repr_dim`, and row normalization; its
//! output is the representation `h`. Both heads read `h`: the classifier
//! produces logits, the projection produces `z = normalize(W_g h + b_g)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{self, DenseGrads};
use crate::nn::tensor::{zero_grads, GradSet, ParamSet, Tensor};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    /// D_f, representation size.
    pub repr_dim: usize,
    /// D_g, projection size.
    pub proj_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 3, conv_channels: vec![8, 16, 32], repr_dim: 128, proj_dim: 64, num_classes: 50 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.repr_dim, self.proj_dim, self.num_classes];
        if dims.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::Config("model dimensions must all be >= 1".into()));
        }
        if self.proj_dim >= self.repr_dim {
            return Err(Error::Config(format!(
                "projection dim {} must be smaller than representation dim {}",
                self.proj_dim, self.repr_dim
            )));
        }
        Ok(())
    }

    /// Spatial size the encoder actually consumes: each axis is cropped to
    /// a multiple of `2^blocks` so every pooling stage sees even sizes.
    pub fn cropped_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let blocks = self.conv_channels.len() as u32;
        let unit = 1usize << blocks;
        let (ch, cw) = (h / unit * unit, w / unit * unit);
        // the last conv runs at (ch, cw) / 2^(blocks-1) and needs >= 3x3
        let last = if blocks == 0 { 1 } else { 1usize << (blocks - 1) };
        if ch == 0 || cw == 0 || (blocks > 0 && (ch / last < 3 || cw / last < 3)) {
            return Err(Error::shape("encoder", format!("input {h}x{w} too small for {blocks} conv blocks")));
        }
        Ok((ch, cw))
    }
}

pub fn conv_weight(i: usize) -> String {
    format!("encoder.conv{i}.weight")
}
pub fn conv_bias(i: usize) -> String {
    format!("encoder.conv{i}.bias")
}
pub const FC_W: &str = "encoder.fc.weight";
pub const FC_B: &str = "encoder.fc.bias";
pub const PROJ_W: &str = "projection.weight";
pub const PROJ_B: &str = "projection.bias";
pub const CLS_W: &str = "classifier.weight";
pub const CLS_B: &str = "classifier.bias";

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Tensor,
    pre_relu: Tensor,
    pooled_from: Vec<usize>,
    pool_in_shape: Vec<usize>,
}

/// Everything the encoder backward pass needs for one sample.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    gap_in_shape: Vec<usize>,
    fc_in: Tensor,
    h: Tensor,
    norm: f64,
}

/// Batch outputs of both heads.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub z: Tensor,
    z_norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub caches: Vec<EncoderCache>,
    /// Representations, `[N×repr_dim]`.
    pub h: Tensor,
    pub heads: HeadOutput,
}

impl EncoderCache {
    /// Distance from the nearest non-differentiable point of the forward
    /// pass: the smallest `|pre-activation|` over all ReLUs, and the
    /// smallest gap between the winner and runner-up of every max-pool
    /// window with a positive winner.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for blk in &self.blocks {
            for &v in &blk.pre_relu.data {
                margin = margin.min(v.abs());
            }
            let [c, h, w] = [blk.pool_in_shape[1], blk.pool_in_shape[2], blk.pool_in_shape[3]];
            let act = |i: usize| blk.pre_relu.data[i].max(0.0);
            for k in 0..c {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let base = k * h * w + 2 * oy * w + 2 * ox;
                        let mut vals = [act(base), act(base + 1), act(base + w), act(base + w + 1)];
                        vals.sort_by(|a, b| b.total_cmp(a));
                        if vals[0] > 0.0 {
                            margin = margin.min(vals[0] - vals[1]);
                        }
                    }
                }
            }
        }
        margin
    }
}

fn xavier(rng: &mut rng::Stream, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-limit..limit)).collect() }
}

impl Model {
    /// Fan-in/fan-out scaled uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let mut params = ParamSet::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            params.insert(conv_weight(i), xavier(&mut rng, &[cout, cin, 3, 3], cin * 9, cout * 9));
            params.insert(conv_bias(i), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let (df, dg, c) = (config.repr_dim, config.proj_dim, config.num_classes);
        params.insert(FC_W.into(), xavier(&mut rng, &[cin, df], cin, df));
        params.insert(FC_B.into(), Tensor::zeros(&[df]));
        params.insert(PROJ_W.into(), xavier(&mut rng, &[df, dg], df, dg));
        params.insert(PROJ_B.into(), Tensor::zeros(&[dg]));
        params.insert(CLS_W.into(), xavier(&mut rng, &[df, c], df, c));
        params.insert(CLS_B.into(), Tensor::zeros(&[c]));
        Ok(Self { config: config.clone(), params })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = Model::init(&config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape == t.shape => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", p.shape, t.shape)))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    fn p(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Runs the encoder on one `[C×H×W]` input and returns `h` with its cache.
    pub fn encode(&self, input: &Tensor) -> Result<EncoderCache> {
        input.expect_rank("encoder", 3)?;
        if input.dim(0) != self.config.in_channels {
            return Err(Error::shape(
                "encoder",
                format!("expected {} input channels, got {}", self.config.in_channels, input.dim(0)),
            ));
        }
        let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
        let (ch, cw) = self.config.cropped_dims(h, w)?;
        let mut x = if (ch, cw) == (h, w) {
            input.clone().reshaped(vec![1, c, h, w])?
        } else {
            let mut data = Vec::with_capacity(c * ch * cw);
            for k in 0..c {
                for y in 0..ch {
                    let base = (k * h + y) * w;
                    data.extend_from_slice(&input.data[base..base + cw]);
                }
            }
            Tensor::new(vec![1, c, ch, cw], data)?
        };

        let mut blocks = Vec::with_capacity(self.config.conv_channels.len());
        for i in 0..self.config.conv_channels.len() {
            let pre = ops::conv2d(&x, self.p(&conv_weight(i)), self.p(&conv_bias(i)))?;
            let act = ops::relu(&pre);
            let (pooled, arg) = ops::maxpool2d(&act)?;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                pre_relu: pre,
                pooled_from: arg,
                pool_in_shape: act.shape,
            });
        }
        let gap_in_shape = x.shape.clone();
        let fc_in = ops::global_avg_pool(&x)?;
        let u = ops::dense(&fc_in, self.p(FC_W), self.p(FC_B))?;
        let (h, norms) = ops::l2_normalize(&u)?;
        Ok(EncoderCache { blocks, gap_in_shape, fc_in, h, norm: norms[0] })
    }

    /// Gradients of the encoder parameters given `dL/dh` for one sample.
    pub fn encode_backward(&self, cache: &EncoderCache, grad_h: &[f64]) -> Result<GradSet> {
        let gh = Tensor::new(vec![1, grad_h.len()], grad_h.to_vec())?;
        let gu = ops::l2_normalize_backward(&cache.h, &[cache.norm], &gh);
        let DenseGrads { x: g_gap, w: gw, b: gb } = ops::dense_backward(&cache.fc_in, self.p(FC_W), &gu)?;
        let mut grads = GradSet::new();
        grads.insert(FC_W.into(), gw);
        grads.insert(FC_B.into(), gb);
        let mut g = ops::global_avg_pool_backward(&cache.gap_in_shape, &g_gap);
        for (i, blk) in cache.blocks.iter().enumerate().rev() {
            let g_act = ops::maxpool2d_backward(&blk.pool_in_shape, &blk.pooled_from, &g);
            let g_pre = ops::relu_backward(&blk.pre_relu, &g_act);
            let cg = ops::conv2d_backward(&blk.input, self.p(&conv_weight(i)), &g_pre)?;
            grads.insert(conv_weight(i), cg.k);
            grads.insert(conv_bias(i), cg.b);
            g = cg.x;
        }
        Ok(grads)
    }

    pub fn heads(&self, h: &Tensor) -> Result<HeadOutput> {
        let logits = ops::dense(h, self.p(CLS_W), self.p(CLS_B))?;
        let proj = ops::dense(h, self.p(PROJ_W), self.p(PROJ_B))?;
        let (z, z_norms) = ops::l2_normalize(&proj)?;
        Ok(HeadOutput { logits, z, z_norms })
    }

    /// Backward through the heads. Returns `dL/dh` and the head parameter
    /// gradients; a `None` upstream gradient leaves that head untouched.
    pub fn heads_backward(
        &self,
        h: &Tensor,
        out: &HeadOutput,
        grad_logits: Option<&Tensor>,
        grad_z: Option<&Tensor>,
    ) -> Result<(Tensor, GradSet)> {
        let mut grad_h = Tensor::zeros(&h.shape);
        let mut grads = GradSet::new();
        if let Some(gl) = grad_logits {
            let g = ops::dense_backward(h, self.p(CLS_W), gl)?;
            grad_h.add_assign(&g.x);
            grads.insert(CLS_W.into(), g.w);
            grads.insert(CLS_B.into(), g.b);
        }
        if let Some(gz) = grad_z {
            let gp = ops::l2_normalize_backward(&out.z, &out.z_norms, gz);
            let g = ops::dense_backward(h, self.p(PROJ_W), &gp)?;
            grad_h.add_assign(&g.x);
            grads.insert(PROJ_W.into(), g.w);
            grads.insert(PROJ_B.into(), g.b);
        }
        Ok((grad_h, grads))
    }

    /// Encodes every input (in parallel; results keep input order) and
    /// evaluates both heads on the stacked representations.
    pub fn forward_batch(&self, inputs: &[Tensor]) -> Result<BatchForward> {
        if inputs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let caches: Vec<EncoderCache> = inputs.par_iter().map(|x| self.encode(x)).collect::<Result<_>>()?;
        let d = self.config.repr_dim;
        let mut h = Tensor::zeros(&[caches.len(), d]);
        for (r, c) in caches.iter().enumerate() {
            h.row_mut(r).copy_from_slice(&c.h.data);
        }
        let heads = self.heads(&h)?;
        Ok(BatchForward { caches, h, heads })
    }

    /// Full parameter gradients from upstream head gradients. Encoder
    /// backward runs only when `train_encoder`; otherwise encoder gradients
    /// are exactly zero.
    pub fn backward_batch(
        &self,
        fwd: &BatchForward,
        grad_logits: Option<&Tensor>,
        grad_z: Option<&Tensor>,
        train_encoder: bool,
    ) -> Result<GradSet> {
        let (grad_h, head_grads) = self.heads_backward(&fwd.h, &fwd.heads, grad_logits, grad_z)?;
        let mut total = zero_grads(&self.params);
        for (k, g) in head_grads {
            total.insert(k, g);
        }
        if train_encoder {
            let per_sample: Vec<GradSet> = fwd
                .caches
                .par_iter()
                .enumerate()
                .map(|(i, c)| self.encode_backward(c, grad_h.row(i)))
                .collect::<Result<_>>()?;
            // sequential sum in sample order keeps results thread-count independent
            for gs in &per_sample {
                for (k, g) in gs {
                    total.get_mut(k).expect("encoder grad for known param").add_assign(g);
                }
            }
        }
        Ok(total)
    }

    /// Representations `h` for a set of inputs, `[N×repr_dim]`.
    pub fn representations(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(self.forward_batch(inputs)?.h)
    }

    pub fn logits(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(self.forward_batch(inputs)?.heads.logits)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}
