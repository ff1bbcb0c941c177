//! The denoiser: a stack of transformer blocks over a patch-size-1 grid, each
//! with self-attention over positions and cross-attention onto the prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, NormCache};
use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One head-pooled cross-attention map per block.
type Maps<T> = Vec<AttentionTensor<T>>;
type Run<T> = (Tensor<T>, Maps<T>, Option<ForwardCache<T>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Hidden width of the feed-forward layer as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    /// Rows in the learned timestep table; must cover the schedule length.
    pub num_timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            num_heads: 4,
            height: 16,
            width: 16,
            channels: 3,
            vocab_size: 16,
            max_text_len: 16,
            mlp_ratio: 2,
            num_timesteps: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("grid and channels must be non-zero".into());
        }
        if self.vocab_size == 0 || self.max_text_len == 0 || self.num_timesteps == 0 || self.mlp_ratio == 0 {
            return bad("vocab_size, max_text_len, num_timesteps and mlp_ratio must be non-zero".into());
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm_self: Norm<T>,
    pub self_q: Linear<T>,
    pub self_k: Linear<T>,
    pub self_v: Linear<T>,
    pub self_out: Linear<T>,
    pub norm_cross: Norm<T>,
    pub cross_q: Linear<T>,
    pub cross_k: Linear<T>,
    pub cross_v: Linear<T>,
    pub cross_out: Linear<T>,
    pub norm_mlp: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

/// Every trainable tensor. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub patch_in: Linear<T>,
    pub pos_embed: Tensor<T>,
    pub time_embed: Tensor<T>,
    pub token_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm_out: Norm<T>,
    pub patch_out: Linear<T>,
}

macro_rules! for_each_tensor {
    ($params:expr, $f:expr, $($ref:tt)*) => {{
        let p = $params;
        let mut f = $f;
        f("patch_in.weight".to_string(), $($ref)* p.patch_in.weight);
        f("patch_in.bias".to_string(), $($ref)* p.patch_in.bias);
        f("pos_embed".to_string(), $($ref)* p.pos_embed);
        f("time_embed".to_string(), $($ref)* p.time_embed);
        f("token_embed".to_string(), $($ref)* p.token_embed);
        for (i, b) in ($($ref)* p.blocks).into_iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            f(n("norm_self.gain"), $($ref)* b.norm_self.gain);
            f(n("norm_self.bias"), $($ref)* b.norm_self.bias);
            f(n("self_q.weight"), $($ref)* b.self_q.weight);
            f(n("self_q.bias"), $($ref)* b.self_q.bias);
            f(n("self_k.weight"), $($ref)* b.self_k.weight);
            f(n("self_k.bias"), $($ref)* b.self_k.bias);
            f(n("self_v.weight"), $($ref)* b.self_v.weight);
            f(n("self_v.bias"), $($ref)* b.self_v.bias);
            f(n("self_out.weight"), $($ref)* b.self_out.weight);
            f(n("self_out.bias"), $($ref)* b.self_out.bias);
            f(n("norm_cross.gain"), $($ref)* b.norm_cross.gain);
            f(n("norm_cross.bias"), $($ref)* b.norm_cross.bias);
            f(n("cross_q.weight"), $($ref)* b.cross_q.weight);
            f(n("cross_q.bias"), $($ref)* b.cross_q.bias);
            f(n("cross_k.weight"), $($ref)* b.cross_k.weight);
            f(n("cross_k.bias"), $($ref)* b.cross_k.bias);
            f(n("cross_v.weight"), $($ref)* b.cross_v.weight);
            f(n("cross_v.bias"), $($ref)* b.cross_v.bias);
            f(n("cross_out.weight"), $($ref)* b.cross_out.weight);
            f(n("cross_out.bias"), $($ref)* b.cross_out.bias);
            f(n("norm_mlp.gain"), $($ref)* b.norm_mlp.gain);
            f(n("norm_mlp.bias"), $($ref)* b.norm_mlp.bias);
            f(n("mlp_in.weight"), $($ref)* b.mlp_in.weight);
            f(n("mlp_in.bias"), $($ref)* b.mlp_in.bias);
            f(n("mlp_out.weight"), $($ref)* b.mlp_out.weight);
            f(n("mlp_out.bias"), $($ref)* b.mlp_out.bias);
        }
        f("norm_out.gain".to_string(), $($ref)* p.norm_out.gain);
        f("norm_out.bias".to_string(), $($ref)* p.norm_out.bias);
        f("patch_out.weight".to_string(), $($ref)* p.patch_out.weight);
        f("patch_out.bias".to_string(), $($ref)* p.patch_out.bias);
    }};
}

impl<T: Scalar> Params<T> {
    /// Tensors paired with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for_each_tensor!(self, |name, t| out.push((name, t)), &);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for_each_tensor!(self, |_, t| out.push(t), &mut);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            gain: n.gain.cast(),
            bias: n.bias.cast(),
        };
        Params {
            patch_in: lin(&self.patch_in),
            pos_embed: self.pos_embed.cast(),
            time_embed: self.time_embed.cast(),
            token_embed: self.token_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm_self: norm(&b.norm_self),
                    self_q: lin(&b.self_q),
                    self_k: lin(&b.self_k),
                    self_v: lin(&b.self_v),
                    self_out: lin(&b.self_out),
                    norm_cross: norm(&b.norm_cross),
                    cross_q: lin(&b.cross_q),
                    cross_k: lin(&b.cross_k),
                    cross_v: lin(&b.cross_v),
                    cross_out: lin(&b.cross_out),
                    norm_mlp: norm(&b.norm_mlp),
                    mlp_in: lin(&b.mlp_in),
                    mlp_out: lin(&b.mlp_out),
                })
                .collect(),
            norm_out: norm(&self.norm_out),
            patch_out: lin(&self.patch_out),
        }
    }
}

/// Prompt tokens and their embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T = f32> {
    pub tokens: Vec<usize>,
    pub vectors: Tensor<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lets a caller inspect and replace each block's head-pooled cross-attention
/// map before it weights the values.
pub trait AttentionHook<T: Scalar> {
    /// `None` keeps the map as computed.
    fn on_cross_attention(&mut self, map: &AttentionTensor<T>) -> Result<Option<AttentionTensor<T>>>;
}

impl<T: Scalar, F> AttentionHook<T> for F
where
    F: FnMut(&AttentionTensor<T>) -> Result<Option<AttentionTensor<T>>>,
{
    fn on_cross_attention(&mut self, map: &AttentionTensor<T>) -> Result<Option<AttentionTensor<T>>> {
        self(map)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

pub(crate) struct BlockCache<T> {
    norm_self: NormCache<T>,
    a: Vec<T>,
    sq: Vec<T>,
    sk: Vec<T>,
    sv: Vec<T>,
    self_probs: Vec<T>,
    self_mix: Vec<T>,
    norm_cross: NormCache<T>,
    b: Vec<T>,
    cq: Vec<T>,
    ck: Vec<T>,
    cv: Vec<T>,
    cross_probs: Vec<T>,
    cross_mix: Vec<T>,
    norm_mlp: NormCache<T>,
    c: Vec<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

/// Activations recorded by a training forward pass.
pub(crate) struct ForwardCache<T> {
    timestep: usize,
    input: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm_out: NormCache<T>,
    y: Vec<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut gauss = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape.to_vec(), |_| T::narrow(dist.sample(&mut rng)))
        };
        let mut linear = |din: usize, dout: usize, gain: f64| Linear {
            weight: gauss(&[din, dout], gain / (din as f64).sqrt()),
            bias: Tensor::zeros([dout]),
        };
        let norm = |width: usize| Norm {
            gain: Tensor::filled([width], T::one()),
            bias: Tensor::zeros([width]),
        };
        let patch_in = linear(config.channels, d, 1.0);
        let residual_gain = 1.0 / (2.0 * config.num_blocks as f64).sqrt();
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                norm_self: norm(d),
                self_q: linear(d, d, 1.0),
                self_k: linear(d, d, 1.0),
                self_v: linear(d, d, 1.0),
                self_out: linear(d, d, residual_gain),
                norm_cross: norm(d),
                cross_q: linear(d, d, 1.0),
                cross_k: linear(d, d, 1.0),
                cross_v: linear(d, d, 1.0),
                cross_out: linear(d, d, residual_gain),
                norm_mlp: norm(d),
                mlp_in: linear(d, config.mlp_dim(), 1.0),
                mlp_out: linear(config.mlp_dim(), d, residual_gain),
            })
            .collect();
        let patch_out = linear(d, config.channels, 0.1);
        let pos_embed = grid_sincos(config.height, config.width, d);
        let time_embed = sincos_table(config.num_timesteps, d);
        let token_embed = gauss(&[config.vocab_size, d], 1.0);
        Ok(Self {
            params: Params {
                patch_in,
                pos_embed,
                time_embed,
                token_embed,
                blocks,
                norm_out: norm(d),
                patch_out,
            },
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Looks up the prompt's embedding rows. Word order does not matter to the
    /// model: there is no positional encoding on the text side.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<TextEmbedding<T>> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt has no tokens"));
        }
        if tokens.len() > self.config.max_text_len {
            return Err(Error::Invalid(format!(
                "prompt has {} tokens, max is {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id >= self.config.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(&self.params.token_embed.data()[id * d..(id + 1) * d]);
        }
        Ok(TextEmbedding {
            tokens: tokens.to_vec(),
            vectors: Tensor::new([tokens.len(), d], data)?,
        })
    }

    /// Predicts the noise in `z` (shape `(h, w, channels)`) at timestep index
    /// `timestep`, returning one head-pooled cross-attention map per block.
    ///
    /// With a hook, each block's pooled map is handed to the hook before it
    /// weights the values; a replacement is pushed back into every head by
    /// rescaling each head's entry by the same factor, so the head mean equals
    /// the replacement. The returned maps are the ones the blocks computed,
    /// before any replacement.
    pub fn forward(
        &self,
        z: &Tensor<T>,
        timestep: usize,
        text: &TextEmbedding<T>,
        hook: Option<&mut dyn AttentionHook<T>>,
    ) -> Result<(Tensor<T>, Vec<AttentionTensor<T>>)> {
        let (eps, maps, _) = self.run(z, timestep, text, hook, false)?;
        Ok((eps, maps))
    }

    pub(crate) fn forward_cached(
        &self,
        z: &Tensor<T>,
        timestep: usize,
        text: &TextEmbedding<T>,
    ) -> Result<(Tensor<T>, Maps<T>, ForwardCache<T>)> {
        let (eps, maps, cache) = self.run(z, timestep, text, None, true)?;
        Ok((eps, maps, cache.expect("cache requested")))
    }

    fn check_inputs(&self, z: &Tensor<T>, timestep: usize, text: &TextEmbedding<T>) -> Result<()> {
        let c = &self.config;
        let expected = [c.height, c.width, c.channels];
        if z.shape() != expected {
            return Err(Error::shape("noisy input vs model grid", z.shape(), &expected));
        }
        if timestep >= c.num_timesteps {
            return Err(Error::Invalid(format!(
                "timestep {timestep} outside [0, {})",
                c.num_timesteps
            )));
        }
        if text.vectors.shape() != [text.tokens.len(), c.embed_dim] || text.is_empty() {
            return Err(Error::shape(
                "text embedding",
                text.vectors.shape(),
                &[text.tokens.len(), c.embed_dim],
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        z: &Tensor<T>,
        timestep: usize,
        text: &TextEmbedding<T>,
        mut hook: Option<&mut dyn AttentionHook<T>>,
        record: bool,
    ) -> Result<Run<T>> {
        self.check_inputs(z, timestep, text)?;
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, heads, l) = (cfg.positions(), cfg.embed_dim, cfg.num_heads, text.len());

        let mut x = layers::linear(z.data(), &p.patch_in.weight, &p.patch_in.bias, n);
        let temb = &p.time_embed.data()[timestep * d..(timestep + 1) * d];
        for (row, pos) in x.chunks_mut(d).zip(p.pos_embed.data().chunks(d)) {
            for ((v, &pe), &te) in row.iter_mut().zip(pos).zip(temb) {
                *v += pe + te;
            }
        }

        let mut maps = Vec::with_capacity(cfg.num_blocks);
        let mut block_caches = Vec::new();
        for (layer, blk) in p.blocks.iter().enumerate() {
            let (a, norm_self) = layers::layer_norm(&x, &blk.norm_self.gain, &blk.norm_self.bias, d);
            let sq = layers::linear(&a, &blk.self_q.weight, &blk.self_q.bias, n);
            let sk = layers::linear(&a, &blk.self_k.weight, &blk.self_k.bias, n);
            let sv = layers::linear(&a, &blk.self_v.weight, &blk.self_v.bias, n);
            let self_probs = layers::attention_probs(&sq, &sk, n, n, d, heads);
            let self_mix = layers::attention_apply(&self_probs, &sv, n, n, d, heads);
            let out = layers::linear(&self_mix, &blk.self_out.weight, &blk.self_out.bias, n);
            layers::add_in_place(&mut x, &out);

            let (b, norm_cross) = layers::layer_norm(&x, &blk.norm_cross.gain, &blk.norm_cross.bias, d);
            let cq = layers::linear(&b, &blk.cross_q.weight, &blk.cross_q.bias, n);
            let ck = layers::linear(text.vectors.data(), &blk.cross_k.weight, &blk.cross_k.bias, l);
            let cv = layers::linear(text.vectors.data(), &blk.cross_v.weight, &blk.cross_v.bias, l);
            let mut cross_probs = layers::attention_probs(&cq, &ck, n, l, d, heads);
            let pooled = pool_heads(&cross_probs, n, l, heads);
            let map = AttentionTensor::from_rows(timestep, layer, cfg.height, cfg.width, l, pooled)?;
            if let Some(h) = hook.as_deref_mut() {
                if let Some(replacement) = h.on_cross_attention(&map)? {
                    if replacement.dims() != map.dims() {
                        return Err(Error::shape(
                            "hook returned a map of a different shape",
                            &replacement.dims(),
                            &map.dims(),
                        ));
                    }
                    broadcast_to_heads(&mut cross_probs, map.rows(), replacement.rows(), n, l, heads);
                }
            }
            maps.push(map);
            let cross_mix = layers::attention_apply(&cross_probs, &cv, n, l, d, heads);
            let out = layers::linear(&cross_mix, &blk.cross_out.weight, &blk.cross_out.bias, n);
            layers::add_in_place(&mut x, &out);

            let (c, norm_mlp) = layers::layer_norm(&x, &blk.norm_mlp.gain, &blk.norm_mlp.bias, d);
            let pre_act = layers::linear(&c, &blk.mlp_in.weight, &blk.mlp_in.bias, n);
            let act = layers::gelu(&pre_act);
            let out = layers::linear(&act, &blk.mlp_out.weight, &blk.mlp_out.bias, n);
            layers::add_in_place(&mut x, &out);

            if record {
                block_caches.push(BlockCache {
                    norm_self,
                    a,
                    sq,
                    sk,
                    sv,
                    self_probs,
                    self_mix,
                    norm_cross,
                    b,
                    cq,
                    ck,
                    cv,
                    cross_probs,
                    cross_mix,
                    norm_mlp,
                    c,
                    pre_act,
                    act,
                });
            }
        }

        let (y, norm_out) = layers::layer_norm(&x, &p.norm_out.gain, &p.norm_out.bias, d);
        let eps = layers::linear(&y, &p.patch_out.weight, &p.patch_out.bias, n);
        let eps = Tensor::new([cfg.height, cfg.width, cfg.channels], eps)?;
        eps.ensure_finite()?;
        let cache = record.then(|| ForwardCache {
            timestep,
            input: z.data().to_vec(),
            blocks: block_caches,
            norm_out,
            y,
        });
        Ok((eps, maps, cache))
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// predicted noise and, optionally, to each block's head-pooled
    /// cross-attention map (`(n, L)` row-major per block); accumulated into
    /// `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache<T>,
        text: &TextEmbedding<T>,
        grad_eps: &[T],
        grad_maps: Option<&[Vec<f64>]>,
        grads: &mut Params<T>,
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d, heads, l) = (cfg.positions(), cfg.embed_dim, cfg.num_heads, text.len());

        let dy = layers::linear_backward(
            &cache.y,
            &p.patch_out.weight,
            grad_eps,
            n,
            &mut grads.patch_out.weight,
            &mut grads.patch_out.bias,
        );
        let mut dx = layers::layer_norm_backward(
            &cache.norm_out,
            &p.norm_out.gain,
            &dy,
            d,
            &mut grads.norm_out.gain,
            &mut grads.norm_out.bias,
        );
        let mut d_text = vec![T::zero(); l * d];

        for (layer, blk) in p.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[layer];
            let g = &mut grads.blocks[layer];

            let d_act = layers::linear_backward(
                &bc.act,
                &blk.mlp_out.weight,
                &dx,
                n,
                &mut g.mlp_out.weight,
                &mut g.mlp_out.bias,
            );
            let d_pre = layers::gelu_backward(&bc.pre_act, &d_act);
            let d_c = layers::linear_backward(
                &bc.c,
                &blk.mlp_in.weight,
                &d_pre,
                n,
                &mut g.mlp_in.weight,
                &mut g.mlp_in.bias,
            );
            let d_norm = layers::layer_norm_backward(
                &bc.norm_mlp,
                &blk.norm_mlp.gain,
                &d_c,
                d,
                &mut g.norm_mlp.gain,
                &mut g.norm_mlp.bias,
            );
            layers::add_in_place(&mut dx, &d_norm);

            let d_mix = layers::linear_backward(
                &bc.cross_mix,
                &blk.cross_out.weight,
                &dx,
                n,
                &mut g.cross_out.weight,
                &mut g.cross_out.bias,
            );
            let (dq, dk, dv) = layers::attention_backward(
                &bc.cq,
                &bc.ck,
                &bc.cv,
                &bc.cross_probs,
                &d_mix,
                grad_maps.map(|g| g[layer].as_slice()),
                n,
                l,
                d,
                heads,
            );
            let d_b = layers::linear_backward(
                &bc.b,
                &blk.cross_q.weight,
                &dq,
                n,
                &mut g.cross_q.weight,
                &mut g.cross_q.bias,
            );
            let dt_k = layers::linear_backward(
                text.vectors.data(),
                &blk.cross_k.weight,
                &dk,
                l,
                &mut g.cross_k.weight,
                &mut g.cross_k.bias,
            );
            let dt_v = layers::linear_backward(
                text.vectors.data(),
                &blk.cross_v.weight,
                &dv,
                l,
                &mut g.cross_v.weight,
                &mut g.cross_v.bias,
            );
            layers::add_in_place(&mut d_text, &dt_k);
            layers::add_in_place(&mut d_text, &dt_v);
            let d_norm = layers::layer_norm_backward(
                &bc.norm_cross,
                &blk.norm_cross.gain,
                &d_b,
                d,
                &mut g.norm_cross.gain,
                &mut g.norm_cross.bias,
            );
            layers::add_in_place(&mut dx, &d_norm);

            let d_mix = layers::linear_backward(
                &bc.self_mix,
                &blk.self_out.weight,
                &dx,
                n,
                &mut g.self_out.weight,
                &mut g.self_out.bias,
            );
            let (dq, dk, dv) =
                layers::attention_backward(&bc.sq, &bc.sk, &bc.sv, &bc.self_probs, &d_mix, None, n, n, d, heads);
            let mut d_a = layers::linear_backward(
                &bc.a,
                &blk.self_q.weight,
                &dq,
                n,
                &mut g.self_q.weight,
                &mut g.self_q.bias,
            );
            let d_ak = layers::linear_backward(
                &bc.a,
                &blk.self_k.weight,
                &dk,
                n,
                &mut g.self_k.weight,
                &mut g.self_k.bias,
            );
            let d_av = layers::linear_backward(
                &bc.a,
                &blk.self_v.weight,
                &dv,
                n,
                &mut g.self_v.weight,
                &mut g.self_v.bias,
            );
            layers::add_in_place(&mut d_a, &d_ak);
            layers::add_in_place(&mut d_a, &d_av);
            let d_norm = layers::layer_norm_backward(
                &bc.norm_self,
                &blk.norm_self.gain,
                &d_a,
                d,
                &mut g.norm_self.gain,
                &mut g.norm_self.bias,
            );
            layers::add_in_place(&mut dx, &d_norm);
        }

        // x0 = z·W + b + pos + time[t]
        let _ = layers::linear_backward(
            &cache.input,
            &p.patch_in.weight,
            &dx,
            n,
            &mut grads.patch_in.weight,
            &mut grads.patch_in.bias,
        );
        layers::add_in_place(grads.pos_embed.data_mut(), &dx);
        let t_row = &mut grads.time_embed.data_mut()[cache.timestep * d..(cache.timestep + 1) * d];
        for row in dx.chunks(d) {
            layers::add_in_place(t_row, row);
        }
        for (j, &id) in text.tokens.iter().enumerate() {
            let dst = &mut grads.token_embed.data_mut()[id * d..(id + 1) * d];
            layers::add_in_place(dst, &d_text[j * d..(j + 1) * d]);
        }
    }
}

/// Mean over heads of `[head][pos][token]` probabilities, giving `(pos, token)`.
fn pool_heads<T: Scalar>(probs: &[T], n: usize, l: usize, heads: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; n * l];
    for head in probs.chunks(n * l) {
        for (a, &v) in acc.iter_mut().zip(head) {
            *a += v.widen();
        }
    }
    acc.into_iter().map(|a| T::narrow(a / heads as f64)).collect()
}

/// Sine/cosine features of `0..rows` over `width` channels, geometric
/// frequencies from 1 down to 1/10000.
fn sincos(position: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half.max(1) as f64);
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    out
}

fn sincos_table<T: Scalar>(rows: usize, width: usize) -> Tensor<T> {
    let data = (0..rows).flat_map(|r| sincos(r as f64, width)).map(T::narrow).collect();
    Tensor::new([rows, width], data).expect("rows·width values")
}

/// Half the channels encode the row, half the column. Starting point only;
/// the table is trained like any other weight.
fn grid_sincos<T: Scalar>(height: usize, width: usize, d: usize) -> Tensor<T> {
    let (dy, dx) = (d / 2, d - d / 2);
    let mut data = Vec::with_capacity(height * width * d);
    for y in 0..height {
        for x in 0..width {
            data.extend(
                sincos(y as f64, dy)
                    .into_iter()
                    .chain(sincos(x as f64, dx))
                    .map(T::narrow),
            );
        }
    }
    Tensor::new([height * width, d], data).expect("grid·d values")
}

/// Pushes a replaced pooled map back into the per-head probabilities. Entries
/// the replacement left bit-identical are not touched.
fn broadcast_to_heads<T: Scalar>(probs: &mut [T], pooled: &[T], replacement: &[T], n: usize, l: usize, heads: usize) {
    for (idx, (&old, &new)) in pooled.iter().zip(replacement).enumerate() {
        if old.to_bits_eq(new) {
            continue;
        }
        if old == T::zero() {
            // Every head is zero here; the mean can only become `new` if each head does.
            for h in 0..heads {
                probs[h * n * l + idx] = new;
            }
        } else {
            let factor = new.widen() / old.widen();
            for h in 0..heads {
                let v = &mut probs[h * n * l + idx];
                *v = T::narrow(v.widen() * factor);
            }
        }
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Values are finite; equal with matching sign covers bit equality.
        self == other && self.is_sign_negative() == other.is_sign_negative()
    }
}
