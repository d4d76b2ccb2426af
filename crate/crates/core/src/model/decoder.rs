//! Query decoder: masked cross-attention onto the encoder memories,
//! round-robin over the three levels, with per-layer class/mask predictions,
//! plus the auxiliary dense heads.

use super::{Conv, Linear, ModelConfig, Norm};
use super::{BlsMode, FeaturePyramid, PredictionSet};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};

// ── Standard multi-head attention ───────────────────────────────────

pub struct MultiHeadAttention {
    pub n_heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            n_heads,
            q: Linear::build(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::build(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::build(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::build(store, rng, &format!("{name}.o"), d, d)?,
        })
    }

    /// queries [Q,d] attend over keys/values [N,d]. `blocked`, when given,
    /// marks (query, position) pairs whose logits are forced to -inf; rows
    /// with every position blocked fall back to full attention.
    pub fn forward<T: Elem>(
        &self,
        store: &ParamStore<T>,
        queries: &Tensor<T>,
        keys_in: &Tensor<T>,
        values_in: &Tensor<T>,
        blocked: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        let d = queries.shape()[1];
        let nq = queries.shape()[0];
        let nk = keys_in.shape()[0];
        let head_dim = d / self.n_heads;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());

        let bias = blocked.map(|b| mask_bias::<T>(b, nq, nk));
        let q = self.q.forward(store, queries)?;
        let k = self.k.forward(store, keys_in)?;
        let v = self.v.forward(store, values_in)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.narrow(1, h * head_dim, head_dim)?;
            let kh = k.narrow(1, h * head_dim, head_dim)?;
            let vh = v.narrow(1, h * head_dim, head_dim)?;
            let mut logits = qh.matmul(&kh.transpose2d()?)?.mul_scalar(scale);
            if let Some(b) = &bias {
                logits = logits.add(b)?;
            }
            let attn = logits.softmax(1)?;
            heads.push(attn.matmul(&vh)?);
        }
        self.o.forward(store, &Tensor::concat(&heads, 1)?)
    }
}

fn mask_bias<T: Elem>(blocked: &[bool], nq: usize, nk: usize) -> Tensor<T> {
    let neg_inf = T::from_f64(f64::NEG_INFINITY);
    let mut data = vec![T::ZERO; nq * nk];
    for qi in 0..nq {
        let row = &blocked[qi * nk..(qi + 1) * nk];
        if row.iter().all(|&b| b) {
            continue; // empty admissible set: full attention fallback
        }
        for (j, &b) in row.iter().enumerate() {
            if b {
                data[qi * nk + j] = neg_inf;
            }
        }
    }
    Tensor::untracked(vec![nq, nk], data)
}

/// Cross-attention restricted to the foreground of the previous mask
/// prediction: positions with probability below 1/2 are excluded before the
/// softmax; a query with no admissible position attends everywhere.
pub fn masked_cross_attention<T: Elem>(
    attn: &MultiHeadAttention,
    store: &ParamStore<T>,
    queries: &Tensor<T>,
    tokens: &Tensor<T>,
    mask_prev: &Tensor<T>,
) -> Result<Tensor<T>> {
    let nq = queries.shape()[0];
    let nk = tokens.shape()[0];
    if mask_prev.numel() != nq * nk {
        return Err(Error::shapes("masked_cross_attention", mask_prev.shape(), &[nq, nk]));
    }
    let half = T::from_f64(0.5);
    let blocked: Vec<bool> = mask_prev.data().iter().map(|&p| p < half).collect();
    attn.forward(store, queries, tokens, tokens, Some(&blocked))
}

// ── Decoder ─────────────────────────────────────────────────────────

struct DecoderLayer {
    cross: MultiHeadAttention,
    norm1: Norm,
    self_attn: MultiHeadAttention,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm3: Norm,
}

pub struct QueryDecoder {
    query_feat: ParamId,
    query_pos: ParamId,
    layers: Vec<DecoderLayer>,
    out_norm: Norm,
    class_head: Linear,
    mask_mlp: [Linear; 3],
}

impl QueryDecoder {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let q = cfg.n_queries;
        let query_feat =
            store.register("decoder.query_feat", &[q, d], crate::params::uniform_init(rng, q * d, 0.5))?;
        let query_pos =
            store.register("decoder.query_pos", &[q, d], crate::params::uniform_init(rng, q * d, 0.5))?;
        let mut layers = Vec::with_capacity(cfg.dec_layers());
        for i in 0..cfg.dec_layers() {
            let p = format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                cross: MultiHeadAttention::build(store, rng, &format!("{p}.cross"), d, cfg.n_heads)?,
                norm1: Norm::build(store, &format!("{p}.norm1"), d)?,
                self_attn: MultiHeadAttention::build(store, rng, &format!("{p}.self"), d, cfg.n_heads)?,
                norm2: Norm::build(store, &format!("{p}.norm2"), d)?,
                ffn1: Linear::build(store, rng, &format!("{p}.ffn1"), d, cfg.ffn_hidden)?,
                ffn2: Linear::build(store, rng, &format!("{p}.ffn2"), cfg.ffn_hidden, d)?,
                norm3: Norm::build(store, &format!("{p}.norm3"), d)?,
            });
        }
        Ok(QueryDecoder {
            query_feat,
            query_pos,
            layers,
            out_norm: Norm::build(store, "decoder.out_norm", d)?,
            class_head: Linear::build(store, rng, "decoder.class_head", d, cfg.n_classes + 1)?,
            mask_mlp: [
                Linear::build(store, rng, "decoder.mask_mlp.0", d, d)?,
                Linear::build(store, rng, "decoder.mask_mlp.1", d, d)?,
                Linear::build(store, rng, "decoder.mask_mlp.2", d, d)?,
            ],
        })
    }

    fn predict<T: Elem>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        pixel_flat: &Tensor<T>,
        h4: usize,
        w4: usize,
    ) -> Result<PredictionSet<T>> {
        let normed = self.out_norm.forward(store, x)?;
        let class_logits = self.class_head.forward(store, &normed)?;
        let mut embed = normed;
        for (i, lin) in self.mask_mlp.iter().enumerate() {
            embed = lin.forward(store, &embed)?;
            if i + 1 < self.mask_mlp.len() {
                embed = embed.relu();
            }
        }
        let q = embed.shape()[0];
        let mask_logits = embed.matmul(pixel_flat)?.reshape(&[q, h4, w4])?;
        Ok(PredictionSet { class_logits, mask_logits })
    }

    /// Round-robin over levels coarse→fine; each layer sees the previous
    /// prediction's thresholded mask (detached) as its attention mask.
    pub fn forward<T: Elem>(
        &self,
        store: &ParamStore<T>,
        memories: &[Tensor<T>],
        level_shapes: &[(usize, usize)],
        pixel_embed: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<Vec<PredictionSet<T>>> {
        let (h4, w4) = (pixel_embed.shape()[1], pixel_embed.shape()[2]);
        let d = cfg.d_model;
        let pixel_flat = pixel_embed.reshape(&[d, h4 * w4])?;
        let qpos = store.get(self.query_pos);

        let mut x = store.get(self.query_feat).clone();
        let mut sets = vec![self.predict(store, &x, &pixel_flat, h4, w4)?];

        for (i, layer) in self.layers.iter().enumerate() {
            let level = 2 - (i % 3); // stride 32 → 16 → 8, repeated
            let (h_l, w_l) = level_shapes[level];
            let prev = sets.last().expect("initial set present");
            let mask_prob = prev
                .mask_logits
                .detach()
                .resize_bilinear(h_l, w_l)?
                .sigmoid();

            // Pre-norm residual blocks.
            let normed = layer.norm1.forward(store, &x)?;
            let q_in = normed.add(qpos)?;
            let ca = masked_cross_attention(&layer.cross, store, &q_in, &memories[level], &mask_prob)?;
            x = x.add(&ca)?;

            let normed = layer.norm2.forward(store, &x)?;
            let q_sa = normed.add(qpos)?;
            let sa = layer.self_attn.forward(store, &q_sa, &q_sa, &normed, None)?;
            x = x.add(&sa)?;

            let normed = layer.norm3.forward(store, &x)?;
            let ffn = layer.ffn2.forward(store, &layer.ffn1.forward(store, &normed)?.relu())?;
            x = x.add(&ffn)?;

            sets.push(self.predict(store, &x, &pixel_flat, h4, w4)?);
        }
        Ok(sets)
    }
}

// ── Auxiliary dense heads ───────────────────────────────────────────

/// Two coarse-location heads: head A is a small FCN over the stride-8
/// backbone map emitting (C+1)-class logits; head B is a 1x1 readout of the
/// pixel embedding emitting a single foreground-vs-background logit map.
/// Both are bilinearly upsampled to the input resolution.
pub struct BlsHeads {
    a_conv1: Conv,
    a_conv2: Conv,
    a_out: Conv,
    b_out: Conv,
}

impl BlsHeads {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c8 = cfg.channels[1];
        Ok(BlsHeads {
            a_conv1: Conv::build(store, rng, "bls.a.conv1", c8, c8, 3, 1, 1)?,
            a_conv2: Conv::build(store, rng, "bls.a.conv2", c8, c8, 3, 1, 1)?,
            a_out: Conv::build(store, rng, "bls.a.out", c8, cfg.n_classes + 1, 1, 1, 0)?,
            b_out: Conv::build(store, rng, "bls.b.out", cfg.d_model, 1, 1, 1, 0)?,
        })
    }

    pub fn forward<T: Elem>(
        &self,
        store: &ParamStore<T>,
        pyr: &FeaturePyramid<T>,
        pixel_embed: &Tensor<T>,
        mode: BlsMode,
        height: usize,
        width: usize,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        if mode == BlsMode::Off {
            return Ok((None, None));
        }
        let bls_b = self
            .b_out
            .forward(store, pixel_embed)?
            .resize_bilinear(height, width)?;
        let bls_a = if mode == BlsMode::Two {
            let x = self.a_conv1.forward(store, &pyr.maps[1])?.relu();
            let x = self.a_conv2.forward(store, &x)?.relu();
            Some(self.a_out.forward(store, &x)?.resize_bilinear(height, width)?)
        } else {
            None
        };
        Ok((bls_a, Some(bls_b)))
    }
}
