//! Pixel decoder: deformable self-attention over the flattened stride-8/16/32
//! tokens, optional residual injection of the otherwise-unused fourth map,
//! and the high-resolution per-pixel embedding.

use super::{map_to_tokens, sincos_pos2d, tokens_to_map, Conv, Linear, ModelConfig, Norm};
use super::{FeaturePyramid, FusionPosition, FusionSource};
use crate::deform::{make_reference_points, DeformAttn, ReferencePoints};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};

pub(crate) struct EncoderLayer {
    pub attn: DeformAttn,
    norm1: Norm,
    ffn1: Linear,
    ffn2: Linear,
    norm2: Norm,
}

pub struct PixelDecoder {
    input_proj: [Conv; 3],
    level_embed: ParamId,
    fusion_proj: Conv,
    layers: Vec<EncoderLayer>,
    pix4: Conv,
    pix8: Conv,
}

pub struct EncodedFeatures<T: Elem> {
    /// Per level (stride 8, 16, 32): [H_l*W_l, d].
    pub memories: Vec<Tensor<T>>,
    pub level_shapes: Vec<(usize, usize)>,
    /// [d, H/4, W/4]
    pub pixel_embed: Tensor<T>,
    pub refs: ReferencePoints,
}

/// Residual injection of the projected extra map into one level's tokens:
/// tokens [H_l*W_l, d] += flatten(project(resize(extra, H_l x W_l))).
pub(crate) fn fuse_tokens<T: Elem>(
    store: &ParamStore<T>,
    proj: &Conv,
    extra: &Tensor<T>,
    tokens: &Tensor<T>,
    level_shape: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w) = level_shape;
    let resized = extra.resize_bilinear(h, w)?;
    let projected = proj.forward(store, &resized)?;
    let flat = map_to_tokens(&projected)?;
    if flat.shape() != tokens.shape() {
        return Err(Error::shapes("fuse_features", tokens.shape(), flat.shape()));
    }
    tokens.add(&flat)
}

impl PixelDecoder {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let [c4, c8, c16, c32] = cfg.channels;
        let input_proj = [
            Conv::build(store, rng, "encoder.proj8", c8, d, 1, 1, 0)?,
            Conv::build(store, rng, "encoder.proj16", c16, d, 1, 1, 0)?,
            Conv::build(store, rng, "encoder.proj32", c32, d, 1, 1, 0)?,
        ];
        let level_embed = store.register(
            "encoder.level_embed",
            &[3, d],
            crate::params::uniform_init(rng, 3 * d, 0.5),
        )?;
        // Registered regardless of position so every fusion variant shares
        // the same parameter order and init stream; position `none` bypasses
        // it in forward.
        let src_c = match cfg.fusion.source_level {
            FusionSource::Stride4 => c4,
            FusionSource::Stride32 => c32,
        };
        let fusion_proj = Conv::build(store, rng, "encoder.fusion_proj", src_c, d, 1, 1, 0)?;
        let mut layers = Vec::with_capacity(cfg.enc_layers);
        for i in 0..cfg.enc_layers {
            let p = format!("encoder.layer{i}");
            layers.push(EncoderLayer {
                attn: DeformAttn::build(store, rng, &format!("{p}.attn"), d, cfg.n_heads, 3, cfg.n_points)?,
                norm1: Norm::build(store, &format!("{p}.norm1"), d)?,
                ffn1: Linear::build(store, rng, &format!("{p}.ffn1"), d, cfg.ffn_hidden)?,
                ffn2: Linear::build(store, rng, &format!("{p}.ffn2"), cfg.ffn_hidden, d)?,
                norm2: Norm::build(store, &format!("{p}.norm2"), d)?,
            });
        }
        let pix4 = Conv::build(store, rng, "encoder.pix4", c4, d, 1, 1, 0)?;
        let pix8 = Conv::build(store, rng, "encoder.pix8", d, d, 1, 1, 0)?;
        Ok(PixelDecoder { input_proj, level_embed, fusion_proj, layers, pix4, pix8 })
    }

    pub fn forward<T: Elem>(
        &self,
        store: &ParamStore<T>,
        pyr: &FeaturePyramid<T>,
        cfg: &ModelConfig,
    ) -> Result<EncodedFeatures<T>> {
        let d = cfg.d_model;
        let level_shapes: Vec<(usize, usize)> = (0..3)
            .map(|l| {
                let m = pyr.maps[l + 1].shape();
                (m[1], m[2])
            })
            .collect();
        let refs = make_reference_points(&level_shapes)?;
        let extra = match cfg.fusion.source_level {
            FusionSource::Stride4 => &pyr.maps[0],
            FusionSource::Stride32 => &pyr.maps[3],
        };

        // Project, flatten, add positional and level features.
        let mut tokens_per_level = Vec::with_capacity(3);
        for l in 0..3 {
            let (h, w) = level_shapes[l];
            let projected = self.input_proj[l].forward(store, &pyr.maps[l + 1])?;
            let mut tokens = map_to_tokens(&projected)?;
            tokens = tokens.add(&sincos_pos2d(d, h, w))?;
            let lvl = store.get(self.level_embed).narrow(0, l, 1)?.reshape(&[d])?;
            tokens = tokens.add_bias(&lvl)?;
            if cfg.fusion.position == FusionPosition::Early {
                tokens = fuse_tokens(store, &self.fusion_proj, extra, &tokens, level_shapes[l])?;
            }
            tokens_per_level.push(tokens);
        }
        let mut x = Tensor::concat(&tokens_per_level, 0)?;

        let fuse_all = |store: &ParamStore<T>, x: &Tensor<T>| -> Result<Tensor<T>> {
            // Split, inject per level, re-concatenate.
            let mut parts = Vec::with_capacity(3);
            for (l, &(h, w)) in level_shapes.iter().enumerate() {
                let (start, end) = refs.level_ranges[l];
                let part = x.narrow(0, start, end - start)?;
                parts.push(fuse_tokens(store, &self.fusion_proj, extra, &part, (h, w))?);
            }
            Tensor::concat(&parts, 0)
        };

        // Pre-norm residual blocks: x += attn(norm(x)), x += ffn(norm(x)).
        for layer in &self.layers {
            let normed = layer.norm1.forward(store, &x)?;
            let value_tokens: Vec<Tensor<T>> = refs
                .level_ranges
                .iter()
                .map(|&(s, e)| normed.narrow(0, s, e - s))
                .collect::<Result<_>>()?;
            let attn =
                layer.attn.forward(store, &normed, &value_tokens, &refs, &level_shapes, &cfg.offset)?;
            x = x.add(&attn)?;
            if cfg.fusion.position == FusionPosition::Inside {
                x = fuse_all(store, &x)?;
            }
            let normed = layer.norm2.forward(store, &x)?;
            let ffn = layer.ffn2.forward(store, &layer.ffn1.forward(store, &normed)?.relu())?;
            x = x.add(&ffn)?;
        }
        if cfg.fusion.position == FusionPosition::Late {
            x = fuse_all(store, &x)?;
        }

        let memories: Vec<Tensor<T>> = refs
            .level_ranges
            .iter()
            .map(|&(s, e)| x.narrow(0, s, e - s))
            .collect::<Result<_>>()?;

        // pixel_embed = proj(stride-4 map) + upsampled proj(stride-8 memory map)
        let (h8, w8) = level_shapes[0];
        let (h4, w4) = (pyr.maps[0].shape()[1], pyr.maps[0].shape()[2]);
        let mem8 = tokens_to_map(&memories[0], h8, w8)?;
        let up = self.pix8.forward(store, &mem8)?.resize_bilinear(h4, w4)?;
        let pixel_embed = self.pix4.forward(store, &pyr.maps[0])?.add(&up)?;

        Ok(EncodedFeatures { memories, level_shapes, pixel_embed, refs })
    }
}
