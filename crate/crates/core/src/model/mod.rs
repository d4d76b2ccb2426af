//! End-to-end segmentation network: CNN backbone over strides 4/8/16/32, a
//! deformable-attention encoder over the three coarse levels with optional
//! fourth-map fusion, a masked-attention query decoder with per-layer
//! class/mask predictions, and optional auxiliary dense heads.

mod backbone;
mod decoder;
mod encoder;

pub use backbone::{Backbone, FeaturePyramid};
pub use decoder::{masked_cross_attention, BlsHeads, MultiHeadAttention, QueryDecoder};
pub use encoder::PixelDecoder;

use crate::deform::OffsetAdjustConfig;
use crate::error::{Error, Result};
use crate::params::{fan_in_init, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

// ── Configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPosition {
    None,
    Early,
    Inside,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    Stride4,
    Stride32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub position: FusionPosition,
    pub source_level: FusionSource,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { position: FusionPosition::None, source_level: FusionSource::Stride4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlsMode {
    Off,
    One,
    Two,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub enc_layers: usize,
    /// Decoder rounds; each round visits the three encoder levels.
    pub dec_rounds: usize,
    pub n_queries: usize,
    /// Foreground classes; the class head adds one no-object slot.
    pub n_classes: usize,
    /// Backbone channels at strides 4/8/16/32.
    pub channels: [usize; 4],
    pub ffn_hidden: usize,
    pub offset: OffsetAdjustConfig,
    pub fusion: FusionConfig,
    pub bls_mode: BlsMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_points: 4,
            enc_layers: 3,
            dec_rounds: 3,
            n_queries: 20,
            n_classes: 6,
            channels: [16, 32, 64, 96],
            ffn_hidden: 128,
            offset: OffsetAdjustConfig::default(),
            fusion: FusionConfig::default(),
            bls_mode: BlsMode::Off,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for 2-d positional features".into()));
        }
        if self.n_queries == 0 || self.n_classes == 0 {
            return Err(Error::Config("need n_queries >= 1 and n_classes >= 1".into()));
        }
        if self.n_points == 0 || self.enc_layers == 0 || self.dec_rounds == 0 {
            return Err(Error::Config("need n_points, enc_layers, dec_rounds >= 1".into()));
        }
        self.offset.validate()
    }

    pub fn dec_layers(&self) -> usize {
        self.dec_rounds * 3
    }
}

// ── Shared layer helpers ────────────────────────────────────────────

pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), &[d_in, d_out], fan_in_init(rng, d_in * d_out, d_in))?;
        let b = store.register(&format!("{name}.b"), &[d_out], fan_in_init(rng, d_out, d_in))?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Elem>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(store.get(self.w))?.add_bias(store.get(self.b))
    }
}

pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let w = store.register(
            &format!("{name}.w"),
            &[c_out, c_in, k, k],
            fan_in_init(rng, c_out * c_in * k * k, fan_in),
        )?;
        let b = store.register(&format!("{name}.b"), &[c_out], fan_in_init(rng, c_out, fan_in))?;
        Ok(Conv { w, b, stride, pad })
    }

    pub fn forward<T: Elem>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(store.get(self.w), Some(store.get(self.b)), self.stride, self.pad)
    }
}

pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn build<T: Elem>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let g = store.register(&format!("{name}.g"), &[width], vec![T::ONE; width])?;
        let b = store.register(&format!("{name}.b"), &[width], vec![T::ZERO; width])?;
        Ok(Norm { g, b })
    }

    pub fn forward<T: Elem>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(store.get(self.g), store.get(self.b), T::from_f64(1e-5))
    }
}

/// Fixed 2-d sine/cosine positional features for an h×w grid: [h*w, d].
pub(crate) fn sincos_pos2d<T: Elem>(d: usize, h: usize, w: usize) -> Tensor<T> {
    let half = d / 2;
    let mut data = Vec::with_capacity(h * w * d);
    let tau = std::f64::consts::TAU;
    for i in 0..h {
        for j in 0..w {
            let ynorm = (i as f64 + 0.5) / h as f64 * tau;
            let xnorm = (j as f64 + 0.5) / w as f64 * tau;
            for (coord, n) in [(ynorm, half), (xnorm, d - half)] {
                for t in 0..n {
                    let freq = 10000f64.powf(2.0 * (t / 2) as f64 / n as f64);
                    let v = coord / freq;
                    data.push(T::from_f64(if t % 2 == 0 { v.sin() } else { v.cos() }));
                }
            }
        }
    }
    Tensor::untracked(vec![h * w, d], data)
}

/// Tokens [h*w, d] → map [d, h, w].
pub(crate) fn tokens_to_map<T: Elem>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let d = tokens.shape()[1];
    tokens.transpose2d()?.reshape(&[d, h, w])
}

/// Map [c, h, w] → tokens [h*w, c].
pub(crate) fn map_to_tokens<T: Elem>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    map.reshape(&[c, h * w])?.transpose2d()
}

// ── Outputs ─────────────────────────────────────────────────────────

/// One deep-supervision prediction set.
pub struct PredictionSet<T: Elem> {
    /// [Q, C+1]; the last class is "no object".
    pub class_logits: Tensor<T>,
    /// [Q, H/4, W/4]
    pub mask_logits: Tensor<T>,
}

pub struct DecoderOutputs<T: Elem> {
    /// dec_layers + 1 sets; index 0 comes from the initial query state.
    pub sets: Vec<PredictionSet<T>>,
    /// [C+1, H, W] when bls_mode is `two`.
    pub bls_a: Option<Tensor<T>>,
    /// [1, H, W] when bls_mode is `one` or `two`.
    pub bls_b: Option<Tensor<T>>,
}

// ── The model ───────────────────────────────────────────────────────

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    pixel_decoder: PixelDecoder,
    query_decoder: QueryDecoder,
    bls: BlsHeads,
}

impl Model {
    /// Register all parameters (deterministic order and init from `seed`).
    pub fn build<T: Elem>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = CounterRng::substream(seed, 0x6d6f64656c); // "model"
        let backbone = Backbone::build(store, &mut rng, cfg)?;
        let pixel_decoder = PixelDecoder::build(store, &mut rng, cfg)?;
        let query_decoder = QueryDecoder::build(store, &mut rng, cfg)?;
        let bls = BlsHeads::build(store, &mut rng, cfg)?;
        Ok(Model { cfg: cfg.clone(), backbone, pixel_decoder, query_decoder, bls })
    }

    pub fn forward<T: Elem>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<DecoderOutputs<T>> {
        let pyr = self.backbone.forward(store, image)?;
        let enc = self.pixel_decoder.forward(store, &pyr, &self.cfg)?;
        let sets = self.query_decoder.forward(store, &enc.memories, &enc.level_shapes, &enc.pixel_embed, &self.cfg)?;
        let (bls_a, bls_b) = self.bls.forward(store, &pyr, &enc.pixel_embed, self.cfg.bls_mode, image.shape()[1], image.shape()[2])?;
        Ok(DecoderOutputs { sets, bls_a, bls_b })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn pixel_decoder(&self) -> &PixelDecoder {
        &self.pixel_decoder
    }
}

/// Per-pixel class map from the final prediction set: each pixel takes the
/// class of the highest-scoring query whose upsampled mask probability
/// exceeds 1/2, and background where no query covers it. A query's score is
/// its best foreground-class probability.
pub fn semantic_labels<T: Elem>(
    outputs: &DecoderOutputs<T>,
    n_classes: usize,
    height: usize,
    width: usize,
) -> Result<Vec<u8>> {
    let last = outputs.sets.last().ok_or_else(|| Error::invalid("semantic_labels", "no prediction sets"))?;
    let q = last.class_logits.shape()[0];
    let probs = last.class_logits.detach().softmax(1)?;
    let mut scores = vec![0.0f64; q];
    let mut classes = vec![0usize; q];
    for qi in 0..q {
        let row = &probs.data()[qi * (n_classes + 1)..(qi + 1) * (n_classes + 1)];
        let (mut best_c, mut best_p) = (0usize, f64::MIN);
        for (c, &p) in row.iter().take(n_classes).enumerate() {
            if p.to_f64() > best_p {
                best_p = p.to_f64();
                best_c = c;
            }
        }
        scores[qi] = best_p;
        classes[qi] = best_c + 1; // labels are 1-based; 0 is background
    }
    let masks = last.mask_logits.detach().resize_bilinear(height, width)?;
    let plane = height * width;
    let mut labels = vec![0u8; plane];
    for p in 0..plane {
        let mut best: Option<usize> = None;
        for qi in 0..q {
            if masks.data()[qi * plane + p] > T::ZERO {
                // logit > 0 ⇔ sigmoid > 1/2
                if best.map(|b| scores[qi] > scores[b]).unwrap_or(true) {
                    best = Some(qi);
                }
            }
        }
        if let Some(b) = best {
            labels[p] = classes[b] as u8;
        }
    }
    Ok(labels)
}
