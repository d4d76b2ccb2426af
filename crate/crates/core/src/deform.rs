//! Multi-scale deformable attention with adjustable sampling offsets.
//!
//! Each query carries a normalized reference point; per head, level, and
//! sampling slot the offset head emits a raw 2-vector displacement in level
//! pixels. The adjustment stage then either leaves offsets alone, divides
//! over-threshold ones by a constant, or squashes them so queries read from
//! nearby texels. Attention mixes bilinear samples of the projected value
//! maps with a softmax over all (level, point) slots of a head.

use crate::error::{Error, Result};
use crate::params::{fan_in_init, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

// ── Offset adjustment ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetStrategy {
    None,
    ClipDivide,
    Squash,
    SquashScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashKind {
    SoftmaxSign,
    SigmoidSymmetric,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetAdjustConfig {
    pub strategy: OffsetStrategy,
    pub squash_kind: SquashKind,
    /// Strategy `clip_divide`: offsets with norm above this get shrunk.
    pub threshold_px: f64,
    /// Strategy `clip_divide`: divisor applied above the threshold.
    pub divisor: f64,
    /// Strategy `squash_scaled`: output range scale.
    pub scale_c: f64,
}

impl Default for OffsetAdjustConfig {
    fn default() -> Self {
        OffsetAdjustConfig {
            strategy: OffsetStrategy::None,
            squash_kind: SquashKind::SigmoidSymmetric,
            threshold_px: 4.0,
            divisor: 2.0,
            scale_c: 2.0,
        }
    }
}

impl OffsetAdjustConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold_px < 0.0 {
            return Err(Error::invalid("offset config", "threshold_px must be >= 0"));
        }
        if self.divisor <= 1.0 {
            return Err(Error::invalid("offset config", "divisor must be > 1"));
        }
        if self.scale_c <= 0.0 {
            return Err(Error::invalid("offset config", "scale_c must be > 0"));
        }
        Ok(())
    }

    /// `squash` is exactly `squash_scaled` with scale 1.
    pub fn effective_scale(&self) -> f64 {
        match self.strategy {
            OffsetStrategy::Squash => 1.0,
            _ => self.scale_c,
        }
    }
}

/// Post-process raw offsets [n, heads, levels, points, 2].
///
/// - `none`: identity (same tensor).
/// - `clip_divide`: each 2-vector with ‖Δ‖₂ > threshold is divided by the
///   divisor; the branch condition is constant under backward.
/// - `squash(_scaled)` with `sigmoid_symmetric`: componentwise c·(2σ(Δ)−1).
/// - with `softmax_sign`: per (query, head, level, component) lane the K
///   point magnitudes softmax to a budget of c, re-signed by the raw offset
///   (sign is constant under backward; zero counts as positive).
pub fn adjust_offsets<T: Elem>(raw: &Tensor<T>, cfg: &OffsetAdjustConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let shape = raw.shape().to_vec();
    if shape.len() != 5 || shape[4] != 2 {
        return Err(Error::invalid(
            "adjust_offsets",
            format!("expected [n, heads, levels, points, 2], got {shape:?}"),
        ));
    }
    match cfg.strategy {
        OffsetStrategy::None => Ok(raw.clone()),
        OffsetStrategy::ClipDivide => {
            let pairs = raw.numel() / 2;
            let inv = T::from_f64(1.0 / cfg.divisor);
            let mut factors = vec![T::ONE; pairs];
            for (p, f) in factors.iter_mut().enumerate() {
                let dx = raw.data()[2 * p].to_f64();
                let dy = raw.data()[2 * p + 1].to_f64();
                if (dx * dx + dy * dy).sqrt() > cfg.threshold_px {
                    *f = inv;
                }
            }
            let factors = Tensor::from_vec(&[pairs], factors)?;
            raw.reshape(&[pairs, 2])?.mul_rows(&factors)?.reshape(&shape)
        }
        OffsetStrategy::Squash | OffsetStrategy::SquashScaled => {
            let c = T::from_f64(cfg.effective_scale());
            match cfg.squash_kind {
                SquashKind::SigmoidSymmetric => {
                    Ok(raw.sigmoid().mul_scalar(c + c).add_scalar(-c))
                }
                SquashKind::SoftmaxSign => {
                    let signs: Vec<T> = raw
                        .data()
                        .iter()
                        .map(|&v| if v < T::ZERO { -T::ONE } else { T::ONE })
                        .collect();
                    let signs = Tensor::from_vec(&shape, signs)?;
                    raw.abs().softmax(3)?.mul(&signs).map(|t| t.mul_scalar(c))
                }
            }
        }
    }
}

// ── Reference points ────────────────────────────────────────────────

/// Normalized cell-center anchors, one per token, concatenated level-major.
#[derive(Debug, Clone)]
pub struct ReferencePoints {
    /// (x̂, ŷ) in [0,1]² per token.
    pub coords: Vec<[f64; 2]>,
    /// Token index range per level.
    pub level_ranges: Vec<(usize, usize)>,
}

pub fn make_reference_points(level_shapes: &[(usize, usize)]) -> Result<ReferencePoints> {
    if level_shapes.is_empty() {
        return Err(Error::invalid("make_reference_points", "empty level list"));
    }
    let mut coords = Vec::new();
    let mut level_ranges = Vec::new();
    for &(h, w) in level_shapes {
        if h == 0 || w == 0 {
            return Err(Error::invalid("make_reference_points", format!("empty level {h}x{w}")));
        }
        let start = coords.len();
        for i in 0..h {
            for j in 0..w {
                coords.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
            }
        }
        level_ranges.push((start, coords.len()));
    }
    Ok(ReferencePoints { coords, level_ranges })
}

// ── Deformable attention ────────────────────────────────────────────

/// Parameter handles for one deformable-attention block. The offset head is
/// a two-layer perceptron (the deepened variant of the plain linear head).
pub struct DeformAttn {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_points: usize,
    value_w: ParamId,
    value_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    offset_w1: ParamId,
    offset_b1: ParamId,
    offset_w2: ParamId,
    offset_b2: ParamId,
    weight_w: ParamId,
    weight_b: ParamId,
}

impl DeformAttn {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        n_levels: usize,
        n_points: usize,
    ) -> Result<Self> {
        if d_model % n_heads != 0 {
            return Err(Error::invalid(
                "deform_attn",
                format!("d_model {d_model} not divisible by n_heads {n_heads}"),
            ));
        }
        let off_out = 2 * n_heads * n_levels * n_points;
        let w_out = n_heads * n_levels * n_points;
        let reg = |store: &mut ParamStore<T>, rng: &mut CounterRng, name: String, shape: Vec<usize>, fan_in: usize| {
            let n = shape.iter().product();
            store.register(&name, &shape, fan_in_init(rng, n, fan_in))
        };
        let value_w = reg(store, rng, format!("{prefix}.value.w"), vec![d_model, d_model], d_model)?;
        let value_b = reg(store, rng, format!("{prefix}.value.b"), vec![d_model], d_model)?;
        let out_w = reg(store, rng, format!("{prefix}.out.w"), vec![d_model, d_model], d_model)?;
        let out_b = reg(store, rng, format!("{prefix}.out.b"), vec![d_model], d_model)?;
        let offset_w1 = reg(store, rng, format!("{prefix}.offset.w1"), vec![d_model, d_model], d_model)?;
        let offset_b1 = reg(store, rng, format!("{prefix}.offset.b1"), vec![d_model], d_model)?;
        // Final offset layer: zero weights, direction-grid bias — the usual
        // deformable-attention start (each head looks a different way, point
        // k reaches k+1 pixels).
        let offset_w2 = store.register(
            &format!("{prefix}.offset.w2"),
            &[d_model, off_out],
            vec![T::ZERO; d_model * off_out],
        )?;
        let mut bias = Vec::with_capacity(off_out);
        for h in 0..n_heads {
            let angle = 2.0 * std::f64::consts::PI * h as f64 / n_heads as f64;
            for _level in 0..n_levels {
                for k in 0..n_points {
                    let r = (k + 1) as f64;
                    bias.push(T::from_f64(r * angle.cos()));
                    bias.push(T::from_f64(r * angle.sin()));
                }
            }
        }
        let offset_b2 = store.register(&format!("{prefix}.offset.b2"), &[off_out], bias)?;
        let weight_w = reg(store, rng, format!("{prefix}.weight.w"), vec![d_model, w_out], d_model)?;
        let weight_b = reg(store, rng, format!("{prefix}.weight.b"), vec![w_out], d_model)?;
        Ok(DeformAttn {
            d_model,
            n_heads,
            n_levels,
            n_points,
            value_w,
            value_b,
            out_w,
            out_b,
            offset_w1,
            offset_b1,
            offset_w2,
            offset_b2,
            weight_w,
            weight_b,
        })
    }

    /// Raw offsets [n, heads, levels, points, 2] in level-pixel units.
    pub fn compute_offsets<T: Elem>(
        &self,
        store: &ParamStore<T>,
        queries: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if queries.shape().len() != 2 || queries.shape()[1] != self.d_model {
            return Err(Error::shapes("compute_offsets", queries.shape(), &[0, self.d_model]));
        }
        let n = queries.shape()[0];
        let hidden = queries
            .matmul(store.get(self.offset_w1))?
            .add_bias(store.get(self.offset_b1))?
            .relu();
        hidden
            .matmul(store.get(self.offset_w2))?
            .add_bias(store.get(self.offset_b2))?
            .reshape(&[n, self.n_heads, self.n_levels, self.n_points, 2])
    }

    /// Attention over the given (already adjusted) offsets. Exposed so tests
    /// can inject exhaustive sampling patterns; [`DeformAttn::forward`] is
    /// the offset-head-driven entry.
    pub fn attend<T: Elem>(
        &self,
        store: &ParamStore<T>,
        queries: &Tensor<T>,
        value_tokens: &[Tensor<T>],
        refs: &ReferencePoints,
        level_shapes: &[(usize, usize)],
        offsets: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if value_tokens.len() != self.n_levels || level_shapes.len() != self.n_levels {
            return Err(Error::invalid(
                "deform_attn",
                format!(
                    "expected {} levels, got {} token maps / {} shapes",
                    self.n_levels,
                    value_tokens.len(),
                    level_shapes.len()
                ),
            ));
        }
        let n = queries.shape()[0];
        if refs.coords.len() != n {
            return Err(Error::invalid(
                "deform_attn",
                format!("{} reference points for {} queries", refs.coords.len(), n),
            ));
        }
        let (heads, levels, k) = (self.n_heads, self.n_levels, self.n_points);
        let head_dim = self.d_model / heads;

        // Softmax over all (level, point) slots per (query, head).
        let wlogits = queries
            .matmul(store.get(self.weight_w))?
            .add_bias(store.get(self.weight_b))?
            .reshape(&[n * heads, levels * k])?;
        let weights = wlogits.softmax(1)?.reshape(&[n, heads, levels, k])?;

        // Per-level value maps [d, H, W], split by head below.
        let mut maps = Vec::with_capacity(levels);
        for (l, tokens) in value_tokens.iter().enumerate() {
            let (h_l, w_l) = level_shapes[l];
            if tokens.shape() != [h_l * w_l, self.d_model] {
                return Err(Error::shapes(
                    "deform_attn value tokens",
                    tokens.shape(),
                    &[h_l * w_l, self.d_model],
                ));
            }
            let v = tokens
                .matmul(store.get(self.value_w))?
                .add_bias(store.get(self.value_b))?
                .transpose2d()?
                .reshape(&[self.d_model, h_l, w_l])?;
            maps.push(v);
        }

        // Reference anchors per level in sampler coordinates: the normalized
        // ref scaled by the level extent lands on the token's own texel
        // after the half-pixel shift. Repeated K times per query.
        let mut bases = Vec::with_capacity(levels);
        for &(h_l, w_l) in level_shapes {
            let mut base = Vec::with_capacity(n * k * 2);
            for c in refs.coords.iter() {
                for _ in 0..k {
                    base.push(T::from_f64(c[0] * w_l as f64 - 0.5));
                    base.push(T::from_f64(c[1] * h_l as f64 - 0.5));
                }
            }
            bases.push(Tensor::from_vec(&[n * k, 2], base)?);
        }

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut acc: Option<Tensor<T>> = None;
            for l in 0..levels {
                let map = maps[l].narrow(0, h * head_dim, head_dim)?;
                let off = offsets.narrow(1, h, 1)?.narrow(2, l, 1)?.reshape(&[n * k, 2])?;
                let points = off.add(&bases[l])?;
                let samples = map.grid_sample(&points)?; // [n*k, head_dim]
                let w = weights.narrow(1, h, 1)?.narrow(2, l, 1)?.reshape(&[n * k])?;
                let mixed = samples.mul_rows(&w)?.reshape(&[n, k, head_dim])?.sum_axis(1)?;
                acc = Some(match acc {
                    Some(prev) => prev.add(&mixed)?,
                    None => mixed,
                });
            }
            head_outputs.push(acc.expect("levels >= 1"));
        }
        let merged = Tensor::concat(&head_outputs, 1)?;
        merged.matmul(store.get(self.out_w))?.add_bias(store.get(self.out_b))
    }

    /// Full block: offsets from the deepened head, adjusted per `cfg`, then
    /// attention. The sampling location at level l is `ref·(W_l, H_l)` plus
    /// the adjusted offset, in that level's pixel units.
    pub fn forward<T: Elem>(
        &self,
        store: &ParamStore<T>,
        queries: &Tensor<T>,
        value_tokens: &[Tensor<T>],
        refs: &ReferencePoints,
        level_shapes: &[(usize, usize)],
        cfg: &OffsetAdjustConfig,
    ) -> Result<Tensor<T>> {
        let raw = self.compute_offsets(store, queries)?;
        let adjusted = adjust_offsets(&raw, cfg)?;
        self.attend(store, queries, value_tokens, refs, level_shapes, &adjusted)
    }
}

// ── Sampling-spread statistics ──────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpreadRow {
    pub level: usize,
    pub strategy: String,
    pub mean_norm: f64,
    pub median_norm: f64,
    pub max_norm: f64,
    pub frac_within_1px: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpreadReport {
    pub n_draws: usize,
    pub seed: u64,
    pub rows: Vec<SpreadRow>,
}

impl SpreadReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,strategy,mean_norm,median_norm,max_norm,frac_within_1px\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.level, r.strategy, r.mean_norm, r.median_norm, r.max_norm, r.frac_within_1px
            ));
        }
        out
    }
}

pub fn strategy_label(cfg: &OffsetAdjustConfig) -> String {
    match cfg.strategy {
        OffsetStrategy::None => "none".into(),
        OffsetStrategy::ClipDivide => {
            format!("clip_divide(t={};d={})", cfg.threshold_px, cfg.divisor)
        }
        OffsetStrategy::Squash | OffsetStrategy::SquashScaled => {
            let kind = match cfg.squash_kind {
                SquashKind::SigmoidSymmetric => "sigmoid_symmetric",
                SquashKind::SoftmaxSign => "softmax_sign",
            };
            format!("{kind}(c={})", cfg.effective_scale())
        }
    }
}

/// Synthetic raw offsets for level `level` of a spread run: `n_vectors`
/// 2-vectors, componentwise N(0, σ²), drawn from
/// `CounterRng::substream(seed, level)` in (vector, x then y) order.
/// Public so oracles can re-derive the exact stream.
pub fn synthetic_raw_offsets(seed: u64, level: usize, sigma: f64, n_vectors: usize) -> Vec<f64> {
    let mut rng = CounterRng::substream(seed, level as u64);
    (0..2 * n_vectors).map(|_| sigma * rng.normal()).collect()
}

fn spread_rows_from_offsets(
    adjusted: &Tensor<f64>,
    cfg: &OffsetAdjustConfig,
    n_take: usize,
) -> Vec<SpreadRow> {
    // adjusted: [n, heads, levels, points, 2]
    let (n, heads, levels, points) = (
        adjusted.shape()[0],
        adjusted.shape()[1],
        adjusted.shape()[2],
        adjusted.shape()[3],
    );
    let mut rows = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut norms = Vec::with_capacity(n * heads * points);
        'outer: for i in 0..n {
            for h in 0..heads {
                for k in 0..points {
                    let base = ((((i * heads + h) * levels + level) * points) + k) * 2;
                    let dx = adjusted.data()[base];
                    let dy = adjusted.data()[base + 1];
                    norms.push((dx * dx + dy * dy).sqrt());
                    if norms.len() >= n_take {
                        break 'outer;
                    }
                }
            }
        }
        norms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let median = if norms.len() % 2 == 1 {
            norms[norms.len() / 2]
        } else {
            0.5 * (norms[norms.len() / 2 - 1] + norms[norms.len() / 2])
        };
        let within = norms.iter().take_while(|&&v| v <= 1.0).count();
        rows.push(SpreadRow {
            level,
            strategy: strategy_label(cfg),
            mean_norm: mean,
            median_norm: median,
            max_norm: *norms.last().unwrap(),
            frac_within_1px: within as f64 / norms.len() as f64,
        });
    }
    rows
}

/// Spread statistics of the offsets an actual offset head emits for random
/// N(0,1) queries: `n_draws` query rows through `attn`'s head, adjusted per
/// `cfg`, one row of statistics per level.
pub fn sampling_spread_stats_model(
    attn: &DeformAttn,
    store: &ParamStore<f64>,
    cfg: &OffsetAdjustConfig,
    n_draws: usize,
    seed: u64,
) -> Result<SpreadReport> {
    if n_draws == 0 {
        return Err(Error::invalid("sampling_spread_stats", "n_draws must be >= 1"));
    }
    let mut rng = CounterRng::substream(seed, 0x9e);
    let queries = Tensor::from_vec(
        &[n_draws, attn.d_model],
        (0..n_draws * attn.d_model).map(|_| rng.normal()).collect(),
    )?;
    let raw = attn.compute_offsets(store, &queries)?;
    let adjusted = adjust_offsets(&raw, cfg)?;
    let per_level = n_draws * attn.n_heads * attn.n_points;
    Ok(SpreadReport {
        n_draws: per_level,
        seed,
        rows: spread_rows_from_offsets(&adjusted, cfg, per_level),
    })
}

/// Spread statistics of adjusted offsets for synthetic N(0, σ²) raw draws:
/// `n_draws` offset vectors per level, grouped `n_points` at a time so
/// point-grouped strategies see their natural axis.
pub fn sampling_spread_stats(
    cfg: &OffsetAdjustConfig,
    n_levels: usize,
    n_points: usize,
    sigma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<SpreadReport> {
    if n_draws == 0 {
        return Err(Error::invalid("sampling_spread_stats", "n_draws must be >= 1"));
    }
    if n_levels == 0 || n_points == 0 {
        return Err(Error::invalid("sampling_spread_stats", "need levels >= 1 and points >= 1"));
    }
    let groups = n_draws.div_ceil(n_points);
    let padded = groups * n_points;
    let mut rows = Vec::with_capacity(n_levels);
    for level in 0..n_levels {
        let raw = synthetic_raw_offsets(seed, level, sigma, padded);
        let raw_t = Tensor::<f64>::from_vec(&[groups, 1, 1, n_points, 2], raw)?;
        let adjusted = adjust_offsets(&raw_t, cfg)?;
        let mut norms: Vec<f64> = adjusted.data()[..2 * n_draws]
            .chunks(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .collect();
        norms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let median = if norms.len() % 2 == 1 {
            norms[norms.len() / 2]
        } else {
            0.5 * (norms[norms.len() / 2 - 1] + norms[norms.len() / 2])
        };
        let within = norms.iter().take_while(|&&v| v <= 1.0).count();
        rows.push(SpreadRow {
            level,
            strategy: strategy_label(cfg),
            mean_norm: mean,
            median_norm: median,
            max_norm: *norms.last().unwrap(),
            frac_within_1px: within as f64 / norms.len() as f64,
        });
    }
    Ok(SpreadReport { n_draws, seed, rows })
}
