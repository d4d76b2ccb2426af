//! The gradient-verification battery: every differentiable kernel, the
//! offset-adjustment strategies, deformable and masked attention, the loss
//! stack, and a micro end-to-end model, all checked against central finite
//! differences in f64.
//!
//! Checks draw random inputs from seeded streams and nudge them away from
//! the (measure-zero) non-smooth sets — relu/abs kinks, bilinear cell
//! boundaries, the clip threshold — where one-sided derivatives are the
//! documented convention and finite differences straddle the kink.

use crate::deform::{
    adjust_offsets, make_reference_points, DeformAttn, OffsetAdjustConfig, OffsetStrategy,
    SquashKind,
};
use crate::error::Result;
use crate::loss::{cross_entropy_loss, dice_loss, mask_bce_loss, total_loss, GtObject, LossWeights};
use crate::model::{
    masked_cross_attention, BlsMode, FusionConfig, FusionPosition, Model, ModelConfig,
    MultiHeadAttention,
};
use crate::params::ParamStore;
use crate::rng::CounterRng;
use crate::tensor::{gradcheck, GradcheckReport, Tensor};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

fn randn(rng: &mut CounterRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// Normal draws pushed at least `min_abs` away from zero.
fn randn_away(rng: &mut CounterRng, n: usize, scale: f64, min_abs: f64) -> Vec<f64> {
    randn(rng, n, scale)
        .into_iter()
        .map(|v| if v.abs() < min_abs { v + min_abs * if v < 0.0 { -2.0 } else { 2.0 } } else { v })
        .collect()
}

/// Continuous coordinates whose fractional part stays in [0.15, 0.85].
fn safe_points(rng: &mut CounterRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform(lo, hi);
            let frac = v - v.floor();
            if frac < 0.15 {
                v + 0.2
            } else if frac > 0.85 {
                v - 0.2
            } else {
                v
            }
        })
        .collect()
}

type Check = (String, GradcheckReport);

fn check<F>(name: &str, store: ParamStore<f64>, f: F) -> Result<Check>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let report = gradcheck(&store, f, GRADCHECK_EPS, GRADCHECK_TOL)?;
    Ok((name.to_string(), report))
}

fn store_with(entries: &[(&str, &[usize], Vec<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape, data) in entries {
        s.register(name, shape, data.clone()).expect("unique names");
    }
    s
}

/// Elementary-kernel checks. Each entry is one op (or a tight family)
/// driven by a quadratic-free scalar readout so gradients stay O(1).
pub fn kernel_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = CounterRng::substream(seed, 0x6b65726e);
    let mut out = Vec::new();

    let s = store_with(&[
        ("a", &[2, 3], randn(&mut rng, 6, 1.0)),
        ("b", &[2, 3], randn_away(&mut rng, 6, 1.0, 0.4)),
    ]);
    out.push(check("add_sub_mul", s, |s| {
        let a = s.by_name("a").unwrap();
        let b = s.by_name("b").unwrap();
        a.add(b)?.mul(&a.sub(b)?)?.sum().mul_scalar(0.5).add_scalar(0.1).into_ok()
    })?);

    let s = store_with(&[
        ("a", &[2, 3], randn(&mut rng, 6, 1.0)),
        ("b", &[2, 3], randn_away(&mut rng, 6, 1.0, 0.5)),
    ]);
    out.push(check("div", s, |s| {
        let a = s.by_name("a").unwrap();
        let b = s.by_name("b").unwrap();
        Ok(a.div(b)?.sum())
    })?);

    let s = store_with(&[
        ("x", &[3, 4], randn(&mut rng, 12, 1.0)),
        ("bias", &[4], randn(&mut rng, 4, 1.0)),
        ("w", &[3], randn(&mut rng, 3, 1.0)),
    ]);
    out.push(check("add_bias_mul_rows", s, |s| {
        let x = s.by_name("x").unwrap();
        Ok(x.add_bias(s.by_name("bias").unwrap())?
            .mul_rows(s.by_name("w").unwrap())?
            .sum())
    })?);

    let s = store_with(&[
        ("a", &[3, 4], randn(&mut rng, 12, 1.0)),
        ("b", &[4, 2], randn(&mut rng, 8, 1.0)),
    ]);
    out.push(check("matmul_transpose", s, |s| {
        let a = s.by_name("a").unwrap();
        let b = s.by_name("b").unwrap();
        Ok(a.matmul(b)?.transpose2d()?.sum_axis(1)?.mul(&Tensor::from_vec(&[2], vec![0.7, -1.3])?)?.sum())
    })?);

    for (name, stride, pad) in [("conv2d_s1", 1usize, 1usize), ("conv2d_s2", 2, 1)] {
        let s = store_with(&[
            ("img", &[2, 6, 5], randn(&mut rng, 60, 1.0)),
            ("w", &[3, 2, 3, 3], randn(&mut rng, 54, 0.5)),
            ("b", &[3], randn(&mut rng, 3, 0.5)),
        ]);
        out.push(check(name, s, move |s| {
            let img = s.by_name("img").unwrap();
            Ok(img
                .conv2d(s.by_name("w").unwrap(), Some(s.by_name("b").unwrap()), stride, pad)?
                .sum())
        })?);
    }

    let s = store_with(&[("x", &[8], randn_away(&mut rng, 8, 1.0, 0.05))]);
    out.push(check("relu", s, |s| Ok(s.by_name("x").unwrap().relu().sum()))?);

    let s = store_with(&[("x", &[8], randn(&mut rng, 8, 2.0))]);
    out.push(check("sigmoid", s, |s| Ok(s.by_name("x").unwrap().sigmoid().sum()))?);

    let s = store_with(&[("x", &[8], randn_away(&mut rng, 8, 1.0, 0.05))]);
    out.push(check("abs", s, |s| Ok(s.by_name("x").unwrap().abs().sum()))?);

    let weights = randn(&mut rng, 12, 1.0);
    let s = store_with(&[("x", &[3, 4], randn(&mut rng, 12, 2.0))]);
    let wtensor = move || Tensor::from_vec(&[3, 4], weights.clone()).unwrap();
    out.push(check("softmax", s, move |s| {
        let x = s.by_name("x").unwrap();
        Ok(x.softmax(1)?.mul(&wtensor())?.sum())
    })?);

    let weights = randn(&mut rng, 12, 1.0);
    let s = store_with(&[("x", &[3, 4], randn(&mut rng, 12, 2.0))]);
    let wtensor = move || Tensor::from_vec(&[3, 4], weights.clone()).unwrap();
    out.push(check("softmax_axis0", s, move |s| {
        let x = s.by_name("x").unwrap();
        Ok(x.softmax(0)?.mul(&wtensor())?.sum())
    })?);

    let s = store_with(&[("x", &[3, 4], randn(&mut rng, 12, 2.0))]);
    out.push(check("log_softmax", s, |s| {
        let x = s.by_name("x").unwrap();
        x.log_softmax(1)?.take_index(&[1, 3, 0])?.sum().mul_scalar(-1.0).into_ok()
    })?);

    // Masked softmax: -inf additive mask, one fully-open row.
    let maskbias = vec![0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0];
    let wvals = randn(&mut rng, 8, 1.0);
    let s = store_with(&[("x", &[2, 4], randn(&mut rng, 8, 1.5))]);
    out.push(check("masked_softmax", s, move |s| {
        let x = s.by_name("x").unwrap();
        let mask = Tensor::from_vec(&[2, 4], maskbias.clone())?;
        let w = Tensor::from_vec(&[2, 4], wvals.clone())?;
        Ok(x.add(&mask)?.softmax(1)?.mul(&w)?.sum())
    })?);

    let s = store_with(&[
        ("x", &[2, 6], randn(&mut rng, 12, 1.0)),
        ("y", &[2, 2], randn(&mut rng, 4, 1.0)),
    ]);
    out.push(check("concat_narrow_reshape", s, |s| {
        let x = s.by_name("x").unwrap();
        let y = s.by_name("y").unwrap();
        let joined = Tensor::concat(&[x.narrow(1, 1, 3)?, y.clone()], 1)?;
        Ok(joined.reshape(&[10])?.mean())
    })?);

    let map = randn(&mut rng, 2 * 4 * 5, 1.0);
    let px = safe_points(&mut rng, 6, -1.0, 5.5);
    let py = safe_points(&mut rng, 6, -1.0, 4.5);
    let pts: Vec<f64> = px.iter().zip(&py).flat_map(|(&x, &y)| [x, y]).collect();
    let s = store_with(&[("map", &[2, 4, 5], map), ("pts", &[6, 2], pts)]);
    out.push(check("grid_sample", s, |s| {
        let map = s.by_name("map").unwrap();
        let pts = s.by_name("pts").unwrap();
        Ok(map.grid_sample(pts)?.sum())
    })?);

    let s = store_with(&[("x", &[2, 4, 6], randn(&mut rng, 48, 1.0))]);
    out.push(check("resize_up", s, |s| {
        Ok(s.by_name("x").unwrap().resize_bilinear(7, 9)?.sum())
    })?);
    let s = store_with(&[("x", &[2, 6, 6], randn(&mut rng, 72, 1.0))]);
    out.push(check("resize_down", s, |s| {
        Ok(s.by_name("x").unwrap().resize_bilinear(3, 4)?.sum())
    })?);

    let s = store_with(&[
        ("x", &[3, 5], randn(&mut rng, 15, 1.5)),
        ("g", &[5], randn_away(&mut rng, 5, 1.0, 0.2)),
        ("b", &[5], randn(&mut rng, 5, 0.5)),
    ]);
    out.push(check("layer_norm", s, |s| {
        let x = s.by_name("x").unwrap();
        Ok(x.layer_norm(s.by_name("g").unwrap(), s.by_name("b").unwrap(), 1e-5)?.sum_axis(0)?.mean())
    })?);

    let targets = (0..10).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let s = store_with(&[("x", &[10], randn(&mut rng, 10, 2.0))]);
    out.push(check("bce_with_logits", s, move |s| {
        let t = Tensor::from_vec(&[10], targets.clone())?;
        Ok(s.by_name("x").unwrap().bce_with_logits(&t)?.mean())
    })?);

    Ok(out)
}

/// Loss- and attention-level composite checks.
pub fn composite_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = CounterRng::substream(seed, 0x636f6d70);
    let mut out = Vec::new();

    // dice over sigmoid probabilities
    let target: Vec<f64> = (0..24).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let s = store_with(&[("x", &[4, 6], randn(&mut rng, 24, 1.5))]);
    out.push(check("dice_loss", s, move |s| {
        let t = Tensor::from_vec(&[4, 6], target.clone())?;
        dice_loss(&s.by_name("x").unwrap().sigmoid(), &t, 1.0)
    })?);

    let s = store_with(&[("logits", &[4, 3], randn(&mut rng, 12, 1.5))]);
    out.push(check("cross_entropy", s, |s| {
        cross_entropy_loss(s.by_name("logits").unwrap(), &[2, 0, 1, 2], Some(&[1.0, 1.0, 0.1]))
    })?);

    let target: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let s = store_with(&[("logits", &[3, 4], randn(&mut rng, 12, 1.5))]);
    out.push(check("mask_bce", s, move |s| {
        let t = Tensor::from_vec(&[3, 4], target.clone())?;
        mask_bce_loss(s.by_name("logits").unwrap(), &t)
    })?);

    // Offset adjustment strategies. clip_divide inputs stay clear of the
    // threshold shell (|‖Δ‖ − t| > 1e-3), per the branch-constant rule.
    let clip = OffsetAdjustConfig { strategy: OffsetStrategy::ClipDivide, ..Default::default() };
    let mut raw = randn(&mut rng, 2 * 2 * 2 * 3 * 2, 3.0);
    for pair in raw.chunks_mut(2) {
        let norm = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        if (norm - clip.threshold_px).abs() < 0.05 {
            pair[0] *= 1.2;
            pair[1] *= 1.2;
        }
    }
    let s = store_with(&[("raw", &[2, 2, 2, 3, 2], raw)]);
    out.push(check("adjust_clip_divide", s, move |s| {
        Ok(adjust_offsets(s.by_name("raw").unwrap(), &clip)?.sum())
    })?);

    let sig = OffsetAdjustConfig {
        strategy: OffsetStrategy::SquashScaled,
        squash_kind: SquashKind::SigmoidSymmetric,
        scale_c: 2.0,
        ..Default::default()
    };
    let s = store_with(&[("raw", &[2, 2, 2, 3, 2], randn(&mut rng, 48, 2.0))]);
    out.push(check("adjust_sigmoid_symmetric", s, move |s| {
        Ok(adjust_offsets(s.by_name("raw").unwrap(), &sig)?.sum())
    })?);

    let smax = OffsetAdjustConfig {
        strategy: OffsetStrategy::SquashScaled,
        squash_kind: SquashKind::SoftmaxSign,
        scale_c: 2.0,
        ..Default::default()
    };
    let wvals = randn(&mut rng, 48, 1.0);
    let s = store_with(&[("raw", &[2, 2, 2, 3, 2], randn_away(&mut rng, 48, 2.0, 0.05))]);
    out.push(check("adjust_softmax_sign", s, move |s| {
        let w = Tensor::from_vec(&[2, 2, 2, 3, 2], wvals.clone())?;
        Ok(adjust_offsets(s.by_name("raw").unwrap(), &smax)?.mul(&w)?.sum())
    })?);

    // Deformable attention block over two levels.
    let (d, heads, levels, k) = (8usize, 2usize, 2usize, 2usize);
    let shapes = [(3usize, 4usize), (2usize, 2usize)];
    let n: usize = shapes.iter().map(|&(h, w)| h * w).sum();
    let mut s = ParamStore::new();
    s.register("queries", &[n, d], randn(&mut rng, n * d, 0.8)).unwrap();
    s.register("tok0", &[12, d], randn(&mut rng, 12 * d, 0.8)).unwrap();
    s.register("tok1", &[4, d], randn(&mut rng, 4 * d, 0.8)).unwrap();
    let mut build_rng = CounterRng::substream(seed, 0xa77);
    let attn = DeformAttn::build(&mut s, &mut build_rng, "da", d, heads, levels, k)?;
    // Replace the directional-grid offset bias: integer offsets put sampling
    // points exactly on texel seams, whose one-sided derivative the checker
    // would flag.
    let nb = s.by_name("da.offset.b2").unwrap().numel();
    s.replace_by_name("da.offset.b2", randn_away(&mut rng, nb, 1.0, 0.1)).unwrap();
    let nw = s.by_name("da.offset.w2").unwrap().numel();
    s.replace_by_name("da.offset.w2", randn(&mut rng, nw, 0.2)).unwrap();
    let sigcfg = OffsetAdjustConfig {
        strategy: OffsetStrategy::SquashScaled,
        squash_kind: SquashKind::SigmoidSymmetric,
        scale_c: 2.0,
        ..Default::default()
    };
    let refs = make_reference_points(&shapes)?;
    out.push(check("deform_attn", s, move |s| {
        let toks = vec![s.by_name("tok0").unwrap().clone(), s.by_name("tok1").unwrap().clone()];
        let y = attn.forward(s, s.by_name("queries").unwrap(), &toks, &refs, &shapes, &sigcfg)?;
        Ok(y.mul(&y)?.sum().mul_scalar(0.5))
    })?);

    // Masked multi-head cross-attention with a fallback row.
    let (q, nk, d) = (3usize, 5usize, 8usize);
    let mut s = ParamStore::new();
    s.register("q", &[q, d], randn(&mut rng, q * d, 0.8)).unwrap();
    s.register("kv", &[nk, d], randn(&mut rng, nk * d, 0.8)).unwrap();
    let mut build_rng = CounterRng::substream(seed, 0xabc);
    let mha = MultiHeadAttention::build(&mut s, &mut build_rng, "mha", d, 2)?;
    // Row 0: partial mask; row 1: open; row 2: fully blocked (fallback).
    let probs = vec![
        0.9, 0.1, 0.8, 0.2, 0.7, //
        1.0, 1.0, 1.0, 1.0, 1.0, //
        0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    out.push(check("masked_cross_attention", s, move |s| {
        let mask = Tensor::from_vec(&[q, nk], probs.clone())?;
        let y = masked_cross_attention(&mha, s, s.by_name("q").unwrap(), s.by_name("kv").unwrap(), &mask)?;
        Ok(y.mul(&y)?.sum().mul_scalar(0.5))
    })?);

    Ok(out)
}

/// Micro end-to-end configuration: 32x32 input, d_model 8, 3 queries,
/// 2 heads, 2 sampling points, one encoder layer and one decoder round,
/// with fusion and both auxiliary heads enabled so every path is exercised.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_points: 2,
        enc_layers: 1,
        dec_rounds: 1,
        n_queries: 3,
        n_classes: 2,
        channels: [4, 6, 8, 10],
        ffn_hidden: 16,
        offset: OffsetAdjustConfig {
            strategy: OffsetStrategy::SquashScaled,
            squash_kind: SquashKind::SigmoidSymmetric,
            scale_c: 2.0,
            ..Default::default()
        },
        fusion: FusionConfig { position: FusionPosition::Late, ..Default::default() },
        bls_mode: BlsMode::Two,
    }
}

/// End-to-end checks on the micro model: a smooth quadratic readout of every
/// output (full differentiability) and the matching-based training loss.
pub fn model_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = CounterRng::substream(seed, 0x6d6f64);
    let cfg = micro_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::build(&cfg, &mut store, seed)?;
    // Keep sampling points off texel seams (see composite_checks).
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.ends_with("offset.b2"))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        let len = store.by_name(&n).unwrap().numel();
        store.replace_by_name(&n, randn_away(&mut rng, len, 1.0, 0.1))?;
    }
    let image = Tensor::from_vec(&[3, 32, 32], randn(&mut rng, 3 * 32 * 32, 0.5))?;

    let quad = |t: &Tensor<f64>| -> Result<Tensor<f64>> { Ok(t.mul(t)?.sum().mul_scalar(0.5)) };
    let img2 = image.clone();

    let mut out = Vec::new();
    {
        let image = image.clone();
        let model_ref = &model;
        out.push(check("model_forward_micro", store.clone(), move |s| {
            let o = model_ref.forward(s, &image)?;
            let mut loss: Option<Tensor<f64>> = None;
            let mut add = |term: Tensor<f64>| {
                loss = Some(match loss.take() {
                    Some(prev) => prev.add(&term).unwrap(),
                    None => term,
                });
            };
            for set in &o.sets {
                add(quad(&set.class_logits)?);
                add(quad(&set.mask_logits)?);
            }
            if let Some(a) = &o.bls_a {
                add(quad(a)?);
            }
            if let Some(b) = &o.bls_b {
                add(quad(b)?);
            }
            Ok(loss.expect("sets nonempty"))
        })?);
    }

    // Training loss through the decoder on a two-organ label map.
    let mut labels = vec![0u8; 32 * 32];
    for y in 4..11 {
        for x in 5..13 {
            labels[y * 32 + x] = 1;
        }
    }
    for y in 20..27 {
        for x in 18..28 {
            labels[y * 32 + x] = 2;
        }
    }
    let targets: Vec<GtObject<f64>> = crate::loss::extract_targets(&labels, 32, 32, 8, 8, 2);
    let weights = LossWeights::default();
    let model_ref = &model;
    out.push(check("total_loss_micro", store.clone(), move |s| {
        let o = model_ref.forward(s, &img2)?;
        let (loss, _) = total_loss(&o, &targets, &labels, (32, 32), 2, &weights)?;
        Ok(loss)
    })?);
    Ok(out)
}

/// The full battery. `include_model` covers the end-to-end micro model
/// (the expensive part).
pub fn gradcheck_suite(seed: u64, include_model: bool) -> Result<Vec<Check>> {
    let mut all = kernel_checks(seed)?;
    all.extend(composite_checks(seed)?);
    if include_model {
        all.extend(model_checks(seed)?);
    }
    Ok(all)
}

trait IntoOk {
    fn into_ok(self) -> Result<Tensor<f64>>;
}

impl IntoOk for Tensor<f64> {
    fn into_ok(self) -> Result<Tensor<f64>> {
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_checks_pass_on_default_seed() {
        for (name, report) in kernel_checks(0).unwrap() {
            assert!(report.passed(), "{name}: max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn composite_checks_pass_on_default_seed() {
        for (name, report) in composite_checks(0).unwrap() {
            assert!(report.passed(), "{name}: max rel err {}", report.max_rel_err);
        }
    }
}
