//! Model-level contracts: shapes, determinism, residual-identity fusion,
//! masked-attention semantics, permutation equivariance, and the degenerate /
//! exhaustive deformable-attention readouts.

use nearquery_core::deform::{
    adjust_offsets, make_reference_points, DeformAttn, OffsetAdjustConfig, OffsetStrategy,
};
use nearquery_core::model::{
    masked_cross_attention, semantic_labels, BlsMode, FusionPosition, Model, ModelConfig,
    MultiHeadAttention,
};
use nearquery_core::rng::CounterRng;
use nearquery_core::verify::micro_model_config;
use nearquery_core::{ParamStore, Tensor};

fn bits32(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|v| v.to_bits()).collect()
}

fn bits64(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = CounterRng::new(seed);
    Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).unwrap()
}

fn identity_matrix<T: nearquery_core::Elem>(d: usize) -> Vec<T> {
    let mut m = vec![T::ZERO; d * d];
    for i in 0..d {
        m[i * d + i] = T::ONE;
    }
    m
}

#[test]
fn shape_contract_at_default_config() {
    let cfg = ModelConfig::default(); // d 64, Q 20, C 6
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut store, 1).unwrap();
    let out = model.forward(&store, &random_image(3, 128, 128)).unwrap();
    assert_eq!(out.sets.len(), cfg.dec_layers() + 1); // 9 + 1 prediction sets
    for set in &out.sets {
        assert_eq!(set.class_logits.shape(), &[20, 7]);
        assert_eq!(set.mask_logits.shape(), &[20, 32, 32]);
    }
    assert!(out.bls_a.is_none() && out.bls_b.is_none());

    let labels = semantic_labels(&out, cfg.n_classes, 128, 128).unwrap();
    assert_eq!(labels.len(), 128 * 128);
    assert!(labels.iter().all(|&v| v <= 6));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = micro_model_config();
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&cfg, &mut store, 5).unwrap();
        let out = model.forward(&store, &random_image(8, 32, 32)).unwrap();
        let last = out.sets.last().unwrap();
        (bits32(last.class_logits.data()), bits32(last.mask_logits.data()))
    };
    assert_eq!(run(), run());
}

#[test]
fn bls_arity_and_shapes() {
    let mut cfg = micro_model_config();
    let image = random_image(4, 32, 32);

    cfg.bls_mode = BlsMode::One;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut store, 2).unwrap();
    let out = model.forward(&store, &image).unwrap();
    assert!(out.bls_a.is_none());
    assert_eq!(out.bls_b.as_ref().unwrap().shape(), &[1, 32, 32]);

    cfg.bls_mode = BlsMode::Two;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg, &mut store, 2).unwrap();
    let out = model.forward(&store, &image).unwrap();
    assert_eq!(out.bls_a.as_ref().unwrap().shape(), &[3, 32, 32]); // C+1 = 3
    assert_eq!(out.bls_b.as_ref().unwrap().shape(), &[1, 32, 32]);
}

#[test]
fn residual_identity_for_every_fusion_position() {
    let image = random_image(11, 64, 64);
    let outputs_for = |position: FusionPosition| {
        let mut cfg = micro_model_config();
        cfg.bls_mode = BlsMode::Off;
        cfg.fusion.position = position;
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&cfg, &mut store, 21).unwrap();
        for name in ["encoder.fusion_proj.w", "encoder.fusion_proj.b"] {
            let n = store.by_name(name).unwrap().numel();
            store.replace_by_name(name, vec![0.0; n]).unwrap();
        }
        let out = model.forward(&store, &image).unwrap();
        let last = out.sets.last().unwrap();
        (bits32(last.class_logits.data()), bits32(last.mask_logits.data()))
    };
    let baseline = outputs_for(FusionPosition::None);
    for pos in [FusionPosition::Early, FusionPosition::Inside, FusionPosition::Late] {
        assert_eq!(outputs_for(pos), baseline, "position {pos:?}");
    }
}

#[test]
fn fusion_positions_differ_with_live_projection() {
    // Sanity counterpart: with a non-zero projection the positions matter.
    let image = random_image(11, 64, 64);
    let outputs_for = |position: FusionPosition| {
        let mut cfg = micro_model_config();
        cfg.bls_mode = BlsMode::Off;
        cfg.fusion.position = position;
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&cfg, &mut store, 21).unwrap();
        let out = model.forward(&store, &image).unwrap();
        bits32(out.sets.last().unwrap().mask_logits.data())
    };
    let none = outputs_for(FusionPosition::None);
    assert_ne!(outputs_for(FusionPosition::Late), none);
}

#[test]
fn masked_attention_trivial_masks_match_unmasked() {
    let (q, n, d) = (3usize, 6usize, 8usize);
    let mut store = ParamStore::<f32>::new();
    let mut rng = CounterRng::new(13);
    let mha = MultiHeadAttention::build(&mut store, &mut rng, "mha", d, 2).unwrap();
    let queries = Tensor::from_vec(&[q, d], (0..q * d).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect()).unwrap();
    let tokens = Tensor::from_vec(&[n, d], (0..n * d).map(|i| ((i * 17 % 13) as f32 - 6.0) * 0.1).collect()).unwrap();

    let unmasked = mha.forward(&store, &queries, &tokens, &tokens, None).unwrap();
    let ones = Tensor::from_vec(&[q, n], vec![1.0f32; q * n]).unwrap();
    let zeros = Tensor::from_vec(&[q, n], vec![0.0f32; q * n]).unwrap();
    let m1 = masked_cross_attention(&mha, &store, &queries, &tokens, &ones).unwrap();
    let m0 = masked_cross_attention(&mha, &store, &queries, &tokens, &zeros).unwrap();
    assert_eq!(bits32(m1.data()), bits32(unmasked.data())); // no-op mask
    assert_eq!(bits32(m0.data()), bits32(unmasked.data())); // empty-set fallback
}

#[test]
fn masked_attention_single_admissible_position_reads_value_row() {
    let (q, n, d) = (2usize, 5usize, 4usize);
    let mut store = ParamStore::<f32>::new();
    let mut rng = CounterRng::new(14);
    let mha = MultiHeadAttention::build(&mut store, &mut rng, "mha", d, 2).unwrap();
    // identity value/output projections, zero biases
    store.replace_by_name("mha.v.w", identity_matrix::<f32>(d)).unwrap();
    store.replace_by_name("mha.v.b", vec![0.0; d]).unwrap();
    store.replace_by_name("mha.o.w", identity_matrix::<f32>(d)).unwrap();
    store.replace_by_name("mha.o.b", vec![0.0; d]).unwrap();

    let queries = Tensor::from_vec(&[q, d], vec![0.3; q * d]).unwrap();
    let tokens =
        Tensor::from_vec(&[n, d], (0..n * d).map(|i| (i as f32).sin()).collect()).unwrap();
    // query 0 → only position 3; query 1 → only position 1
    let mut probs = vec![0.0f32; q * n];
    probs[3] = 1.0;
    probs[n + 1] = 1.0;
    let mask = Tensor::from_vec(&[q, n], probs).unwrap();
    let out = masked_cross_attention(&mha, &store, &queries, &tokens, &mask).unwrap();
    for (qi, pos) in [(0usize, 3usize), (1, 1)] {
        for c in 0..d {
            let got = out.data()[qi * d + c];
            let want = tokens.data()[pos * d + c];
            assert!(
                (got - want).abs() < 1e-6,
                "query {qi} channel {c}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn permuting_query_features_permutes_outputs() {
    // Self-attention reduces over positions in permuted memory order, so the
    // comparison runs in f64 where that reordering noise is ~1e-15.
    let cfg = micro_model_config(); // Q = 3
    let image = random_image(17, 32, 32).cast::<f64>();
    let perm = [2usize, 0, 1];

    let run = |permute: bool| {
        let mut store = ParamStore::<f64>::new();
        let model = Model::build(&cfg, &mut store, 33).unwrap();
        let d = cfg.d_model;
        // identical positional embeddings for every query
        let qpos = store.by_name("decoder.query_pos").unwrap().data().to_vec();
        let row0 = qpos[..d].to_vec();
        store
            .replace_by_name("decoder.query_pos", row0.iter().cycle().take(3 * d).copied().collect())
            .unwrap();
        if permute {
            let feat = store.by_name("decoder.query_feat").unwrap().data().to_vec();
            let mut permuted = vec![0.0f64; feat.len()];
            for (dst, &src) in perm.iter().enumerate() {
                permuted[dst * d..(dst + 1) * d].copy_from_slice(&feat[src * d..(src + 1) * d]);
            }
            store.replace_by_name("decoder.query_feat", permuted).unwrap();
        }
        let out = model.forward(&store, &image).unwrap();
        let last = out.sets.last().unwrap();
        (last.class_logits.data().to_vec(), last.mask_logits.data().to_vec())
    };

    let (cls_a, mask_a) = run(false);
    let (cls_b, mask_b) = run(true);
    let classes = cfg.n_classes + 1;
    let plane = 8 * 8;
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..classes {
            let got = cls_b[dst * classes + c];
            let want = cls_a[src * classes + c];
            assert!((got - want).abs() < 1e-9, "class row {dst} col {c}: {got} vs {want}");
        }
        for p in 0..plane {
            let got = mask_b[dst * plane + p];
            let want = mask_a[src * plane + p];
            assert!((got - want).abs() < 1e-9, "mask row {dst} px {p}: {got} vs {want}");
        }
    }
}

#[test]
fn deform_attention_degenerate_reads_reference_value() {
    // 1 level, 1 head, K = 1, zeroed offset head, identity projections:
    // each query reads exactly its own token.
    let d = 4;
    let shapes = [(2usize, 3usize)];
    let mut store = ParamStore::<f64>::new();
    let mut rng = CounterRng::new(3);
    let attn = DeformAttn::build(&mut store, &mut rng, "da", d, 1, 1, 1).unwrap();
    for (name, value) in [
        ("da.value.w", identity_matrix::<f64>(d)),
        ("da.value.b", vec![0.0; d]),
        ("da.out.w", identity_matrix::<f64>(d)),
        ("da.out.b", vec![0.0; d]),
        ("da.offset.w2", vec![0.0; d * 2]),
        ("da.offset.b2", vec![0.0; 2]),
    ] {
        store.replace_by_name(name, value).unwrap();
    }
    let refs = make_reference_points(&shapes).unwrap();
    let tokens = Tensor::from_vec(&[6, d], (0..24).map(|i| (i as f64) * 0.37 - 3.0).collect()).unwrap();
    let queries = Tensor::from_vec(&[6, d], vec![0.1; 24]).unwrap();
    let cfg = OffsetAdjustConfig::default(); // strategy none
    let out = attn
        .forward(&store, &queries, &[tokens.clone()], &refs, &shapes, &cfg)
        .unwrap();
    assert_eq!(bits64(out.data()), bits64(tokens.data()));
}

#[test]
fn deform_attention_exhaustive_uniform_equals_dense_average() {
    // K = H*W offsets covering every cell with uniform weights equals the
    // dense average of all value vectors (brute-force oracle).
    let d = 4;
    let (h, w) = (4usize, 4usize);
    let k = h * w;
    let shapes = [(h, w)];
    let mut store = ParamStore::<f64>::new();
    let mut rng = CounterRng::new(4);
    let attn = DeformAttn::build(&mut store, &mut rng, "da", d, 1, 1, k).unwrap();
    for (name, value) in [
        ("da.value.w", identity_matrix::<f64>(d)),
        ("da.value.b", vec![0.0; d]),
        ("da.out.w", identity_matrix::<f64>(d)),
        ("da.out.b", vec![0.0; d]),
        ("da.weight.w", vec![0.0; d * k]),
        ("da.weight.b", vec![0.0; k]),
    ] {
        store.replace_by_name(name, value).unwrap();
    }
    let refs = make_reference_points(&shapes).unwrap();
    let tokens =
        Tensor::from_vec(&[k, d], (0..k * d).map(|i| ((i * 31 % 17) as f64) * 0.21 - 1.5).collect())
            .unwrap();
    let n = 3usize;
    let queries = Tensor::from_vec(&[n, d], vec![0.2; n * d]).unwrap();
    let refs3 = nearquery_core::deform::ReferencePoints {
        coords: refs.coords[..n].to_vec(),
        level_ranges: vec![(0, n)],
    };
    // offsets: for query q, point index (i*w+j) lands on texel (i, j)
    let mut offsets = vec![0.0f64; n * k * 2];
    for (qi, c) in refs3.coords.iter().enumerate() {
        let base_x = c[0] * w as f64 - 0.5;
        let base_y = c[1] * h as f64 - 0.5;
        for i in 0..h {
            for j in 0..w {
                let slot = (qi * k + i * w + j) * 2;
                offsets[slot] = j as f64 - base_x;
                offsets[slot + 1] = i as f64 - base_y;
            }
        }
    }
    let offsets = Tensor::from_vec(&[n, 1, 1, k, 2], offsets).unwrap();
    let out = attn
        .attend(&store, &queries, &[tokens.clone()], &refs3, &shapes, &offsets)
        .unwrap();

    // dense-average oracle
    let mut mean = vec![0.0f64; d];
    for row in tokens.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    for qi in 0..n {
        for c in 0..d {
            assert!(
                (out.data()[qi * d + c] - mean[c]).abs() < 1e-12,
                "query {qi} channel {c}"
            );
        }
    }
}

#[test]
fn compute_offsets_zero_head_and_shape() {
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    let mut rng = CounterRng::new(6);
    let attn = DeformAttn::build(&mut store, &mut rng, "da", d, 2, 3, 4).unwrap();
    let queries = Tensor::from_vec(&[3, d], (0..3 * d).map(|i| (i as f64).cos()).collect()).unwrap();
    let raw = attn.compute_offsets(&store, &queries).unwrap();
    assert_eq!(raw.shape(), &[3, 2, 3, 4, 2]);

    store.replace_by_name("da.offset.w2", vec![0.0; d * 2 * 2 * 3 * 4]).unwrap();
    store.replace_by_name("da.offset.b2", vec![0.0; 2 * 2 * 3 * 4]).unwrap();
    let raw = attn.compute_offsets(&store, &queries).unwrap();
    assert!(raw.data().iter().all(|&v| v == 0.0));

    // width mismatch is rejected
    let bad = Tensor::from_vec(&[3, d + 1], vec![0.0; 3 * (d + 1)]).unwrap();
    assert!(attn.compute_offsets(&store, &bad).is_err());
}

#[test]
fn attention_weights_sum_to_one_per_query_head() {
    // Convex-combination probe: identity projections over a constant value
    // field, with squash scale 1 and central references so every sampling
    // point stays strictly inside the map. The output equals the constant
    // iff the per-(query, head) weights sum to one.
    let d = 2;
    let (h, w) = (8usize, 8usize);
    let shapes = [(h, w)];
    let mut store = ParamStore::<f64>::new();
    let mut rng = CounterRng::new(9);
    let attn = DeformAttn::build(&mut store, &mut rng, "da", d, 1, 1, 4).unwrap();
    for (name, value) in [
        ("da.value.w", identity_matrix::<f64>(d)),
        ("da.value.b", vec![0.0; d]),
        ("da.out.w", identity_matrix::<f64>(d)),
        ("da.out.b", vec![0.0; d]),
    ] {
        store.replace_by_name(name, value).unwrap();
    }
    let tokens = Tensor::from_vec(&[h * w, d], vec![1.0; h * w * d]).unwrap();
    // three queries anchored to interior cells
    let all_refs = make_reference_points(&shapes).unwrap();
    let refs = nearquery_core::deform::ReferencePoints {
        coords: vec![all_refs.coords[27], all_refs.coords[28], all_refs.coords[35]],
        level_ranges: vec![(0, 3)],
    };
    let queries = Tensor::from_vec(&[3, d], (0..6).map(|i| (i as f64).sin()).collect()).unwrap();
    let cfg = OffsetAdjustConfig {
        strategy: OffsetStrategy::Squash, // scale 1: offsets stay within (-1, 1)
        ..OffsetAdjustConfig::default()
    };
    let out = attn.forward(&store, &queries, &[tokens], &refs, &shapes, &cfg).unwrap();
    for &v in out.data() {
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn adjusted_offsets_keep_component_signs() {
    let mut rng = CounterRng::new(15);
    let raw_vals: Vec<f64> = (0..240).map(|_| rng.normal() * 3.0).collect();
    let raw = Tensor::from_vec(&[5, 2, 1, 12, 2], raw_vals.clone()).unwrap();
    for cfg in [
        OffsetAdjustConfig { strategy: OffsetStrategy::ClipDivide, ..Default::default() },
        OffsetAdjustConfig { strategy: OffsetStrategy::SquashScaled, ..Default::default() },
        OffsetAdjustConfig {
            strategy: OffsetStrategy::SquashScaled,
            squash_kind: nearquery_core::deform::SquashKind::SoftmaxSign,
            ..Default::default()
        },
    ] {
        let out = adjust_offsets(&raw, &cfg).unwrap();
        for (o, r) in out.data().iter().zip(&raw_vals) {
            assert!(o * r >= 0.0, "sign flip: {r} -> {o} under {:?}", cfg.strategy);
        }
    }
}
