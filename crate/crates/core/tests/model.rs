mod common;

use common::oracle::{block_gap, randomize_cross, BlockInput};
use jova_core::flow::{total_loss, FlowSample};
use jova_core::model::{
    ConditionSet, Fusion, JovaModel, ModelConfig, ModelError, Modality, RopeMode, RopeTables,
    Stage,
};
use jova_core::mouthmask::{build_mask, LatentBox};
use jova_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        token_dim: 16,
        num_heads: 2,
        multi_stream_depth: 1,
        single_stream_depth: 1,
        fusion,
        ..ModelConfig::default()
    }
}

fn cond(reference: Option<Tensor>) -> ConditionSet {
    ConditionSet {
        video_text: vec![1],
        audio_text: vec![1, 5, 7],
        reference,
    }
}

#[test]
fn video_tokens_follow_patch_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    let v = tape.constant(Tensor::randn([4, 4, 4, 1], &mut rng));
    let a = tape.constant(Tensor::randn([16, 1], &mut rng));
    let segs = model.tokenize(&p, &v, &a, &cond(None), 0.3).unwrap();
    assert_eq!(segs.video.tokens.shape(), &[16, 16]);
    assert_eq!(segs.audio.tokens.shape(), &[16, 16]);
    assert_eq!(segs.text.tokens.shape(), &[4, 16]);
    assert_eq!(segs.video.times[4 * 3], 3.0 / 4.0);
    assert_eq!(segs.audio.times[8], 0.5);
    assert!(segs.text.times.iter().all(|&t| t == 0.0));
    assert!(segs.video.times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn absent_reference_is_zero_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let v = Tensor::randn([2, 4, 4, 1], &mut rng);
    let a = Tensor::randn([8, 1], &mut rng);
    let none = model.predict(&v, &a, &cond(None), 0.5, Stage::Fused).unwrap();
    let zeros = model
        .predict(&v, &a, &cond(Some(Tensor::zeros([4, 4, 1]))), 0.5, Stage::Fused)
        .unwrap();
    assert_eq!(none.0.shape(), v.shape());
    assert_eq!(none.0.max_abs_diff(&zeros.0), 0.0);
    assert_eq!(none.1.max_abs_diff(&zeros.1), 0.0);
}

#[test]
fn indivisible_patching_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let err = model
        .predict(&Tensor::zeros([2, 3, 4, 1]), &Tensor::zeros([8, 1]), &cond(None), 0.5, Stage::Fused)
        .unwrap_err();
    assert!(matches!(err, ModelError::Config(_)), "{err}");
}

#[test]
fn config_rejects_odd_head_dim() {
    let cfg = ModelConfig {
        token_dim: 12,
        num_heads: 4,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn co_temporal_tokens_share_rotation() {
    let cfg = ModelConfig::default();
    let t = RopeTables::new(&cfg, &[1.0, 1.0, 0.0]);
    let pairs = cfg.head_dim() / 2;
    assert_eq!(t.cos[..pairs], t.cos[pairs..2 * pairs]);
    assert_eq!(t.sin[..pairs], t.sin[pairs..2 * pairs]);
    assert!(t.cos[2 * pairs..].iter().all(|&c| c == 1.0));
    assert!(t.sin[2 * pairs..].iter().all(|&s| s == 0.0));
}

#[test]
fn rope_modes_disagree_on_cross_rate_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aligned = ModelConfig::default();
    let per = ModelConfig {
        rope_mode: RopeMode::PerModality,
        ..aligned.clone()
    };
    // Video frame 1 (0.25 s) and audio frame 4 (0.25 s) coincide in time
    // but not in index.
    let input = |rng: &mut ChaCha8Rng| {
        let mut b = BlockInput::random(rng, 128, [1, 5, 0, 0], 4.0, 16.0, 1);
        b.frames[0] = 1;
        b.times[0] = 0.25;
        b
    };
    let segs_pos = |cfg: &ModelConfig, b: &BlockInput| {
        let tape = Tape::new();
        b.segments(&tape).rope_tables(cfg)
    };
    let b = input(&mut rng);
    let ta = segs_pos(&aligned, &b);
    let tp = segs_pos(&per, &b);
    let pairs = aligned.head_dim() / 2;
    let row = |t: &RopeTables, r: usize| t.cos[r * pairs..(r + 1) * pairs].to_vec();
    assert_eq!(row(&ta, 0), row(&ta, 5));
    assert_ne!(row(&tp, 0), row(&tp, 5));
    assert_eq!(row(&tp, 0), row(&tp, 2));
}

#[test]
fn timed_logits_are_invariant_to_a_global_time_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = JovaModel::new(ModelConfig::default(), &mut rng).unwrap();
    for _ in 0..5 {
        let base = BlockInput::random(&mut rng, 128, [8, 12, 2, 3], 4.0, 16.0, 2);
        let mut shifted = base.clone();
        let delta = rng.gen_range(-5.0..5.0);
        for (t, m) in shifted.times.iter_mut().zip(&shifted.modality) {
            if *m != Modality::Text {
                *t += delta;
            }
        }
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        let a = model.attention_logits(&p, 0, &base.segments(&tape)).unwrap();
        let b = model.attention_logits(&p, 0, &shifted.segments(&tape)).unwrap();
        let n = base.rows.len();
        let timed = 20;
        for h in 0..4 {
            for i in 0..timed {
                for j in 0..timed {
                    let k = (h * n + i) * n + j;
                    let gap = (a.value().data()[k] - b.value().data()[k]).abs();
                    assert!(gap <= 1e-10, "head {h} ({i},{j}): {gap}");
                }
            }
        }
    }
}

#[test]
fn joint_block_matches_naive_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    for case in 0..20 {
        let counts = [rng.gen_range(1..12), rng.gen_range(0..12), rng.gen_range(1..3), rng.gen_range(1..6)];
        let input = BlockInput::random(&mut rng, 16, counts, 4.0, 16.0, 2);
        for block in 0..2 {
            let gap = block_gap(&model, block, &input, Stage::Fused);
            assert!(gap <= 1e-10, "case {case} block {block}: {gap}");
        }
    }
}

#[test]
fn isolated_stage_matches_branch_restricted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let input = BlockInput::random(&mut rng, 16, [6, 9, 1, 4], 4.0, 16.0, 2);
    assert!(block_gap(&model, 0, &input, Stage::Isolated) <= 1e-10);
}

#[test]
fn cross_variants_match_two_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for fusion in [Fusion::CrossPlain, Fusion::CrossLinear] {
        let mut model = JovaModel::new(small_config(fusion), &mut rng).unwrap();
        randomize_cross(&mut model, &mut rng);
        for _ in 0..10 {
            let counts = [rng.gen_range(1..10), rng.gen_range(1..10), 1, rng.gen_range(1..5)];
            let input = BlockInput::random(&mut rng, 16, counts, 4.0, 16.0, 2);
            for block in 0..2 {
                let gap = block_gap(&model, block, &input, Stage::Fused);
                assert!(gap <= 1e-10, "{fusion:?} block {block}: {gap}");
            }
        }
    }
}

fn block_output(model: &JovaModel, input: &BlockInput, stage: Stage) -> Vec<f64> {
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    let out = model.block(&p, 0, &input.segments(&tape), stage).unwrap();
    [&out.video, &out.audio, &out.text]
        .iter()
        .flat_map(|s| s.tokens.value().data().to_vec())
        .collect()
}

#[test]
fn zero_cross_layer_equals_no_cross_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = JovaModel::new(small_config(Fusion::CrossLinear), &mut rng).unwrap();
    let input = BlockInput::random(&mut rng, 16, [8, 8, 1, 3], 4.0, 16.0, 2);
    assert_eq!(
        block_output(&model, &input, Stage::Fused),
        block_output(&model, &input, Stage::Isolated)
    );
}

#[test]
fn empty_audio_reduces_cross_to_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for fusion in [Fusion::CrossPlain, Fusion::CrossLinear] {
        let mut model = JovaModel::new(small_config(fusion), &mut rng).unwrap();
        randomize_cross(&mut model, &mut rng);
        let input = BlockInput::random(&mut rng, 16, [6, 0, 1, 2], 4.0, 16.0, 2);
        assert_eq!(
            block_output(&model, &input, Stage::Fused),
            block_output(&model, &input, Stage::Isolated)
        );
    }
}

#[test]
fn single_token_attends_only_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let input = BlockInput::random(&mut rng, 16, [1, 0, 0, 0], 4.0, 16.0, 1);
    assert!(block_gap(&model, 0, &input, Stage::Fused) <= 1e-12);
}

fn zero_residual_branches(model: &mut JovaModel) {
    let names: Vec<String> = model
        .params()
        .names()
        .iter()
        .filter(|n| n.ends_with(".wo") || n.ends_with(".w2"))
        .cloned()
        .collect();
    for n in names {
        model.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn zeroed_output_projections_make_blocks_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for fusion in [Fusion::Joint, Fusion::CrossLinear, Fusion::CrossPlain] {
        let mut model = JovaModel::new(small_config(fusion), &mut rng).unwrap();
        randomize_cross(&mut model, &mut rng);
        zero_residual_branches(&mut model);
        let input = BlockInput::random(&mut rng, 16, [8, 6, 1, 2], 4.0, 16.0, 2);
        let want: Vec<f64> = input.rows.iter().flatten().copied().collect();
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        let mut segs = input.segments(&tape);
        for b in 0..model.num_blocks() {
            segs = model.block(&p, b, &segs, Stage::Fused).unwrap();
        }
        let got: Vec<f64> = [&segs.video, &segs.audio, &segs.text]
            .iter()
            .flat_map(|s| s.tokens.value().data().to_vec())
            .collect();
        assert_eq!(got, want, "{fusion:?}");
    }
}

#[test]
fn all_fusions_share_the_io_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = Tensor::randn([4, 4, 4, 1], &mut rng);
    let a = Tensor::randn([16, 1], &mut rng);
    let r = Tensor::randn([4, 4, 1], &mut rng);
    for fusion in [Fusion::Joint, Fusion::CrossLinear, Fusion::CrossPlain] {
        let model = JovaModel::new(small_config(fusion), &mut rng).unwrap();
        for stage in [Stage::Isolated, Stage::Fused] {
            let (pv, pa) = model.predict(&v, &a, &cond(Some(r.clone())), 0.7, stage).unwrap();
            assert_eq!(pv.shape(), v.shape());
            assert_eq!(pa.shape(), a.shape());
            assert!(pv.is_finite() && pa.is_finite());
        }
    }
}

#[test]
fn forward_is_bit_identical_across_calls_and_instances() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
        let v = Tensor::randn([2, 4, 4, 1], &mut rng);
        let a = Tensor::randn([8, 1], &mut rng);
        model.predict(&v, &a, &cond(None), 0.25, Stage::Fused).unwrap()
    };
    let (x, y) = (build(), build());
    assert_eq!(x.0.data(), y.0.data());
    assert_eq!(x.1.data(), y.1.data());
}

#[test]
fn null_condition_changes_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let v = Tensor::randn([2, 4, 4, 1], &mut rng);
    let a = Tensor::randn([8, 1], &mut rng);
    let c = cond(None);
    let (cv, _) = model.predict(&v, &a, &c, 0.5, Stage::Fused).unwrap();
    let (uv, _) = model.predict(&v, &a, &c.nulled(), 0.5, Stage::Fused).unwrap();
    assert!(cv.max_abs_diff(&uv) > 0.0);
}

#[test]
fn text_id_outside_vocabulary_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = JovaModel::new(small_config(Fusion::Joint), &mut rng).unwrap();
    let bad = ConditionSet {
        video_text: vec![99],
        audio_text: vec![1],
        reference: None,
    };
    assert!(model
        .predict(&Tensor::zeros([2, 4, 4, 1]), &Tensor::zeros([8, 1]), &bad, 0.5, Stage::Fused)
        .is_err());
}

/// Central-difference check of the full training loss over a random subset
/// of parameter entries.
#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = ModelConfig {
        token_dim: 8,
        num_heads: 2,
        multi_stream_depth: 2,
        single_stream_depth: 1,
        fusion: Fusion::Joint,
        ..ModelConfig::default()
    };
    let mut model = JovaModel::new(cfg, &mut rng).unwrap();
    randomize_cross(&mut model, &mut rng);
    let sv = FlowSample::draw_at(Tensor::randn([2, 4, 4, 1], &mut rng), 0.4, &mut rng).unwrap();
    let sa = FlowSample::draw_at(Tensor::randn([8, 1], &mut rng), 0.4, &mut rng).unwrap();
    let mask = build_mask(2, 4, 4, &[Some(LatentBox { x1: 1, y1: 2, x2: 3, y2: 3 }), None]).unwrap();
    let c = cond(Some(Tensor::randn([4, 4, 1], &mut rng)));
    let loss_of = |m: &JovaModel| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let p = m.params().bind(&tape);
        let (pv, pa) = m
            .forward(&p, &tape.constant(sv.xt.clone()), &tape.constant(sa.xt.clone()), &c, sv.t, Stage::Fused)
            .unwrap();
        let l = total_loss(&pv, &pa, &sv, &sa, &mask, 5.0).unwrap();
        let g = tape.backward(&l.total).unwrap();
        (l.breakdown.l_total, p.iter().map(|v| g.get_or_zeros(v)).collect())
    };
    let (_, grads) = loss_of(&model);
    let sizes: Vec<usize> = model.params().values().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let h = 1e-6;
        let mut plus = model.clone();
        plus.params_mut().values_mut()[pi].data_mut()[flat] += h;
        let mut minus = model.clone();
        minus.params_mut().values_mut()[pi].data_mut()[flat] -= h;
        let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
        let analytic = grads[pi].data()[flat];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}
