use jova_core::mouthmask::{latent_mask, MouthBoxPx, VideoCodec};
use jova_core::toyworld::{
    detect_phonemes, envelope_from_transcript, generate_scene, pearson, resample_envelope,
    sync_from_aperture, sync_score, transcript_error, AudioCodec, BlockCodec, Family, SceneParams,
    TranscriptParams,
};
use jova_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(family: Family, seed: u64) -> jova_core::toyworld::ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene(family, &mut rng, &SceneParams::default()).unwrap()
}

#[test]
fn generation_is_deterministic_per_seed() {
    for f in Family::ALL {
        assert_eq!(scene(f, 7), scene(f, 7));
        assert_ne!(scene(f, 7), scene(f, 8));
    }
}

#[test]
fn families_keep_their_invariants() {
    let p = SceneParams::default();
    for seed in 0..20 {
        let a = scene(Family::AvatarSpeech, seed);
        assert!(a.boxes.iter().all(|b| b.present));
        assert!((p.transcript_min..=p.transcript_max).contains(&a.transcript.len()));
        assert!(a.transcript.iter().all(|&id| id < p.phoneme_vocab));
        assert!(a.reference.is_some());
        for f in [Family::VideoAudio, Family::AudioOnly] {
            let s = scene(f, seed);
            assert!(s.boxes.iter().all(|b| !b.present));
            assert!(s.transcript.is_empty());
        }
        assert!(scene(Family::AudioOnly, seed).video.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn mouth_occupies_about_two_percent_of_the_frame() {
    let s = scene(Family::AvatarSpeech, 1);
    let p = SceneParams::default();
    let ratio = s.boxes[0].area() as f64 / (p.width * p.height) as f64;
    assert!((ratio - 0.023).abs() < 0.002, "{ratio}");
}

#[test]
fn aperture_tracks_the_envelope_exactly() {
    let p = SceneParams::default();
    for seed in 0..20 {
        let s = scene(Family::AvatarSpeech, seed);
        let env = resample_envelope(&s.envelope, p.frames);
        for (a, e) in s.aperture.iter().zip(&env) {
            assert!((a - e * p.mouth_height as f64).abs() <= 1e-12);
        }
        let score = sync_score(&s.video, &s.envelope, &s.boxes, 0).unwrap();
        assert!((score - 1.0).abs() <= 1e-6, "seed {seed}: {score}");
    }
}

#[test]
fn silent_transcript_gives_flat_envelope_and_constant_aperture() {
    let p = SceneParams::default();
    let env = envelope_from_transcript(&[], &[], &p);
    assert!(env.iter().all(|&e| e == 0.0));
    assert_eq!(transcript_error(&env, &[], &TranscriptParams::default()).unwrap(), 0.0);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), 0.0);
}

#[test]
fn sync_survives_shifts_within_the_search_window() {
    let s = scene(Family::AvatarSpeech, 3);
    let p = SceneParams::default();
    let spf = p.samples_per_frame();
    let aperture = jova_core::toyworld::measure_aperture(&s.video, &s.boxes).unwrap();
    for k in 1..=2usize {
        let mut shifted = vec![0.0; k * spf];
        shifted.extend_from_slice(&s.envelope[..s.envelope.len() - k * spf]);
        let within = sync_from_aperture(&aperture, &shifted, k).unwrap();
        let rigid = sync_from_aperture(&aperture, &shifted, 0).unwrap();
        assert!(within > 0.9, "offset {k}: {within}");
        assert!(within >= rigid);
    }
}

#[test]
fn sync_is_invariant_to_affine_envelope_rescaling() {
    let s = scene(Family::AvatarSpeech, 4);
    let base = sync_score(&s.video, &s.envelope, &s.boxes, 1).unwrap();
    let scaled: Vec<f64> = s.envelope.iter().map(|e| 3.5 * e - 0.2).collect();
    let other = sync_score(&s.video, &scaled, &s.boxes, 1).unwrap();
    assert!((base - other).abs() <= 1e-12);
}

#[test]
fn sync_needs_four_frames() {
    assert!(sync_from_aperture(&[1.0, 2.0, 3.0], &[1.0; 6], 0).is_err());
    let video = Tensor::zeros([3, 4, 4, 1]);
    let boxes: Vec<MouthBoxPx> = (0..3).map(|f| MouthBoxPx::new(f, 0, 0, 2, 2)).collect();
    assert!(sync_score(&video, &[0.0; 3], &boxes, 0).is_err());
}

/// Monte-Carlo: independent random aperture/envelope pairs at T = 64 rarely
/// correlate at 0.5 or more under a ±1 offset search.
#[test]
fn unrelated_signals_score_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 1000;
    let mut high = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let e: Vec<f64> = (0..64 * 8).map(|_| rng.gen::<f64>()).collect();
        if sync_from_aperture(&a, &e, 1).unwrap().abs() >= 0.5 {
            high += 1;
        }
    }
    assert!(high <= trials / 100, "{high} of {trials} above 0.5");
}

#[test]
fn transcript_error_examples() {
    let p = SceneParams::default();
    let tp = TranscriptParams::default();
    for seed in 0..20 {
        let s = scene(Family::AvatarSpeech, seed);
        assert_eq!(transcript_error(&s.envelope, &s.transcript, &tp).unwrap(), 0.0);
        let flat = vec![0.0; s.envelope.len()];
        assert_eq!(transcript_error(&flat, &s.transcript, &tp).unwrap(), 1.0);
    }
    let ten: Vec<usize> = (0..10).map(|i| i % 8).collect();
    let params = SceneParams {
        audio_len: 160,
        frames: 16,
        slots: 10,
        transcript_max: 10,
        ..p
    };
    let slots: Vec<usize> = (0..10).collect();
    let env = envelope_from_transcript(&ten, &slots, &params);
    let mut swapped = ten.clone();
    swapped[4] = (swapped[4] + 3) % 8;
    assert!((transcript_error(&env, &swapped, &tp).unwrap() - 0.1).abs() <= 1e-12);
    assert_eq!(detect_phonemes(&env, &tp), ten);
    // Empty transcript: each detected event is an insertion.
    assert_eq!(transcript_error(&env, &[], &tp).unwrap(), 10.0);
    assert!(transcript_error(&[f64::NAN], &[1], &tp).is_err());
}

#[test]
fn video_codec_examples() {
    let codec = BlockCodec::new(4, 2).unwrap();
    let c = Tensor::full([4, 8, 8, 1], 0.7);
    let z = codec.encode_video(&c).unwrap();
    assert_eq!(z.shape(), &[2, 2, 2, 1]);
    assert!(z.data().iter().all(|&v| (v - 0.7).abs() <= 1e-15));
    assert!(codec.decode_video(&z).unwrap().max_abs_diff(&c) <= 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn([3, 5, 5, 2], &mut rng);
    let id = BlockCodec::new(1, 1).unwrap();
    assert_eq!(id.decode_video(&id.encode_video(&x).unwrap()).unwrap(), x);
    assert!(codec.encode_video(&Tensor::zeros([3, 8, 8, 1])).is_err());
}

#[test]
fn decode_of_encode_is_the_block_mean_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let codec = BlockCodec::new(2, 2).unwrap();
    let x = Tensor::randn([4, 4, 6, 1], &mut rng);
    let r = codec.decode_video(&codec.encode_video(&x).unwrap()).unwrap();
    for f in 0..4 {
        for y in 0..4 {
            for xx in 0..6 {
                let mut sum = 0.0;
                for df in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (ff, yy, xs) = (f / 2 * 2 + df, y / 2 * 2 + dy, xx / 2 * 2 + dx);
                            sum += x.data()[(ff * 4 + yy) * 6 + xs];
                        }
                    }
                }
                let got = r.data()[(f * 4 + y) * 6 + xx];
                assert!((got - sum / 8.0).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_latent_cell_changes_exactly_its_pixel_block(
        seed in any::<u64>(), s in prop::sample::select(vec![1usize, 2, 4]), t_s in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = BlockCodec::new(s, t_s).unwrap();
        let (t, h, w) = (2 * t_s, 2 * s, 3 * s);
        let x = Tensor::randn([t, h, w, 1], &mut rng);
        let z = codec.encode(&x).unwrap();
        let cell = rng.gen_range(0..z.numel());
        let mut z2 = z.clone();
        z2.data_mut()[cell] += 1.0;
        let (a, b) = (codec.decode(&z).unwrap(), codec.decode(&z2).unwrap());
        let zs = z.shape().to_vec();
        let (lf, ly, lx) = (cell / (zs[1] * zs[2]), cell / zs[2] % zs[1], cell % zs[2]);
        for i in 0..a.numel() {
            let (f, y, xx) = (i / (h * w), i / w % h, i % w);
            let inside = f / t_s == lf && y / s == ly && xx / s == lx;
            prop_assert_eq!(a.data()[i] != b.data()[i], inside);
        }
    }

    #[test]
    fn audio_codec_is_local_per_hop(seed in any::<u64>(), hop in 1usize..6, frames in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = AudioCodec::new(hop).unwrap();
        let x = Tensor::randn([hop * frames, 1], &mut rng);
        let z = codec.encode(&x).unwrap();
        prop_assert_eq!(z.shape(), &[frames, 1]);
        let j = rng.gen_range(0..frames);
        let mut z2 = z.clone();
        z2.data_mut()[j] -= 2.0;
        let (a, b) = (codec.decode(&z).unwrap(), codec.decode(&z2).unwrap());
        for i in 0..hop * frames {
            prop_assert_eq!(a.data()[i] != b.data()[i], i / hop == j);
        }
    }
}

#[test]
fn audio_codec_examples() {
    let c = AudioCodec::new(4).unwrap();
    let x = Tensor::full([8, 1], 0.3);
    assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
    let id = AudioCodec::new(1).unwrap();
    let y = Tensor::new([3, 1], vec![1.0, -2.0, 0.5]).unwrap();
    assert_eq!(id.encode(&y).unwrap(), y);
    assert!(c.encode(&Tensor::zeros([6, 1])).is_err());
}

#[test]
fn avatar_mask_covers_the_mouth_footprint() {
    let s = scene(Family::AvatarSpeech, 9);
    let codec = BlockCodec::new(4, 2).unwrap();
    let mask = latent_mask(&s.boxes, codec.spec(), 8, 8, 8).unwrap();
    assert!(!mask.is_empty());
    let none = scene(Family::VideoAudio, 9);
    assert!(latent_mask(&none.boxes, codec.spec(), 8, 8, 8).unwrap().is_empty());
}

#[test]
fn scene_exports_to_container() {
    let s = scene(Family::AvatarSpeech, 10);
    let c = s.to_checkpoint().unwrap();
    let back = jova_tensor::Checkpoint::from_bytes(&c.to_bytes()).unwrap();
    assert_eq!(back.text("family").unwrap(), "avatar_speech");
    assert_eq!(back.require("video").unwrap().to_tensor(), s.video);
    let (vt, at) = s.text_ids();
    assert_eq!(vt, vec![1]);
    assert_eq!(at.len(), 1 + s.transcript.len());
}
