//! Naive reference for one transformer block: every attention matrix is
//! materialized with scalar loops straight from the parameter tensors.

#![allow(dead_code)]

use jova_core::model::{Fusion, JovaModel, Modality, Segments, Stage, TokenSequence};
use jova_tensor::{Tape, Tensor};
use rand::Rng;

/// Token rows plus everything needed to place them.
#[derive(Clone, Debug)]
pub struct BlockInput {
    pub rows: Vec<Vec<f64>>,
    pub modality: Vec<Modality>,
    /// 0 = video branch, 1 = audio branch.
    pub branch: Vec<u8>,
    pub times: Vec<f64>,
    pub frames: Vec<usize>,
    pub video_text_len: usize,
}

impl BlockInput {
    /// Random rows in [-2, 2]; times are frame / rate for the timed streams.
    pub fn random<R: Rng>(
        rng: &mut R,
        d: usize,
        counts: [usize; 4],
        fps: f64,
        audio_rate: f64,
        per_frame: usize,
    ) -> Self {
        let [nv, na, ntv, nta] = counts;
        let mut b = BlockInput {
            rows: Vec::new(),
            modality: Vec::new(),
            branch: Vec::new(),
            times: Vec::new(),
            frames: Vec::new(),
            video_text_len: ntv,
        };
        let push = |b: &mut BlockInput, m, br, f: usize, time: f64, rng: &mut R| {
            b.rows.push((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect());
            b.modality.push(m);
            b.branch.push(br);
            b.frames.push(f);
            b.times.push(time);
        };
        for i in 0..nv {
            let f = i / per_frame.max(1);
            push(&mut b, Modality::Video, 0, f, f as f64 / fps, rng);
        }
        for i in 0..na {
            push(&mut b, Modality::Audio, 1, i, i as f64 / audio_rate, rng);
        }
        for i in 0..ntv + nta {
            push(&mut b, Modality::Text, u8::from(i >= ntv), 0, 0.0, rng);
        }
        b
    }

    fn range(&self, m: Modality) -> std::ops::Range<usize> {
        let start = self.modality.iter().position(|&x| x == m).unwrap_or(0);
        let n = self.modality.iter().filter(|&&x| x == m).count();
        let start = if n == 0 {
            match m {
                Modality::Video => 0,
                Modality::Audio => self.modality.iter().filter(|&&x| x == Modality::Video).count(),
                Modality::Text => self.rows.len(),
            }
        } else {
            start
        };
        start..start + n
    }

    /// The same tokens as tape constants.
    pub fn segments(&self, tape: &Tape) -> Segments {
        let d = self.rows.first().map_or(0, Vec::len);
        let seq = |m: Modality| {
            let r = self.range(m);
            let data: Vec<f64> = self.rows[r.clone()].iter().flatten().copied().collect();
            TokenSequence {
                tokens: tape.constant(Tensor::new([r.len(), d], data).unwrap()),
                times: self.times[r.clone()].to_vec(),
                frames: self.frames[r].to_vec(),
                modality: m,
            }
        };
        Segments {
            video: seq(Modality::Video),
            audio: seq(Modality::Audio),
            text: seq(Modality::Text),
            video_text_len: self.video_text_len,
        }
    }
}

fn param<'a>(model: &'a JovaModel, name: &str) -> &'a Tensor {
    model
        .params()
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    (0..cols)
        .map(|j| (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum())
        .collect()
}

fn rms(x: &[f64], g: &Tensor, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g.data()).map(|(v, gi)| v * inv * gi).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Rotary angle of pair `j`, written out from the definition.
fn angle(model: &JovaModel, input: &BlockInput, i: usize, j: usize) -> f64 {
    let cfg = model.config();
    let dh = (cfg.token_dim / cfg.num_heads) as f64;
    let inv = cfg.rope_base.powf(-2.0 * j as f64 / dh);
    match input.modality[i] {
        Modality::Text => 0.0,
        _ => match cfg.rope_mode {
            jova_core::model::RopeMode::TemporalAligned => {
                input.times[i] * cfg.audio_rate_latent * inv
            }
            jova_core::model::RopeMode::PerModality => input.frames[i] as f64 * inv,
        },
    }
}

fn rotate(model: &JovaModel, input: &BlockInput, i: usize, x: &[f64]) -> Vec<f64> {
    let cfg = model.config();
    let dh = cfg.token_dim / cfg.num_heads;
    let mut out = x.to_vec();
    for h in 0..cfg.num_heads {
        for j in 0..dh / 2 {
            let a = angle(model, input, i, j);
            let (p, q) = (h * dh + 2 * j, h * dh + 2 * j + 1);
            out[p] = x[p] * a.cos() - x[q] * a.sin();
            out[q] = x[p] * a.sin() + x[q] * a.cos();
        }
    }
    out
}

fn stream_name(model: &JovaModel, block: usize, m: Modality) -> String {
    if block < model.config().multi_stream_depth {
        let s = match m {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        };
        format!("blocks.{block}.{s}")
    } else {
        format!("blocks.{block}.shared")
    }
}

/// Softmax-weighted sum of value rows for one query and head, restricted
/// to `allowed` keys. No allowed key gives a zero output.
fn attend_head(
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    allowed: &dyn Fn(usize) -> bool,
    lo: usize,
    hi: usize,
) -> Vec<f64> {
    let dh = (hi - lo) as f64;
    let logits: Vec<Option<f64>> = keys
        .iter()
        .enumerate()
        .map(|(j, k)| {
            allowed(j).then(|| (lo..hi).map(|c| q[c] * k[c]).sum::<f64>() / dh.sqrt())
        })
        .collect();
    let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; hi - lo];
    if max == f64::NEG_INFINITY {
        return out;
    }
    let weights: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
    let total: f64 = weights.iter().sum();
    for (w, v) in weights.iter().zip(values) {
        for c in lo..hi {
            out[c - lo] += w / total * v[c];
        }
    }
    out
}

/// Output rows of `block` in `[video; audio; text]` order.
pub fn naive_block(model: &JovaModel, block: usize, input: &BlockInput, stage: Stage) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let (d, heads) = (cfg.token_dim, cfg.num_heads);
    let dh = d / heads;
    let eps = cfg.norm_eps;
    let n = input.rows.len();
    let p = |i: usize, what: &str| param(model, &format!("{}.{what}", stream_name(model, block, input.modality[i])));

    let mut q = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let x = rms(&input.rows[i], p(i, "norm1"), eps);
        q.push(rotate(model, input, i, &vecmat(&x, p(i, "wq"))));
        k.push(rotate(model, input, i, &vecmat(&x, p(i, "wk"))));
        v.push(vecmat(&x, p(i, "wv")));
    }

    let fusion = match stage {
        Stage::Isolated => None,
        Stage::Fused => Some(cfg.fusion),
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let self_allowed = |j: usize| match fusion {
            Some(Fusion::Joint) => true,
            _ => input.branch[i] == input.branch[j],
        };
        let cross_allowed = |j: usize| {
            matches!(
                (input.modality[i], input.modality[j]),
                (Modality::Video, Modality::Audio) | (Modality::Audio, Modality::Video)
            )
        };
        let mut a = Vec::with_capacity(d);
        let mut c = Vec::with_capacity(d);
        for h in 0..heads {
            a.extend(attend_head(&q[i], &k, &v, &self_allowed, h * dh, (h + 1) * dh));
            c.extend(attend_head(&q[i], &k, &v, &cross_allowed, h * dh, (h + 1) * dh));
        }
        let merged = match fusion {
            Some(Fusion::CrossPlain) if input.modality[i] != Modality::Text => add(&a, &c),
            Some(Fusion::CrossLinear) if input.modality[i] != Modality::Text => {
                add(&a, &vecmat(&c, p(i, "cross")))
            }
            _ => a,
        };
        let x = add(&input.rows[i], &vecmat(&merged, p(i, "wo")));
        let hdn: Vec<f64> = vecmat(&rms(&x, p(i, "norm2"), eps), p(i, "w1"))
            .into_iter()
            .map(gelu)
            .collect();
        out.push(add(&x, &vecmat(&hdn, p(i, "w2"))));
    }
    out
}

/// Largest absolute difference between the model's block output and the
/// naive oracle.
pub fn block_gap(model: &JovaModel, block: usize, input: &BlockInput, stage: Stage) -> f64 {
    let tape = Tape::new();
    let p = model.params().bind_frozen(&tape);
    let segs = input.segments(&tape);
    let out = model.block(&p, block, &segs, stage).unwrap();
    let got: Vec<f64> = [&out.video, &out.audio, &out.text]
        .iter()
        .flat_map(|s| s.tokens.value().data().to_vec())
        .collect();
    let want: Vec<f64> = naive_block(model, block, input, stage).into_iter().flatten().collect();
    assert_eq!(got.len(), want.len());
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Fills every zero-initialized cross layer with random weights so the
/// cross path is exercised.
pub fn randomize_cross<R: Rng>(model: &mut JovaModel, rng: &mut R) {
    let names: Vec<String> = model
        .params()
        .names()
        .iter()
        .filter(|n| n.ends_with(".cross"))
        .cloned()
        .collect();
    for n in names {
        let t = model.params_mut().get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
    }
}
