use std::rc::Rc;

use jova_tensor::{concat_rows, DType, Tape, Tensor, Var};
use rand::Rng;

use super::config::{Fusion, ModelConfig};
use super::params::ParamStore;
use super::rope::{rope_position, RopeTables};
use super::{ModelError, Result};

/// Text id reserved for the learned null condition.
pub const NULL_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Audio,
    Text,
}

/// Token rows of one modality plus their temporal coordinates.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[n, D]`
    pub tokens: Var,
    /// Seconds; 0 for text.
    pub times: Vec<f64>,
    /// Frame index within the modality; 0 for text.
    pub frames: Vec<usize>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn with_tokens(&self, tokens: Var) -> Self {
        Self {
            tokens,
            times: self.times.clone(),
            frames: self.frames.clone(),
            modality: self.modality,
        }
    }
}

/// The three token streams entering a block. The first `video_text_len`
/// text rows condition the video branch; the rest condition the audio branch.
#[derive(Clone, Debug)]
pub struct Segments {
    pub video: TokenSequence,
    pub audio: TokenSequence,
    pub text: TokenSequence,
    pub video_text_len: usize,
}

impl Segments {
    pub fn total_len(&self) -> usize {
        self.video.len() + self.audio.len() + self.text.len()
    }

    /// Branch of every token in concatenation order: 0 for video-side, 1 for
    /// audio-side. Text rows inherit the branch they condition.
    fn branches(&self) -> Vec<(Modality, u8)> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend(std::iter::repeat_n((Modality::Video, 0), self.video.len()));
        out.extend(std::iter::repeat_n((Modality::Audio, 1), self.audio.len()));
        for i in 0..self.text.len() {
            out.push((Modality::Text, u8::from(i >= self.video_text_len)));
        }
        out
    }

    /// Allowed (query, key) pairs for attention restricted to each branch.
    pub fn isolated_mask(&self) -> Rc<[bool]> {
        let b = self.branches();
        b.iter()
            .flat_map(|qi| b.iter().map(move |kj| qi.1 == kj.1))
            .collect()
    }

    /// Allowed pairs for video-to-audio and audio-to-video cross attention.
    pub fn cross_mask(&self) -> Rc<[bool]> {
        let b = self.branches();
        b.iter()
            .flat_map(|qi| {
                b.iter().map(move |kj| {
                    matches!(
                        (qi.0, kj.0),
                        (Modality::Video, Modality::Audio) | (Modality::Audio, Modality::Video)
                    )
                })
            })
            .collect()
    }

    pub fn full_mask(&self) -> Rc<[bool]> {
        vec![true; self.total_len().pow(2)].into()
    }

    fn parts(&self) -> [&TokenSequence; 3] {
        [&self.video, &self.audio, &self.text]
    }

    pub fn rope_tables(&self, cfg: &ModelConfig) -> RopeTables {
        let positions: Vec<f64> = self
            .parts()
            .iter()
            .flat_map(|s| {
                s.times
                    .iter()
                    .zip(&s.frames)
                    .map(|(&t, &f)| rope_position(cfg, s.modality, t, f))
            })
            .collect();
        RopeTables::new(cfg, &positions)
    }
}

/// Whether modalities may exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Each branch attends only to its own tokens and its own text.
    Isolated,
    /// The configured fusion is active.
    Fused,
}

/// Conditioning other than the timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub video_text: Vec<usize>,
    pub audio_text: Vec<usize>,
    /// Reference frame latent `[H, W, C]`, channel-concatenated with every
    /// video latent frame.
    pub reference: Option<Tensor>,
}

impl ConditionSet {
    /// Both text streams replaced by the null token; the reference is kept.
    pub fn nulled(&self) -> Self {
        Self {
            video_text: vec![NULL_TOKEN],
            audio_text: vec![NULL_TOKEN],
            reference: self.reference.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    fn apply(&self, p: &[Var], x: &Var) -> Result<Var> {
        let y = x.matmul(&p[self.w])?;
        Ok(match self.b {
            Some(b) => y.add(&p[b])?,
            None => y,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Stream {
    norm1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm2: usize,
    w1: usize,
    w2: usize,
    cross: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    video_in: Linear,
    ref_in: usize,
    audio_in: Linear,
    text_embed: usize,
    time_in: Linear,
    time_out: Linear,
    /// Multi-stream blocks hold `[video, audio, text]`; single-stream blocks
    /// hold one shared stream.
    blocks: Vec<Vec<Stream>>,
    video_norm: usize,
    audio_norm: usize,
    video_out: Linear,
    audio_out: Linear,
}

struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let t = Tensor::randn(shape.to_vec(), self.rng).map(|x| x * std);
        self.store.add(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.store.add(name, Tensor::full(shape.to_vec(), value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), &[fan_in, fan_out], std),
            b: bias.then(|| self.fill(format!("{name}.b"), &[fan_out], 0.0)),
        }
    }

    fn stream(&mut self, name: &str, d: usize, ffn: usize, out_std: f64, cross: bool) -> Stream {
        let s = 1.0 / (d as f64).sqrt();
        Stream {
            norm1: self.fill(format!("{name}.norm1"), &[d], 1.0),
            wq: self.normal(format!("{name}.wq"), &[d, d], s),
            wk: self.normal(format!("{name}.wk"), &[d, d], s),
            wv: self.normal(format!("{name}.wv"), &[d, d], s),
            wo: self.normal(format!("{name}.wo"), &[d, d], out_std),
            norm2: self.fill(format!("{name}.norm2"), &[d], 1.0),
            w1: self.normal(format!("{name}.w1"), &[d, ffn], s),
            w2: self.normal(
                format!("{name}.w2"),
                &[ffn, d],
                out_std * (d as f64 / ffn as f64).sqrt(),
            ),
            cross: cross.then(|| self.fill(format!("{name}.cross"), &[d, d], 0.0)),
        }
    }
}

/// Sinusoidal features of a scalar position: `[cos(p·f_i)…, sin(p·f_i)…]`
/// with `f_i = max_period^(−i/half)`. An odd `dim` ends with a zero.
pub fn sinusoid(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = max_period.powf(-(i as f64) / half as f64);
        let (s, c) = (pos * f).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    out
}

/// Amplitude of the fixed spatial and text-index embeddings.
const POSITION_SCALE: f64 = 0.5;

/// The joint video-audio velocity network.
#[derive(Clone, Debug)]
pub struct JovaModel {
    cfg: ModelConfig,
    layout: Layout,
    params: ParamStore,
    dtype: DType,
}

impl JovaModel {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let ffn = cfg.ffn_mult * d;
        let [ph, pw] = cfg.video_patch;
        let patch = ph * pw * cfg.video_channels;
        let n_blocks = cfg.multi_stream_depth + cfg.single_stream_depth;
        let out_std = 1.0 / ((d * 2 * n_blocks) as f64).sqrt();
        let cross = cfg.fusion == Fusion::CrossLinear;

        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
        };
        let in_std = |n: usize| 1.0 / (n as f64).sqrt();
        let video_in = b.linear("video_in", patch, d, in_std(patch), true);
        let ref_in = b.normal("ref_in.w".into(), &[patch, d], in_std(patch));
        let audio_in = b.linear("audio_in", cfg.audio_channels, d, in_std(cfg.audio_channels), true);
        let text_embed = b.normal("text_embed".into(), &[cfg.text_vocab_size, d], 1.0);
        let time_in = b.linear("time_mlp.0", d, d, in_std(d), true);
        let time_out = b.linear("time_mlp.1", d, d, in_std(d), true);
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..cfg.multi_stream_depth {
            blocks.push(vec![
                b.stream(&format!("blocks.{i}.video"), d, ffn, out_std, cross),
                b.stream(&format!("blocks.{i}.audio"), d, ffn, out_std, cross),
                b.stream(&format!("blocks.{i}.text"), d, ffn, out_std, false),
            ]);
        }
        for i in cfg.multi_stream_depth..n_blocks {
            blocks.push(vec![b.stream(&format!("blocks.{i}.shared"), d, ffn, out_std, cross)]);
        }
        let video_norm = b.fill("final.video_norm".into(), &[d], 1.0);
        let audio_norm = b.fill("final.audio_norm".into(), &[d], 1.0);
        let video_out = b.linear("video_out", d, patch, 0.02, true);
        let audio_out = b.linear("audio_out", d, cfg.audio_channels, 0.02, true);
        let layout = Layout {
            video_in,
            ref_in,
            audio_in,
            text_embed,
            time_in,
            time_out,
            blocks,
            video_norm,
            audio_norm,
            video_out,
            audio_out,
        };
        Ok(Self {
            cfg,
            layout,
            params: store,
            dtype: DType::F64,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Precision of tapes created by [`JovaModel::predict`].
    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    /// Embeds latents and conditions into the three token streams.
    pub fn tokenize(
        &self,
        p: &[Var],
        video: &Var,
        audio: &Var,
        cond: &ConditionSet,
        t: f64,
    ) -> Result<Segments> {
        let cfg = &self.cfg;
        let d = cfg.token_dim;
        let tape = video.tape();
        let geo = self.video_geometry(video.shape())?;
        let (a_shape, c_a) = (audio.shape(), cfg.audio_channels);
        if a_shape.len() != 2 || a_shape[1] != c_a {
            return Err(ModelError::Shape(format!(
                "audio latent {a_shape:?} does not match [frames, {c_a}]"
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(ModelError::Config(format!("timestep {t} outside [0, 1]")));
        }

        let temb = {
            let sin = tape.constant(Tensor::new([1, d], sinusoid(1000.0 * t, d, 10000.0))?);
            let h = self.layout.time_in.apply(p, &sin)?.gelu()?;
            self.layout.time_out.apply(p, &h)?.reshape([d])?
        };

        let patches = video.gather(geo.patch_index(), [geo.tokens(), geo.patch_len])?;
        let mut v = self.layout.video_in.apply(p, &patches)?;
        if let Some(r) = &cond.reference {
            if r.shape() != [geo.h, geo.w, geo.c] {
                return Err(ModelError::Shape(format!(
                    "reference latent {:?} does not match [{}, {}, {}]",
                    r.shape(),
                    geo.h,
                    geo.w,
                    geo.c
                )));
            }
            let rp = tape
                .constant(r.clone())
                .gather(geo.frame_patch_index(), [geo.per_frame(), geo.patch_len])?;
            let rt = rp.matmul(&p[self.layout.ref_in])?;
            let tile: Rc<[usize]> = (0..geo.tokens() * d)
                .map(|i| (i / d % geo.per_frame()) * d + i % d)
                .collect();
            v = v.add(&rt.gather(tile, [geo.tokens(), d])?)?;
        }
        let half = d / 2;
        let rows: Vec<Vec<f64>> = (0..geo.h / geo.ph).map(|r| sinusoid(r as f64, half, 100.0)).collect();
        let cols: Vec<Vec<f64>> = (0..geo.cols()).map(|c| sinusoid(c as f64, d - half, 100.0)).collect();
        let spatial = Tensor::from_fn([geo.tokens(), d], |i| {
            let tok = i / d % geo.per_frame();
            let j = i % d;
            POSITION_SCALE
                * if j < half {
                    rows[tok / geo.cols()][j]
                } else {
                    cols[tok % geo.cols()][j - half]
                }
        });
        let v = v.add(&tape.constant(spatial))?.add(&temb)?;

        let a = self.layout.audio_in.apply(p, audio)?.add(&temb)?;

        let ids: Vec<usize> = cond.video_text.iter().chain(&cond.audio_text).copied().collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.text_vocab_size) {
            return Err(ModelError::Config(format!(
                "text id {bad} outside vocabulary of {}",
                cfg.text_vocab_size
            )));
        }
        let index: Rc<[usize]> = ids.iter().flat_map(|&id| (0..d).map(move |j| id * d + j)).collect();
        let text = p[self.layout.text_embed].gather(index, [ids.len(), d])?;
        let nv = cond.video_text.len();
        let longest = nv.max(ids.len() - nv);
        let table: Vec<Vec<f64>> = (0..longest).map(|i| sinusoid(i as f64, d, 100.0)).collect();
        let text_pos = Tensor::from_fn([ids.len(), d], |i| {
            let r = i / d;
            let pos = if r < nv { r } else { r - nv };
            POSITION_SCALE * table[pos][i % d]
        });
        let text = text.add(&tape.constant(text_pos))?;

        let vf: Vec<usize> = (0..geo.tokens()).map(|i| i / geo.per_frame()).collect();
        let af: Vec<usize> = (0..a_shape[0]).collect();
        Ok(Segments {
            video: TokenSequence {
                tokens: v,
                times: vf.iter().map(|&f| f as f64 / cfg.fps_latent).collect(),
                frames: vf,
                modality: Modality::Video,
            },
            audio: TokenSequence {
                tokens: a,
                times: af.iter().map(|&f| f as f64 / cfg.audio_rate_latent).collect(),
                frames: af,
                modality: Modality::Audio,
            },
            text: TokenSequence {
                tokens: text,
                times: vec![0.0; ids.len()],
                frames: vec![0; ids.len()],
                modality: Modality::Text,
            },
            video_text_len: nv,
        })
    }

    fn stream(&self, block: usize, segment: usize) -> &Stream {
        let streams = &self.layout.blocks[block];
        &streams[segment.min(streams.len() - 1)]
    }

    /// Per-head projections `(q [H,N,dh], kᵀ [H,dh,N], v [H,N,dh])` with
    /// rotary phases applied to queries and keys.
    fn project(&self, p: &[Var], block: usize, segs: &Segments) -> Result<(Var, Var, Var)> {
        let cfg = &self.cfg;
        let (h, dh, n) = (cfg.num_heads, cfg.head_dim(), segs.total_len());
        let mut qs = Vec::with_capacity(3);
        let mut ks = Vec::with_capacity(3);
        let mut vs = Vec::with_capacity(3);
        for (i, seg) in segs.parts().into_iter().enumerate() {
            let st = self.stream(block, i);
            let x = seg.tokens.rms_norm(&p[st.norm1], cfg.norm_eps)?;
            qs.push(x.matmul(&p[st.wq])?);
            ks.push(x.matmul(&p[st.wk])?);
            vs.push(x.matmul(&p[st.wv])?);
        }
        let rope = segs.rope_tables(cfg);
        let q = concat_rows(&qs)?.rotary(rope.cos.clone(), rope.sin.clone(), h)?;
        let k = concat_rows(&ks)?.rotary(rope.cos, rope.sin, h)?;
        let v = concat_rows(&vs)?;
        Ok((
            q.reshape([n, h, dh])?.permute(&[1, 0, 2])?,
            k.reshape([n, h, dh])?.permute(&[1, 2, 0])?,
            v.reshape([n, h, dh])?.permute(&[1, 0, 2])?,
        ))
    }

    /// Scaled pre-softmax attention logits `[H, N, N]` of one block over the
    /// concatenation `[video; audio; text]`.
    pub fn attention_logits(&self, p: &[Var], block: usize, segs: &Segments) -> Result<Var> {
        let (q, kt, _) = self.project(p, block, segs)?;
        Ok(q.matmul(&kt)?.scale(1.0 / (self.cfg.head_dim() as f64).sqrt())?)
    }

    /// One transformer block: attention with residual, then feed-forward
    /// with residual, each on a pre-normalized input.
    pub fn block(&self, p: &[Var], block: usize, segs: &Segments, stage: Stage) -> Result<Segments> {
        let cfg = &self.cfg;
        if block >= self.layout.blocks.len() {
            return Err(ModelError::Config(format!("block {block} does not exist")));
        }
        let (h, dh, n) = (cfg.num_heads, cfg.head_dim(), segs.total_len());
        let (q, kt, v) = self.project(p, block, segs)?;
        let logits = q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt())?;
        let attend = |mask: Rc<[bool]>| -> Result<Var> {
            Ok(logits
                .masked_softmax(mask)?
                .matmul(&v)?
                .permute(&[1, 0, 2])?
                .reshape([n, h * dh])?)
        };
        let fusion = match stage {
            Stage::Isolated => None,
            Stage::Fused => Some(cfg.fusion),
        };
        let self_out = match fusion {
            Some(Fusion::Joint) => attend(segs.full_mask())?,
            _ => attend(segs.isolated_mask())?,
        };
        let cross_out = match fusion {
            Some(f) if f.is_cross() => Some(attend(segs.cross_mask())?),
            _ => None,
        };

        let mut outs = Vec::with_capacity(3);
        let mut offset = 0;
        for (i, seg) in segs.parts().into_iter().enumerate() {
            let st = self.stream(block, i);
            let len = seg.len();
            let mut a = self_out.slice_rows(offset, len)?;
            if let (Some(c), true) = (&cross_out, seg.modality != Modality::Text) {
                let c = c.slice_rows(offset, len)?;
                a = match (fusion, st.cross) {
                    (Some(Fusion::CrossLinear), Some(l)) => a.add(&c.matmul(&p[l])?)?,
                    (Some(Fusion::CrossLinear), None) => {
                        return Err(ModelError::Config(
                            "cross_linear fusion on a model built without cross layers".into(),
                        ))
                    }
                    _ => a.add(&c)?,
                };
            }
            offset += len;
            let x = seg.tokens.add(&a.matmul(&p[st.wo])?)?;
            let f = x
                .rms_norm(&p[st.norm2], cfg.norm_eps)?
                .matmul(&p[st.w1])?
                .gelu()?
                .matmul(&p[st.w2])?;
            outs.push(seg.with_tokens(x.add(&f)?));
        }
        let text = outs.pop().expect("three segments");
        let audio = outs.pop().expect("three segments");
        let video = outs.pop().expect("three segments");
        Ok(Segments {
            video,
            audio,
            text,
            video_text_len: segs.video_text_len,
        })
    }

    /// Velocity prediction `(v_video, v_audio)` with the latents' shapes.
    pub fn forward(
        &self,
        p: &[Var],
        video: &Var,
        audio: &Var,
        cond: &ConditionSet,
        t: f64,
        stage: Stage,
    ) -> Result<(Var, Var)> {
        let geo = self.video_geometry(video.shape())?;
        let mut segs = self.tokenize(p, video, audio, cond, t)?;
        for b in 0..self.layout.blocks.len() {
            segs = self.block(p, b, &segs, stage)?;
        }
        let l = &self.layout;
        let vo = l.video_out.apply(
            p,
            &segs.video.tokens.rms_norm(&p[l.video_norm], self.cfg.norm_eps)?,
        )?;
        let vo = vo.gather(geo.unpatch_index(), [geo.t, geo.h, geo.w, geo.c])?;
        let ao = l.audio_out.apply(
            p,
            &segs.audio.tokens.rms_norm(&p[l.audio_norm], self.cfg.norm_eps)?,
        )?;
        Ok((vo, ao))
    }

    /// Inference on a fresh tape with frozen parameters.
    pub fn predict(
        &self,
        video: &Tensor,
        audio: &Tensor,
        cond: &ConditionSet,
        t: f64,
        stage: Stage,
    ) -> Result<(Tensor, Tensor)> {
        let tape = Tape::with_dtype(self.dtype);
        let p = self.params.bind_frozen(&tape);
        let (v, a) = self.forward(
            &p,
            &tape.constant(video.clone()),
            &tape.constant(audio.clone()),
            cond,
            t,
            stage,
        )?;
        Ok((v.value().clone(), a.value().clone()))
    }

    fn video_geometry(&self, shape: &[usize]) -> Result<VideoGeometry> {
        let [ph, pw] = self.cfg.video_patch;
        let c = self.cfg.video_channels;
        if shape.len() != 4 || shape[3] != c {
            return Err(ModelError::Shape(format!(
                "video latent {shape:?} does not match [frames, height, width, {c}]"
            )));
        }
        if shape[1] % ph != 0 || shape[2] % pw != 0 {
            return Err(ModelError::Config(format!(
                "video latent {}x{} is not divisible by patch {ph}x{pw}",
                shape[1], shape[2]
            )));
        }
        Ok(VideoGeometry {
            t: shape[0],
            h: shape[1],
            w: shape[2],
            c,
            ph,
            pw,
            patch_len: ph * pw * c,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct VideoGeometry {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
    patch_len: usize,
}

impl VideoGeometry {
    fn cols(&self) -> usize {
        self.w / self.pw
    }

    fn per_frame(&self) -> usize {
        (self.h / self.ph) * self.cols()
    }

    fn tokens(&self) -> usize {
        self.t * self.per_frame()
    }

    /// Flat latent offset of element `k` of the patch at (`frame`, `tok`).
    fn source(&self, frame: usize, tok: usize, k: usize) -> usize {
        let (pr, pc) = (tok / self.cols(), tok % self.cols());
        let (dy, rest) = (k / (self.pw * self.c), k % (self.pw * self.c));
        let (dx, ch) = (rest / self.c, rest % self.c);
        ((frame * self.h + pr * self.ph + dy) * self.w + pc * self.pw + dx) * self.c + ch
    }

    fn patch_index(&self) -> Rc<[usize]> {
        let (pf, pl) = (self.per_frame(), self.patch_len);
        (0..self.tokens() * pl)
            .map(|i| self.source(i / pl / pf, i / pl % pf, i % pl))
            .collect()
    }

    fn frame_patch_index(&self) -> Rc<[usize]> {
        let pl = self.patch_len;
        (0..self.per_frame() * pl)
            .map(|i| self.source(0, i / pl, i % pl))
            .collect()
    }

    /// Inverse of `patch_index`: for each latent element, its position in the
    /// `[tokens, patch_len]` matrix.
    fn unpatch_index(&self) -> Rc<[usize]> {
        let mut inv = vec![0; self.t * self.h * self.w * self.c];
        for (i, src) in self.patch_index().iter().enumerate() {
            inv[*src] = i;
        }
        inv.into()
    }
}
