//! Synthetic audio-visual scenes with exact lip-audio coupling, block codecs
//! that stand in for learned autoencoders, and sync/transcript metrics.

use jova_tensor::{Checkpoint, CheckpointError, NamedArray, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mouthmask::{self, DownsampleSpec, MouthBoxPx, VideoCodec};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scene parameters: {0}")]
    Params(String),
    #[error("shape {shape:?} is not divisible by factors {factors:?}")]
    Indivisible {
        shape: Vec<usize>,
        factors: Vec<usize>,
    },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, WorldError>;

impl From<WorldError> for mouthmask::MaskError {
    fn from(e: WorldError) -> Self {
        mouthmask::MaskError::Codec(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    AvatarSpeech,
    VideoAudio,
    AudioOnly,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::AvatarSpeech, Family::VideoAudio, Family::AudioOnly];

    pub fn name(self) -> &'static str {
        match self {
            Family::AvatarSpeech => "avatar_speech",
            Family::VideoAudio => "video_audio",
            Family::AudioOnly => "audio_only",
        }
    }

    /// Text id of the family caption token. Id 0 is the null token.
    pub fn token(self) -> usize {
        match self {
            Family::AvatarSpeech => 1,
            Family::VideoAudio => 2,
            Family::AudioOnly => 3,
        }
    }
}

/// First text id used for phonemes.
pub const PHONEME_TOKEN_OFFSET: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_len: usize,
    pub phoneme_vocab: usize,
    pub transcript_min: usize,
    pub transcript_max: usize,
    /// Equal-length slots the envelope is divided into; each phoneme
    /// occupies one slot.
    pub slots: usize,
    /// Leading fraction of a slot filled by its pulse.
    pub pulse_fraction: f64,
    pub face_radius: usize,
    pub mouth_width: usize,
    pub mouth_height: usize,
    /// Maximum face offset from the frame centre, in pixels per axis.
    pub jitter: usize,
    pub face_level_min: f64,
    pub face_level_max: f64,
    pub open_level: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 32,
            audio_len: 128,
            phoneme_vocab: 8,
            transcript_min: 4,
            transcript_max: 8,
            slots: 8,
            pulse_fraction: 0.75,
            face_radius: 10,
            mouth_width: 8,
            mouth_height: 3,
            jitter: 2,
            face_level_min: 0.3,
            face_level_max: 0.6,
            open_level: 1.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(WorldError::Params(m.into()));
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.audio_len == 0 {
            return fail("grid sizes must be positive");
        }
        if self.audio_len % self.frames != 0 {
            return fail("audio_len must be a multiple of frames");
        }
        if self.slots == 0 || self.audio_len % self.slots != 0 {
            return fail("audio_len must be a multiple of slots");
        }
        if self.transcript_min > self.transcript_max || self.transcript_max > self.slots {
            return fail("need transcript_min <= transcript_max <= slots");
        }
        if self.phoneme_vocab == 0 || 0.3 + 0.1 * (self.phoneme_vocab - 1) as f64 > 1.0 + 1e-9 {
            return fail("phoneme amplitudes 0.3 + 0.1·id must stay within 1");
        }
        if !(0.0..=1.0).contains(&self.pulse_fraction) {
            return fail("pulse_fraction must lie in [0, 1]");
        }
        let (cx, cy) = (self.width / 2, self.height / 2);
        let reach_x = self.mouth_width.div_ceil(2) + self.jitter;
        let reach_y = self.mouth_height + 3 + self.jitter;
        if reach_x > cx || reach_y > self.height - cy {
            return fail("mouth box would leave the frame");
        }
        if !(self.face_level_min <= self.face_level_max) {
            return fail("face_level_min exceeds face_level_max");
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        self.audio_len / self.frames
    }

    /// Envelope amplitude of phoneme `id`.
    pub fn phoneme_amplitude(id: usize) -> f64 {
        0.3 + 0.1 * id as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub family: Family,
    /// `[T, H, W, 1]`
    pub video: Tensor,
    /// One envelope value per audio sample.
    pub envelope: Vec<f64>,
    /// Phoneme ids in `0..phoneme_vocab`.
    pub transcript: Vec<usize>,
    /// One entry per pixel frame; present only for avatar scenes.
    pub boxes: Vec<MouthBoxPx>,
    /// Mouth aperture in pixels per frame (avatar scenes; zeros otherwise).
    pub aperture: Vec<f64>,
    /// Closed-mouth frame `[H, W, 1]` used as the identity reference.
    pub reference: Option<Tensor>,
}

impl ToyScene {
    /// Audio envelope as an `[L, 1]` tensor.
    pub fn audio(&self) -> Tensor {
        Tensor::new([self.envelope.len(), 1], self.envelope.clone()).expect("length matches")
    }

    /// Text ids for the video branch and the audio branch.
    pub fn text_ids(&self) -> (Vec<usize>, Vec<usize>) {
        let video = vec![self.family.token()];
        let mut audio = vec![self.family.token()];
        audio.extend(self.transcript.iter().map(|p| p + PHONEME_TOKEN_OFFSET));
        (video, audio)
    }

    /// Arrays `video`, `envelope`, `transcript`, `aperture`, optional
    /// `reference`, and the family name as text.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.push_text("family", self.family.name())?;
        c.push_tensor("video", &self.video)?;
        c.push_tensor("envelope", &self.audio())?;
        c.push(NamedArray::bytes(
            "transcript",
            vec![self.transcript.len()],
            self.transcript.iter().map(|&p| p as u8).collect(),
        ))?;
        c.push_tensor("aperture", &Tensor::new([self.aperture.len()], self.aperture.clone()).expect("1-d"))?;
        if let Some(r) = &self.reference {
            c.push_tensor("reference", r)?;
        }
        Ok(c)
    }
}

/// Piecewise-constant envelope: phoneme `i` of the transcript fills the
/// leading `pulse_fraction` of slot `slots[i]` at its amplitude.
pub fn envelope_from_transcript(
    transcript: &[usize],
    slots: &[usize],
    params: &SceneParams,
) -> Vec<f64> {
    let slot_len = params.audio_len / params.slots;
    let pulse = (slot_len as f64 * params.pulse_fraction).round() as usize;
    let mut env = vec![0.0; params.audio_len];
    for (&id, &slot) in transcript.iter().zip(slots) {
        let start = slot * slot_len;
        env[start..start + pulse].fill(SceneParams::phoneme_amplitude(id));
    }
    env
}

/// Mean of consecutive equal chunks, one per frame.
pub fn resample_envelope(envelope: &[f64], frames: usize) -> Vec<f64> {
    if frames == 0 || envelope.is_empty() {
        return vec![0.0; frames];
    }
    (0..frames)
        .map(|k| {
            let lo = k * envelope.len() / frames;
            let hi = ((k + 1) * envelope.len() / frames).max(lo + 1);
            envelope[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn generate_scene<R: Rng + ?Sized>(
    family: Family,
    rng: &mut R,
    params: &SceneParams,
) -> Result<ToyScene> {
    params.validate()?;
    match family {
        Family::AvatarSpeech => avatar_scene(rng, params),
        Family::VideoAudio => bouncing_scene(rng, params),
        Family::AudioOnly => audio_only_scene(rng, params),
    }
}

fn avatar_scene<R: Rng + ?Sized>(rng: &mut R, p: &SceneParams) -> Result<ToyScene> {
    let n = rng.gen_range(p.transcript_min..=p.transcript_max);
    let transcript: Vec<usize> = (0..n).map(|_| rng.gen_range(0..p.phoneme_vocab)).collect();
    let mut slots = sample_indices(rng, p.slots, n).into_vec();
    slots.sort_unstable();
    let envelope = envelope_from_transcript(&transcript, &slots, p);
    let aperture: Vec<f64> = resample_envelope(&envelope, p.frames)
        .into_iter()
        .map(|a| a * p.mouth_height as f64)
        .collect();

    let j = p.jitter as i64;
    let cx = (p.width / 2) as i64 + rng.gen_range(-j..=j);
    let cy = (p.height / 2) as i64 + rng.gen_range(-j..=j);
    let face = rng.gen_range(p.face_level_min..=p.face_level_max);
    let x1 = (cx - (p.mouth_width / 2) as i64) as usize;
    let y1 = (cy + 3) as usize;
    let boxes: Vec<MouthBoxPx> = (0..p.frames)
        .map(|f| MouthBoxPx::new(f, x1, y1, x1 + p.mouth_width, y1 + p.mouth_height))
        .collect();

    let render = |opening: f64, out: &mut [f64]| {
        let r2 = (p.face_radius * p.face_radius) as i64;
        for y in 0..p.height {
            for x in 0..p.width {
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                if dx * dx + dy * dy <= r2 {
                    out[y * p.width + x] = face;
                }
            }
        }
        // The opening is a band of height `opening` centred in the box; a
        // row's brightness is linear in how much of the band it covers.
        let mid = p.mouth_height as f64 / 2.0;
        let (lo, hi) = (mid - opening / 2.0, mid + opening / 2.0);
        for r in 0..p.mouth_height {
            let cover = (hi.min(r as f64 + 1.0) - lo.max(r as f64)).max(0.0);
            let v = face + (p.open_level - face) * cover;
            for x in x1..x1 + p.mouth_width {
                out[(y1 + r) * p.width + x] = v;
            }
        }
    };
    let frame_len = p.height * p.width;
    let mut video = vec![0.0; p.frames * frame_len];
    for (f, chunk) in video.chunks_exact_mut(frame_len).enumerate() {
        render(aperture[f], chunk);
    }
    let mut reference = vec![0.0; frame_len];
    render(0.0, &mut reference);

    Ok(ToyScene {
        family: Family::AvatarSpeech,
        video: Tensor::new([p.frames, p.height, p.width, 1], video).expect("sized"),
        envelope,
        transcript,
        boxes,
        aperture,
        reference: Some(Tensor::new([p.height, p.width, 1], reference).expect("sized")),
    })
}

/// A square sliding horizontally and bouncing off the walls; each bounce
/// emits a decaying burst in the envelope.
fn bouncing_scene<R: Rng + ?Sized>(rng: &mut R, p: &SceneParams) -> Result<ToyScene> {
    let size = (p.width / 5).max(1).min(p.height);
    let span = (p.width - size) as f64;
    let y0 = rng.gen_range(0..=p.height - size);
    let mut x = rng.gen_range(0.0..=span);
    let mut vx = rng.gen_range(1.5..3.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let spf = p.samples_per_frame();
    let frame_len = p.height * p.width;
    let mut video = vec![0.0; p.frames * frame_len];
    let mut envelope = vec![0.0; p.audio_len];
    for f in 0..p.frames {
        let xi = x.round() as usize;
        for y in y0..y0 + size {
            for xx in xi..(xi + size).min(p.width) {
                video[f * frame_len + y * p.width + xx] = 0.8;
            }
        }
        x += vx;
        if x < 0.0 || x > span {
            x = if x < 0.0 { -x } else { 2.0 * span - x };
            vx = -vx;
            let start = (f + 1) * spf;
            for (k, e) in envelope.iter_mut().skip(start).take(2 * spf).enumerate() {
                *e = f64::max(*e, 0.9 * (-(k as f64) / spf as f64).exp());
            }
        }
    }
    Ok(ToyScene {
        family: Family::VideoAudio,
        video: Tensor::new([p.frames, p.height, p.width, 1], video).expect("sized"),
        envelope,
        transcript: Vec::new(),
        boxes: (0..p.frames).map(MouthBoxPx::absent).collect(),
        aperture: vec![0.0; p.frames],
        reference: None,
    })
}

/// Blank video with a few rectangular bursts of random level.
fn audio_only_scene<R: Rng + ?Sized>(rng: &mut R, p: &SceneParams) -> Result<ToyScene> {
    let mut envelope = vec![0.0; p.audio_len];
    let bursts = rng.gen_range(2..=4);
    let max_len = (p.audio_len / 8).max(2);
    for _ in 0..bursts {
        let len = rng.gen_range(max_len / 2..=max_len);
        let start = rng.gen_range(0..=p.audio_len - len);
        let level = rng.gen_range(0.3..1.0);
        envelope[start..start + len].fill(level);
    }
    Ok(ToyScene {
        family: Family::AudioOnly,
        video: Tensor::zeros([p.frames, p.height, p.width, 1]),
        envelope,
        transcript: Vec::new(),
        boxes: (0..p.frames).map(MouthBoxPx::absent).collect(),
        aperture: vec![0.0; p.frames],
        reference: None,
    })
}

/// Block-mean encoder with block-constant decoder; exactly local.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockCodec {
    pub s: usize,
    pub t_s: usize,
}

impl BlockCodec {
    pub fn new(s: usize, t_s: usize) -> Result<Self> {
        if s == 0 || t_s == 0 {
            return Err(WorldError::Params(format!("codec factors s = {s}, t_s = {t_s}")));
        }
        Ok(Self { s, t_s })
    }

    fn dims(&self, video: &Tensor) -> Result<[usize; 4]> {
        let sh = video.shape();
        if sh.len() != 4 || sh[0] % self.t_s != 0 || sh[1] % self.s != 0 || sh[2] % self.s != 0 {
            return Err(WorldError::Indivisible {
                shape: sh.to_vec(),
                factors: vec![self.t_s, self.s, self.s],
            });
        }
        Ok([sh[0], sh[1], sh[2], sh[3]])
    }

    pub fn encode_video(&self, video: &Tensor) -> Result<Tensor> {
        let [t, h, w, c] = self.dims(video)?;
        let (lt, lh, lw) = (t / self.t_s, h / self.s, w / self.s);
        let mut out = vec![0.0; lt * lh * lw * c];
        let x = video.data();
        for f in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let o = (((f / self.t_s) * lh + y / self.s) * lw + xx / self.s) * c;
                    let i = ((f * h + y) * w + xx) * c;
                    for k in 0..c {
                        out[o + k] += x[i + k];
                    }
                }
            }
        }
        let inv = 1.0 / (self.s * self.s * self.t_s) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Tensor::new([lt, lh, lw, c], out).expect("sized"))
    }

    pub fn decode_video(&self, latent: &Tensor) -> Result<Tensor> {
        let sh = latent.shape();
        if sh.len() != 4 {
            return Err(WorldError::Indivisible {
                shape: sh.to_vec(),
                factors: vec![self.t_s, self.s, self.s],
            });
        }
        let (lt, lh, lw, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (t, h, w) = (lt * self.t_s, lh * self.s, lw * self.s);
        let z = latent.data();
        let out = Tensor::from_fn([t, h, w, c], |i| {
            let k = i % c;
            let xx = i / c % w;
            let y = i / (c * w) % h;
            let f = i / (c * w * h);
            z[(((f / self.t_s) * lh + y / self.s) * lw + xx / self.s) * c + k]
        });
        Ok(out)
    }

    /// Spatial-only encoding of one frame `[H, W, C]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let sh = image.shape();
        if sh.len() != 3 {
            return Err(WorldError::Indivisible {
                shape: sh.to_vec(),
                factors: vec![self.s, self.s],
            });
        }
        let frame = image.clone().reshape([1, sh[0], sh[1], sh[2]]).expect("same size");
        let single = BlockCodec { s: self.s, t_s: 1 };
        let z = single.encode_video(&frame)?;
        let zs = z.shape().to_vec();
        Ok(z.reshape([zs[1], zs[2], zs[3]]).expect("same size"))
    }
}

impl VideoCodec for BlockCodec {
    fn spec(&self) -> DownsampleSpec {
        DownsampleSpec {
            s: self.s,
            t_s: self.t_s,
        }
    }

    fn encode(&self, video: &Tensor) -> mouthmask::Result<Tensor> {
        Ok(self.encode_video(video)?)
    }

    fn decode(&self, latent: &Tensor) -> mouthmask::Result<Tensor> {
        Ok(self.decode_video(latent)?)
    }

    fn is_exactly_local(&self) -> bool {
        true
    }
}

/// Hop-mean encoder with constant upsampling; exactly local per hop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AudioCodec {
    pub hop: usize,
}

impl AudioCodec {
    pub fn new(hop: usize) -> Result<Self> {
        if hop == 0 {
            return Err(WorldError::Params("audio hop must be positive".into()));
        }
        Ok(Self { hop })
    }

    /// `[L, C]` → `[L / hop, C]`
    pub fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        let sh = audio.shape();
        if sh.len() != 2 || sh[0] % self.hop != 0 {
            return Err(WorldError::Indivisible {
                shape: sh.to_vec(),
                factors: vec![self.hop],
            });
        }
        let (l, c) = (sh[0], sh[1]);
        let x = audio.data();
        let out = Tensor::from_fn([l / self.hop, c], |i| {
            let (j, k) = (i / c, i % c);
            (0..self.hop).map(|h| x[(j * self.hop + h) * c + k]).sum::<f64>() / self.hop as f64
        });
        Ok(out)
    }

    /// `[F, C]` → `[F · hop, C]`
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let sh = latent.shape();
        if sh.len() != 2 {
            return Err(WorldError::Indivisible {
                shape: sh.to_vec(),
                factors: vec![self.hop],
            });
        }
        let c = sh[1];
        let z = latent.data();
        Ok(Tensor::from_fn([sh[0] * self.hop, c], |i| {
            z[(i / c / self.hop) * c + i % c]
        }))
    }
}

/// Per-frame mouth opening: the sum over box rows of each row's mean
/// intensity (channel-averaged).
pub fn measure_aperture(video: &Tensor, boxes: &[MouthBoxPx]) -> Result<Vec<f64>> {
    let sh = video.shape();
    if sh.len() != 4 {
        return Err(WorldError::Metric(format!("video shape {sh:?} is not [T, H, W, C]")));
    }
    let (t, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    if boxes.len() != t {
        return Err(WorldError::Metric(format!("{} boxes for {t} frames", boxes.len())));
    }
    let x = video.data();
    boxes
        .iter()
        .enumerate()
        .map(|(f, b)| {
            if !b.present || b.x2 > w || b.y2 > h || b.x1 >= b.x2 || b.y1 >= b.y2 {
                return Err(WorldError::Metric(format!("frame {f} has no usable mouth box")));
            }
            let cols = (b.x2 - b.x1) as f64 * c as f64;
            Ok((b.y1..b.y2)
                .map(|y| {
                    let row = ((f * h + y) * w + b.x1) * c;
                    x[row..row + (b.x2 - b.x1) * c].iter().sum::<f64>() / cols
                })
                .sum())
        })
        .collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-24 || sbb <= 1e-24 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Best Pearson correlation between the measured aperture and the envelope
/// resampled to the frame rate, over frame offsets in
/// `[−max_offset, max_offset]`.
pub fn sync_score(
    video: &Tensor,
    envelope: &[f64],
    boxes: &[MouthBoxPx],
    max_offset: usize,
) -> Result<f64> {
    let aperture = measure_aperture(video, boxes)?;
    sync_from_aperture(&aperture, envelope, max_offset)
}

pub fn sync_from_aperture(aperture: &[f64], envelope: &[f64], max_offset: usize) -> Result<f64> {
    let t = aperture.len();
    if t < 4 {
        return Err(WorldError::Metric(format!("sync needs at least 4 frames, got {t}")));
    }
    let env = resample_envelope(envelope, t);
    let m = max_offset.min(t - 2) as i64;
    let best = (-m..=m)
        .map(|d| {
            let (a, e) = if d >= 0 {
                (&aperture[..t - d as usize], &env[d as usize..])
            } else {
                (&aperture[(-d) as usize..], &env[..t - (-d) as usize])
            };
            pearson(a, e)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranscriptParams {
    /// Envelope level above which a sample belongs to an event.
    pub threshold: f64,
    /// Events shorter than this many samples are ignored.
    pub min_run: usize,
    pub phoneme_vocab: usize,
}

impl Default for TranscriptParams {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            min_run: 1,
            phoneme_vocab: 8,
        }
    }
}

/// Phoneme ids decoded from runs above threshold by quantizing each run's
/// mean amplitude.
pub fn detect_phonemes(envelope: &[f64], params: &TranscriptParams) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run: Vec<f64> = Vec::new();
    let mut flush = |run: &mut Vec<f64>| {
        if !run.is_empty() && run.len() >= params.min_run {
            let mean = run.iter().sum::<f64>() / run.len() as f64;
            let id = ((mean - 0.3) / 0.1).round().clamp(0.0, (params.phoneme_vocab - 1) as f64);
            out.push(id as usize);
        }
        run.clear();
    };
    for &e in envelope {
        if e > params.threshold {
            run.push(e);
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    out
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between detected phonemes and `transcript`, divided by
/// the transcript length. With an empty transcript every detected event is
/// an insertion and the count itself is returned.
pub fn transcript_error(
    envelope: &[f64],
    transcript: &[usize],
    params: &TranscriptParams,
) -> Result<f64> {
    if envelope.iter().any(|e| !e.is_finite()) {
        return Err(WorldError::Metric("envelope is not finite".into()));
    }
    let detected = detect_phonemes(envelope, params);
    if transcript.is_empty() {
        return Ok(detected.len() as f64);
    }
    Ok(levenshtein(&detected, transcript) as f64 / transcript.len() as f64)
}
