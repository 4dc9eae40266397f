//! Pixel mouth boxes to latent masks, and the zero-mask locality check.

use std::fmt::Write as _;

use jova_tensor::{NamedArray, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid downsampling factors s = {s}, t_s = {t_s}")]
    Factors { s: usize, t_s: usize },
    #[error("{boxes} merged boxes for {frames} latent frames")]
    FrameCount { boxes: usize, frames: usize },
    #[error("box sidecar line {line}: {msg}")]
    Sidecar { line: usize, msg: String },
    #[error("codec error: {0}")]
    Codec(String),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Mouth box of one pixel frame. Coordinates are half-open: columns
/// `x1..x2`, rows `y1..y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MouthBoxPx {
    pub frame_index: usize,
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub present: bool,
}

impl MouthBoxPx {
    pub fn new(frame_index: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self {
            frame_index,
            x1,
            y1,
            x2,
            y2,
            present: true,
        }
    }

    pub fn absent(frame_index: usize) -> Self {
        Self {
            frame_index,
            x1: 0,
            y1: 0,
            x2: 0,
            y2: 0,
            present: false,
        }
    }

    pub fn area(&self) -> usize {
        if self.present {
            (self.x2 - self.x1) * (self.y2 - self.y1)
        } else {
            0
        }
    }
}

/// Box in latent cells, half-open like [`MouthBoxPx`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatentBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl LatentBox {
    pub fn area(&self) -> usize {
        self.x2.saturating_sub(self.x1) * self.y2.saturating_sub(self.y1)
    }

    pub fn contains(&self, other: &LatentBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// Codec downsampling factors: `s` spatially, `t_s` temporally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DownsampleSpec {
    pub s: usize,
    pub t_s: usize,
}

impl DownsampleSpec {
    pub fn new(s: usize, t_s: usize) -> Result<Self> {
        if s == 0 || t_s == 0 {
            return Err(MaskError::Factors { s, t_s });
        }
        Ok(Self { s, t_s })
    }
}

/// `(⌊x1/s⌋, ⌊y1/s⌋, ⌈x2/s⌉, ⌈y2/s⌉)` clamped to a `width × height` latent
/// grid. Absent boxes stay absent.
pub fn map_box_spatial(b: &MouthBoxPx, s: usize, width: usize, height: usize) -> Option<LatentBox> {
    if !b.present {
        return None;
    }
    let s = s.max(1);
    Some(LatentBox {
        x1: (b.x1 / s).min(width),
        y1: (b.y1 / s).min(height),
        x2: b.x2.div_ceil(s).min(width),
        y2: b.y2.div_ceil(s).min(height),
    })
}

/// Bounding envelope of the present boxes in each non-overlapping window of
/// `t_s` consecutive frames. A trailing partial window is merged over the
/// frames it has.
pub fn merge_boxes_temporal(boxes: &[Option<LatentBox>], t_s: usize) -> Vec<Option<LatentBox>> {
    boxes
        .chunks(t_s.max(1))
        .map(|window| {
            window.iter().flatten().copied().reduce(|a, b| LatentBox {
                x1: a.x1.min(b.x1),
                y1: a.y1.min(b.y1),
                x2: a.x2.max(b.x2),
                y2: a.y2.max(b.y2),
            })
        })
        .collect()
}

/// Boolean grid over latent frames × height × width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MouthMask {
    frames: usize,
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl MouthMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            cells: vec![false; frames * height * width],
        }
    }

    pub fn full(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            cells: vec![true; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.cells[(f * self.height + y) * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// The mask repeated over `channels` trailing elements per cell.
    pub fn broadcast_channels(&self, channels: usize) -> Vec<bool> {
        self.cells
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, channels))
            .collect()
    }

    /// 0/1 bytes shaped `[frames, height, width]`.
    pub fn to_named_array(&self, name: &str) -> NamedArray {
        NamedArray::bytes(
            name,
            vec![self.frames, self.height, self.width],
            self.cells.iter().map(|&c| u8::from(c)).collect(),
        )
    }
}

/// Rasterizes one box per latent frame. Rows `y1..y2` and columns `x1..x2`
/// are set; boxes reaching past the grid are clamped with a warning.
pub fn build_mask(
    frames: usize,
    height: usize,
    width: usize,
    merged: &[Option<LatentBox>],
) -> Result<MouthMask> {
    if merged.len() != frames {
        return Err(MaskError::FrameCount {
            boxes: merged.len(),
            frames,
        });
    }
    let mut mask = MouthMask::empty(frames, height, width);
    for (f, b) in merged.iter().enumerate() {
        let Some(b) = b else { continue };
        if b.x2 > width || b.y2 > height {
            log::warn!("latent box {b:?} in frame {f} exceeds {width}x{height}; clamping");
        }
        for y in b.y1.min(height)..b.y2.min(height) {
            for x in b.x1.min(width)..b.x2.min(width) {
                mask.cells[(f * height + y) * width + x] = true;
            }
        }
    }
    Ok(mask)
}

/// Full pipeline from per-pixel-frame boxes to the latent mask. `boxes` is
/// indexed by pixel frame.
pub fn latent_mask(
    boxes: &[MouthBoxPx],
    spec: DownsampleSpec,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<MouthMask> {
    let spatial: Vec<Option<LatentBox>> = boxes
        .iter()
        .map(|b| map_box_spatial(b, spec.s, width, height))
        .collect();
    let mut merged = merge_boxes_temporal(&spatial, spec.t_s);
    merged.resize(frames, None);
    build_mask(frames, height, width, &merged)
}

/// A video codec between pixel grids `[T, H, W, C]` and latent grids
/// `[T/t_s, H/s, W/s, C]`.
pub trait VideoCodec {
    fn spec(&self) -> DownsampleSpec;
    fn encode(&self, video: &Tensor) -> Result<Tensor>;
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    /// True when each latent cell decodes to exactly its own pixel block.
    fn is_exactly_local(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Locality {
    Pass,
    Fail,
    /// Non-local codec: fraction of changed pixels inside the footprint.
    Advisory { coverage: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityReport {
    pub masked_cells: usize,
    pub footprint_pixels: usize,
    pub changed_pixels: usize,
    pub changed_outside: usize,
    pub status: Locality,
}

/// Encodes the video, zeroes every latent cell under `mask`, decodes, and
/// checks that pixels differing from the plain reconstruction all lie in
/// the masked cells' pixel footprints.
pub fn zero_mask_validate<C: VideoCodec + ?Sized>(
    video: &Tensor,
    codec: &C,
    mask: &MouthMask,
) -> Result<LocalityReport> {
    let spec = codec.spec();
    let latent = codec.encode(video)?;
    let ls = latent.shape().to_vec();
    if ls.len() != 4 || ls[..3] != [mask.frames, mask.height, mask.width] {
        return Err(MaskError::Codec(format!(
            "latent {ls:?} does not match mask {}x{}x{}",
            mask.frames, mask.height, mask.width
        )));
    }
    let channels = ls[3];
    let baseline = codec.decode(&latent)?;
    let mut zeroed = latent;
    for (cell, &m) in mask.cells.iter().enumerate() {
        if m {
            zeroed.data_mut()[cell * channels..(cell + 1) * channels].fill(0.0);
        }
    }
    let recon = codec.decode(&zeroed)?;

    let ps = baseline.shape();
    let (t, h, w, c) = (ps[0], ps[1], ps[2], ps[3]);
    let in_footprint = |f: usize, y: usize, x: usize| {
        let (lf, ly, lx) = (f / spec.t_s, y / spec.s, x / spec.s);
        lf < mask.frames && ly < mask.height && lx < mask.width && mask.get(lf, ly, lx)
    };
    let (mut changed, mut outside, mut footprint) = (0, 0, 0);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let inside = in_footprint(f, y, x);
                footprint += usize::from(inside);
                let base = ((f * h + y) * w + x) * c;
                let differs = (0..c).any(|k| recon.data()[base + k] != baseline.data()[base + k]);
                if differs {
                    changed += 1;
                    outside += usize::from(!inside);
                }
            }
        }
    }
    let status = if codec.is_exactly_local() {
        if outside == 0 {
            Locality::Pass
        } else {
            Locality::Fail
        }
    } else {
        Locality::Advisory {
            coverage: if changed == 0 {
                1.0
            } else {
                (changed - outside) as f64 / changed as f64
            },
        }
    };
    Ok(LocalityReport {
        masked_cells: mask.count(),
        footprint_pixels: footprint,
        changed_pixels: changed,
        changed_outside: outside,
        status,
    })
}

pub const SIDECAR_HEADER: &str = "frame_index,present,x1,y1,x2,y2";

/// One comma-separated record per frame under [`SIDECAR_HEADER`].
pub fn write_sidecar(boxes: &[MouthBoxPx]) -> String {
    let mut out = String::from(SIDECAR_HEADER);
    out.push('\n');
    for b in boxes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.frame_index,
            u8::from(b.present),
            b.x1,
            b.y1,
            b.x2,
            b.y2
        );
    }
    out
}

pub fn parse_sidecar(text: &str) -> Result<Vec<MouthBoxPx>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SIDECAR_HEADER => {}
        _ => {
            return Err(MaskError::Sidecar {
                line: 1,
                msg: format!("expected header {SIDECAR_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| MaskError::Sidecar { line: i + 1, msg };
        let fields: Vec<usize> = line
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        let [frame_index, present, x1, y1, x2, y2] = fields[..] else {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        };
        if present > 1 {
            return Err(err(format!("present flag {present} is not 0 or 1")));
        }
        if present == 1 && (x1 > x2 || y1 > y2) {
            return Err(err("box corners are inverted".into()));
        }
        out.push(MouthBoxPx {
            frame_index,
            x1,
            y1,
            x2,
            y2,
            present: present == 1,
        });
    }
    Ok(out)
}
