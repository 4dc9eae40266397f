//! Seeded scene pools and their latent encodings.

use jova_core::model::ConditionSet;
use jova_core::mouthmask::{latent_mask, MouthMask, VideoCodec};
use jova_core::toyworld::{generate_scene, AudioCodec, BlockCodec, Family, ToyScene};
use jova_tensor::Tensor;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::Result;

const TRAIN_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;

/// ChaCha8 seeded with `seed` on an independent `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One scene in latent space, ready for the loss.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub family: Family,
    /// `[T', H', W', 1]`
    pub video: Tensor,
    /// `[L', 1]`
    pub audio: Tensor,
    pub mask: MouthMask,
    pub cond: ConditionSet,
}

#[derive(Clone, Debug)]
pub struct Codecs {
    pub video: BlockCodec,
    pub audio: AudioCodec,
}

impl Codecs {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            video: BlockCodec::new(cfg.codec.s, cfg.codec.t_s)?,
            audio: AudioCodec::new(cfg.codec.audio_hop)?,
        })
    }

    pub fn condition(&self, scene: &ToyScene) -> Result<ConditionSet> {
        let (video_text, audio_text) = scene.text_ids();
        let reference = match &scene.reference {
            Some(r) => Some(self.video.encode_image(r)?),
            None => None,
        };
        Ok(ConditionSet {
            video_text,
            audio_text,
            reference,
        })
    }

    pub fn encode(&self, scene: &ToyScene) -> Result<TrainItem> {
        let video = self.video.encode_video(&scene.video)?;
        let audio = self.audio.encode(&scene.audio())?;
        let sh = video.shape();
        let mask = latent_mask(&scene.boxes, self.video.spec(), sh[0], sh[1], sh[2])?;
        Ok(TrainItem {
            family: scene.family,
            video,
            audio,
            mask,
            cond: self.condition(scene)?,
        })
    }
}

/// Training pool plus held-out avatar scenes, with a content hash.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainItem>,
    pub heldout: Vec<ToyScene>,
    pub manifest: String,
}

impl Dataset {
    /// Depends only on `[world]`, `[codec]`, and `[data]`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let codecs = Codecs::new(cfg)?;
        let d = &cfg.data;
        let mut hasher = Sha256::new();

        let mut rng = stream_rng(d.seed, TRAIN_STREAM);
        let pick = WeightedIndex::new(d.mixture)
            .map_err(|e| crate::HarnessError::Config(format!("mixture: {e}")))?;
        let mut train = Vec::with_capacity(d.train_scenes);
        for _ in 0..d.train_scenes {
            let family = Family::ALL[pick.sample(&mut rng)];
            let scene = generate_scene(family, &mut rng, &cfg.world)?;
            hasher.update(scene.to_checkpoint()?.to_bytes());
            train.push(codecs.encode(&scene)?);
        }

        let mut rng = stream_rng(d.seed, HELDOUT_STREAM);
        let mut heldout = Vec::with_capacity(d.heldout_scenes);
        for _ in 0..d.heldout_scenes {
            let scene = generate_scene(Family::AvatarSpeech, &mut rng, &cfg.world)?;
            hasher.update(scene.to_checkpoint()?.to_bytes());
            heldout.push(scene);
        }
        hasher.update(toml::to_string(&cfg.codec).expect("plain struct").as_bytes());

        Ok(Self {
            train,
            heldout,
            manifest: hex::encode(hasher.finalize()),
        })
    }
}
