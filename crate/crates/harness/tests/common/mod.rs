#![allow(dead_code)]

use std::path::Path;

use jova_harness::ExperimentConfig;

/// A model small enough that a few hundred steps take seconds.
pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.token_dim = 8;
    c.model.num_heads = 2;
    c.model.multi_stream_depth = 1;
    c.model.single_stream_depth = 1;
    c.model.video_patch = [4, 4];
    c.data.train_scenes = 16;
    c.data.heldout_scenes = 4;
    c.train.stage1_steps = 3;
    c.train.stage2_steps = 5;
    c.train.batch_size = 2;
    c.sampler.steps = 4;
    c.run.output_dir = out.to_path_buf();
    c
}
