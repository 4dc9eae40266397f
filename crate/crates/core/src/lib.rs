//! Joint video-audio generation by flow matching on a synthetic
//! audio-visual world.

pub mod flow;
pub mod model;
pub mod mouthmask;
pub mod toyworld;
