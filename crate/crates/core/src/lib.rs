//! Few-shot human-object interaction recognition on a synthetic latent-factor world.

pub mod encoder;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod trainer;
pub mod world;
