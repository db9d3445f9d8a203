//! Dense tensors, reverse-mode autodiff, Adam with warm-up, checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use graph::{GradTape, Graph, Var};
pub use optim::{adam_step, clip_global_norm, warmup_schedule, AdamState, Schedule, TrainConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The run-wide generator type.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for `(seed, stream)`; streams never overlap.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
