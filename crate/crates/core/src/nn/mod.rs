//! Differentiable policy core: tape, recurrent actor-critic, Adam.

mod checkpoint;
mod optim;
mod policy;
pub mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{Adam, CosineSchedule};
pub use policy::{
    ActionBatch, ActionDistribution, PolicyGraph, PolicyParams, PolicySpec, Slot, StepOutput,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use tape::{Gradients, Tape, Var};
