//! Desk-scale decoder-only transformer inference with pluggable KV-cache
//! compression policies, an attention-analysis suite, and a benchmark
//! harness for memory and work accounting.

pub mod analysis;
pub mod bench;
pub mod kv;
pub mod math;
pub mod model;
pub mod policy;

pub use kv::{CacheSet, LayerKvCache};
pub use math::{HeadTensor, Matrix};
pub use model::{Model, ModelConfig, Session, StepOutput};
pub use policy::{CachePolicy, PyramidPolicyConfig};
