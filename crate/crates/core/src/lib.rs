pub mod audio;
pub mod baselines;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kv;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Param, Parameterized, Var};
pub use model::{FloWaveNet, Latents, ModelConfig, SequentialPasses};
pub use tensor::Tensor;
