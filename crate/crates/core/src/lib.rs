//! Online recurrent learning with columnar and staged LSTM networks.
//!
//! The engine maintains exact forward-mode gradients of every recurrent
//! feature at a cost linear in the parameter count by restricting the
//! architecture: features are scalar-state LSTM columns that never feed one
//! another within a stage, and hierarchical features are grown in stages with
//! earlier stages frozen. Training is online TD(lambda) over a streaming
//! prediction target. A truncated-BPTT dense LSTM baseline, trajectory
//! stream files, the trace-patterning benchmark generator, and an experiment
//! harness with compute accounting round out the crate.

pub mod column;
pub mod dense;
pub mod error;
pub mod flops;
pub mod harness;
pub mod net;
pub mod norm;
pub mod oracle;
pub mod stream;
pub mod td;
pub mod trace_env;
pub(crate) mod wire;

pub use error::{Error, Result};
pub use stream::StepRecord;
