//! The memory layer: gated key/value covariances, a regularized solve per
//! token, and the α-mix between solution and query.

mod backward;
mod batch;
mod config;
mod forward;
mod gradcheck;
mod plan;
mod reference;

pub use backward::backward_chunkwise;
pub use batch::{GradientBundle, HeadInputs, SequenceBatch, UpstreamGrads};
pub use config::{AlphaPlacement, InnerSolver, LayerConfig, Regularization};
pub use forward::{forward_chunkwise, forward_chunkwise_with_tails, ForwardState, HeadForward};
pub use plan::{
    adaptive_lambda, chunk_initial_states, chunkwise_frobenius, decay_products, plan_head, prepare_head, ChunkData,
    ChunkOperator, ChunkPlan, LambdaBounds, PreparedHead,
};
pub use reference::{backward_sequential_reference, forward_sequential_reference, ReferenceHead, ReferenceState};
pub use gradcheck::{compare, finite_difference_check, FdReport, GroupCheck};
