//! Meta-learning multi-task pre-training at desk scale.
//!
//! Pre-training is posed as a meta-learning problem: starting from shared
//! parameters, a few plain gradient-descent steps are taken on sampled
//! pre-training batches, the adapted parameters are evaluated on a fresh
//! batch, and the initial parameters are updated with the gradient of that
//! evaluation loss taken through the unrolled steps. With zero inner steps
//! this is ordinary multi-task training.

pub mod autodiff;
pub mod finetune;
pub mod metatrain;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tasks;
