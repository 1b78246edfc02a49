//! Photo quality assessment for teledermatology: image features, a skin
//! segmentation model, classical learners, a stacked ensemble, evaluation
//! statistics and capture-session bookkeeping.

pub mod datasets;
pub mod ensemble;
pub mod features;
pub mod imagekit;
pub mod session;
pub mod learners;
pub mod pipeline;
pub mod skinmodel;
pub mod stats;
pub mod synth;
