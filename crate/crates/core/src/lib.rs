//! Data alignment, contrastive tri-modal retrieval, policy validation and
//! action safety for bimanual visuotactile manipulation data.

// `!(a < b)` comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod embed;
pub mod episode;
pub mod modality;
pub mod report;
pub mod retrieval;
pub mod safety;
pub mod sync;
pub mod synth;
pub mod validate;
