//! Voice privacy at the source.
//!
//! An utterance is matched to the closest enrolled voice with a GMM-UBM
//! speaker identifier, a target voice is drawn at random, and a source-filter
//! converter re-renders the utterance in the target voice before it leaves
//! the device. The [`eval`] module measures the resulting trade-off between
//! speaker-identification accuracy and word error rate.

pub mod audio;
pub mod conversion;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod features;
pub mod gateway;
pub mod gmm;
pub mod manifest;
pub mod selection;
pub mod sid;
