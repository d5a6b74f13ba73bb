//! Hierarchical visual budgeting for video-language inference.
//!
//! The engine works in two stages:
//!
//! * [`frame`] scores every candidate frame by scene change, motion and query
//!   relevance, then picks a keyframe budget with adaptive temporal bucketing.
//! * [`token`] spends a visual-token budget over the keyframes' tokens: a
//!   global core set by attention importance, then per-frame context tokens
//!   chosen by a batched maximal-marginal-relevance pass.
//!
//! [`pipeline`] chains both stages over a scenario directory of `.trgb`
//! tensor bundles ([`bundle`]) and writes a JSON selection manifest.

pub mod apportion;
pub mod bundle;
pub mod frame;
pub mod json;
pub mod linalg;
pub mod oracles;
pub mod pipeline;
pub mod scenario;
pub mod select;
pub mod synth;
pub mod token;
pub mod verify;
