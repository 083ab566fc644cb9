//! Gated bi-directional multi-context detection head.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense 4-D arrays and a tape-based
//!   reverse-mode engine with the handful of ops the detector needs.
//! * [`boxes`] and [`roi`]: box algebra, context padding, roi max pooling.
//! * [`gbd`]: the gated bi-directional message-passing layer (v1 and v2).
//! * [`head`]: a small trunk, the shared per-branch head, offsets and loss.
//! * [`postprocess`] and [`eval`]: NMS, box voting, flip/context/ensemble
//!   fusion, mAP and false-positive analysis.
//! * [`pipeline`]: synthetic data, proposals, training, inference,
//!   checkpoints and ablation harnesses.

pub mod autograd;
pub mod boxes;
pub mod error;
pub mod eval;
pub mod gbd;
pub mod head;
pub mod pipeline;
pub mod postprocess;
pub mod roi;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
