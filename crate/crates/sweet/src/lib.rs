//! Learns a Tucker-factorized weight template for a miniature vision
//! transformer through masked-patch self-supervision, then initializes
//! target models of other depths and widths from the frozen template and
//! lightweight scalers.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod init_adapt;
pub mod params;
pub mod pretrain;
pub mod template;
pub mod tensor;
pub mod verify;
pub mod vit;
