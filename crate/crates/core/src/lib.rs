//! Selective state-space scans with pooled token grids.
//!
//! The scan runs over one pooled token per grid row instead of every token,
//! and consecutive blocks transpose the grid so pooling alternates between
//! the two spatial axes. Masked (irregular) grids and per-channel token
//! grids reuse the same block through [`pooling::GroupLayout`].

pub mod block;
pub mod channel_tokens;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod fvt1;
pub mod linalg;
pub mod masked_grid;
pub mod pooling;
pub mod selective_scan;
pub mod tensor_grid;

pub use error::{Error, Result};
pub use tensor_grid::{Orientation, TokenGrid};
