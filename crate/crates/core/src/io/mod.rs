//! File formats and the synthetic corpus. All binary formats are little-endian.

mod binary;
mod corpus;
mod text;

pub use binary::*;
pub use corpus::*;
pub use text::*;
