//! Entropy coding: an integer-only renormalizing range coder over frozen
//! 16-bit cumulative frequency tables, the symbol models built on top of it,
//! and the bitstream container.
//!
//! The latent residuals are coded with Gaussian models quantized into
//! log-spaced sigma buckets; each bucket freezes one table covering symbols
//! in `-m..=m` with `m = ceil(6 sigma)` plus an escape slot for outliers.
//! Hyper-latent indices use a single learned categorical table. Every table
//! gives each symbol a frequency of at least 1 out of 2^16, which is the
//! coder-side twin of the 2^-16 probability floor used by the rate
//! estimate: no symbol can cost more than 16 bits, and estimate and actual
//! bit counts stay within table-granularity of each other.

mod coder;
mod container;
mod models;

pub use coder::{CdfTable, RangeDecoder, RangeEncoder};
pub use container::{read_container, write_container, Header, MAGIC, VERSION};
pub use models::{categorical_bits, gaussian_symbol_bits, GaussianBuckets, RawBytes};

/// Probability floor shared by the rate estimate and the frozen tables.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

/// All tables total 2^16; frequencies are 16-bit with a minimum of 1.
pub const TOTAL_SHIFT: u32 = 16;
