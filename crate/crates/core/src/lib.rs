#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod adaptation;
pub mod autodiff;
pub mod checkpoint;
mod conv;
pub mod error;
pub mod gradcheck;
pub mod history;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod scalar;
pub mod segmentation;
pub mod selection;
pub mod tensor;
pub mod translation;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{Shape, Tensor};

/// Independent child seed for stream `stream` of `seed` (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
