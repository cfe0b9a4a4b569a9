// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod geometry;
pub mod hat;
pub mod motion;
pub mod sim;
pub mod tensor;
