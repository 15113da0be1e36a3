//! Dense arrays with a tape-based reverse-mode engine.

mod array;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod real;
mod tape;

pub use array::Array;
pub use kernels::Upsample;
pub use optim::{Adam, AdamConfig};
pub use real::{Real, EXP_CLAMP};
pub use tape::{Pool, Tape, Unary, Var};
