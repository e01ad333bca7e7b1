pub mod conv;
mod ops;
mod tape;

pub use tape::{Gradients, Tape, Var};
pub(crate) use ops::as4;
