//! Neural-network plumbing: autodiff tape, parameter store, layers.

pub mod attention;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod params;
pub mod tape;

pub use layers::Mode;
pub use params::{Binder, GradMap, ParamId, ParamStore};
pub use tape::{Tape, Var};
