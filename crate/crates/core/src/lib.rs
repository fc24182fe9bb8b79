pub mod analytic;
pub mod error;
pub mod lattice;
pub mod roots;
pub mod scalar;
pub mod engine;
pub mod verify;
pub mod checkpoint;
pub mod render;
pub mod cli;

/// Double-precision lattice field.
pub type Field = lattice::LatticeField<f64>;
/// Double-precision sandpile state.
pub type State = engine::SandpileState<f64>;
/// Single-precision sandpile state.
pub type StateF32 = engine::SandpileState<f32>;
