pub mod density;
pub mod diffcore;
pub mod estimate;
pub mod flow;
pub mod nets;
pub mod pdesolve;
pub mod problems;
pub mod scalar;

pub use scalar::Real;
