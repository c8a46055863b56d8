//! Feed-in control: signals, the optimal control problem and its solver.

pub mod constraints;
pub mod objective;
pub mod problem;
pub mod qp;
mod signal;

pub use constraints::{evaluate_constraints, ConstraintKind, ConstraintSet, ConstraintValues};
pub use objective::{Objective, ObjectiveConfig};
pub use problem::{find_feasible, optimize, ControlProblem, OptimizationReport, OptimizationResult, SqpOptions};
pub use signal::{ConstantControl, ControlSignal, FourierControl, SampledControl};
