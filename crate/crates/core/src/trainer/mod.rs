mod critic;
mod dmd;
mod eval;
mod features;
mod gate;
mod step;
mod tuning;

pub use critic::*;
pub use dmd::*;
pub use eval::*;
pub use features::*;
pub use gate::*;
pub use step::*;
pub use tuning::*;
