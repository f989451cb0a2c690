//! Observable island analysis for DC power system state estimation.
//!
//! Given a network of buses and branches with unit susceptances and a set of
//! flow and injection measurements, this crate determines which parts of the
//! state are determinable: it partitions the buses into observable islands by
//! variance message passing on the measurement factor graph, and restores
//! full observability by selecting an independent set of boundary
//! pseudo-measurements. An exact rational-arithmetic path provides the
//! ground truth the iterative path is checked against, and a topological
//! method serves as a comparison baseline.

pub mod bench;
pub mod exact;
pub mod fg;
pub mod islands;
pub mod model;
pub mod oracle;
pub mod restore;
pub mod util;
