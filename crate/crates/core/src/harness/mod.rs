//! Dataset and checkpoint I/O, training, evaluation, benchmarking and
//! plotting.

pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod plot;
pub mod rle;
pub mod train;
