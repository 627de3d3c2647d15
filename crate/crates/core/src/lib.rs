//! Single-qubit characterization toolkit for a weakly anharmonic transmon:
//! pulse-level simulation, Clifford compilation, randomized benchmarking,
//! gate set tomography, calibration and error budgeting.

pub mod linalg;
pub mod qop;
pub mod transmon;
pub mod clifford;
pub mod fit;
pub mod seeds;
pub mod benchmark;
pub mod calib;
pub mod drift;
pub mod gst;
pub mod pipeline;
