//! Data-driven predictive leading cruise control for mixed platoons, with
//! affine masking of the data exchanged between automated vehicles and the
//! central solver.

pub mod model;
pub mod datamat;
pub mod qp;
pub mod controller;
pub mod seed;
pub mod sim;
pub mod privacy;
pub mod config;
pub mod experiment;
pub mod io;
