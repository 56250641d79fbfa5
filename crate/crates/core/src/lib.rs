//! Pilot-wave dynamics and quantum relaxation at desk scale.

pub mod cmb;
pub mod cosmofield;
pub mod exec;
pub mod fit;
pub mod integrator;
pub mod io;
pub mod quadrature;
pub mod relaxation;
pub mod typicality;
pub mod wavefield;
