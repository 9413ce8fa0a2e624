pub mod conformal;
pub mod dataio;
pub mod diffcore;
pub mod dynotears;
pub mod graphops;
pub mod model;
pub(crate) mod rngutil;
