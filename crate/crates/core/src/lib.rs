pub mod analysis;
pub mod autodiff;
pub mod circuit;
pub mod cli;
pub mod dataset;
pub mod encoding;
pub mod gradcheck;
pub mod model;
pub mod tasks;
pub mod training;
