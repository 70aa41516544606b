pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod training;
