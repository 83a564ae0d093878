pub mod apanet;
pub mod autodiff;
pub mod config;
pub mod experiments;
pub mod geometry;
pub mod pose_analysis;
pub mod synth;
