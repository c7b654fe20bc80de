pub mod backend;
pub mod catalog;
pub mod eval;
pub mod extract;
pub mod nmf;
pub mod prompting;
pub mod report;
pub(crate) mod rng;
pub mod runner;
pub mod sampler;
pub mod synth;
