pub mod batch;
pub mod diffnet;
pub mod ebm;
pub mod numerics;
pub mod sampler;
pub mod adapt;
pub mod seeds;
pub mod scenarios;
pub mod baselines;
pub mod eval;
pub mod experiment;
