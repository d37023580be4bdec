pub mod config;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod harness;
pub mod obs;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod scenario;
pub mod world;
