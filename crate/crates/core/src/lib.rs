pub mod bench;
pub mod channel;
pub mod numerics;
pub mod pebcd;
pub mod qp;
pub mod rng;
pub mod subsolvers;
pub mod system_model;
pub mod validation;
