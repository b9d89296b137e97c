pub mod cli;
pub mod corpus;
pub mod evaltools;
pub mod gumbel;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;
