pub mod numkernel;
pub mod corpus;
pub mod negsampling;
pub mod model;
pub mod metrics;
pub mod synthetic;
pub mod harness;
