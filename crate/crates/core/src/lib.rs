pub mod model;
pub mod numerics;
pub mod optim;
pub mod tasks;
pub mod experiments;
pub mod metrics;
pub mod pruning;
