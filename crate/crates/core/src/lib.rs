pub mod adversary;
pub mod crypto;
pub mod device;
pub mod edge;
pub mod metrics;
pub mod sim;
pub mod transport;
pub mod wire;
