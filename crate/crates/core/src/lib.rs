//! Cloud-bursting batch service: job store, routing, dispatch, elastic VM
//! pool, agents and a deterministic simulator sharing the same code paths.

pub mod agent;
pub mod clock;
pub mod config;
pub mod dispatch;
pub mod grid;
pub mod http;
pub mod kernels;
pub mod manager;
pub mod model;
pub mod pool;
pub mod protocol;
pub mod runtime;
pub mod sim;
pub mod simcloud;
pub mod store;
pub mod workload;
pub mod workspace;
