//! Policy-agnostic reference monitor for a simulated multi-tier OS stack.

pub mod bench;
pub mod bundle;
pub mod framework;
pub mod irm;
pub mod kernel;
pub mod middleware;
pub mod model;
pub mod modules;
pub mod scenario;
