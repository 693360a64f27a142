//! Provisioning orchestrator and desktop-grid simulator.
//!
//! A [`master::Master`] keeps the registry of nodes, partitions, releases and
//! instances. A [`node::NodeAgent`] per machine polls it, builds releases and
//! instances from buildout-style [`profile`]s, supervises their services and
//! reports back. Services of the bundled BOINC release form a small volunteer
//! computing [`grid`]. Every access made on a node goes through the [`mac`]
//! enforcement layer.

pub mod fixtures;
pub mod grid;
pub mod mac;
pub mod master;
pub mod model;
pub mod node;
pub mod profile;
pub mod scenario;
pub mod sim;
pub mod wire;
