//! Governed federated learning over site-local embedding datasets.
//!
//! A compact MLP classifier is trained across sites with FedAvg, FedProx or
//! FedMAP aggregation. Every message a node sends first passes a
//! deny-by-default policy gate, and every decision lands in a signed,
//! hash-chained audit log.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod governance;
pub mod icnn;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod seed;

pub use error::{Error, ProtocolError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/regulariser.md")]
    mod regulariser {}
    #[doc = include_str!("../../../book/src/governance.md")]
    mod governance {}
    #[doc = include_str!("../../../book/src/audit-format.md")]
    mod audit_format {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/data-metrics.md")]
    mod data_metrics {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
