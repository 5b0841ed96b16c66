//! Deny-by-default policy evaluation, the transmission gate and the signed,
//! hash-chained audit log.

mod audit;
mod clock;
mod gate;
mod policy;

pub use audit::{
    read_audit_file, read_public_key, record_hash, signing_key_for, verify_bytes, verify_chain, verify_file, write_public_key,
    AuditEvent, AuditLog, AuditRecord, BreakReason, ChainStatus, EventKind, GENESIS_HASH,
};
pub use clock::{Clock, LogicalClock, SystemClock, LOGICAL_EPOCH_MS};
pub use ed25519_dalek::{SigningKey, VerifyingKey};
pub use gate::{gate_send, GateOutcome, Governance};
pub use policy::{
    evaluate, pattern_matches, AccessRequest, Action, Condition, Decision, Effect, PolicyRule, PolicySet, RoundRange, DEFAULT_DENY,
};
