use std::sync::Arc;

use super::audit::{AuditEvent, AuditLog, EventKind};
use super::clock::Clock;
use super::policy::{evaluate, AccessRequest, Action, Decision, PolicySet};
use crate::error::Result;
use crate::federation::Transport;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateOutcome {
    Sent { bytes: usize, decision: Decision },
    Denied(Decision),
}

impl GateOutcome {
    pub fn decision(&self) -> &Decision {
        match self {
            GateOutcome::Sent { decision, .. } | GateOutcome::Denied(decision) => decision,
        }
    }

    pub fn is_sent(&self) -> bool {
        matches!(self, GateOutcome::Sent { .. })
    }
}

/// Evaluates, records the decision, and only then touches the transport.
/// If the decision cannot be recorded nothing is sent.
pub fn gate_send(
    transport: &mut dyn Transport,
    frame: &[u8],
    request: &AccessRequest,
    policy: &PolicySet,
    audit: &mut AuditLog,
) -> Result<GateOutcome> {
    let decision = evaluate(request, policy);
    audit.append(&AuditEvent::decision(request, &decision))?;
    if !decision.is_permit() {
        log::warn!("{} denied {} on {}: {decision}", request.subject, request.action, request.resource);
        return Ok(GateOutcome::Denied(decision));
    }
    transport.send(frame)?;
    Ok(GateOutcome::Sent { bytes: frame.len(), decision })
}

/// One node's view of governance: the study policy, its own signed audit log
/// and its clock.
pub struct Governance {
    node: String,
    policy: Arc<PolicySet>,
    audit: AuditLog,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Governance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Governance").field("node", &self.node).field("audit", &self.audit).finish()
    }
}

impl Governance {
    pub fn new(node: impl Into<String>, policy: Arc<PolicySet>, audit: AuditLog, clock: Arc<dyn Clock>) -> Self {
        Self { node: node.into(), policy, audit, clock }
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn policy(&self) -> &PolicySet {
        &self.policy
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn into_audit(self) -> AuditLog {
        self.audit
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    pub fn record(&mut self, kind: EventKind, subject: &str, action: &str, resource: &str, detail: impl Into<String>) -> Result<()> {
        let ts = self.clock.now_ms();
        self.audit.append(&AuditEvent::new(kind, subject, action, resource, ts, detail))?;
        Ok(())
    }

    pub fn request(&self, subject: &str, action: Action, resource: &str, round: Option<u32>) -> AccessRequest {
        AccessRequest::new(subject, action, resource, self.clock.now_ms(), round)
    }

    pub fn gate_send(&mut self, transport: &mut dyn Transport, frame: &[u8], request: &AccessRequest) -> Result<GateOutcome> {
        gate_send(transport, frame, request, &self.policy, &mut self.audit)
    }
}
