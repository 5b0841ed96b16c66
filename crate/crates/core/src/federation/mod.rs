//! Coordinator and site state machines, the wire protocol, transports and
//! early stopping.

mod coordinator;
mod local;
mod protocol;
mod site;
mod study;
mod transport;

use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::governance::{Action, GateOutcome, Governance};
use crate::icnn::IcnnRegulariser;
use crate::seed::derive_seed;

pub use coordinator::{coordinator_run, FinalReport, RoundRecord, SiteResult, StopReason};
pub use local::{local_baseline, LocalReport};
pub use protocol::{decode, encode, FrameReader, Message, ModelPurpose, SiteReport, HEADER_LEN, MAX_FRAME_LEN, PROTOCOL_VERSION};
pub use site::{site_run, SiteSummary};
pub use study::{ModelConfig, Progress, RoundState, StudyConfig, DEFAULT_PATIENCE, DEFAULT_ROUNDS, MIN_IMPROVEMENT, TCP_WINDOW};
pub use transport::{memory_pair, ByteCounter, CountingTransport, MemoryTransport, TcpHub, TcpTransport, Transport};

/// Regulariser shared between the coordinator and in-process sites. Sites
/// only read it; remote sites never see it.
pub type SharedPsi = Arc<RwLock<IcnnRegulariser>>;

/// Fresh `psi` for a study, sized to the model's trainable parameter count.
pub fn new_shared_psi(study: &StudyConfig) -> Result<SharedPsi> {
    let model = crate::nn::build_mlp(&study.model.layer_dims, study.model.dropout, init_seed(study.seed))?;
    let psi = IcnnRegulariser::new(model.trainable_count(), &study.strategy.regulariser.hidden_dims, derive_seed(study.seed, "icnn"))?;
    Ok(Arc::new(RwLock::new(psi)))
}

pub(crate) fn init_seed(master: u64) -> u64 {
    derive_seed(master, "init")
}

pub(crate) fn read_psi(psi: &SharedPsi) -> Result<std::sync::RwLockReadGuard<'_, IcnnRegulariser>> {
    psi.read().map_err(|_| Error::Training("regulariser lock poisoned".into()))
}

/// Policy action a message requires, and the round it is scoped to.
pub fn action_for(msg: &Message) -> Action {
    match msg {
        Message::Join { .. } | Message::Stop { .. } => Action::JoinStudy,
        Message::GlobalModel { .. } => Action::PullModel,
        Message::Update { .. } => Action::PushUpdate,
        Message::Metrics { .. } => Action::ReadMetrics,
    }
}

/// Encodes `msg` and sends it through the node's gate on behalf of `subject`.
pub fn send_governed(gov: &mut Governance, transport: &mut dyn Transport, msg: &Message, subject: &str) -> Result<GateOutcome> {
    let request = gov.request(subject, action_for(msg), msg.study_id(), msg.round());
    let frame = encode(msg);
    gov.gate_send(transport, &frame, &request)
}
