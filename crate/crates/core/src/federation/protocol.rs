//! Length-prefixed binary framing.
//!
//! ```text
//! frame   = len:u32be  version:u8(=0x01)  tag:u8  payload
//! len     = 2 + payload length
//! str     = n:u32be utf8[n]
//! params  = entries:u32be { name:str kind:u8 ndim:u8 dim:u32be* }  count:u32be  f32be[count]
//! ```

use std::sync::Arc;

use crate::aggregation::ClientUpdate;
use crate::error::ProtocolError;
use crate::metrics::{Interval, SiteMetrics};
use crate::params::{Layout, ParamVector, TensorKind};

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;
/// Upper bound on `len`; larger prefixes are rejected before allocating.
pub const MAX_FRAME_LEN: usize = 256 * 1024 * 1024;

const TAG_JOIN: u8 = 1;
const TAG_GLOBAL_MODEL: u8 = 2;
const TAG_UPDATE: u8 = 3;
const TAG_METRICS: u8 = 4;
const TAG_STOP: u8 = 5;

/// Why a global model is being sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelPurpose {
    /// Start of a round: train locally and reply with an update.
    Train = 0,
    /// End of a round: reply with validation metrics.
    Evaluate = 1,
    /// Selected checkpoint: reply with held-out test metrics.
    Final = 2,
}

impl ModelPurpose {
    fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Train),
            1 => Some(Self::Evaluate),
            2 => Some(Self::Final),
            _ => None,
        }
    }
}

/// Per-site evaluation reply.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub site_id: String,
    pub val_roc_auc: f64,
    pub test: Option<SiteMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join { study_id: String, site_id: String },
    GlobalModel { study_id: String, round: u32, purpose: ModelPurpose, psi_digest: [u8; 32], params: ParamVector },
    Update { study_id: String, round: u32, update: ClientUpdate },
    Metrics { study_id: String, round: u32, report: SiteReport },
    Stop { study_id: String, reason: String },
}

impl Message {
    pub fn study_id(&self) -> &str {
        match self {
            Message::Join { study_id, .. }
            | Message::GlobalModel { study_id, .. }
            | Message::Update { study_id, .. }
            | Message::Metrics { study_id, .. }
            | Message::Stop { study_id, .. } => study_id,
        }
    }

    pub fn round(&self) -> Option<u32> {
        match self {
            Message::GlobalModel { round, .. } | Message::Update { round, .. } | Message::Metrics { round, .. } => Some(*round),
            Message::Join { .. } | Message::Stop { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Join { .. } => "join",
            Message::GlobalModel { .. } => "global_model",
            Message::Update { .. } => "update",
            Message::Metrics { .. } => "metrics",
            Message::Stop { .. } => "stop",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Message::Join { .. } => TAG_JOIN,
            Message::GlobalModel { .. } => TAG_GLOBAL_MODEL,
            Message::Update { .. } => TAG_UPDATE,
            Message::Metrics { .. } => TAG_METRICS,
            Message::Stop { .. } => TAG_STOP,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamVector) {
        let layout = p.layout();
        self.u32(layout.entries().len() as u32);
        for e in layout.entries() {
            self.str(&e.name);
            self.u8(match e.kind {
                TensorKind::Trainable => 0,
                TensorKind::Buffer => 1,
            });
            self.u8(e.shape.len() as u8);
            for &d in &e.shape {
                self.u32(d as u32);
            }
        }
        self.u32(p.len() as u32);
        self.0.reserve(4 * p.len());
        for v in p.values() {
            self.0.extend_from_slice(&v.to_be_bytes());
        }
    }
}

/// Serialises a message into one complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer(vec![0, 0, 0, 0, PROTOCOL_VERSION, msg.tag()]);
    match msg {
        Message::Join { study_id, site_id } => {
            w.str(study_id);
            w.str(site_id);
        }
        Message::GlobalModel { study_id, round, purpose, psi_digest, params } => {
            w.str(study_id);
            w.u32(*round);
            w.u8(*purpose as u8);
            w.0.extend_from_slice(psi_digest);
            w.params(params);
        }
        Message::Update { study_id, round, update } => {
            w.str(study_id);
            w.u32(*round);
            w.str(&update.site_id);
            w.u64(update.n_samples);
            w.f64(update.sum_nll);
            w.f64(update.reg_value);
            w.params(&update.params);
        }
        Message::Metrics { study_id, round, report } => {
            w.str(study_id);
            w.u32(*round);
            w.str(&report.site_id);
            w.f64(report.val_roc_auc);
            match &report.test {
                None => w.u8(0),
                Some(m) => {
                    w.u8(1);
                    for v in [m.roc_auc, m.roc_auc_ci.low, m.roc_auc_ci.high, m.balanced_accuracy, m.balanced_accuracy_ci.low, m.balanced_accuracy_ci.high, m.threshold] {
                        w.f64(v);
                    }
                }
            }
        }
        Message::Stop { study_id, reason } => {
            w.str(study_id);
            w.str(reason);
        }
    }
    let len = (w.0.len() - 4) as u32;
    w.0[..4].copy_from_slice(&len.to_be_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::new(self.pos, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ProtocolError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, ProtocolError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4")))
    }
    fn u64(&mut self, what: &str) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().expect("8")))
    }
    fn f64(&mut self, what: &str) -> Result<f64, ProtocolError> {
        Ok(f64::from_be_bytes(self.take(8, what)?.try_into().expect("8")))
    }

    fn str(&mut self, what: &str) -> Result<String, ProtocolError> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ProtocolError::new(start, format!("{what} is not valid utf-8")))
    }

    fn params(&mut self) -> Result<ParamVector, ProtocolError> {
        let entries = self.u32("tensor count")? as usize;
        // Each entry needs at least 6 bytes, which bounds the allocation.
        if entries > (self.buf.len() - self.pos) / 6 {
            return Err(self.err(format!("tensor count {entries} exceeds frame")));
        }
        let mut specs = Vec::with_capacity(entries);
        let mut total: usize = 0;
        for _ in 0..entries {
            let name = self.str("tensor name")?;
            let kind_at = self.pos;
            let kind = match self.u8("tensor kind")? {
                0 => TensorKind::Trainable,
                1 => TensorKind::Buffer,
                k => return Err(ProtocolError::new(kind_at, format!("unknown tensor kind {k}"))),
            };
            let ndim = self.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = self.u32("tensor dim")? as usize;
                numel = numel.checked_mul(d).ok_or_else(|| self.err("tensor size overflows"))?;
                shape.push(d);
            }
            total = total.checked_add(numel).ok_or_else(|| self.err("layout size overflows"))?;
            specs.push((name, shape, kind));
        }
        let count_at = self.pos;
        let count = self.u32("value count")? as usize;
        if count != total {
            return Err(ProtocolError::new(count_at, format!("value count {count} disagrees with layout size {total}")));
        }
        let layout = Layout::new(specs).map_err(|e| ProtocolError::new(count_at, e.to_string()))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.err("value count overflows"))?, "parameter values")?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().expect("4"))).collect();
        ParamVector::new(Arc::new(layout), values).map_err(|e| ProtocolError::new(count_at, e.to_string()))
    }
}

/// Parses exactly one complete frame. Trailing bytes are an error.
pub fn decode(frame: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = Reader { buf: frame, pos: 0 };
    let len = r.u32("frame length")? as usize;
    if len < 2 {
        return Err(ProtocolError::new(0, format!("frame length {len} shorter than header")));
    }
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::new(0, format!("frame length {len} exceeds limit {MAX_FRAME_LEN}")));
    }
    if frame.len() - 4 < len {
        return Err(ProtocolError::new(frame.len(), format!("truncated frame: declared {len} bytes, {} present", frame.len() - 4)));
    }
    if frame.len() - 4 > len {
        return Err(ProtocolError::new(4 + len, format!("{} bytes after end of frame", frame.len() - 4 - len)));
    }
    let version = r.u8("version")?;
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::new(4, format!("unsupported protocol version {version:#04x}")));
    }
    let tag = r.u8("tag")?;
    let msg = match tag {
        TAG_JOIN => Message::Join { study_id: r.str("study id")?, site_id: r.str("site id")? },
        TAG_GLOBAL_MODEL => {
            let study_id = r.str("study id")?;
            let round = r.u32("round")?;
            let at = r.pos;
            let purpose = ModelPurpose::from_u8(r.u8("purpose")?).ok_or_else(|| ProtocolError::new(at, "unknown model purpose"))?;
            let psi_digest = r.take(32, "psi digest")?.try_into().expect("32");
            let params = r.params()?;
            Message::GlobalModel { study_id, round, purpose, psi_digest, params }
        }
        TAG_UPDATE => {
            let study_id = r.str("study id")?;
            let round = r.u32("round")?;
            let site_id = r.str("site id")?;
            let n_samples = r.u64("sample count")?;
            let sum_nll = r.f64("sum_nll")?;
            let reg_value = r.f64("reg_value")?;
            let params = r.params()?;
            Message::Update { study_id, round, update: ClientUpdate { site_id, params, n_samples, sum_nll, reg_value } }
        }
        TAG_METRICS => {
            let study_id = r.str("study id")?;
            let round = r.u32("round")?;
            let site_id = r.str("site id")?;
            let val_roc_auc = r.f64("validation auc")?;
            let at = r.pos;
            let test = match r.u8("test flag")? {
                0 => None,
                1 => {
                    let mut v = [0.0; 7];
                    for x in &mut v {
                        *x = r.f64("test metrics")?;
                    }
                    Some(SiteMetrics {
                        roc_auc: v[0],
                        roc_auc_ci: Interval { low: v[1], high: v[2] },
                        balanced_accuracy: v[3],
                        balanced_accuracy_ci: Interval { low: v[4], high: v[5] },
                        threshold: v[6],
                    })
                }
                f => return Err(ProtocolError::new(at, format!("invalid test flag {f}"))),
            };
            Message::Metrics { study_id, round, report: SiteReport { site_id, val_roc_auc, test } }
        }
        TAG_STOP => Message::Stop { study_id: r.str("study id")?, reason: r.str("reason")? },
        t => return Err(ProtocolError::new(5, format!("unknown message tag {t}"))),
    };
    if r.pos != frame.len() {
        return Err(r.err(format!("{} unread payload bytes", frame.len() - r.pos)));
    }
    Ok(msg)
}

/// Reassembles frames from an arbitrary chunked byte stream.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    consumed: usize,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `None` if more bytes are needed. Offsets in errors
    /// are relative to the start of the stream.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4")) as usize;
        if !(2..=MAX_FRAME_LEN).contains(&len) {
            return Err(ProtocolError::new(self.consumed, format!("invalid frame length {len}")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let frame: Vec<u8> = self.buf.drain(..4 + len).collect();
        self.consumed += frame.len();
        Ok(Some(frame))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
