use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::policy::{AccessRequest, Decision};
use crate::error::{Error, Result};
use crate::seed::derive_bytes;

pub const GENESIS_HASH: [u8; 32] = [0; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Join,
    Broadcast,
    Update,
    Decision,
    Aggregation,
    RoundAborted,
    RunComplete,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Join,
        EventKind::Broadcast,
        EventKind::Update,
        EventKind::Decision,
        EventKind::Aggregation,
        EventKind::RoundAborted,
        EventKind::RunComplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Join => "join",
            EventKind::Broadcast => "broadcast",
            EventKind::Update => "update",
            EventKind::Decision => "decision",
            EventKind::Aggregation => "aggregation",
            EventKind::RoundAborted => "round_aborted",
            EventKind::RunComplete => "run_complete",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Audit(format!("unknown event kind {s:?}")))
    }
}

/// One audited fact. Fields that do not apply to a kind are empty strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub kind: EventKind,
    pub subject: String,
    pub action: String,
    pub resource: String,
    pub decision: String,
    pub rule_id: String,
    pub timestamp: i64,
    pub detail: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Audit(format!("payload truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Audit(format!("invalid utf-8 at byte {at}")))
    }
}

impl AuditEvent {
    pub fn new(
        kind: EventKind,
        subject: impl Into<String>,
        action: impl Into<String>,
        resource: impl Into<String>,
        timestamp: i64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            subject: subject.into(),
            action: action.into(),
            resource: resource.into(),
            decision: String::new(),
            rule_id: String::new(),
            timestamp,
            detail: detail.into(),
        }
    }

    /// Record of a policy decision. The detail carries the round and, for
    /// default denials, the near-miss rule context.
    pub fn decision(request: &AccessRequest, decision: &Decision) -> Self {
        let mut detail = match request.round {
            Some(r) => format!("round={r}"),
            None => String::new(),
        };
        if let Some(note) = &decision.note {
            if !detail.is_empty() {
                detail.push_str("; ");
            }
            detail.push_str(note);
        }
        Self {
            kind: EventKind::Decision,
            subject: request.subject.clone(),
            action: request.action.as_str().to_string(),
            resource: request.resource.clone(),
            decision: decision.effect.as_str().to_string(),
            rule_id: decision.rule_id.clone(),
            timestamp: decision.timestamp,
            detail,
        }
    }

    /// Fixed field order: kind, subject, action, resource, decision, rule_id
    /// as u32-BE-length-prefixed UTF-8, then timestamp as i64 BE, then detail.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.detail.len());
        for s in [&self.kind.as_str().to_string(), &self.subject, &self.action, &self.resource, &self.decision, &self.rule_id] {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        put_str(&mut out, &self.detail);
        out
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        let kind = c.string()?.parse()?;
        let subject = c.string()?;
        let action = c.string()?;
        let resource = c.string()?;
        let decision = c.string()?;
        let rule_id = c.string()?;
        let timestamp = i64::from_be_bytes(c.take(8)?.try_into().expect("8 bytes"));
        let detail = c.string()?;
        if c.pos != bytes.len() {
            return Err(Error::Audit(format!("{} trailing payload bytes", bytes.len() - c.pos)));
        }
        Ok(Self { kind, subject, action, resource, decision, rule_id, timestamp, detail })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub seq: u64,
    pub prev_hash: [u8; 32],
    pub payload: Vec<u8>,
    pub hash: [u8; 32],
    pub signature: [u8; 64],
}

/// `SHA-256(prev_hash || seq as u64 BE || payload)`.
pub fn record_hash(prev_hash: &[u8; 32], seq: u64, payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev_hash);
    h.update(seq.to_be_bytes());
    h.update(payload);
    h.finalize().into()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    seq: u64,
    prev_hash: String,
    payload: String,
    hash: String,
    signature: String,
}

impl AuditRecord {
    pub fn event(&self) -> Result<AuditEvent> {
        AuditEvent::from_canonical(&self.payload)
    }

    /// One compact JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        let line = RecordLine {
            seq: self.seq,
            prev_hash: hex::encode(self.prev_hash),
            payload: BASE64.encode(&self.payload),
            hash: hex::encode(self.hash),
            signature: hex::encode(self.signature),
        };
        serde_json::to_string(&line).expect("record serialises")
    }

    /// Strict inverse of [`to_json_line`](Self::to_json_line): any line that
    /// would not be reproduced byte-for-byte is rejected.
    pub fn from_json_line(line: &[u8]) -> Result<Self> {
        let raw: RecordLine = serde_json::from_slice(line).map_err(|e| Error::Audit(format!("malformed record: {e}")))?;
        let fixed = |s: &str, n: usize| -> Result<Vec<u8>> {
            let v = hex::decode(s).map_err(|e| Error::Audit(format!("bad hex: {e}")))?;
            if v.len() != n {
                return Err(Error::Audit(format!("expected {n} bytes, found {}", v.len())));
            }
            Ok(v)
        };
        let record = AuditRecord {
            seq: raw.seq,
            prev_hash: fixed(&raw.prev_hash, 32)?.try_into().expect("32"),
            payload: BASE64.decode(&raw.payload).map_err(|e| Error::Audit(format!("bad base64: {e}")))?,
            hash: fixed(&raw.hash, 32)?.try_into().expect("32"),
            signature: fixed(&raw.signature, 64)?.try_into().expect("64"),
        };
        if record.to_json_line().as_bytes() != line {
            return Err(Error::Audit("record is not in canonical form".into()));
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakReason {
    Hash,
    Signature,
    Sequence,
    Malformed,
}

impl fmt::Display for BreakReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BreakReason::Hash => "hash",
            BreakReason::Signature => "signature",
            BreakReason::Sequence => "sequence",
            BreakReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Ok,
    Broken { first_bad_seq: u64, reason: BreakReason },
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Ok => f.write_str("ok"),
            ChainStatus::Broken { first_bad_seq, reason } => write!(f, "broken at seq {first_bad_seq}: {reason}"),
        }
    }
}

/// Reports the first record, by position, whose sequence number, chain link,
/// hash or signature is wrong.
pub fn verify_chain(records: &[AuditRecord], key: &VerifyingKey) -> ChainStatus {
    let mut prev = GENESIS_HASH;
    for (i, rec) in records.iter().enumerate() {
        let i = i as u64;
        let broken = |reason| ChainStatus::Broken { first_bad_seq: i, reason };
        if rec.seq != i {
            return broken(BreakReason::Sequence);
        }
        if rec.prev_hash != prev || record_hash(&rec.prev_hash, rec.seq, &rec.payload) != rec.hash {
            return broken(BreakReason::Hash);
        }
        if key.verify_strict(&rec.hash, &Signature::from_bytes(&rec.signature)).is_err() {
            return broken(BreakReason::Signature);
        }
        prev = rec.hash;
    }
    ChainStatus::Ok
}

/// Parses an audit file. Every record line must end in `\n`.
pub fn read_audit_file(path: impl AsRef<Path>) -> Result<Vec<AuditRecord>> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let body = line
            .strip_suffix(b"\n")
            .ok_or_else(|| Error::Audit(format!("record {i} is not newline-terminated")))?;
        out.push(AuditRecord::from_json_line(body).map_err(|e| Error::Audit(format!("record {i}: {e}")))?);
    }
    Ok(out)
}

/// Verifies an audit file. A line that cannot be parsed breaks the chain at
/// its position with [`BreakReason::Malformed`]; only I/O failures are errors.
pub fn verify_file(path: impl AsRef<Path>, key: &VerifyingKey) -> Result<ChainStatus> {
    let bytes = std::fs::read(path)?;
    Ok(verify_bytes(&bytes, key))
}

pub fn verify_bytes(bytes: &[u8], key: &VerifyingKey) -> ChainStatus {
    let mut records = Vec::new();
    for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let parsed = line.strip_suffix(b"\n").map(AuditRecord::from_json_line);
        match parsed {
            Some(Ok(r)) => records.push(r),
            _ => {
                return match verify_chain(&records, key) {
                    ChainStatus::Ok => ChainStatus::Broken { first_bad_seq: i as u64, reason: BreakReason::Malformed },
                    broken => broken,
                }
            }
        }
    }
    verify_chain(&records, key)
}

/// Deterministic per-node signing key derived from the master seed.
pub fn signing_key_for(master_seed: u64, node: &str) -> SigningKey {
    SigningKey::from_bytes(&derive_bytes(master_seed, &format!("audit-key/{node}")))
}

pub fn write_public_key(path: impl AsRef<Path>, key: &VerifyingKey) -> Result<()> {
    std::fs::write(path, format!("{}\n", hex::encode(key.as_bytes())))?;
    Ok(())
}

/// Reads a hex-encoded 32-byte Ed25519 public key.
pub fn read_public_key(path: impl AsRef<Path>) -> Result<VerifyingKey> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let bytes = hex::decode(text.trim()).map_err(|e| Error::Audit(format!("{}: {e}", path.display())))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| Error::Audit(format!("{}: public key must be 32 bytes", path.display())))?;
    VerifyingKey::from_bytes(&arr).map_err(|e| Error::Audit(format!("{}: {e}", path.display())))
}

/// Single-writer, append-only signed log. Records are written to the sink
/// before they become visible; a failed write leaves the log unchanged.
pub struct AuditLog {
    owner: String,
    key: SigningKey,
    records: Vec<AuditRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("owner", &self.owner)
            .field("records", &self.records.len())
            .field("persistent", &self.sink.is_some())
            .finish()
    }
}

impl AuditLog {
    pub fn in_memory(owner: impl Into<String>, key: SigningKey) -> Self {
        Self { owner: owner.into(), key, records: Vec::new(), sink: None }
    }

    pub fn with_sink(owner: impl Into<String>, key: SigningKey, sink: Box<dyn Write + Send>) -> Self {
        Self { owner: owner.into(), key, records: Vec::new(), sink: Some(sink) }
    }

    /// Creates a new log file; refuses to touch an existing one.
    pub fn create(owner: impl Into<String>, key: SigningKey, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::Audit(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self::with_sink(owner, key, Box::new(BufWriter::new(file))))
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append(&mut self, event: &AuditEvent) -> Result<&AuditRecord> {
        let seq = self.records.len() as u64;
        let prev_hash = self.records.last().map_or(GENESIS_HASH, |r| r.hash);
        let payload = event.canonical_bytes();
        let hash = record_hash(&prev_hash, seq, &payload);
        let signature = self.key.sign(&hash).to_bytes();
        let record = AuditRecord { seq, prev_hash, payload, hash, signature };
        if let Some(sink) = self.sink.as_mut() {
            let mut line = record.to_json_line().into_bytes();
            line.push(b'\n');
            sink.write_all(&line)
                .and_then(|_| sink.flush())
                .map_err(|e| Error::Audit(format!("append to {} log failed: {e}", self.owner)))?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }
}
