//! Dealer, per-inference preprocessing bundles, online sessions and
//! benchmark reports.
//!
//! Bundle layout, all integers little-endian:
//!
//! ```text
//! header   magic "TBPP" | version u16 | session id [16] | model hash [32]
//!          | role u8 (0 client, 1 server) | record count u32
//! linear   0x01 | layer u32 | in_len u32 | out_len u32
//!          | client: r_c[in_len] u[out_len]   server: r_s[out_len]
//! act      0x02 | layer u32 | k u8 | count u32 | first table id u64
//!          | count x (mask share, 2^k entries)
//! ```
//!
//! Field elements are 8 bytes each.

use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{elements_to_le_bytes, FieldElement, FieldParams, ELEMENT_BYTES};
use crate::linear::{
    check_linear_preproc, client_linear_step, dealer_make_linear_preproc, server_linear_step, ClientLinearPreproc,
    LinearError, ServerLinearPreproc,
};
use crate::lookup::{dealer_make_tables, domain, lookup_layer, LookupError, PlainTable, TabulaTable, TruncationMode};
use crate::model::{CompiledModel, PlanStep, QuantizedLogits, SchemaError};
use crate::sharing::{reconstruct, AdditiveShare, PartyRole};
use crate::transport::{
    decode_elements, Channel, Hello, Tag, TransportError, HEADER_BYTES, HELLO_BYTES, PROTOCOL_VERSION,
};

pub const BUNDLE_MAGIC: [u8; 4] = *b"TBPP";
pub const BUNDLE_VERSION: u16 = 1;
pub const BUNDLE_HEADER_BYTES: u64 = 4 + 2 + 16 + 32 + 1 + 4;
const LINEAR_RECORD: u8 = 0x01;
const ACT_RECORD: u8 = 0x02;
const LINEAR_RECORD_HEADER: u64 = 1 + 4 + 4 + 4;
const ACT_RECORD_HEADER: u64 = 1 + 4 + 1 + 4 + 8;

const FLAG_EXACT_TRUNCATION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a preprocessing bundle")]
    BadMagic,
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u16),
    #[error("bundle ends early")]
    Truncated,
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("bundle belongs to the {found}, expected the {expected}")]
    WrongRole { expected: PartyRole, found: PartyRole },
    #[error("bundle was made for a different model")]
    ModelMismatch,
    #[error("bundle does not fit the model: {0}")]
    LayoutMismatch(String),
    #[error("bundle {0} was already used")]
    AlreadyConsumed(String),
    #[error("dealer self-check failed: {0}")]
    SelfCheck(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("peer speaks protocol version {theirs}, we speak {ours}")]
    VersionMismatch { ours: u16, theirs: u16 },
    #[error("peer holds a bundle from a different session")]
    SessionMismatch,
    #[error("peer runs a different model")]
    ModelHashMismatch,
    #[error("peer uses a different truncation mode")]
    ModeMismatch,
    #[error("peer sent {got} output shares, expected {expected}")]
    OutputLength { expected: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Linear(#[from] LinearError),
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("protocol aborted: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Io(#[from] io::Error),
}

impl RuntimeError {
    /// Process exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Schema(_) => 2,
            RuntimeError::Protocol(_) => 3,
            RuntimeError::Bundle(_) => 4,
            RuntimeError::Io(_) => 1,
        }
    }
}

impl From<TransportError> for RuntimeError {
    fn from(e: TransportError) -> Self {
        RuntimeError::Protocol(e.into())
    }
}

impl From<LookupError> for RuntimeError {
    fn from(e: LookupError) -> Self {
        RuntimeError::Protocol(e.into())
    }
}

impl From<LinearError> for RuntimeError {
    fn from(e: LinearError) -> Self {
        RuntimeError::Protocol(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    ClientLinear(ClientLinearPreproc),
    ServerLinear(ServerLinearPreproc),
    Activation { layer_index: u32, tables: Vec<TabulaTable> },
}

impl Record {
    fn layer_index(&self) -> u32 {
        match self {
            Record::ClientLinear(p) => p.layer_id,
            Record::ServerLinear(p) => p.layer_id,
            Record::Activation { layer_index, .. } => *layer_index,
        }
    }

    fn is_consumed(&self) -> bool {
        match self {
            Record::ClientLinear(p) => p.is_consumed(),
            Record::ServerLinear(p) => p.is_consumed(),
            Record::Activation { tables, .. } => tables.iter().any(TabulaTable::is_consumed),
        }
    }
}

/// One party's preprocessing material for exactly one inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub session_id: [u8; 16],
    pub model_hash: [u8; 32],
    pub role: PartyRole,
    pub records: Vec<Record>,
}

impl Bundle {
    pub fn is_consumed(&self) -> bool {
        self.records.iter().any(Record::is_consumed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&self.model_hash);
        out.push(self.role.index());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            match r {
                Record::ClientLinear(p) => {
                    out.push(LINEAR_RECORD);
                    out.extend_from_slice(&p.layer_id.to_le_bytes());
                    out.extend_from_slice(&(p.r_c.len() as u32).to_le_bytes());
                    out.extend_from_slice(&(p.u.len() as u32).to_le_bytes());
                    out.extend_from_slice(&elements_to_le_bytes(&p.r_c));
                    out.extend_from_slice(&elements_to_le_bytes(&p.u));
                }
                Record::ServerLinear(p) => {
                    out.push(LINEAR_RECORD);
                    out.extend_from_slice(&p.layer_id.to_le_bytes());
                    // the server does not hold an input-sized mask
                    out.extend_from_slice(&0u32.to_le_bytes());
                    out.extend_from_slice(&(p.r_s.len() as u32).to_le_bytes());
                    out.extend_from_slice(&elements_to_le_bytes(&p.r_s));
                }
                Record::Activation { layer_index, tables } => {
                    out.push(ACT_RECORD);
                    out.extend_from_slice(&layer_index.to_le_bytes());
                    out.push(tables.first().map_or(0, |t| t.k as u8));
                    out.extend_from_slice(&(tables.len() as u32).to_le_bytes());
                    out.extend_from_slice(&tables.first().map_or(0, |t| t.table_id).to_le_bytes());
                    for t in tables {
                        out.extend_from_slice(&t.mask_share.value.to_le_bytes());
                        out.extend_from_slice(&elements_to_le_bytes(&t.entries));
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], field: &FieldParams) -> Result<Self, BundleError> {
        let mut r = Reader { b: bytes, pos: 0, field };
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(BundleError::BadMagic);
        }
        let version = r.u16()?;
        if version != BUNDLE_VERSION {
            return Err(BundleError::UnsupportedVersion(version));
        }
        let session_id: [u8; 16] = r.take(16)?.try_into().expect("16 bytes");
        let model_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let role = r.u8()?;
        let role = PartyRole::from_index(role).ok_or_else(|| BundleError::Malformed(format!("role tag {role}")))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            match r.u8()? {
                LINEAR_RECORD => {
                    let layer = r.u32()?;
                    let in_len = r.u32()? as usize;
                    let out_len = r.u32()? as usize;
                    records.push(match role {
                        PartyRole::Client => {
                            let r_c = r.elements(in_len)?;
                            let u = r.elements(out_len)?;
                            Record::ClientLinear(ClientLinearPreproc::new(layer, r_c, u))
                        }
                        PartyRole::Server => {
                            if in_len != 0 {
                                return Err(BundleError::Malformed("server linear record with a client mask".into()));
                            }
                            Record::ServerLinear(ServerLinearPreproc::new(layer, r.elements(out_len)?))
                        }
                    });
                }
                ACT_RECORD => {
                    let layer_index = r.u32()?;
                    let k = r.u8()? as u32;
                    let n = r.u32()? as usize;
                    let first_id = r.u64()?;
                    if n > 0 && !(1..=crate::lookup::MAX_K).contains(&k) {
                        return Err(BundleError::Malformed(format!("table precision {k}")));
                    }
                    let mut tables = Vec::with_capacity(n.min(1 << 20));
                    for j in 0..n {
                        let mask = r.elements(1)?[0];
                        let entries = r.elements(1 << k)?;
                        tables.push(TabulaTable::new(first_id + j as u64, k, AdditiveShare::new(role, mask), entries));
                    }
                    records.push(Record::Activation { layer_index, tables });
                }
                other => return Err(BundleError::Malformed(format!("record tag 0x{other:02x}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(BundleError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bundle { session_id, model_hash, role, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BundleError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>, field: &FieldParams) -> Result<Self, BundleError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Bundle::from_bytes(&bytes, field)
    }

    /// Checks that the bundle belongs to `role`, to this model, and carries
    /// one fresh record of the right shape per protocol step.
    pub fn check_against(&self, compiled: &CompiledModel, role: PartyRole) -> Result<(), BundleError> {
        if self.role != role {
            return Err(BundleError::WrongRole { expected: role, found: self.role });
        }
        if self.model_hash != compiled.graph.architecture_hash() {
            return Err(BundleError::ModelMismatch);
        }
        if self.is_consumed() {
            return Err(BundleError::AlreadyConsumed("in-memory bundle".into()));
        }
        let steps: Vec<_> = compiled.plan.iter().filter(|l| !matches!(l.step, PlanStep::Flatten)).collect();
        if steps.len() != self.records.len() {
            return Err(BundleError::LayoutMismatch(format!(
                "{} records for {} protocol steps",
                self.records.len(),
                steps.len()
            )));
        }
        for (layer, rec) in steps.iter().zip(&self.records) {
            let bad = |what: &str| BundleError::LayoutMismatch(format!("layer {}: {what}", layer.index));
            if rec.layer_index() as usize != layer.index {
                return Err(bad("record for another layer"));
            }
            match (&layer.step, rec) {
                (PlanStep::Linear(op), Record::ClientLinear(p)) => {
                    if p.r_c.len() != op.in_len() || p.u.len() != op.out_len() {
                        return Err(bad("linear mask sizes"));
                    }
                }
                (PlanStep::Linear(op), Record::ServerLinear(p)) => {
                    if p.r_s.len() != op.out_len() {
                        return Err(bad("linear mask sizes"));
                    }
                }
                (PlanStep::Activation(q), Record::Activation { tables, .. }) => {
                    if tables.len() != layer.input.len() {
                        return Err(bad("table count"));
                    }
                    if tables.iter().any(|t| t.k != q.k || t.entries.len() != q.table_len()) {
                        return Err(bad("table precision"));
                    }
                }
                _ => return Err(bad("record kind")),
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    field: &'a FieldParams,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(n).ok_or(BundleError::Truncated)?;
        let s = self.b.get(self.pos..end).ok_or(BundleError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn elements(&mut self, n: usize) -> Result<Vec<FieldElement>, BundleError> {
        let bytes = self.take(n.checked_mul(ELEMENT_BYTES).ok_or(BundleError::Truncated)?)?;
        let p = self.field.modulus();
        bytes
            .chunks_exact(ELEMENT_BYTES)
            .map(|c| {
                let v = u64::from_le_bytes(c.try_into().expect("8 bytes"));
                if v >= p {
                    Err(BundleError::Malformed(format!("residue {v} not below the modulus")))
                } else {
                    Ok(self.field.element_unchecked(v))
                }
            })
            .collect()
    }
}

/// Size of a party's bundle file, from the model alone.
pub fn predicted_bundle_bytes(compiled: &CompiledModel, role: PartyRole) -> u64 {
    let e = ELEMENT_BYTES as u64;
    let mut total = BUNDLE_HEADER_BYTES;
    for layer in &compiled.plan {
        match &layer.step {
            PlanStep::Flatten => {}
            PlanStep::Linear(op) => {
                total += LINEAR_RECORD_HEADER
                    + match role {
                        PartyRole::Client => e * (op.in_len() + op.out_len()) as u64,
                        PartyRole::Server => e * op.out_len() as u64,
                    };
            }
            PlanStep::Activation(q) => {
                let n = layer.input.len() as u64;
                total += ACT_RECORD_HEADER + n * e + (1u64 << q.k) * e * n;
            }
        }
    }
    total
}

/// Both halves of one inference's preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DealerOutput {
    pub client: Bundle,
    pub server: Bundle,
}

/// Generates fresh correlated randomness for one inference. With a seed the
/// output is a pure function of the seed and the model.
pub fn run_dealer(compiled: &CompiledModel, seed: Option<u64>) -> DealerOutput {
    let mut master = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let field = *compiled.field();
    let session_id: [u8; 16] = master.gen();
    let model_hash = compiled.graph.architecture_hash();
    let mut client = Vec::new();
    let mut server = Vec::new();
    let mut next_table = 0u64;
    for layer in &compiled.plan {
        let layer_seed: [u8; 32] = master.gen();
        match &layer.step {
            PlanStep::Flatten => {}
            PlanStep::Linear(op) => {
                let mut rng = ChaCha20Rng::from_seed(layer_seed);
                let (c, s) = dealer_make_linear_preproc(op, layer.index as u32, &field, &mut rng);
                client.push(Record::ClientLinear(c));
                server.push(Record::ServerLinear(s));
            }
            PlanStep::Activation(q) => {
                let plain = PlainTable::new(*q, &compiled.codec).expect("validated spec");
                let n = layer.input.len();
                let (c, s) = dealer_make_tables(&plain, &field, n, next_table, layer_seed);
                next_table += n as u64;
                client.push(Record::Activation { layer_index: layer.index as u32, tables: c });
                server.push(Record::Activation { layer_index: layer.index as u32, tables: s });
            }
        }
    }
    DealerOutput {
        client: Bundle { session_id, model_hash, role: PartyRole::Client, records: client },
        server: Bundle { session_id, model_hash, role: PartyRole::Server, records: server },
    }
}

/// Recombines both halves and checks every record against the model.
pub fn dealer_self_check(compiled: &CompiledModel, out: &DealerOutput) -> Result<(), BundleError> {
    let fail = |m: String| Err(BundleError::SelfCheck(m));
    if out.client.session_id != out.server.session_id {
        return fail("session ids differ".into());
    }
    out.client.check_against(compiled, PartyRole::Client).map_err(|e| BundleError::SelfCheck(e.to_string()))?;
    out.server.check_against(compiled, PartyRole::Server).map_err(|e| BundleError::SelfCheck(e.to_string()))?;
    let field = compiled.field();
    let steps = compiled.plan.iter().filter(|l| !matches!(l.step, PlanStep::Flatten));
    for ((layer, c), s) in steps.zip(&out.client.records).zip(&out.server.records) {
        match (&layer.step, c, s) {
            (PlanStep::Linear(op), Record::ClientLinear(c), Record::ServerLinear(s)) => {
                if !check_linear_preproc(op, c, s, field) {
                    return fail(format!("layer {}: u - r_s != W r_c", layer.index));
                }
            }
            (PlanStep::Activation(q), Record::Activation { tables: ct, .. }, Record::Activation { tables: st, .. }) => {
                let plain = PlainTable::new(*q, &compiled.codec).expect("validated spec");
                let half = 1u64 << (q.k - 1);
                let mask = (1u64 << q.k) - 1;
                for (a, b) in ct.iter().zip(st) {
                    if a.table_id != b.table_id {
                        return fail(format!("layer {}: table ids differ", layer.index));
                    }
                    let offset = field.add(a.mask_share.value, b.mask_share.value).value();
                    if offset < half || offset > field.modulus() - half {
                        return fail(format!("table {}: offset wraps the field", a.table_id));
                    }
                    for v in domain(q.k) {
                        let slot = ((offset as i64 + v) as u64 & mask) as usize;
                        if field.add(a.entries[slot], b.entries[slot]) != plain.get(v) {
                            return fail(format!("table {}: slot for {v} holds the wrong value", a.table_id));
                        }
                    }
                }
            }
            _ => return fail(format!("layer {}: record kinds differ", layer.index)),
        }
    }
    Ok(())
}

pub const CLIENT_BUNDLE_FILE: &str = "client.tbpp";
pub const SERVER_BUNDLE_FILE: &str = "server.tbpp";

/// Runs the self-check and only then writes `client.tbpp` and `server.tbpp`
/// into `dir`.
pub fn write_bundles(
    compiled: &CompiledModel,
    out: &DealerOutput,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), BundleError> {
    dealer_self_check(compiled, out)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let c = dir.join(CLIENT_BUNDLE_FILE);
    let s = dir.join(SERVER_BUNDLE_FILE);
    out.client.write(&c)?;
    out.server.write(&s)?;
    Ok((c, s))
}

/// Directory for trial `i` under a multi-trial dealer run.
pub fn trial_dir(base: &Path, i: usize) -> PathBuf {
    base.join(format!("trial-{i:04}"))
}

/// Seed for trial `i` derived from a master seed.
pub fn trial_seed(master: u64, i: usize) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(i as u64);
    rng.gen()
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".consumed");
    PathBuf::from(s)
}

/// Reads a bundle from disk and marks it used by creating
/// `<path>.consumed`. A bundle that was already claimed is refused.
pub fn claim_bundle(path: impl AsRef<Path>, field: &FieldParams) -> Result<Bundle, BundleError> {
    let path = path.as_ref();
    let bundle = Bundle::read(path, field)?;
    let marker = sidecar(path);
    match OpenOptions::new().write(true).create_new(true).open(&marker) {
        Ok(mut f) => {
            let _ = writeln!(f, "consumed");
            Ok(bundle)
        }
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
            Err(BundleError::AlreadyConsumed(path.display().to_string()))
        }
        Err(e) => Err(io_err(&marker)(e)),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub truncation: TruncationMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub input_elements: usize,
    pub output_elements: usize,
    /// Sent plus received by this party.
    pub payload_bytes: u64,
    pub frame_bytes: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBreakdown {
    pub handshake: u64,
    pub linear: u64,
    pub activation: u64,
    pub output: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBreakdown {
    pub linear: u64,
    pub activation: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTimes {
    pub handshake_ms: f64,
    pub online_ms: f64,
    pub output_ms: f64,
    pub total_ms: f64,
}

/// What one party observed during one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub role: PartyRole,
    pub model: String,
    pub session_id: String,
    pub truncation: TruncationMode,
    pub layers: Vec<LayerReport>,
    pub payload: PayloadBreakdown,
    pub frame_bytes_total: u64,
    pub rounds: RoundBreakdown,
    pub activation_count: u64,
    pub table_storage_bytes_per_party: u64,
    pub wall: SessionTimes,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub argmax: Option<usize>,
}

impl InferenceReport {
    /// Same traffic shape as `other`, ignoring timings and outputs.
    pub fn same_counts(&self, other: &InferenceReport) -> bool {
        self.layers == other.layers
            && self.payload == other.payload
            && self.frame_bytes_total == other.frame_bytes_total
            && self.rounds == other.rounds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub logits: QuantizedLogits,
    pub decoded: Vec<f64>,
    pub argmax: usize,
    pub report: InferenceReport,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs one party's side of an inference. The client passes its input; the
/// server passes `None`. Returns this party's output shares and report.
fn run_session(
    compiled: &CompiledModel,
    bundle: &mut Bundle,
    role: PartyRole,
    input: Option<&[f32]>,
    channel: &mut Channel,
    opts: SessionOptions,
) -> Result<(Vec<AdditiveShare>, InferenceReport), RuntimeError> {
    bundle.check_against(compiled, role)?;
    let field = *compiled.field();
    let mut x: Vec<AdditiveShare> = match (role, input) {
        (PartyRole::Client, Some(input)) => {
            if input.len() != compiled.graph.input_shape.len() {
                return Err(SchemaError::Top {
                    field: "input".into(),
                    message: format!("expected {} values, got {}", compiled.graph.input_shape.len(), input.len()),
                }
                .into());
            }
            let enc = compiled
                .encode_input(input)
                .map_err(|e| SchemaError::Top { field: "input".into(), message: e.to_string() })?;
            enc.into_iter().map(|v| AdditiveShare::new(PartyRole::Client, v)).collect()
        }
        _ => vec![AdditiveShare::new(PartyRole::Server, FieldElement::ZERO); compiled.graph.input_shape.len()],
    };

    let start = Instant::now();
    let exact = opts.truncation == TruncationMode::ExactForTesting;
    let hello = Hello {
        version: PROTOCOL_VERSION,
        flags: if exact { FLAG_EXACT_TRUNCATION } else { 0 },
        session_id: bundle.session_id,
        model_hash: bundle.model_hash,
    };
    let peer = channel.handshake(hello)?;
    if peer.version != hello.version {
        return Err(ProtocolError::VersionMismatch { ours: hello.version, theirs: peer.version }.into());
    }
    if peer.session_id != hello.session_id {
        return Err(ProtocolError::SessionMismatch.into());
    }
    if peer.model_hash != hello.model_hash {
        return Err(ProtocolError::ModelHashMismatch.into());
    }
    if peer.flags != hello.flags {
        return Err(ProtocolError::ModeMismatch.into());
    }
    let after_hello = channel.metrics_snapshot();
    let handshake_done = Instant::now();

    let mut layers = Vec::with_capacity(compiled.plan.len());
    let mut payload = PayloadBreakdown { handshake: after_hello.payload_total(), ..Default::default() };
    let mut rounds = RoundBreakdown::default();
    let mut records = bundle.records.iter_mut();
    for layer in &compiled.plan {
        let before = channel.metrics_snapshot();
        match &layer.step {
            PlanStep::Flatten => {}
            PlanStep::Linear(op) => {
                x = match (role, records.next()) {
                    (PartyRole::Client, Some(Record::ClientLinear(p))) => client_linear_step(&x, p, &field, channel)?,
                    (PartyRole::Server, Some(Record::ServerLinear(p))) => {
                        server_linear_step(&x, op, p, &field, channel)?
                    }
                    _ => unreachable!("layout checked"),
                };
            }
            PlanStep::Activation(q) => {
                let Some(Record::Activation { tables, .. }) = records.next() else { unreachable!("layout checked") };
                x = lookup_layer(&x, tables, q, opts.truncation, &field, channel)?;
            }
        }
        let d = channel.metrics_snapshot().since(&before);
        match layer.step {
            PlanStep::Linear(_) => {
                payload.linear += d.payload_total();
                rounds.linear += d.rounds;
            }
            PlanStep::Activation(_) => {
                payload.activation += d.payload_total();
                rounds.activation += d.rounds;
            }
            PlanStep::Flatten => {}
        }
        layers.push(LayerReport {
            index: layer.index,
            kind: layer.kind_name().into(),
            input_elements: layer.input.len(),
            output_elements: layer.output.len(),
            payload_bytes: d.payload_total(),
            frame_bytes: d.frame_total(),
            rounds: d.rounds,
        });
    }
    let online_done = Instant::now();

    let before = channel.metrics_snapshot();
    let out = match role {
        PartyRole::Server => {
            let mine: Vec<_> = x.iter().map(|s| s.value).collect();
            channel.send_frame(Tag::OutputShare, &elements_to_le_bytes(&mine))?;
            channel.send_frame(Tag::Bye, &[])?;
            x
        }
        PartyRole::Client => {
            let theirs = decode_elements(&channel.recv_expect(Tag::OutputShare)?, &field)?;
            channel.recv_expect(Tag::Bye)?;
            if theirs.len() != x.len() {
                return Err(ProtocolError::OutputLength { expected: x.len(), got: theirs.len() }.into());
            }
            x.iter()
                .zip(theirs)
                .map(|(s, t)| {
                    let v = reconstruct(*s, AdditiveShare::new(PartyRole::Server, t), &field).expect("distinct owners");
                    AdditiveShare::new(PartyRole::Client, v)
                })
                .collect()
        }
    };
    let end = Instant::now();
    let metrics = channel.metrics_snapshot();
    payload.output = metrics.since(&before).payload_total();
    payload.total = payload.handshake + payload.linear + payload.activation + payload.output;
    debug_assert_eq!(payload.total, metrics.payload_total());
    rounds.total = rounds.linear + rounds.activation;

    let report = InferenceReport {
        role,
        model: compiled.graph.name.clone(),
        session_id: hex(&bundle.session_id),
        truncation: opts.truncation,
        layers,
        payload,
        frame_bytes_total: metrics.frame_total(),
        rounds,
        activation_count: compiled.activation_count(),
        table_storage_bytes_per_party: compiled.table_storage_bytes(),
        wall: SessionTimes {
            handshake_ms: ms(handshake_done - start),
            online_ms: ms(online_done - handshake_done),
            output_ms: ms(end - online_done),
            total_ms: ms(end - start),
        },
        logits: None,
        argmax: None,
    };
    Ok((out, report))
}

/// Client side of one inference. Only a complete run yields logits.
pub fn run_client(
    compiled: &CompiledModel,
    bundle: &mut Bundle,
    input: &[f32],
    channel: &mut Channel,
    opts: SessionOptions,
) -> Result<ClientResult, RuntimeError> {
    let (shares, mut report) = run_session(compiled, bundle, PartyRole::Client, Some(input), channel, opts)?;
    let logits =
        QuantizedLogits { logits: shares.iter().map(|s| s.value).collect(), scale_bits: compiled.output_scale_bits() };
    let decoded = logits.decode(&compiled.codec);
    let argmax = logits.argmax(compiled.field());
    report.logits = Some(decoded.clone());
    report.argmax = Some(argmax);
    Ok(ClientResult { logits, decoded, argmax, report })
}

/// Server side of one inference.
pub fn run_server(
    compiled: &CompiledModel,
    bundle: &mut Bundle,
    channel: &mut Channel,
    opts: SessionOptions,
) -> Result<InferenceReport, RuntimeError> {
    run_session(compiled, bundle, PartyRole::Server, None, channel, opts).map(|(_, r)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport `{other}` (loopback or tcp)")),
        }
    }
}

/// Runs client and server against each other in one process.
pub fn run_pair(
    compiled: &CompiledModel,
    out: &mut DealerOutput,
    input: &[f32],
    transport: TransportKind,
    opts: SessionOptions,
) -> Result<(ClientResult, InferenceReport), RuntimeError> {
    let DealerOutput { client, server } = out;
    let (mut cch, mut sch) = match transport {
        TransportKind::Loopback => Channel::loopback_pair(),
        TransportKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let c = Channel::connect(addr)?;
            let (stream, _) = listener.accept()?;
            (c, Channel::tcp(stream)?)
        }
    };
    std::thread::scope(|scope| {
        let srv = scope.spawn(move || {
            let r = run_server(compiled, server, &mut sch, opts);
            drop(sch);
            r
        });
        let c = run_client(compiled, client, input, &mut cch, opts);
        drop(cch);
        let s = srv.join().expect("server thread");
        Ok((c?, s?))
    })
}

/// Connects, retrying for up to `patience` while the server starts.
pub fn connect_with_retry(addr: impl ToSocketAddrs + Copy, patience: Duration) -> io::Result<Channel> {
    let deadline = Instant::now() + patience;
    loop {
        match Channel::connect(addr) {
            Ok(c) => return Ok(c),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Figures quoted for comparison; not measured here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedFigures {
    pub bytes_per_activation: u64,
    pub lenet_activation_count: u64,
    pub lenet_total_bytes: u64,
    /// Garbled-circuit ReLU storage for 32-, 16- and 8-bit inputs.
    pub gc_relu_storage_bytes: [u64; 3],
    /// Garbled-circuit ReLU online traffic for 32-, 16- and 8-bit inputs.
    pub gc_relu_online_bytes: [u64; 3],
}

impl Default for PublishedFigures {
    fn default() -> Self {
        PublishedFigures {
            bytes_per_activation: 16,
            lenet_activation_count: 58_000,
            lenet_total_bytes: 3_500_000,
            gc_relu_storage_bytes: [17_000, 8_500, 4_250],
            gc_relu_online_bytes: [2_170, 1_100, 562],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTimes {
    pub dealer_mean_ms: f64,
    pub online_mean_ms: f64,
    pub online_min_ms: f64,
    pub online_max_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleSizes {
    pub client: u64,
    pub server: u64,
}

/// Aggregate over `trials` inferences with freshly generated bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub transport: TransportKind,
    pub trials: usize,
    pub truncation: TruncationMode,
    pub activation_count: u64,
    pub table_storage_bytes_per_party: u64,
    pub bundle_bytes: BundleSizes,
    pub layers: Vec<LayerReport>,
    pub payload: PayloadBreakdown,
    pub frame_bytes_total: u64,
    pub rounds: RoundBreakdown,
    pub counts_identical_across_trials: bool,
    pub wall: BenchTimes,
    pub published: PublishedFigures,
}

/// Deterministic input in `[0, 1)` for benchmarking.
pub fn bench_input(len: usize) -> Vec<f32> {
    (0..len).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()
}

pub fn bench(
    compiled: &CompiledModel,
    trials: usize,
    transport: TransportKind,
    seed: Option<u64>,
) -> Result<BenchReport, RuntimeError> {
    assert!(trials > 0, "at least one trial");
    let opts = SessionOptions::default();
    let input = bench_input(compiled.graph.input_shape.len());

    let dealer_start = Instant::now();
    let mut bundles: Vec<DealerOutput> =
        (0..trials).map(|i| run_dealer(compiled, seed.map(|s| trial_seed(s, i)))).collect();
    let dealer_ms = ms(dealer_start.elapsed()) / trials as f64;
    let bundle_bytes = BundleSizes {
        client: predicted_bundle_bytes(compiled, PartyRole::Client),
        server: predicted_bundle_bytes(compiled, PartyRole::Server),
    };

    let mut reports = Vec::with_capacity(trials);
    for out in &mut bundles {
        let (c, s) = run_pair(compiled, out, &input, transport, opts)?;
        if !c.report.same_counts(&s) {
            return Err(io::Error::other("client and server disagree on traffic counts").into());
        }
        reports.push(c.report);
    }
    let first = &reports[0];
    let online: Vec<f64> = reports.iter().map(|r| r.wall.total_ms).collect();
    Ok(BenchReport {
        model: compiled.graph.name.clone(),
        transport,
        trials,
        truncation: opts.truncation,
        activation_count: compiled.activation_count(),
        table_storage_bytes_per_party: compiled.table_storage_bytes(),
        bundle_bytes,
        layers: first.layers.clone(),
        payload: first.payload,
        frame_bytes_total: first.frame_bytes_total,
        rounds: first.rounds,
        counts_identical_across_trials: reports.iter().all(|r| r.same_counts(first)),
        wall: BenchTimes {
            dealer_mean_ms: dealer_ms,
            online_mean_ms: online.iter().sum::<f64>() / trials as f64,
            online_min_ms: online.iter().copied().fold(f64::INFINITY, f64::min),
            online_max_ms: online.iter().copied().fold(0.0, f64::max),
        },
        published: PublishedFigures::default(),
    })
}

/// Frame bytes of one inference from one party's view (sent plus
/// received), handshake and output delivery included.
pub fn predicted_frame_bytes(compiled: &CompiledModel, opts: SessionOptions) -> u64 {
    let h = HEADER_BYTES as u64;
    let act_frames_per_layer = match opts.truncation {
        TruncationMode::Probabilistic => 2,
        TruncationMode::ExactForTesting => 4,
    };
    let act_extra = match opts.truncation {
        TruncationMode::Probabilistic => 0,
        TruncationMode::ExactForTesting => 16 * compiled.activation_count(),
    };
    let frames = 2 + compiled.linear_rounds() + act_frames_per_layer * compiled.activation_rounds() + 2;
    2 * HELLO_BYTES as u64 + compiled.online_payload_bytes() + act_extra + frames * h
}
