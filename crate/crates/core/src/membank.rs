//! Durable memory bank of committed tasks.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "ROSETTA1" (last byte is the format version)
//! hdr_len    u32
//! header     hdr_len bytes: architecture fingerprint, record count
//! hdr_crc    u32      CRC-32 of header
//! repeated record_count times:
//!   rec_len  u64
//!   payload  rec_len bytes
//!   rec_crc  u32      CRC-32 of payload
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a roundtrip is bit-exact and
//! re-encoding an unchanged bank reproduces the same bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::correlation::Prototype;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gatednet::{Architecture, BinaryGates, Linear};

pub const BANK_MAGIC: &[u8; 8] = b"ROSETTA1";
pub const NETWORK_MAGIC: &[u8; 8] = b"ROSNET01";
const MAGIC_STEM_LEN: usize = 7;

/// Training settings a record was produced with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigFingerprint {
    pub seed: u64,
    pub lambda_sparsity: f64,
    pub lambda_kd: f64,
    pub lambda_diversity: f64,
    pub eta: f64,
}

/// Everything kept about a finished task. Immutable once committed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_id: u32,
    pub class_ids: Vec<u32>,
    pub task_embedding: Vec<f64>,
    pub gates: BinaryGates,
    pub head: Linear,
    pub prototypes: Vec<Prototype>,
    /// Intra-task correlation `R(p^t, p^t)`.
    pub baseline: f64,
    /// Controller weight against each earlier task, in commit order.
    pub phis: Vec<f64>,
    /// This task's class prototypes under each earlier task's gates, in
    /// commit order; the distances behind `phis`.
    pub cross_prototypes: Vec<Vec<Prototype>>,
    pub probe_inputs: Tensor,
    pub probe_logits: Tensor,
    pub fingerprint: ConfigFingerprint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSummary {
    pub task_id: u32,
    pub num_classes: usize,
    pub active_per_layer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub arch: Architecture,
    records: Vec<TaskRecord>,
}

impl MemoryBank {
    pub fn new(arch: Architecture) -> Self {
        MemoryBank {
            arch,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, task_id: u32) -> Result<&TaskRecord> {
        self.records
            .iter()
            .find(|r| r.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn contains(&self, task_id: u32) -> bool {
        self.records.iter().any(|r| r.task_id == task_id)
    }

    /// Appends a record after checking it against the bank's architecture.
    pub fn store(&mut self, record: TaskRecord) -> Result<()> {
        if self.contains(record.task_id) {
            return Err(Error::DuplicateTask(record.task_id));
        }
        self.check_shapes(&record)?;
        self.records.push(record);
        Ok(())
    }

    fn check_shapes(&self, r: &TaskRecord) -> Result<()> {
        let mismatch = |what: String| Error::ArchitectureMismatch {
            expected: self.arch.to_string(),
            found: what,
        };
        if !r.gates.matches(&self.arch) {
            let widths: Vec<usize> = r.gates.layers.iter().map(Vec::len).collect();
            return Err(mismatch(format!("gate widths {widths:?}")));
        }
        if r.head.fan_in() != self.arch.feature_dim() || r.head.fan_out() != r.class_ids.len() {
            return Err(mismatch(format!(
                "head {}x{} for {} classes",
                r.head.fan_in(),
                r.head.fan_out(),
                r.class_ids.len()
            )));
        }
        if !r.probe_inputs.is_empty() && r.probe_inputs.cols() != self.arch.input_dim {
            return Err(mismatch(format!("probe inputs of width {}", r.probe_inputs.cols())));
        }
        Ok(())
    }

    pub fn list_tasks(&self) -> Vec<TaskSummary> {
        self.records
            .iter()
            .map(|r| TaskSummary {
                task_id: r.task_id,
                num_classes: r.class_ids.len(),
                active_per_layer: r.gates.active_counts(),
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);

        let mut header = Enc::default();
        encode_arch(&mut header, &self.arch);
        header.u32(self.records.len() as u32);
        out.extend_from_slice(&(header.0.len() as u32).to_le_bytes());
        out.extend_from_slice(&header.0);
        out.extend_from_slice(&crc32fast::hash(&header.0).to_le_bytes());

        for r in &self.records {
            let payload = encode_record(r);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = check_magic(bytes, BANK_MAGIC, "memory bank")?;
        let mut cur = Dec::new(header, "bank header");
        let hdr_len = cur
            .u32()
            .map_err(|_| Error::Checksum("truncated header length".into()))? as usize;
        let hdr = cur.checked_block(hdr_len, "header")?;
        let mut h = Dec::new(hdr, "bank header");
        let arch = decode_arch(&mut h)?;
        let count = h.u32()? as usize;
        h.finish()?;

        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            if cur.remaining() == 0 {
                return Err(Error::Checksum(format!(
                    "header announces {count} records, file holds {i}"
                )));
            }
            let len = cur.u64().map_err(|_| {
                Error::Checksum(format!("record {i}: truncated length prefix"))
            })? as usize;
            let payload = cur.checked_block(len, &format!("record {i}"))?;
            let mut d = Dec::new(payload, "record");
            let rec = decode_record(&mut d)?;
            d.finish()?;
            records.push(rec);
        }
        if cur.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last record",
                cur.remaining()
            )));
        }
        let mut bank = MemoryBank::new(arch);
        for r in records {
            bank.store(r)?;
        }
        Ok(bank)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Trunk weights and freeze masks of the gated network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheckpoint {
    pub arch: Architecture,
    pub layers: Vec<Linear>,
    pub freeze_mask: Vec<Vec<bool>>,
}

impl NetworkCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Enc::default();
        encode_arch(&mut body, &self.arch);
        for (layer, mask) in self.layers.iter().zip(&self.freeze_mask) {
            body.linear(layer);
            body.bools(mask);
        }
        let mut out = Vec::with_capacity(body.0.len() + 20);
        out.extend_from_slice(NETWORK_MAGIC);
        out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
        out.extend_from_slice(&body.0);
        out.extend_from_slice(&crc32fast::hash(&body.0).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let rest = check_magic(bytes, NETWORK_MAGIC, "network checkpoint")?;
        let mut cur = Dec::new(rest, "network checkpoint");
        let len = cur.u64()? as usize;
        let body = cur.checked_block(len, "network body")?;
        cur.finish()?;
        let mut d = Dec::new(body, "network body");
        let arch = decode_arch(&mut d)?;
        let mut layers = Vec::with_capacity(arch.depth());
        let mut freeze_mask = Vec::with_capacity(arch.depth());
        for l in 0..arch.depth() {
            let layer = d.linear()?;
            if layer.fan_in() != arch.fan_in(l) || layer.fan_out() != arch.widths[l] {
                return Err(Error::Malformed(format!("layer {l} shape disagrees with architecture")));
            }
            let mask = d.bools()?;
            if mask.len() != arch.widths[l] {
                return Err(Error::Malformed(format!("layer {l} freeze mask has wrong width")));
            }
            layers.push(layer);
            freeze_mask.push(mask);
        }
        d.finish()?;
        Ok(NetworkCheckpoint {
            arch,
            layers,
            freeze_mask,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn check_magic<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < magic.len() || bytes[..MAGIC_STEM_LEN] != magic[..MAGIC_STEM_LEN] {
        return Err(Error::BadMagic(what.to_string()));
    }
    if bytes[MAGIC_STEM_LEN] != magic[MAGIC_STEM_LEN] {
        return Err(Error::UnsupportedVersion(bytes[MAGIC_STEM_LEN]));
    }
    Ok(&bytes[magic.len()..])
}

fn encode_arch(e: &mut Enc, arch: &Architecture) {
    e.u32(arch.input_dim as u32);
    e.u32(arch.widths.len() as u32);
    for &w in &arch.widths {
        e.u32(w as u32);
    }
    e.u32(arch.embed_dim as u32);
    e.u32(arch.task_dim as u32);
    e.u32(arch.gate_hidden as u32);
}

fn decode_arch(d: &mut Dec<'_>) -> Result<Architecture> {
    let input_dim = d.u32()? as usize;
    let depth = d.u32()? as usize;
    let widths = (0..depth)
        .map(|_| d.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input_dim,
        widths,
        embed_dim: d.u32()? as usize,
        task_dim: d.u32()? as usize,
        gate_hidden: d.u32()? as usize,
    };
    arch.validate().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(arch)
}

fn encode_record(r: &TaskRecord) -> Vec<u8> {
    let mut e = Enc::default();
    e.u32(r.task_id);
    e.u32(r.class_ids.len() as u32);
    for &c in &r.class_ids {
        e.u32(c);
    }
    e.f64s(&r.task_embedding);
    e.u32(r.gates.layers.len() as u32);
    for layer in &r.gates.layers {
        e.bools(layer);
    }
    e.linear(&r.head);
    e.prototypes(&r.prototypes);
    e.f64(r.baseline);
    e.f64s(&r.phis);
    e.u32(r.cross_prototypes.len() as u32);
    for set in &r.cross_prototypes {
        e.prototypes(set);
    }
    e.tensor(&r.probe_inputs);
    e.tensor(&r.probe_logits);
    let fp = &r.fingerprint;
    e.u64(fp.seed);
    e.f64(fp.lambda_sparsity);
    e.f64(fp.lambda_kd);
    e.f64(fp.lambda_diversity);
    e.f64(fp.eta);
    e.0
}

fn decode_record(d: &mut Dec<'_>) -> Result<TaskRecord> {
    let task_id = d.u32()?;
    let n_classes = d.u32()? as usize;
    let class_ids = (0..n_classes).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let task_embedding = d.f64s()?;
    let depth = d.u32()? as usize;
    let layers = (0..depth).map(|_| d.bools()).collect::<Result<Vec<_>>>()?;
    let head = d.linear()?;
    let prototypes = d.prototypes()?;
    let baseline = d.f64()?;
    let phis = d.f64s()?;
    let n_cross = d.u32()? as usize;
    let cross_prototypes = (0..n_cross).map(|_| d.prototypes()).collect::<Result<Vec<_>>>()?;
    let probe_inputs = d.tensor()?;
    let probe_logits = d.tensor()?;
    let fingerprint = ConfigFingerprint {
        seed: d.u64()?,
        lambda_sparsity: d.f64()?,
        lambda_kd: d.f64()?,
        lambda_diversity: d.f64()?,
        eta: d.f64()?,
    };
    Ok(TaskRecord {
        task_id,
        class_ids,
        task_embedding,
        gates: BinaryGates { layers },
        head,
        prototypes,
        baseline,
        phis,
        cross_prototypes,
        probe_inputs,
        probe_logits,
        fingerprint,
    })
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }

    fn bools(&mut self, v: &[bool]) {
        self.u32(v.len() as u32);
        self.0.extend(v.iter().map(|&b| b as u8));
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }

    fn linear(&mut self, l: &Linear) {
        self.tensor(&l.weight);
        self.tensor(&l.bias);
    }

    fn prototypes(&mut self, ps: &[Prototype]) {
        self.u32(ps.len() as u32);
        for p in ps {
            self.u32(p.class_id);
            self.f64s(&p.vector);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Dec { buf, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Malformed(format!(
                "{}: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// A `len`-byte block followed by its CRC-32. A short read or a CRC
    /// mismatch both mean the block cannot be trusted.
    fn checked_block(&mut self, len: usize, label: &str) -> Result<&'a [u8]> {
        if self.remaining() < len.saturating_add(4) {
            return Err(Error::Checksum(format!(
                "{label}: truncated ({} of {} bytes present)",
                self.remaining(),
                len.saturating_add(4)
            )));
        }
        let block = self.take(len)?;
        let stored = self.u32()?;
        let actual = crc32fast::hash(block);
        if stored != actual {
            return Err(Error::Checksum(format!(
                "{label}: stored crc {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(block)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.remaining()
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.remaining() {
            return Err(Error::Malformed(format!(
                "{}: length {n} exceeds remaining bytes",
                self.what
            )));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn bools(&mut self) -> Result<Vec<bool>> {
        let n = self.len_prefix(1)?;
        self.take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Malformed(format!("gate byte {other}"))),
            })
            .collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.len_prefix(4)?;
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.remaining() {
            return Err(Error::Malformed(format!("{}: tensor exceeds record", self.what)));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    fn linear(&mut self) -> Result<Linear> {
        let weight = self.tensor()?;
        let bias = self.tensor()?;
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Malformed("linear layer shapes disagree".into()));
        }
        Ok(Linear { weight, bias })
    }

    fn prototypes(&mut self) -> Result<Vec<Prototype>> {
        let n = self.u32()? as usize;
        (0..n)
            .map(|_| {
                Ok(Prototype {
                    class_id: self.u32()?,
                    vector: self.f64s()?,
                })
            })
            .collect()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture::new(3, vec![4, 2])
    }

    fn record(task_id: u32) -> TaskRecord {
        TaskRecord {
            task_id,
            class_ids: vec![task_id * 10, task_id * 10 + 1],
            task_embedding: vec![0.1, -0.0, f64::MIN_POSITIVE],
            gates: BinaryGates {
                layers: vec![vec![true, false, true, true], vec![false, true]],
            },
            head: Linear {
                weight: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 1.0 / 3.0]).unwrap(),
                bias: Tensor::vector(vec![0.5, -0.25]),
            },
            prototypes: vec![
                Prototype {
                    class_id: task_id * 10,
                    vector: vec![0.3, 0.7],
                },
                Prototype {
                    class_id: task_id * 10 + 1,
                    vector: vec![1e-300, 2.5],
                },
            ],
            baseline: 0.123456789,
            phis: vec![0.5; task_id as usize],
            cross_prototypes: vec![vec![Prototype { class_id: task_id * 10, vector: vec![-1.5, 0.0] }]; task_id as usize],
            probe_inputs: Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap(),
            probe_logits: Tensor::matrix(1, 2, vec![-0.1, 0.2]).unwrap(),
            fingerprint: ConfigFingerprint {
                seed: 99,
                lambda_sparsity: 0.5,
                lambda_kd: 1.0,
                lambda_diversity: 1.0,
                eta: 0.5,
            },
        }
    }

    #[test]
    fn duplicate_rejected_and_bank_unchanged() {
        let mut bank = MemoryBank::new(arch());
        bank.store(record(1)).unwrap();
        let before = bank.encode();
        assert!(matches!(bank.store(record(1)), Err(Error::DuplicateTask(1))));
        assert_eq!(bank.encode(), before);
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let mut bank = MemoryBank::new(Architecture::new(3, vec![4, 3]));
        assert!(matches!(
            bank.store(record(1)),
            Err(Error::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn header_only_bank_has_no_records() {
        let bank = MemoryBank::new(arch());
        let decoded = MemoryBank::decode(&bank.encode()).unwrap();
        assert!(decoded.is_empty());
        assert_eq!(decoded.arch, arch());
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let mut bytes = MemoryBank::new(arch()).encode();
        bytes[7] = b'2';
        assert!(matches!(MemoryBank::decode(&bytes), Err(Error::UnsupportedVersion(b'2'))));
        bytes[0] = b'X';
        assert!(matches!(MemoryBank::decode(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn summaries_count_active_gates() {
        let mut bank = MemoryBank::new(arch());
        assert!(bank.list_tasks().is_empty());
        bank.store(record(1)).unwrap();
        bank.store(record(2)).unwrap();
        let s = bank.list_tasks();
        assert_eq!(s.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(s[0].active_per_layer, vec![3, 1]);
        assert_eq!(s[0].num_classes, 2);
    }

    #[test]
    fn network_checkpoint_roundtrip() {
        let arch = arch();
        let net = crate::gatednet::GatedNetwork::init(arch.clone(), &mut crate::gatednet::seeded_rng(3, 0)).unwrap();
        let ck = NetworkCheckpoint {
            arch,
            layers: net.layers.clone(),
            freeze_mask: vec![vec![true, false, false, true], vec![false, false]],
        };
        let bytes = ck.encode();
        assert_eq!(NetworkCheckpoint::decode(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x01;
        assert!(matches!(NetworkCheckpoint::decode(&bad), Err(Error::Checksum(_))));
    }
}
