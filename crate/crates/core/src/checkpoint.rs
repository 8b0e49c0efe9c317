//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "UFCP" | version | meta_len | meta (UTF-8 JSON)
//! segment_count | { name_len | name | rank | dims[rank] | f32 payload }*
//! ```
//!
//! Optimizer moments, when present, are stored as extra segments named
//! `adam.m:<segment>` and `adam.v:<segment>` after the parameters. The oracle
//! file reuses the same container with its own metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datagen::ConditionId;
use crate::epsnet::{Arch, EpsilonNet};
use crate::evaluator::{OracleClassifier, SupportGate};
use crate::numerics::{AdamState, ParamStore, Tensor};
use crate::schedule::ScheduleConfig;
use crate::unlearner::Method;
use crate::{Error, Phase};

pub const MAGIC: &[u8; 4] = b"UFCP";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub schedule: ScheduleConfig,
    pub phase: Phase,
    pub step: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlearn_class: Option<ConditionId>,
    /// Adam step counter; present iff moments are stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(net: &EpsilonNet, schedule: ScheduleConfig, phase: Phase, step: usize, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                arch: *net.arch(),
                schedule,
                phase,
                step,
                seed,
                method: None,
                unlearn_class: None,
                adam_step: None,
            },
            params: net.params.clone(),
            adam: None,
        }
    }

    pub fn with_method(mut self, method: Method, unlearn_class: ConditionId) -> Self {
        self.meta.method = Some(method);
        self.meta.unlearn_class = Some(unlearn_class);
        self
    }

    pub fn with_adam(mut self, adam: &AdamState) -> Self {
        self.adam = Some(adam.clone());
        self
    }

    /// Rebuilds the network, checking the segments against the stored arch.
    pub fn net(&self) -> Result<EpsilonNet, Error> {
        EpsilonNet::from_params(self.meta.arch, self.meta.schedule.steps, self.params.clone())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), Error> {
        let mut meta = self.meta.clone();
        meta.adam_step = self.adam.as_ref().map(|a| a.step_count);
        let mut segs: Vec<(String, &Tensor)> =
            self.params.segments().iter().map(|s| (s.name.clone(), &s.value)).collect();
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(Error::Integrity("optimizer state does not match parameter segments".into()));
            }
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for (s, t) in self.params.segments().iter().zip(moments) {
                    segs.push((format!("{prefix}{}", s.name), t));
                }
            }
        }
        let buf = encode(&meta, &segs)?;
        w.write_all(&buf).map_err(|e| Error::io("checkpoint stream", e))
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, Error> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("checkpoint stream", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let (meta, segs): (CheckpointMeta, _) = decode(bytes)?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in segs {
            if let Some(base) = name.strip_prefix(ADAM_M) {
                moment_slot(&params, base, m.len())?;
                m.push(t);
            } else if let Some(base) = name.strip_prefix(ADAM_V) {
                moment_slot(&params, base, v.len())?;
                v.push(t);
            } else {
                if !m.is_empty() || !v.is_empty() {
                    return Err(Error::Format(format!("parameter segment '{name}' after optimizer moments")));
                }
                params.add(&name, t)?;
            }
        }
        let adam = match meta.adam_step {
            None if m.is_empty() && v.is_empty() => None,
            Some(step_count) if m.len() == params.len() && v.len() == params.len() => {
                for ((s, a), b) in params.segments().iter().zip(&m).zip(&v) {
                    if a.shape() != s.value.shape() || b.shape() != s.value.shape() {
                        return Err(Error::Format(format!("optimizer moment shape mismatch for '{}'", s.name)));
                    }
                }
                Some(AdamState { step_count, m, v })
            }
            _ => return Err(Error::Format("incomplete optimizer state".into())),
        };
        Ok(Self { meta, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleMeta {
    pub oracle: OracleTag,
    pub dim: usize,
    pub class_count: usize,
    pub seed: u64,
    pub heldout_accuracy: f64,
    pub support_radius: f32,
}

/// Marks the metadata block as an oracle so neither file type loads as the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleTag {
    Frozen,
}

const SUPPORT_POINTS: &str = "support.points";

/// A trained oracle with its support gate and held-out accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFile {
    pub oracle: OracleClassifier,
    pub seed: u64,
    pub heldout_accuracy: f64,
}

impl OracleFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let o = &self.oracle;
        let gate = o
            .support
            .as_ref()
            .ok_or_else(|| Error::Integrity("oracle has no support gate".into()))?;
        let meta = OracleMeta {
            oracle: OracleTag::Frozen,
            dim: o.dim,
            class_count: o.class_count,
            seed: self.seed,
            heldout_accuracy: self.heldout_accuracy,
            support_radius: gate.radius,
        };
        let points = Tensor::matrix(gate.points.len() / gate.dim, gate.dim, gate.points.clone())?;
        let mut segs: Vec<(String, &Tensor)> = o.params.segments().iter().map(|s| (s.name.clone(), &s.value)).collect();
        segs.push((SUPPORT_POINTS.to_string(), &points));
        encode(&meta, &segs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let (meta, segs): (OracleMeta, Vec<(String, Tensor)>) = decode(bytes)?;
        let mut params = ParamStore::new();
        let mut points = None;
        for (name, t) in segs {
            if name == SUPPORT_POINTS {
                points = Some(t);
            } else {
                params.add(&name, t)?;
            }
        }
        let points = points.ok_or_else(|| Error::Format("oracle file lacks support points".into()))?;
        if points.rank() != 2 || points.shape()[1] != meta.dim {
            return Err(Error::Format("oracle support points do not match its dimension".into()));
        }
        let gate = SupportGate::new(meta.dim, points.data().to_vec(), meta.support_radius)?;
        let oracle = OracleClassifier::from_params(meta.dim, meta.class_count, params)?.with_support(gate)?;
        Ok(Self { oracle, seed: meta.seed, heldout_accuracy: meta.heldout_accuracy })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Serializes `meta` and the named tensors into the container layout.
pub fn encode<M: Serialize>(meta: &M, segments: &[(String, &Tensor)]) -> Result<Vec<u8>, Error> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, len_u32(json.len())?);
    buf.extend_from_slice(&json);
    put_u32(&mut buf, len_u32(segments.len())?);
    for (name, t) in segments {
        put_u32(&mut buf, len_u32(name.len())?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, len_u32(t.rank())?);
        for &d in t.shape() {
            put_u32(&mut buf, len_u32(d)?);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses the container layout; the whole input must be consumed.
pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<(String, Tensor)>), Error> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta: M =
        serde_json::from_slice(c.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let count = c.u32()? as usize;
    let mut segs = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("segment name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("segment '{name}' dims overflow")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        segs.push((name, Tensor::new(dims, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after segment table", bytes.len() - c.pos)));
    }
    Ok((meta, segs))
}

// Moments must follow parameter order exactly.
fn moment_slot(params: &ParamStore, base: &str, idx: usize) -> Result<(), Error> {
    match params.segments().get(idx) {
        Some(s) if s.name == base => Ok(()),
        _ => Err(Error::Format(format!("optimizer moment for '{base}' out of order"))),
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize) -> Result<u32, Error> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EpsilonNet {
        EpsilonNet::init(Arch { width: 8, depth: 1, time_dim: 4, ..Arch::default() }, 10, 3).unwrap()
    }

    fn sched() -> ScheduleConfig {
        ScheduleConfig { steps: 10, ..ScheduleConfig::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let net = small();
        let ck = Checkpoint::new(&net, sched(), Phase::Unlearn, 40, 7).with_method(Method::Dimum, ConditionId(1));
        let a = ck.to_bytes().unwrap();
        assert_eq!(&a[..4], MAGIC);
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
        assert!(back.net().unwrap().params.values_bit_equal(&net.params));
    }

    #[test]
    fn optimizer_moments_round_trip() {
        let net = small();
        let mut adam = AdamState::new(&net.params);
        adam.step_count = 12;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[2].data_mut()[1] = 3.5;
        let ck = Checkpoint::new(&net, sched(), Phase::Pretrain, 12, 0).with_adam(&adam);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.adam.as_ref(), Some(&adam));
        assert_eq!(back.meta.adam_step, Some(12));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = Checkpoint::new(&small(), sched(), Phase::Pretrain, 0, 0).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn oracle_file_round_trip_and_type_separation() {
        use crate::datagen::{gen_mixture_dataset, gen_test_set, MixtureSpec};
        use crate::evaluator::{train_oracle, OracleConfig};
        let spec = MixtureSpec::ring(3, 80, 1.0, 0.35, 0.12);
        let train = gen_mixture_dataset(&spec, 1).unwrap();
        let test = gen_test_set(&spec, 40, 1).unwrap();
        let cfg = OracleConfig { steps: 300, ..OracleConfig::default() };
        let (oracle, acc) = train_oracle(&train, &test, &cfg).unwrap();
        let file = OracleFile { oracle, seed: 1, heldout_accuracy: acc };
        let bytes = file.to_bytes().unwrap();
        let back = OracleFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let ck = Checkpoint::new(&small(), sched(), Phase::Pretrain, 0, 0).to_bytes().unwrap();
        assert!(matches!(OracleFile::from_bytes(&ck), Err(Error::Format(_))));
    }

    #[test]
    fn arch_mismatch_is_rejected_when_rebuilding() {
        let mut ck = Checkpoint::new(&small(), sched(), Phase::Pretrain, 0, 0);
        ck.meta.arch.width = 9;
        assert!(ck.net().is_err());
    }
}
