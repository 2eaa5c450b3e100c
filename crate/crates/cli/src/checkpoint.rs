//! Binary checkpoint container.
//!
//! Layout: the magic `MDMSTEER1`, a little-endian `u32` header length, a
//! JSON header, then the named blobs as little-endian `f64` in header order.
//! The header carries a CRC-64 of the blob bytes, checked on load.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use mdm_steer::denoiser::{Adam, AdamConfig, Architecture, DenoiserModel};
use mdm_steer::objectives::{LogZHead, LogZHeadConfig};
use mdm_steer::rng::seeded;
use mdm_steer::schedule::NoiseSchedule;
use mdm_steer::sequence::Vocabulary;

pub const MAGIC: &[u8; 9] = b"MDMSTEER1";
const FORMAT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub optimizer: Option<Adam>,
    pub ema: Option<Vec<f64>>,
    pub head: Option<LogZHead>,
    /// Scalar log-partition (RTB).
    pub log_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: Architecture,
    vocab_size: usize,
    seq_len: usize,
    schedule: NoiseSchedule,
    optimizer: Option<OptimizerMeta>,
    head: Option<LogZHeadConfig>,
    blobs: Vec<BlobMeta>,
    checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    len: usize,
}

impl Checkpoint {
    pub fn new(model: DenoiserModel, schedule: NoiseSchedule) -> Self {
        Self {
            model,
            schedule,
            optimizer: None,
            ema: None,
            head: None,
            log_z: None,
        }
    }

    fn blobs(&self) -> Vec<(&'static str, Vec<f64>)> {
        let mut out = vec![("model", self.model.params().to_vec())];
        if let Some(opt) = &self.optimizer {
            out.push(("adam.m", opt.first_moment().to_vec()));
            out.push(("adam.v", opt.second_moment().to_vec()));
        }
        if let Some(e) = &self.ema {
            out.push(("ema", e.clone()));
        }
        if let Some(h) = &self.head {
            out.push(("head", h.params().to_vec()));
        }
        if let Some(z) = self.log_z {
            out.push(("log_z", vec![z]));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs = self.blobs();
        let mut body = Vec::new();
        for (_, b) in &blobs {
            for x in b {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            architecture: self.model.architecture(),
            vocab_size: self.model.vocab().size(),
            seq_len: self.model.seq_len(),
            schedule: self.schedule,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.cfg,
                steps: o.steps(),
            }),
            head: self.head.as_ref().map(|h| h.config()),
            blobs: blobs
                .iter()
                .map(|(n, b)| BlobMeta {
                    name: n.to_string(),
                    len: b.len(),
                })
                .collect(),
            checksum: format!("{:016x}", CRC64.checksum(&body)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= MAGIC.len() + 4 && &bytes[..MAGIC.len()] == MAGIC, "not a checkpoint (bad magic)");
        let mut at = MAGIC.len();
        let hlen = u32::from_le_bytes(bytes[at..at + 4].try_into()?) as usize;
        at += 4;
        ensure!(bytes.len() >= at + hlen, "truncated header");
        let header: Header = serde_json::from_slice(&bytes[at..at + hlen]).context("malformed header")?;
        at += hlen;
        ensure!(header.version == FORMAT_VERSION, "unsupported checkpoint version {}", header.version);
        let body = &bytes[at..];
        let expected: usize = header.blobs.iter().map(|b| b.len * 8).sum();
        ensure!(body.len() == expected, "blob section has {} bytes, header promises {expected}", body.len());
        let sum = format!("{:016x}", CRC64.checksum(body));
        ensure!(sum == header.checksum, "checksum mismatch: stored {}, computed {sum}", header.checksum);

        let mut blobs = std::collections::HashMap::new();
        let mut off = 0;
        for b in &header.blobs {
            let vals: Vec<f64> = body[off..off + b.len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += b.len * 8;
            blobs.insert(b.name.as_str(), vals);
        }
        let vocab = Vocabulary::new(header.vocab_size)?;
        let Some(params) = blobs.remove("model") else {
            bail!("checkpoint has no model blob");
        };
        let model = DenoiserModel::from_params(&header.architecture, vocab, header.seq_len, params)?;
        let optimizer = match &header.optimizer {
            Some(meta) => {
                let (Some(m), Some(v)) = (blobs.remove("adam.m"), blobs.remove("adam.v")) else {
                    bail!("optimizer state listed without moment blobs");
                };
                Some(Adam::from_state(meta.config, m, v, meta.steps)?)
            }
            None => None,
        };
        let head = match header.head {
            Some(cfg) => {
                let Some(p) = blobs.remove("head") else {
                    bail!("head config listed without a head blob");
                };
                let mut h = LogZHead::new(cfg, vocab, header.seq_len, &mut seeded(0))?;
                ensure!(p.len() == h.params().len(), "head blob has {} values, expected {}", p.len(), h.params().len());
                h.params_mut().copy_from_slice(&p);
                Some(h)
            }
            None => None,
        };
        let log_z = match blobs.remove("log_z") {
            Some(z) if z.len() == 1 => Some(z[0]),
            Some(z) => bail!("log_z blob has {} values", z.len()),
            None => None,
        };
        Ok(Self {
            model,
            schedule: header.schedule,
            optimizer,
            ema: blobs.remove("ema"),
            head,
            log_z,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }
}
