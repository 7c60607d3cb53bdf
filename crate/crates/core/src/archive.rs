//! Self-describing model archive.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic      8 bytes   "DBSARC01"
//! header_len u64
//! header     JSON      spec, config, draw metadata, history, table shape
//! params     f64 x n_params, once per draw
//! labels     u64 x n_samples          (only when a table is present)
//! sigma      f64 x n_samples x C      (only when a table is present)
//! checksum   SHA-256 of everything above
//! ```
//!
//! The encoding has no timestamps, so identical ensembles give identical bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nnet::{ModelSpec, ParamVector};
use crate::posterior::{PosteriorDraw, UncertaintyTable};
use crate::trainer::{CycleWeightStats, EpochRecord, RunConfig, TrainedEnsemble};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DBSARC01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DrawMeta {
    draw_id: usize,
    cycle_index: usize,
    epoch_of_capture: usize,
}

#[derive(Serialize, Deserialize)]
struct TableMeta {
    cycle_index: usize,
    n_samples: usize,
    n_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    config: RunConfig,
    draws: Vec<DrawMeta>,
    table: Option<TableMeta>,
    history: Vec<EpochRecord>,
    weight_stats: Vec<CycleWeightStats>,
}

pub fn to_bytes(ensemble: &TrainedEnsemble) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        spec: ensemble.spec.clone(),
        config: ensemble.config.clone(),
        draws: ensemble
            .draws
            .iter()
            .map(|d| DrawMeta {
                draw_id: d.draw_id,
                cycle_index: d.cycle_index,
                epoch_of_capture: d.epoch_of_capture,
            })
            .collect(),
        table: ensemble.table.as_ref().map(|t| TableMeta {
            cycle_index: t.cycle_index(),
            n_samples: t.len(),
            n_classes: t.n_classes(),
        }),
        history: ensemble.history.clone(),
        weight_stats: ensemble.weight_stats.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for d in &ensemble.draws {
        for v in d.params.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(t) = &ensemble.table {
        for &l in t.labels() {
            buf.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for v in t.raw_sigma() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn write<W: Write>(ensemble: &TrainedEnsemble, mut out: W) -> std::io::Result<()> {
    out.write_all(&to_bytes(ensemble))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Schema(format!("archive truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Schema(format!("archive {what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedEnsemble> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Schema("not a model archive (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Schema("archive checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let header_len = cur.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len, "header")?)
        .map_err(|e| Error::Schema(format!("archive header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "archive format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let spec = header.spec;
    let n_params = spec.n_params();
    let mut draws = Vec::with_capacity(header.draws.len());
    for meta in header.draws {
        let values = cur.f64s(n_params, "draw parameters")?;
        draws.push(PosteriorDraw {
            draw_id: meta.draw_id,
            cycle_index: meta.cycle_index,
            epoch_of_capture: meta.epoch_of_capture,
            params: ParamVector::from_values(&spec, values).map_err(|e| Error::Schema(e.to_string()))?,
        });
    }
    if draws.is_empty() {
        return Err(Error::Schema("archive holds no draws".into()));
    }
    let table = match header.table {
        None => None,
        Some(meta) => {
            let labels = (0..meta.n_samples)
                .map(|_| cur.u64("table labels").map(|l| l as usize))
                .collect::<Result<Vec<_>>>()?;
            let total = meta
                .n_samples
                .checked_mul(meta.n_classes)
                .ok_or_else(|| Error::Schema("archive table size overflows".into()))?;
            let sigma = cur.f64s(total, "table sigma")?;
            Some(
                UncertaintyTable::new(meta.cycle_index, meta.n_classes, labels, sigma)
                    .map_err(|e| Error::Schema(e.to_string()))?,
            )
        }
    };
    if cur.pos != body.len() {
        return Err(Error::Schema(format!(
            "{} trailing bytes after archive payload",
            body.len() - cur.pos
        )));
    }
    Ok(TrainedEnsemble {
        spec,
        config: header.config,
        draws,
        table,
        history: header.history,
        weight_stats: header.weight_stats,
    })
}

pub fn read<R: Read>(mut input: R) -> Result<TrainedEnsemble> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Schema(format!("reading archive: {e}")))?;
    from_bytes(&bytes)
}
