// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution dumps.
//!
//! * Top-K TSV: `fact_id template_id layer index score activation`, the K
//!   highest scores of each map in descending order.
//! * Full maps: magic `KNATTR1`, u32 map count, then per map u32 fact,
//!   u32 template (`0xFFFFFFFF` for none), u32 layers, u32 width, and
//!   `layers·width` f32 scores followed by as many f32 activations. All
//!   little-endian.
//! * Refined sets: one JSON object per line,
//!   `{"fact_id","relation","p_used","t_fraction","neurons":[[l,i,share,mean_score],...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionMap, KnowledgeNeuron, KnowledgeNeuronSet};
use crate::error::{KnError, Result};
use crate::model::NeuronId;

const MAP_MAGIC: &[u8; 7] = b"KNATTR1";

pub fn write_attribution_tsv(path: &Path, maps: &[AttributionMap], k: usize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "fact_id\ttemplate_id\tlayer\tindex\tscore\tactivation")?;
    for m in maps {
        for (n, s) in m.top_k(k) {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:e}\t{:e}",
                m.fact,
                template_field(m.template),
                n.layer,
                n.index,
                s,
                m.activation(n)
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn template_field(t: usize) -> String {
    if t == crate::facts::NO_TEMPLATE {
        "-".into()
    } else {
        t.to_string()
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| KnError::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_map_binary(path: &Path, maps: &[AttributionMap]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAP_MAGIC)?;
    out.write_all(&u32_of(maps.len(), "map count")?.to_le_bytes())?;
    for m in maps {
        let template = if m.template == crate::facts::NO_TEMPLATE {
            u32::MAX
        } else {
            u32_of(m.template, "template")?
        };
        for v in [u32_of(m.fact, "fact")?, template, u32_of(m.n_layers, "layers")?, u32_of(m.d_ffn, "width")?] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in m.scores.iter().chain(&m.activations) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KnError::Format("attribution file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| KnError::Format("map size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub fn read_map_binary(path: &Path) -> Result<Vec<AttributionMap>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(MAP_MAGIC.len())? != MAP_MAGIC {
        return Err(KnError::Format("bad attribution file magic".into()));
    }
    let count = c.u32()? as usize;
    let mut maps = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let fact = c.u32()? as usize;
        let template = match c.u32()? {
            u32::MAX => crate::facts::NO_TEMPLATE,
            t => t as usize,
        };
        let n_layers = c.u32()? as usize;
        let d_ffn = c.u32()? as usize;
        let n = n_layers
            .checked_mul(d_ffn)
            .ok_or_else(|| KnError::Format("map size overflows".into()))?;
        let scores = c.f32s(n)?;
        let activations = c.f32s(n)?;
        maps.push(AttributionMap {
            fact,
            template,
            n_layers,
            d_ffn,
            scores,
            activations,
        });
    }
    if c.pos != bytes.len() {
        return Err(KnError::Format("trailing bytes after attribution maps".into()));
    }
    Ok(maps)
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    fact_id: usize,
    relation: usize,
    p_used: f64,
    t_fraction: f32,
    neurons: Vec<(usize, usize, f64, f64)>,
}

pub fn write_refined_sets(path: &Path, sets: &[KnowledgeNeuronSet]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in sets {
        let rec = SetRecord {
            fact_id: s.fact,
            relation: s.relation,
            p_used: s.p,
            t_fraction: s.t_fraction,
            neurons: s
                .neurons
                .iter()
                .map(|n| (n.id.layer, n.id.index, n.share, n.mean_score))
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_refined_sets(path: &Path) -> Result<Vec<KnowledgeNeuronSet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut sets = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SetRecord = serde_json::from_str(&line)
            .map_err(|e| KnError::Format(format!("refined sets line {}: {e}", n + 1)))?;
        sets.push(KnowledgeNeuronSet {
            fact: rec.fact_id,
            relation: rec.relation,
            p: rec.p_used,
            t_fraction: rec.t_fraction,
            neurons: rec
                .neurons
                .into_iter()
                .map(|(l, i, share, mean_score)| KnowledgeNeuron {
                    id: NeuronId::new(l, i),
                    share,
                    mean_score,
                })
                .collect(),
        });
    }
    Ok(sets)
}
