// SPDX-License-Identifier: MIT OR Apache-2.0

//! World files (one JSON record per line) and query dumps (TSV).
//!
//! World records, in file order:
//!
//! ```text
//! {"kind":"entity","id":0,"name":"Kakaloton","type":"city"}
//! {"kind":"relation","id":0,"name":"capital","head_type":"country","tail_type":"city"}
//! {"kind":"template","id":0,"relation":0,"text":"The capital of [X] is [Y] ."}
//! {"kind":"fact","id":0,"head":212,"relation":0,"tail":131}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Entity, EntityType, Fact, PromptTemplate, Relation, World};
use crate::error::{KnError, Result};
use crate::vocab::ClozeQuery;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Entity {
        id: usize,
        name: String,
        #[serde(rename = "type")]
        kind: EntityType,
    },
    Relation {
        id: usize,
        name: String,
        head_type: EntityType,
        tail_type: EntityType,
    },
    Template {
        id: usize,
        relation: usize,
        text: String,
    },
    Fact {
        id: usize,
        head: usize,
        relation: usize,
        tail: usize,
    },
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let records = world
        .entities
        .iter()
        .map(|e| Record::Entity {
            id: e.id,
            name: e.name.clone(),
            kind: e.kind,
        })
        .chain(world.relations.iter().map(|r| Record::Relation {
            id: r.id,
            name: r.name.clone(),
            head_type: r.head_type,
            tail_type: r.tail_type,
        }))
        .chain(world.templates.iter().map(|t| Record::Template {
            id: t.id,
            relation: t.relation,
            text: t.text.clone(),
        }))
        .chain(world.facts.iter().map(|f| Record::Fact {
            id: f.id,
            head: f.head,
            relation: f.relation,
            tail: f.tail,
        }));
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<World> {
    let reader = BufReader::new(File::open(path)?);
    let (mut entities, mut relations, mut templates, mut facts) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| KnError::Format(format!("world line {}: {e}", n + 1)))?;
        match rec {
            Record::Entity { id, name, kind } => entities.push(Entity { id, name, kind }),
            Record::Relation {
                id,
                name,
                head_type,
                tail_type,
            } => relations.push(Relation {
                id,
                name,
                head_type,
                tail_type,
            }),
            Record::Template { id, relation, text } => {
                templates.push(PromptTemplate { id, relation, text })
            }
            Record::Fact {
                id,
                head,
                relation,
                tail,
            } => facts.push(Fact {
                id,
                head,
                relation,
                tail,
            }),
        }
    }
    World::new(entities, relations, templates, facts)
}

/// Columns: `fact_id template_id text mask_index answer_token`. The text
/// includes the framing tokens, so `mask_index` indexes its words.
pub fn write_query_tsv(path: &Path, world: &World, queries: &[ClozeQuery]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "fact_id\ttemplate_id\ttext\tmask_index\tanswer_token")?;
    for q in queries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            q.fact,
            q.template,
            world.vocab.decode(&q.tokens),
            q.mask_pos,
            world.vocab.word(q.answer).unwrap_or("[UNK]")
        )?;
    }
    out.flush()?;
    Ok(())
}
