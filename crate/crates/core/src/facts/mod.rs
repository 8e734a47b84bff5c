// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic relational worlds and the cloze queries built from them.
//!
//! A world has typed entities, typed relations with several surface templates
//! each, and functional facts `⟨h, r, t⟩` (one tail per head and relation).
//! Every entity name is a single token of a whitespace vocabulary.

mod catalog;
mod io;

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::vocab::{ClozeQuery, TokenId, Vocab, CLS, MASK, SEP};

pub use io::{read_world, write_query_tsv, write_world};

/// Template id used by prompts that do not come from any template.
pub const NO_TEMPLATE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Person,
    City,
    Country,
    Organization,
}

impl EntityType {
    pub const ALL: [EntityType; 4] = [
        EntityType::Person,
        EntityType::City,
        EntityType::Country,
        EntityType::Organization,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub kind: EntityType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub name: String,
    pub head_type: EntityType,
    pub tail_type: EntityType,
}

/// Surface form of a relation with `[X]` (head) and `[Y]` (tail) placeholders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: usize,
    pub relation: usize,
    pub text: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let words: Vec<&str> = self.text.split_whitespace().collect();
        for ph in ["[X]", "[Y]"] {
            let n = words.iter().filter(|&&w| w == ph).count();
            if n != 1 {
                return Err(KnError::Config(format!(
                    "template {} must contain {ph} exactly once, found {n}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Shape of a generated world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_relations: usize,
    pub templates_per_relation: usize,
    pub entities_per_type: usize,
    pub facts_per_relation: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_relations: 8,
            templates_per_relation: 9,
            entities_per_type: 100,
            facts_per_relation: 50,
            seed: 0,
        }
    }
}

/// Fewest templates a relation may have.
pub const MIN_TEMPLATES: usize = 4;

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KnError::Config(m));
        if self.n_relations == 0 || self.n_relations > catalog::CATALOG.len() {
            return bad(format!(
                "n_relations must be in 1..={}, got {}",
                catalog::CATALOG.len(),
                self.n_relations
            ));
        }
        if self.templates_per_relation < MIN_TEMPLATES || self.templates_per_relation > 10 {
            return bad(format!(
                "templates_per_relation must be in {MIN_TEMPLATES}..=10, got {}",
                self.templates_per_relation
            ));
        }
        if self.entities_per_type < 2 || self.entities_per_type > catalog::NAME_SPACE {
            return bad(format!(
                "entities_per_type must be in 2..={}, got {}",
                catalog::NAME_SPACE,
                self.entities_per_type
            ));
        }
        if self.facts_per_relation == 0 || self.facts_per_relation > self.entities_per_type {
            return bad(format!(
                "facts_per_relation must be in 1..={} (one fact per head), got {}",
                self.entities_per_type, self.facts_per_relation
            ));
        }
        Ok(())
    }
}

/// Entities, relations, templates and facts, plus the vocabulary they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub templates: Vec<PromptTemplate>,
    pub facts: Vec<Fact>,
    pub vocab: Vocab,
}

impl World {
    /// Assembles a world and checks its invariants. The vocabulary is
    /// rebuilt deterministically: specials, entity names, then template words
    /// in first-appearance order.
    pub fn new(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        templates: Vec<PromptTemplate>,
        facts: Vec<Fact>,
    ) -> Result<Self> {
        let mut vocab = Vocab::new();
        for (i, e) in entities.iter().enumerate() {
            if e.id != i {
                return Err(KnError::Format(format!("entity ids must be dense, got {} at {i}", e.id)));
            }
            vocab.insert(&e.name);
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i {
                return Err(KnError::Format(format!("relation ids must be dense, got {} at {i}", r.id)));
            }
        }
        for (i, t) in templates.iter().enumerate() {
            if t.id != i || t.relation >= relations.len() {
                return Err(KnError::Format(format!("bad template record {i}")));
            }
            t.validate()?;
            for w in t.text.split_whitespace() {
                if w != "[X]" && w != "[Y]" {
                    vocab.insert(w);
                }
            }
        }
        let mut seen = HashSet::new();
        for (i, f) in facts.iter().enumerate() {
            if f.id != i || f.relation >= relations.len() {
                return Err(KnError::Format(format!("bad fact record {i}")));
            }
            let (Some(h), Some(t)) = (entities.get(f.head), entities.get(f.tail)) else {
                return Err(KnError::Index(format!("fact {i} references a missing entity")));
            };
            let r = &relations[f.relation];
            if h.kind != r.head_type || t.kind != r.tail_type {
                return Err(KnError::Format(format!(
                    "fact {i} does not match the types of relation {}",
                    r.name
                )));
            }
            if !seen.insert((f.head, f.relation)) {
                return Err(KnError::Format(format!(
                    "fact {i} repeats head {} for relation {}",
                    h.name, r.name
                )));
            }
        }
        Ok(Self {
            entities,
            relations,
            templates,
            facts,
            vocab,
        })
    }

    pub fn templates_of(&self, relation: usize) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.relation == relation)
    }

    /// Relation id of every fact, indexed by fact id.
    pub fn fact_relations(&self) -> Vec<usize> {
        self.facts.iter().map(|f| f.relation).collect()
    }

    pub fn facts_of(&self, relation: usize) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(move |f| f.relation == relation)
    }

    pub fn entities_of(&self, kind: EntityType) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.kind == kind)
    }

    /// Token id of an entity's (single-token) name.
    pub fn entity_token(&self, entity: usize) -> Result<TokenId> {
        let e = self
            .entities
            .get(entity)
            .ok_or_else(|| KnError::Index(format!("entity {entity} out of range")))?;
        single_token(&self.vocab, &e.name)
    }

    /// One query per (fact, template of the fact's relation).
    pub fn queries(&self) -> Result<Vec<ClozeQuery>> {
        build_queries(self, &self.facts)
    }

    /// Queries of the given facts, grouped per fact in the same order.
    pub fn queries_by_fact(&self, facts: &[usize]) -> Result<Vec<Vec<ClozeQuery>>> {
        facts
            .iter()
            .map(|&f| {
                let fact = self
                    .facts
                    .get(f)
                    .ok_or_else(|| KnError::Index(format!("fact {f} out of range")))?;
                build_queries(self, std::slice::from_ref(fact))
            })
            .collect()
    }
}

fn single_token(vocab: &Vocab, name: &str) -> Result<TokenId> {
    let mut words = name.split_whitespace();
    match (words.next(), words.next()) {
        (Some(w), None) => vocab
            .id(w)
            .ok_or_else(|| KnError::Index(format!("{w:?} not in vocabulary"))),
        _ => Err(KnError::MultiToken(format!(
            "{name:?} is not a single token"
        ))),
    }
}

/// Generates a world from the built-in relation catalog.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entities = Vec::new();
    for kind in EntityType::ALL {
        let picks = rand::seq::index::sample(&mut rng, catalog::NAME_SPACE, spec.entities_per_type);
        let mut picks = picks.into_vec();
        picks.sort_unstable();
        for n in picks {
            entities.push(Entity {
                id: entities.len(),
                name: catalog::entity_name(kind, n),
                kind,
            });
        }
    }
    let ids_of = |kind: EntityType| -> Vec<usize> {
        entities.iter().filter(|e| e.kind == kind).map(|e| e.id).collect()
    };

    let mut relations = Vec::new();
    let mut templates = Vec::new();
    let mut facts = Vec::new();
    for def in catalog::CATALOG.iter().take(spec.n_relations) {
        let r = relations.len();
        relations.push(Relation {
            id: r,
            name: def.name.to_owned(),
            head_type: def.head,
            tail_type: def.tail,
        });
        for text in def.templates.iter().take(spec.templates_per_relation) {
            templates.push(PromptTemplate {
                id: templates.len(),
                relation: r,
                text: (*text).to_owned(),
            });
        }
        let heads = ids_of(def.head);
        let tails = ids_of(def.tail);
        let mut chosen: Vec<usize> = heads
            .choose_multiple(&mut rng, spec.facts_per_relation)
            .copied()
            .collect();
        chosen.sort_unstable();
        for h in chosen {
            let t = loop {
                let t = tails[rng.random_range(0..tails.len())];
                if t != h {
                    break t;
                }
            };
            facts.push(Fact {
                id: facts.len(),
                head: h,
                relation: r,
                tail: t,
            });
        }
    }
    World::new(entities, relations, templates, facts)
}

/// Fills `[X]` with `head` and `[Y]` with the mask, framed by `[CLS]`/`[SEP]`.
/// Returns the tokens and the mask position.
fn fill_template(
    vocab: &Vocab,
    template: &PromptTemplate,
    head: &str,
    tail: Option<&str>,
) -> Result<(Vec<TokenId>, usize)> {
    let mut tokens = vec![CLS];
    let mut mask_pos = 0;
    for w in template.text.split_whitespace() {
        match w {
            "[X]" => tokens.push(single_token(vocab, head)?),
            "[Y]" => match tail {
                Some(t) => tokens.push(single_token(vocab, t)?),
                None => {
                    mask_pos = tokens.len();
                    tokens.push(MASK);
                }
            },
            _ => tokens.push(
                vocab
                    .id(w)
                    .ok_or_else(|| KnError::Index(format!("word {w:?} not in vocabulary")))?,
            ),
        }
    }
    tokens.push(SEP);
    Ok((tokens, mask_pos))
}

/// One cloze query per (fact, template of its relation), facts in order.
pub fn build_queries(world: &World, facts: &[Fact]) -> Result<Vec<ClozeQuery>> {
    let mut out = Vec::new();
    for f in facts {
        let head = &world.entities[f.head].name;
        let answer = single_token(&world.vocab, &world.entities[f.tail].name)?;
        let mut any = false;
        for t in world.templates_of(f.relation) {
            any = true;
            let (tokens, mask_pos) = fill_template(&world.vocab, t, head, None)?;
            out.push(ClozeQuery {
                tokens,
                mask_pos,
                answer,
                fact: f.id,
                template: t.id,
            });
        }
        if !any {
            return Err(KnError::Config(format!(
                "relation {} has no templates",
                world.relations[f.relation].name
            )));
        }
    }
    Ok(out)
}

/// Prompts of one fact by type: knowledge-expressing (`t1`), head-only with
/// another relation's surface form (`t2`), and random tokens (`t3`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptGroups {
    pub fact: usize,
    pub t1: Vec<ClozeQuery>,
    pub t2: Vec<ClozeQuery>,
    pub t3: Vec<ClozeQuery>,
}

/// Builds `size` prompts of each type for every listed fact.
///
/// `t1` cycles through a shuffle of the fact's own templates. `t2` fills a
/// template of a different relation with the head and a non-tail entity of
/// that relation's tail type, then masks one template word. `t3` matches the
/// length of the corresponding `t1` prompt with random non-special tokens
/// other than the head and tail, masking one of them.
pub fn build_prompt_groups(
    world: &World,
    facts: &[usize],
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PromptGroups>> {
    let n_special = crate::vocab::SPECIAL_TOKENS.len() as TokenId;
    let vocab_len = world.vocab.len() as TokenId;
    let mut out = Vec::with_capacity(facts.len());
    for &fid in facts {
        let fact = *world
            .facts
            .get(fid)
            .ok_or_else(|| KnError::Index(format!("fact {fid} out of range")))?;
        let head_name = &world.entities[fact.head].name;
        let head_tok = world.entity_token(fact.head)?;
        let tail_tok = world.entity_token(fact.tail)?;

        let mut own: Vec<&PromptTemplate> = world.templates_of(fact.relation).collect();
        own.shuffle(rng);
        let t1 = build_queries(world, &[fact])?;
        let t1: Vec<ClozeQuery> = (0..size)
            .map(|k| {
                let tid = own[k % own.len()].id;
                t1.iter().find(|q| q.template == tid).cloned().expect("query per template")
            })
            .collect();

        let others: Vec<&PromptTemplate> = world
            .templates
            .iter()
            .filter(|t| t.relation != fact.relation)
            .collect();
        let mut t2 = Vec::with_capacity(size);
        if others.is_empty() {
            return Err(KnError::Config(
                "head-only prompts need at least two relations".into(),
            ));
        }
        for _ in 0..size {
            let tpl = *others.choose(rng).expect("non-empty");
            let filler_type = world.relations[tpl.relation].tail_type;
            let fillers: Vec<&Entity> = world
                .entities_of(filler_type)
                .filter(|e| e.id != fact.tail && e.id != fact.head)
                .collect();
            let filler = fillers.choose(rng).ok_or_else(|| {
                KnError::Config("no entity available to fill a head-only prompt".into())
            })?;
            let (mut tokens, _) = fill_template(&world.vocab, tpl, head_name, Some(&filler.name))?;
            // Entity names occupy the ids right after the specials.
            let first_word = n_special as usize + world.entities.len();
            let words: Vec<usize> = (1..tokens.len() - 1)
                .filter(|&p| {
                    tokens[p] as usize >= first_word && world.vocab.word(tokens[p]) != Some(".")
                })
                .collect();
            let mask_pos = *words.choose(rng).expect("templates contain words");
            let answer = tokens[mask_pos];
            tokens[mask_pos] = MASK;
            t2.push(ClozeQuery {
                tokens,
                mask_pos,
                answer,
                fact: fid,
                template: tpl.id,
            });
        }

        let t3 = t1
            .iter()
            .map(|q| {
                let inner = q.tokens.len() - 2;
                let mut tokens = vec![CLS];
                while tokens.len() < inner + 1 {
                    let t = rng.random_range(n_special..vocab_len);
                    if t != head_tok && t != tail_tok {
                        tokens.push(t);
                    }
                }
                tokens.push(SEP);
                let mask_pos = rng.random_range(1..=inner);
                let answer = tokens[mask_pos];
                tokens[mask_pos] = MASK;
                ClozeQuery {
                    tokens,
                    mask_pos,
                    answer,
                    fact: fid,
                    template: NO_TEMPLATE,
                }
            })
            .collect();
        out.push(PromptGroups { fact: fid, t1, t2, t3 });
    }
    Ok(out)
}
