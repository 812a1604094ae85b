//! Knowledge-graph catalogs, splits, inverse-relation augmentation and filter indices.

mod augment;
mod filter;
mod load;
mod resplit;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment_inverse, INVERSE_MARKER};
pub use filter::{build_filter_index, FilterIndex, FilterScope};
pub use load::{load_dataset, parse_catalog, write_split};
pub use resplit::{resplit_unseen, UnseenSplit};

/// Dense index into the entity catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

/// Dense index into the relation catalog (base relations first, then their inverses).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// Identifier as it appears in the triple files.
    pub raw: String,
    pub name: String,
    /// Possibly empty.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub raw: String,
    pub text: String,
    /// For a synthesized inverse relation, the relation it mirrors.
    pub inverse_of: Option<RelationId>,
}

impl Relation {
    pub fn is_inverse(&self) -> bool {
        self.inverse_of.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Relation count before augmentation.
    pub base_relations: usize,
}

/// Counts in the layout of the usual dataset statistics table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}", "Entities", self.entities)?;
        writeln!(f, "{:<14}{:>10}", "Relations", self.relations)?;
        writeln!(f, "{:<14}{:>10}", "Train samples", self.train)?;
        writeln!(f, "{:<14}{:>10}", "Valid samples", self.valid)?;
        write!(f, "{:<14}{:>10}", "Test samples", self.test)
    }
}

impl KnowledgeGraph {
    pub fn is_augmented(&self) -> bool {
        self.relations.len() > self.base_relations
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Triple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    /// Triples of a split whose relation is not a synthesized inverse.
    pub fn base_triples(&self, split: Split) -> impl Iterator<Item = &Triple> + '_ {
        self.split(split)
            .iter()
            .filter(move |t| t.relation.index() < self.base_relations)
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> + '_ {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Inverse of a base relation. `None` before augmentation.
    pub fn inverse(&self, relation: RelationId) -> Option<RelationId> {
        if !self.is_augmented() {
            return None;
        }
        let idx = relation.index();
        if idx < self.base_relations {
            Some(RelationId((idx + self.base_relations) as u32))
        } else {
            self.relations[idx].inverse_of
        }
    }

    /// Counts over base relations and original triples, independent of augmentation.
    pub fn stats(&self) -> GraphStats {
        GraphStats {
            entities: self.entities.len(),
            relations: self.base_relations,
            train: self.base_triples(Split::Train).count(),
            valid: self.base_triples(Split::Valid).count(),
            test: self.base_triples(Split::Test).count(),
        }
    }

    pub fn entity_by_raw(&self, raw: &str) -> Option<EntityId> {
        self.entities
            .binary_search_by(|e| e.raw.as_str().cmp(raw))
            .ok()
            .map(|i| EntityId(i as u32))
    }

    /// Looks a relation up by raw identifier or by its text.
    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r.raw == name || r.text == name)
            .map(|i| RelationId(i as u32))
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.index()]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.index()]
    }

    /// `index\traw\tname` lines in id order.
    pub fn entity_catalog(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entities.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{}\n", e.raw, e.name));
        }
        out
    }

    /// `index\traw\ttext` lines in id order, inverses included.
    pub fn relation_catalog(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.relations.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{}\n", r.raw, r.text));
        }
        out
    }
}
