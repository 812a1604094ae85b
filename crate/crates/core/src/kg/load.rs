use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use tracing::warn;

use super::{Entity, KnowledgeGraph, Relation, Split, Triple};
use crate::{Error, Result};

const ENTITY_TEXT: &str = "entity2text.tsv";
const ENTITY_LONG_TEXT: &str = "entity2textlong.tsv";
const RELATION_TEXT: &str = "relation2text.tsv";

type RawTriple = (String, String, String);

/// Loads `train.tsv`, `valid.tsv`, `test.tsv` and the optional text files from `dir`.
///
/// The catalogs hold every identifier that occurs in any split, indexed in lexicographic
/// order of the raw identifier. `entity2text.tsv` supplies entity names and
/// `entity2textlong.tsv` their descriptions; identifiers without text fall back to the
/// raw identifier as name and an empty description.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile {
            path: dir.to_path_buf(),
        });
    }

    let mut splits: Vec<Vec<RawTriple>> = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        if !path.is_file() {
            return Err(Error::MissingFile { path });
        }
        let rows = read_rows(&path, 3)?;
        splits.push(
            rows.into_iter()
                .map(|mut f| {
                    let t = f.pop().unwrap();
                    let r = f.pop().unwrap();
                    let h = f.pop().unwrap();
                    (h, r, t)
                })
                .collect(),
        );
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();

    let names = read_optional_map(&dir.join(ENTITY_TEXT))?;
    let descriptions = read_optional_map(&dir.join(ENTITY_LONG_TEXT))?;
    let relation_text = read_optional_map(&dir.join(RELATION_TEXT))?;

    Ok(from_raw_parts(
        &train,
        &valid,
        &test,
        &names,
        &descriptions,
        &relation_text,
    ))
}

impl KnowledgeGraph {
    /// Builds a graph from raw identifier triples without any text files.
    pub fn from_raw<S: AsRef<str>>(
        train: &[(S, S, S)],
        valid: &[(S, S, S)],
        test: &[(S, S, S)],
    ) -> KnowledgeGraph {
        let own = |v: &[(S, S, S)]| -> Vec<RawTriple> {
            v.iter()
                .map(|(h, r, t)| {
                    (
                        h.as_ref().to_string(),
                        r.as_ref().to_string(),
                        t.as_ref().to_string(),
                    )
                })
                .collect()
        };
        let empty = HashMap::new();
        from_raw_parts(
            &own(train),
            &own(valid),
            &own(test),
            &empty,
            &empty,
            &empty,
        )
    }

    /// Replaces entity texts; keys are raw identifiers.
    pub fn set_entity_text(&mut self, raw: &str, name: &str, description: &str) -> bool {
        match self.entity_by_raw(raw) {
            Some(id) => {
                let e = &mut self.entities[id.index()];
                e.name = name.to_string();
                e.description = description.to_string();
                true
            }
            None => false,
        }
    }
}

fn from_raw_parts(
    train: &[RawTriple],
    valid: &[RawTriple],
    test: &[RawTriple],
    names: &HashMap<String, String>,
    descriptions: &HashMap<String, String>,
    relation_text: &HashMap<String, String>,
) -> KnowledgeGraph {
    let mut entity_ids = BTreeSet::new();
    let mut relation_ids = BTreeSet::new();
    for (h, r, t) in train.iter().chain(valid).chain(test) {
        entity_ids.insert(h.as_str());
        entity_ids.insert(t.as_str());
        relation_ids.insert(r.as_str());
    }

    let mut missing_text = 0usize;
    let entities: Vec<Entity> = entity_ids
        .iter()
        .map(|raw| {
            let name = names.get(*raw).cloned().unwrap_or_else(|| {
                missing_text += 1;
                raw.to_string()
            });
            Entity {
                raw: raw.to_string(),
                name,
                description: descriptions.get(*raw).cloned().unwrap_or_default(),
            }
        })
        .collect();
    if !names.is_empty() && missing_text > 0 {
        warn!(
            count = missing_text,
            "entities without text; using their identifiers"
        );
    }
    let unused = names.keys().filter(|k| !entity_ids.contains(k.as_str())).count();
    if unused > 0 {
        warn!(count = unused, "entity text entries not referenced by any triple");
    }

    let relations: Vec<Relation> = relation_ids
        .iter()
        .map(|raw| Relation {
            raw: raw.to_string(),
            text: relation_text
                .get(*raw)
                .cloned()
                .unwrap_or_else(|| raw.to_string()),
            inverse_of: None,
        })
        .collect();

    let entity_index: HashMap<&str, u32> = entity_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i as u32))
        .collect();
    let relation_index: HashMap<&str, u32> = relation_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i as u32))
        .collect();

    let index_split = |raw: &[RawTriple], split: Split| -> Vec<Triple> {
        let mut seen = HashSet::with_capacity(raw.len());
        let mut out = Vec::with_capacity(raw.len());
        for (h, r, t) in raw {
            let triple = Triple::new(
                entity_index[h.as_str()],
                relation_index[r.as_str()],
                entity_index[t.as_str()],
            );
            if seen.insert(triple) {
                out.push(triple);
            }
        }
        if out.len() < raw.len() {
            warn!(
                split = split.name(),
                dropped = raw.len() - out.len(),
                "duplicate triples removed"
            );
        }
        out
    };

    KnowledgeGraph {
        train: index_split(train, Split::Train),
        valid: index_split(valid, Split::Valid),
        test: index_split(test, Split::Test),
        base_relations: relations.len(),
        entities,
        relations,
    }
}

fn read_rows(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let parts: Vec<String> = line.split('\t').map(str::to_string).collect();
        if parts.len() != fields {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                expected: fields,
                found: parts.len(),
            });
        }
        rows.push(parts);
    }
    Ok(rows)
}

fn read_optional_map(path: &Path) -> Result<HashMap<String, String>> {
    if !path.is_file() {
        return Ok(HashMap::new());
    }
    Ok(read_rows(path, 2)?
        .into_iter()
        .map(|mut f| {
            let text = f.pop().unwrap();
            let key = f.pop().unwrap();
            (key, text)
        })
        .collect())
}

/// Parses `index\traw\ttext` catalog lines as written by
/// [`KnowledgeGraph::entity_catalog`]; returns raw identifiers in index order.
pub fn parse_catalog(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: "<catalog>".into(),
                line: i + 1,
                expected: 3,
                found: parts.len(),
            });
        }
        let idx: usize = parts[0].parse().map_err(|_| Error::Parse {
            path: "<catalog>".into(),
            line: i + 1,
            expected: 3,
            found: parts.len(),
        })?;
        if idx != out.len() {
            return Err(Error::Config(format!(
                "catalog line {} carries index {idx}",
                i + 1
            )));
        }
        out.push(parts[1].to_string());
    }
    Ok(out)
}

/// Writes the base (non-inverse) triples of a split as raw identifiers.
pub fn write_split(kg: &KnowledgeGraph, split: Split, dir: &Path) -> Result<()> {
    let path = dir.join(split.file_name());
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut buf = String::new();
    for t in kg.base_triples(split) {
        buf.push_str(&kg.entity(t.head).raw);
        buf.push('\t');
        buf.push_str(&kg.relation(t.relation).raw);
        buf.push('\t');
        buf.push_str(&kg.entity(t.tail).raw);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn toy_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.tsv", "b\tr1\ta\na\tr0\tc\n");
        write(dir.path(), "valid.tsv", "c\tr0\tb\n");
        write(dir.path(), "test.tsv", "d\tr1\ta\n");
        dir
    }

    #[test]
    fn lexicographic_ids_and_counts() {
        let dir = toy_dir();
        write(dir.path(), ENTITY_TEXT, "a\tAlpha\nb\tBeta\nzz\tunused\n");
        write(dir.path(), ENTITY_LONG_TEXT, "a\tfirst letter\n");
        let kg = load_dataset(dir.path()).unwrap();
        let raws: Vec<_> = kg.entities.iter().map(|e| e.raw.as_str()).collect();
        assert_eq!(raws, ["a", "b", "c", "d"]);
        assert_eq!(kg.relations[1].raw, "r1");
        assert_eq!(kg.train[0], Triple::new(1, 1, 0));
        assert_eq!(kg.entities[0].name, "Alpha");
        assert_eq!(kg.entities[0].description, "first letter");
        // no text entry: identifier as name, empty description
        assert_eq!(kg.entities[3].name, "d");
        assert_eq!(kg.entities[3].description, "");
        // test-only entity is still cataloged
        assert_eq!(kg.entity_by_raw("d"), Some(super::super::EntityId(3)));
        let s = kg.stats();
        assert_eq!((s.entities, s.relations, s.train, s.valid, s.test), (4, 2, 2, 1, 1));
    }

    #[test]
    fn missing_split_names_file() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.tsv", "");
        write(dir.path(), "valid.tsv", "");
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("test.tsv"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = toy_dir();
        write(dir.path(), "valid.tsv", "c\tr0\tb\nbroken line\n");
        match load_dataset(dir.path()).unwrap_err() {
            Error::Parse { line, found, .. } => {
                assert_eq!(line, 2);
                assert_eq!(found, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_files_give_empty_graph() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["train.tsv", "valid.tsv", "test.tsv"] {
            write(dir.path(), f, "");
        }
        let kg = load_dataset(dir.path()).unwrap();
        assert_eq!(kg.train.len(), 0);
        assert_eq!(kg.entities.len(), 0);
    }

    #[test]
    fn duplicates_within_split_removed() {
        let dir = toy_dir();
        write(dir.path(), "train.tsv", "b\tr1\ta\nb\tr1\ta\n");
        let kg = load_dataset(dir.path()).unwrap();
        assert_eq!(kg.train.len(), 1);
    }

    #[test]
    fn catalog_round_trip() {
        let kg = load_dataset(toy_dir().path()).unwrap();
        let raws = parse_catalog(&kg.entity_catalog()).unwrap();
        for (i, raw) in raws.iter().enumerate() {
            assert_eq!(kg.entity_by_raw(raw).unwrap().index(), i);
        }
        assert_eq!(raws.len(), kg.entities.len());
    }

    #[test]
    fn write_split_reloads_identically() {
        let kg = load_dataset(toy_dir().path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        for s in Split::ALL {
            write_split(&kg, s, out.path()).unwrap();
        }
        let again = load_dataset(out.path()).unwrap();
        assert_eq!(again.train, kg.train);
        assert_eq!(again.test, kg.test);
    }
}
