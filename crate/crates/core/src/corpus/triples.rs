//! Knowledge graph triples and the seen-entity constrained split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Interned entity/relation names plus the triples over them.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub triples: Vec<Triple>,
    entity_ids: HashMap<String, u32>,
    relation_ids: HashMap<String, u32>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity_id(&self, name: &str) -> Option<u32> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relation_ids.get(name).copied()
    }

    pub fn intern_entity(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len() as u32;
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len() as u32;
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> Triple {
        let t = Triple::new(
            self.intern_entity(head),
            self.intern_relation(relation),
            self.intern_entity(tail),
        );
        self.triples.push(t);
        t
    }

    /// Reads `head<TAB>relation<TAB>tail` lines, appending to this graph.
    /// Returns the triples read from this file.
    pub fn read_tsv(&mut self, path: &Path) -> Result<Vec<Triple>> {
        let mut read = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
            if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Parse {
                    what: "triples",
                    line: i + 1,
                    detail: "expected head<TAB>relation<TAB>tail".into(),
                });
            }
            read.push(self.add(parts[0], parts[1], parts[2]));
        }
        Ok(read)
    }

    pub fn write_tsv(&self, triples: &[Triple], path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for t in triples {
            writeln!(
                f,
                "{}\t{}\t{}",
                self.entities[t.head as usize],
                self.relations[t.relation as usize],
                self.entities[t.tail as usize]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleSplit {
    pub train: Vec<Triple>,
    pub test: Vec<Triple>,
    pub valid: Vec<Triple>,
}

/// Requested split sizes `(test, valid)` for `n` triples.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let test = (n as f64 * ratios.1).round() as usize;
    let valid = (n as f64 * ratios.2).round() as usize;
    (test.min(n), valid.min(n - test.min(n)))
}

/// Seeded train/test/valid split where every entity and relation in test or
/// valid also occurs in train. Triples that would break that stay in train,
/// so train can exceed its ratio.
pub fn split_triples(
    triples: &[Triple],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<TripleSplit> {
    if triples.is_empty() {
        return Err(Error::InvalidInput("no triples to split".into()));
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let (n_test, n_valid) = split_sizes(triples.len(), ratios);

    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // Number of train-pool triples mentioning each entity / relation.
    let mut ent_count: HashMap<u32, usize> = HashMap::new();
    let mut rel_count: HashMap<u32, usize> = HashMap::new();
    for t in triples {
        *ent_count.entry(t.head).or_default() += 1;
        if t.tail != t.head {
            *ent_count.entry(t.tail).or_default() += 1;
        }
        *rel_count.entry(t.relation).or_default() += 1;
    }

    let mut assigned = vec![0u8; triples.len()]; // 0 train, 1 test, 2 valid
    let mut fill = |quota: usize, label: u8, assigned: &mut Vec<u8>| {
        let mut taken = 0;
        for &i in &order {
            if taken == quota {
                break;
            }
            if assigned[i] != 0 {
                continue;
            }
            let t = triples[i];
            let removable =
                ent_count[&t.head] > 1 && ent_count[&t.tail] > 1 && rel_count[&t.relation] > 1;
            if !removable {
                continue;
            }
            *ent_count.get_mut(&t.head).unwrap() -= 1;
            if t.tail != t.head {
                *ent_count.get_mut(&t.tail).unwrap() -= 1;
            }
            *rel_count.get_mut(&t.relation).unwrap() -= 1;
            assigned[i] = label;
            taken += 1;
        }
        taken
    };
    let got_test = fill(n_test, 1, &mut assigned);
    let got_valid = fill(n_valid, 2, &mut assigned);
    if got_test < n_test || got_valid < n_valid {
        log::warn!(
            "graph too small for the seen-entity constraint: test {got_test}/{n_test}, valid {got_valid}/{n_valid}"
        );
    }

    let mut split = TripleSplit {
        train: Vec::new(),
        test: Vec::new(),
        valid: Vec::new(),
    };
    for &i in &order {
        match assigned[i] {
            0 => split.train.push(triples[i]),
            1 => split.test.push(triples[i]),
            _ => split.valid.push(triples[i]),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn check_seen(split: &TripleSplit) {
        let ents: HashSet<u32> = split.train.iter().flat_map(|t| [t.head, t.tail]).collect();
        let rels: HashSet<u32> = split.train.iter().map(|t| t.relation).collect();
        for t in split.test.iter().chain(&split.valid) {
            assert!(ents.contains(&t.head) && ents.contains(&t.tail) && rels.contains(&t.relation));
        }
    }

    #[test]
    fn singleton_relation_forced_into_train() {
        let mut triples: Vec<Triple> = (0..99)
            .map(|i| Triple::new(i % 10, 0, (i + 1) % 10))
            .collect();
        triples.push(Triple::new(3, 1, 4));
        for seed in 0..20 {
            let s = split_triples(&triples, (0.5, 0.3, 0.2), seed).unwrap();
            assert!(s.train.contains(&Triple::new(3, 1, 4)));
            check_seen(&s);
        }
    }

    #[test]
    fn tiny_graph_yields_empty_holdout() {
        let triples = vec![Triple::new(0, 0, 1)];
        let s = split_triples(&triples, (0.9, 0.06, 0.04), 1).unwrap();
        assert_eq!(s.train.len(), 1);
        assert!(s.test.is_empty() && s.valid.is_empty());
    }

    #[test]
    fn bad_ratios_rejected() {
        let triples = vec![Triple::new(0, 0, 1)];
        assert!(split_triples(&triples, (0.5, 0.5, 0.5), 1).is_err());
        assert!(split_triples(&[], (0.9, 0.06, 0.04), 1).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let triples: Vec<Triple> = (0..200)
            .map(|i| Triple::new(i % 17, i % 3, (i * 7) % 17))
            .collect();
        let a = split_triples(&triples, (0.9, 0.06, 0.04), 5).unwrap();
        let b = split_triples(&triples, (0.9, 0.06, 0.04), 5).unwrap();
        assert_eq!(a, b);
    }
}
