//! Deterministic synthetic data: typed concepts with lexically unrelated
//! synonyms, a corpus whose contexts carry concept and type cues, a
//! type-coherent knowledge graph, and a small relatedness list.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::KnowledgeGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub concepts: usize,
    pub synonyms: usize,
    pub types: usize,
    /// Sentences generated per synonym.
    pub sentences_per_term: usize,
    pub cue_words_per_concept: usize,
    pub cue_words_per_type: usize,
    pub generic_words: usize,
    pub sentence_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            concepts: 40,
            synonyms: 5,
            types: 4,
            sentences_per_term: 4,
            cue_words_per_concept: 3,
            cue_words_per_type: 4,
            generic_words: 30,
            sentence_len: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConcept {
    pub id: String,
    pub semantic_type: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub concepts: Vec<SyntheticConcept>,
    /// One document per line.
    pub corpus: String,
    /// Every distinct word, sorted.
    pub words: Vec<String>,
    pub graph: KnowledgeGraph,
    /// `(term_a, term_b, score)` on a 0–4 scale.
    pub relatedness: Vec<(String, String, f64)>,
}

impl SyntheticData {
    /// `concept_id<TAB>term` lines.
    pub fn dictionary_tsv(&self) -> String {
        let mut s = String::new();
        for c in &self.concepts {
            for t in &c.terms {
                let _ = writeln!(s, "{}\t{}", c.id, t);
            }
        }
        s
    }

    /// `concept_id<TAB>type` lines.
    pub fn types_tsv(&self) -> String {
        let mut s = String::new();
        for c in &self.concepts {
            let _ = writeln!(s, "{}\t{}", c.id, c.semantic_type);
        }
        s
    }

    pub fn relatedness_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b, v) in &self.relatedness {
            let _ = writeln!(s, "{a}\t{b}\t{v}");
        }
        s
    }

    /// Vocabulary file content: one word per line.
    pub fn words_txt(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }
}

const ONSETS: [&str; 14] = [
    "b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

struct WordMaker {
    used: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut wm = WordMaker {
        used: HashSet::new(),
    };

    let generic: Vec<String> = (0..config.generic_words)
        .map(|_| wm.make(&mut rng, 2))
        .collect();
    let type_cues: Vec<Vec<String>> = (0..config.types)
        .map(|_| {
            (0..config.cue_words_per_type)
                .map(|_| wm.make(&mut rng, 2))
                .collect()
        })
        .collect();
    let mut concepts = Vec::with_capacity(config.concepts);
    let mut concept_cues = Vec::with_capacity(config.concepts);
    for c in 0..config.concepts {
        let terms = (0..config.synonyms)
            .map(|s| {
                // Every fifth synonym is a two-word term.
                if s % 5 == 4 {
                    format!("{} {}", wm.make(&mut rng, 3), wm.make(&mut rng, 2))
                } else {
                    wm.make(&mut rng, 3)
                }
            })
            .collect();
        concepts.push(SyntheticConcept {
            id: format!("C{:04}", c + 1),
            semantic_type: format!("T{}", c % config.types),
            terms,
        });
        concept_cues.push(
            (0..config.cue_words_per_concept)
                .map(|_| wm.make(&mut rng, 3))
                .collect::<Vec<_>>(),
        );
    }

    let mut lines = Vec::new();
    for (ci, c) in concepts.iter().enumerate() {
        let ty = ci % config.types;
        for term in &c.terms {
            for _ in 0..config.sentences_per_term {
                let mut words: Vec<String> = Vec::with_capacity(config.sentence_len + 2);
                for _ in 0..config.sentence_len {
                    let r: f64 = rng.random();
                    let w = if r < 0.35 {
                        concept_cues[ci].choose(&mut rng).unwrap()
                    } else if r < 0.6 {
                        type_cues[ty].choose(&mut rng).unwrap()
                    } else {
                        generic.choose(&mut rng).unwrap()
                    };
                    words.push(w.clone());
                }
                let at = rng.random_range(0..=words.len());
                words.insert(at, term.clone());
                lines.push(words.join(" "));
            }
        }
    }
    lines.shuffle(&mut rng);
    let mut corpus = lines.join("\n");
    corpus.push('\n');

    let mut words: Vec<String> = wm.used.into_iter().collect();
    words.sort();

    let mut graph = KnowledgeGraph::new();
    for t in 0..config.types {
        let members: Vec<&SyntheticConcept> =
            concepts.iter().skip(t).step_by(config.types).collect();
        let hub = format!("TYPE_{t}");
        for (i, c) in members.iter().enumerate() {
            graph.add(&c.id, "isa", &hub);
            if members.len() > 1 {
                let next = members[(i + 1) % members.len()];
                graph.add(&c.id, "assoc", &next.id);
            }
            if members.len() > 3 {
                let far = members[(i + 3) % members.len()];
                graph.add(&c.id, "cooccurs", &far.id);
            }
        }
    }

    let mut relatedness = Vec::new();
    let mut seen = HashSet::new();
    for (i, c) in concepts.iter().enumerate() {
        let partners = [
            (i, 4.0),
            ((i + config.types) % concepts.len(), 2.5),
            ((i + 1) % concepts.len(), 1.0),
        ];
        for (j, score) in partners {
            let a = c.terms[0].clone();
            let b = if j == i {
                c.terms[1 % c.terms.len()].clone()
            } else {
                concepts[j].terms[0].clone()
            };
            if a == b {
                continue;
            }
            let key = if a < b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if seen.insert(key) {
                relatedness.push((a, b, score));
            }
        }
    }

    SyntheticData {
        concepts,
        corpus,
        words,
        graph,
        relatedness,
    }
}

/// Deterministic 20-entity, 2-relation, 100-triple graph: four groups of
/// five with a `next` cycle inside each group and all within-group
/// `sibling` links.
pub fn toy_graph_20() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    let name = |i: usize| format!("e{i:02}");
    for i in 0..20 {
        g.intern_entity(&name(i));
    }
    for i in 0..20 {
        let base = i / 5 * 5;
        g.add(&name(i), "next", &name(base + (i + 1) % 5));
        for j in base..base + 5 {
            if j != i {
                g.add(&name(i), "sibling", &name(j));
            }
        }
    }
    g
}
