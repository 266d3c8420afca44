//! Synthetic 2-hop reasoning task over a random typed knowledge graph.
//!
//! Each question names a source entity; the gold choice lies exactly two hops
//! away (one hop when no 2-hop entity exists) and every distractor is more than
//! two hops away, preferably exactly three, so only graph connectivity
//! separates the choices.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{dump_dataset, QaInstance};
use crate::error::{GsapError, Result};
use crate::knowledge::{ParaphraseDict, Triple, TripleStore};

const CONSONANTS: &[u8] = b"bdfgklmnprtvz";
const VOWELS: &[u8] = b"aeiou";
const TYPES: [&str; 4] = ["creature", "place", "tool", "substance"];
/// `(relation, head type, tail type)`.
const RELATIONS: [(&str, usize, usize); 8] = [
    ("AtLocation", 0, 1),
    ("UsedFor", 2, 0),
    ("MadeOf", 2, 3),
    ("Desires", 0, 3),
    ("LocatedNear", 1, 1),
    ("CapableOf", 0, 2),
    ("PartOf", 3, 2),
    ("HasA", 1, 3),
];
const TEMPLATES: [&str; 4] = [
    "what is two steps away from {} ?",
    "starting from {} , where do you end up ?",
    "which thing is connected to {} through another ?",
    "{} leads to what ?",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub choices: usize,
    pub kg_size: usize,
    /// Out-edges drawn per entity.
    pub out_degree: usize,
    /// Prefer distractors exactly three hops from the source.
    pub near_distractors: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, n_train: 500, n_dev: 200, choices: 4, kg_size: 400, out_degree: 1, near_distractors: true }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<QaInstance>,
    pub dev: Vec<QaInstance>,
    pub store: TripleStore,
    pub paraphrases: ParaphraseDict,
}

fn entity_names<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name: String = (0..3)
            .flat_map(|_| [*CONSONANTS.choose(rng).unwrap() as char, *VOWELS.choose(rng).unwrap() as char])
            .collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

impl SynthData {
    /// Writes `train.jsonl`, `dev.jsonl`, `triples.tsv` and `paraphrases.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GsapError::io(dir, e))?;
        dump_dataset(&dir.join("train.jsonl"), &self.train)?;
        dump_dataset(&dir.join("dev.jsonl"), &self.dev)?;
        let triples: String =
            self.store.triples().iter().map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail)).collect();
        let path = dir.join("triples.tsv");
        fs::write(&path, triples).map_err(|e| GsapError::io(&path, e))?;
        let defs: String = self.paraphrases.iter().map(|(e, d)| format!("{e}\t{d}\n")).collect();
        let path = dir.join("paraphrases.tsv");
        fs::write(&path, defs).map_err(|e| GsapError::io(&path, e))
    }
}

/// Undirected hop distances from `src`, capped at `limit + 1`.
pub fn hop_distances(store: &TripleStore, src: &str, limit: usize) -> BTreeMap<String, usize> {
    let mut dist = BTreeMap::from([(src.to_string(), 0)]);
    let mut queue = VecDeque::from([src.to_string()]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d >= limit {
            continue;
        }
        for (_, v) in store.neighbors(&u) {
            if !dist.contains_key(v) {
                dist.insert(v.to_string(), d + 1);
                queue.push_back(v.to_string());
            }
        }
    }
    dist
}

/// Deterministic in `cfg`. Panics when `choices < 2` or the graph is too
/// small to supply distractors.
pub fn generate_synthetic(cfg: &SynthConfig) -> SynthData {
    assert!(cfg.choices >= 2, "need at least two choices");
    assert!(cfg.n_train + cfg.n_dev >= 1, "need at least one instance");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = entity_names(cfg.kg_size, &mut rng);
    let types: Vec<usize> = (0..cfg.kg_size).map(|i| i % TYPES.len()).collect();
    let by_type: Vec<Vec<usize>> =
        (0..TYPES.len()).map(|t| (0..cfg.kg_size).filter(|&i| types[i] == t).collect()).collect();

    let mut triples = Vec::new();
    for h in 0..cfg.kg_size {
        let rels: Vec<_> = RELATIONS.iter().filter(|r| r.1 == types[h]).collect();
        for _ in 0..cfg.out_degree {
            let (rel, _, tt) = **rels.choose(&mut rng).unwrap();
            let t = *by_type[tt].choose(&mut rng).unwrap();
            if t != h {
                triples.push(Triple::new(&names[h], rel, &names[t]));
            }
        }
    }
    let store = TripleStore::from_triples(triples);

    let mut paraphrases = ParaphraseDict::new();
    for (i, n) in names.iter().enumerate() {
        let other = names.choose(&mut rng).unwrap();
        paraphrases.insert(n, &format!("{n} is a {} often mentioned with {other}", TYPES[types[i]]));
    }

    let total = cfg.n_train + cfg.n_dev;
    let mut instances = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..cfg.kg_size).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    while instances.len() < total {
        let src = &names[order[cursor % order.len()]];
        cursor += 1;
        assert!(cursor <= 50 * order.len() + total, "knowledge graph too sparse for the requested task");
        let dist = hop_distances(&store, src, 3);
        let two: Vec<&String> = dist.iter().filter(|(_, &d)| d == 2).map(|(e, _)| e).collect();
        let one: Vec<&String> = dist.iter().filter(|(_, &d)| d == 1).map(|(e, _)| e).collect();
        let gold = match (two.choose(&mut rng), one.choose(&mut rng)) {
            (Some(g), _) | (None, Some(g)) => (*g).clone(),
            _ => continue,
        };
        let far: Vec<&String> = names.iter().filter(|n| dist.get(*n).is_none_or(|&d| d > 2)).collect();
        if far.len() < cfg.choices - 1 {
            continue;
        }
        let three: Vec<&String> = far.iter().copied().filter(|n| dist.get(*n) == Some(&3)).collect();
        let mut choices: Vec<String> = if cfg.near_distractors {
            three.choose_multiple(&mut rng, cfg.choices - 1).map(|s| (*s).clone()).collect()
        } else {
            Vec::new()
        };
        let rest: Vec<&String> = far.iter().copied().filter(|n| !choices.contains(n)).collect();
        let missing = cfg.choices - 1 - choices.len();
        choices.extend(rest.choose_multiple(&mut rng, missing).map(|s| (*s).clone()));
        // answer positions cycle so every split is balanced
        let answer = instances.len() % cfg.choices;
        choices.insert(answer, gold);
        let template = TEMPLATES.choose(&mut rng).unwrap();
        let i = instances.len();
        instances.push(QaInstance {
            id: if i < cfg.n_train { format!("train-{i}") } else { format!("dev-{}", i - cfg.n_train) },
            question: template.replace("{}", src),
            choices,
            answer,
        });
    }
    let dev = instances.split_off(cfg.n_train);
    SynthData { train: instances, dev, store, paraphrases }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::extract_topic_entities;

    fn small() -> SynthConfig {
        SynthConfig { seed: 3, n_train: 40, n_dev: 20, choices: 4, kg_size: 200, out_degree: 1, near_distractors: true }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small());
        let b = generate_synthetic(&small());
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.store.triples(), b.store.triples());
    }

    #[test]
    fn gold_reachable_distractors_not() {
        let d = generate_synthetic(&small());
        for q in d.train.iter().chain(&d.dev) {
            q.validate().unwrap();
            let topics = extract_topic_entities(&q.question, &q.choices, &d.store).unwrap();
            assert_eq!(topics.question.len(), 1, "{}", q.question);
            let dist = hop_distances(&d.store, &topics.question[0], 2);
            for (i, c) in q.choices.iter().enumerate() {
                assert_eq!(dist.contains_key(c), i == q.answer, "{q:?}");
            }
        }
    }

    #[test]
    fn files_round_trip() {
        let d = generate_synthetic(&small());
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let store = TripleStore::load(&dir.path().join("triples.tsv")).unwrap();
        assert_eq!(store.triples(), d.store.triples());
        let defs = ParaphraseDict::load(&dir.path().join("paraphrases.tsv")).unwrap();
        assert_eq!(defs.len(), d.paraphrases.len());
        let dev = crate::dataset::load_dataset(&dir.path().join("dev.jsonl")).unwrap();
        assert_eq!(dev.instances, d.dev);
    }

    #[test]
    fn minimal_instance() {
        let d = generate_synthetic(&SynthConfig { n_train: 1, n_dev: 0, choices: 2, ..small() });
        assert_eq!(d.train.len(), 1);
        assert!(d.train[0].answer < 2);
        assert!(d.dev.is_empty());
    }

    #[test]
    fn answers_balanced() {
        let d = generate_synthetic(&small());
        let mut counts = [0; 4];
        for q in &d.dev {
            counts[q.answer] += 1;
        }
        assert!(counts.iter().all(|&c| c == 5), "{counts:?}");
    }
}
