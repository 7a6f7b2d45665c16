//! Seeded toy corpus of triple sets with template verbalisations.
//!
//! Small enough to overfit in minutes, with multi-token entities, repeated
//! entities across triples (so R5 edges occur) and a closed vocabulary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{Example, Triple};

const ENTITIES: &[&str] = &[
    "Alba", "Brevik", "Castor Bay", "Dunmore", "Elm River", "Fenwick", "Glen Arbor", "Halden",
    "Iver", "Juniper Hill", "Kestrel", "Lorne", "Marsh End", "North Vale", "Oakridge", "Pell",
    "Quarry Town", "Rhosyn", "Stone Cross", "Tarn", "Upton Mill", "Vessa", "Wyre", "Yarrow Point",
    "Zell am See", "Ada Marsh", "Bruno Kettle", "Clara Voss", "Dmitri Pell", "Edith Crane",
    "Felix Ardent", "Greta Lind", "Hugo Stern", "Ines Moreau", "the Blue Line", "Saint Oda College",
    "Red Harbour FC", "the Ashwood Bridge", "Mount Sorrel", "Lake Imber",
];

/// Relation label and its sentence template.
const RELATIONS: &[(&str, &str)] = &[
    ("capital", "The capital of {H} is {T} ."),
    ("country", "{H} is located in {T} ."),
    ("leader_name", "{H} is led by {T} ."),
    ("birth_place", "{H} was born in {T} ."),
    ("architect", "{H} was designed by {T} ."),
    ("ground", "{H} play their home games at {T} ."),
    ("founder", "{H} was founded by {T} ."),
    ("river", "The river {T} flows through {H} ."),
    ("language", "The language spoken in {H} is {T} ."),
    ("alma_mater", "{H} studied at {T} ."),
];

const LANGUAGES: &[&str] = &["Arabic", "Old Norse", "Basque", "Welsh"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_examples: usize,
    pub min_triples: usize,
    pub max_triples: usize,
    /// Chance that a later triple reuses an entity already in the set.
    pub share_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_examples: 32,
            min_triples: 1,
            max_triples: 3,
            share_prob: 0.5,
            seed: 123,
        }
    }
}

pub fn generate_corpus(cfg: &SyntheticConfig) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lo = cfg.min_triples.max(1);
    let hi = cfg.max_triples.max(lo);
    (0..cfg.num_examples).map(|_| generate_example(&mut rng, lo, hi, cfg.share_prob)).collect()
}

fn generate_example(rng: &mut impl Rng, lo: usize, hi: usize, share_prob: f64) -> Example {
    let n = rng.gen_range(lo..=hi);
    let mut used: Vec<&str> = Vec::new();
    let mut rels: Vec<usize> = (0..RELATIONS.len()).collect();
    rels.shuffle(rng);
    let mut triples = Vec::with_capacity(n);
    let mut sentences = Vec::with_capacity(n);
    for &r in rels.iter().take(n) {
        let (label, template) = RELATIONS[r];
        let head = if !used.is_empty() && rng.gen_bool(share_prob) {
            *used.choose(rng).expect("non-empty")
        } else {
            pick_fresh(rng, ENTITIES, &used)
        };
        if !used.contains(&head) {
            used.push(head);
        }
        let tail = if label == "language" {
            *LANGUAGES.choose(rng).expect("non-empty")
        } else {
            let others: Vec<&str> = used.iter().copied().filter(|e| *e != head).collect();
            if !others.is_empty() && rng.gen_bool(share_prob / 2.0) {
                *others.choose(rng).expect("non-empty")
            } else {
                let mut exclude = used.clone();
                exclude.push(head);
                pick_fresh(rng, ENTITIES, &exclude)
            }
        };
        if !used.contains(&tail) {
            used.push(tail);
        }
        triples.push(Triple {
            head: head.to_string(),
            relation: label.to_string(),
            tail: tail.to_string(),
        });
        sentences.push(template.replace("{H}", head).replace("{T}", tail));
    }
    Example {
        triples,
        target_text: sentences.join(" "),
    }
}

fn pick_fresh<'a>(rng: &mut impl Rng, pool: &[&'a str], exclude: &[&str]) -> &'a str {
    let free: Vec<&'a str> = pool.iter().copied().filter(|e| !exclude.contains(e)).collect();
    free.choose(rng).expect("entity pool larger than any triple set")
}
