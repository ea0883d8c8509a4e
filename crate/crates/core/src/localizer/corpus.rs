//! Template-generated training corpus: attribute alias × adjective ×
//! intensifier × sentence frame, plus two-attribute requests and a slice of
//! pure chat with no labels.

use std::io::{self, BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::taxonomy::{LabelSpec, Taxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub text: String,
    pub labels: Vec<String>,
}

/// Templates use `{attr}`, `{adj}` and `{int}` placeholders; pair frames use
/// `{attr1}`, `{adj1}`, `{attr2}`, `{adj2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub size: usize,
    pub pair_fraction: f64,
    pub chat_fraction: f64,
    pub seed: u64,
    pub frames: Vec<String>,
    pub pair_frames: Vec<String>,
    pub intensifiers: Vec<String>,
    pub chat: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            size: 10_000,
            pair_fraction: 0.2,
            chat_fraction: 0.05,
            seed: 7,
            frames: strings(&[
                "make the {attr} {int} {adj}",
                "make her {attr} {int} {adj}",
                "make his {attr} {int} {adj}",
                "i want {int} {adj} {attr}",
                "give her {int} {adj} {attr}",
                "give him {int} {adj} {attr}",
                "can you make the {attr} {int} {adj}",
                "the {attr} should be {int} {adj}",
                "{int} {adj} {attr} please",
                "could the {attr} be {int} {adj}",
                "try {int} {adj} {attr}",
                "i'd like the {attr} {int} {adj}",
                "let's go with {int} {adj} {attr}",
                "change the {attr} so it looks {int} {adj}",
            ]),
            pair_frames: strings(&[
                "make the {attr1} {adj1} and the {attr2} {adj2}",
                "{adj1} {attr1} and {adj2} {attr2}",
                "give her {adj1} {attr1} and {adj2} {attr2}",
                "i want {adj1} {attr1}, also {adj2} {attr2}",
                "make the {attr1} {adj1}, then make the {attr2} {adj2}",
            ]),
            intensifiers: strings(&["", "", "slightly", "a bit", "a little", "very", "much", "way", "somewhat"]),
            chat: strings(&[
                "hello there",
                "hi",
                "thanks, that looks great",
                "what can you do",
                "how are you today",
                "that's perfect",
                "nice work",
                "ok",
                "show me what you have",
                "i like it",
            ]),
        }
    }
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn pick_attr<'a>(label: &'a LabelSpec, rng: &mut ChaCha8Rng) -> (&'a str, &'a str) {
    let alias = label.aliases.choose(rng).map(String::as_str).unwrap_or(&label.phrase);
    let adjs: Vec<&str> = label.adjectives().collect();
    (alias, adjs.choose(rng).copied().unwrap_or("different"))
}

/// Deterministic corpus over the labels of `taxonomy`.
pub fn generate(taxonomy: &Taxonomy, cfg: &CorpusConfig) -> Vec<CorpusExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = &taxonomy.labels;
    let mut out = Vec::with_capacity(cfg.size);
    if labels.is_empty() {
        return out;
    }
    while out.len() < cfg.size {
        let roll: f64 = rng.random();
        if roll < cfg.chat_fraction && !cfg.chat.is_empty() {
            let text = cfg.chat.choose(&mut rng).unwrap().clone();
            out.push(CorpusExample { text, labels: Vec::new() });
        } else if roll < cfg.chat_fraction + cfg.pair_fraction && labels.len() >= 2 && !cfg.pair_frames.is_empty() {
            let two: Vec<&LabelSpec> = labels.choose_multiple(&mut rng, 2).collect();
            let (a1, j1) = pick_attr(two[0], &mut rng);
            let (a2, j2) = pick_attr(two[1], &mut rng);
            let frame = cfg.pair_frames.choose(&mut rng).unwrap();
            let text = frame.replace("{attr1}", a1).replace("{adj1}", j1).replace("{attr2}", a2).replace("{adj2}", j2);
            let mut l = vec![two[0].key.clone(), two[1].key.clone()];
            l.sort();
            out.push(CorpusExample { text: collapse(&text), labels: l });
        } else {
            let label = labels.choose(&mut rng).unwrap();
            let (attr, adj) = pick_attr(label, &mut rng);
            let int = cfg.intensifiers.choose(&mut rng).map(String::as_str).unwrap_or("");
            let frame = cfg.frames.choose(&mut rng).unwrap();
            let text = frame.replace("{attr}", attr).replace("{adj}", adj).replace("{int}", int);
            out.push(CorpusExample { text: collapse(&text), labels: vec![label.key.clone()] });
        }
    }
    out
}

/// Splits off the last `fraction` of a seeded shuffle as a held-out set.
pub fn split_holdout(corpus: &[CorpusExample], fraction: f64, seed: u64) -> (Vec<CorpusExample>, Vec<CorpusExample>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((corpus.len() as f64) * fraction).round() as usize;
    let (train, test) = idx.split_at(corpus.len() - n_test);
    (train.iter().map(|&i| corpus[i].clone()).collect(), test.iter().map(|&i| corpus[i].clone()).collect())
}

/// Negative control: keeps the texts but permutes the label sets.
pub fn shuffle_labels(corpus: &[CorpusExample], seed: u64) -> Vec<CorpusExample> {
    let mut labels: Vec<Vec<String>> = corpus.iter().map(|e| e.labels.clone()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    corpus.iter().zip(labels).map(|(e, labels)| CorpusExample { text: e.text.clone(), labels }).collect()
}

pub fn write_jsonl<W: Write>(mut w: W, corpus: &[CorpusExample]) -> io::Result<()> {
    for ex in corpus {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Vec<CorpusExample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
