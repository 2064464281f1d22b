//! Dataset readers and writers (JSONL / TSV) and a synthetic pair generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::contrastive::PairExample;
use crate::error::{Error, Result};

/// Relevance judgments: query id → relevant document ids.
pub type QRels = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    x: String,
    y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    negatives: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct LabeledText {
    pub text: String,
    #[serde(deserialize_with = "string_or_number")]
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct SimilarityPair {
    pub a: String,
    pub b: String,
    pub score: f64,
}

/// A label name and the text used to embed it for zero-shot classification.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct LabelDescription {
    #[serde(deserialize_with = "string_or_number")]
    pub label: String,
    pub description: String,
}

fn string_or_number<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        S(String),
        N(serde_json::Number),
    }
    Ok(match Either::deserialize(d)? {
        Either::S(s) => s,
        Either::N(n) => n.to_string(),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Parses one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::container::write_atomic(path, &buf)
}

/// Training pairs from `{"x", "y", "negatives"?, "id"?}` lines. Missing ids
/// become the zero-based line ordinal.
pub fn read_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let records: Vec<PairRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.x.is_empty() || r.y.is_empty() {
                return Err(Error::Data(format!("{}: pair {i} has an empty side", path.display())));
            }
            Ok(PairExample {
                x: r.x,
                y: r.y,
                hard_negatives: r.negatives.unwrap_or_default(),
                pair_id: r.id.unwrap_or_else(|| i.to_string()),
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[PairExample]) -> Result<()> {
    let records: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            x: p.x.clone(),
            y: p.y.clone(),
            negatives: (!p.hard_negatives.is_empty()).then(|| p.hard_negatives.clone()),
            id: Some(p.pair_id.clone()),
        })
        .collect();
    write_jsonl(path, &records)
}

/// `query_id <TAB> doc_id <TAB> relevance` lines; relevance > 0 counts as
/// relevant. A first line whose relevance column is not numeric is a header.
pub fn read_qrels(path: &Path) -> Result<QRels> {
    let mut qrels = QRels::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected 3 tab-separated columns",
                path.display(),
                n + 1
            )));
        }
        let rel: f64 = match cols[2].parse() {
            Ok(v) => v,
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "{}:{}: relevance {:?} is not a number",
                    path.display(),
                    n + 1,
                    cols[2]
                )))
            }
        };
        let entry = qrels.entry(cols[0].to_string()).or_default();
        if rel > 0.0 {
            entry.insert(cols[1].to_string());
        }
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &QRels) -> Result<()> {
    let mut s = String::from("query-id\tcorpus-id\tscore\n");
    for (q, docs) in qrels {
        for d in docs {
            s.push_str(&format!("{q}\t{d}\t1\n"));
        }
    }
    crate::container::write_atomic(path, s.as_bytes())
}

/// Parameters for [`synthetic_pairs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: Vec<u8>,
    /// Per-character substitution probability turning x into y.
    pub noise: f64,
    /// Pairs per family. Members of a family share a base string and differ
    /// in `family_edits` positions, which makes them hard negatives for each other.
    pub family_size: usize,
    pub family_edits: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_pairs: 2000,
            min_len: 8,
            max_len: 16,
            alphabet: (b'a'..=b'z').collect(),
            noise: 0.1,
            family_size: 1,
            family_edits: 0,
            seed: 0,
        }
    }
}

/// Pairs where `y` is a character-noised copy of `x`, shuffled.
pub fn synthetic_pairs(spec: &SyntheticSpec) -> Vec<PairExample> {
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len && !spec.alphabet.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let family_size = spec.family_size.max(1);
    let mut xs: Vec<Vec<u8>> = Vec::with_capacity(spec.n_pairs);
    let mut seen = BTreeSet::new();
    while xs.len() < spec.n_pairs {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let base: Vec<u8> = (0..len).map(|_| *spec.alphabet.choose(&mut rng).unwrap()).collect();
        for _ in 0..family_size {
            if xs.len() == spec.n_pairs {
                break;
            }
            let mut member = base.clone();
            if family_size > 1 {
                for _ in 0..spec.family_edits {
                    let at = rng.random_range(0..member.len());
                    member[at] = *spec.alphabet.choose(&mut rng).unwrap();
                }
            }
            if seen.insert(member.clone()) {
                xs.push(member);
            }
        }
    }
    xs.shuffle(&mut rng);
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| {
            let y: Vec<u8> = x
                .iter()
                .map(|&c| {
                    if rng.random_bool(spec.noise) {
                        *spec.alphabet.choose(&mut rng).unwrap()
                    } else {
                        c
                    }
                })
                .collect();
            PairExample::new(
                format!("p{i}"),
                String::from_utf8_lossy(&x).into_owned(),
                String::from_utf8_lossy(&y).into_owned(),
            )
        })
        .collect()
}

/// Turns held-out pairs into a retrieval task: each `x` is a query whose only
/// relevant document is its own `y`.
pub fn pairs_to_retrieval(pairs: &[PairExample]) -> (Vec<TextRecord>, Vec<TextRecord>, QRels) {
    let queries = pairs
        .iter()
        .map(|p| TextRecord {
            id: p.pair_id.clone(),
            text: p.x.clone(),
        })
        .collect();
    let corpus = pairs
        .iter()
        .map(|p| TextRecord {
            id: p.pair_id.clone(),
            text: p.y.clone(),
        })
        .collect();
    let qrels = pairs
        .iter()
        .map(|p| (p.pair_id.clone(), BTreeSet::from([p.pair_id.clone()])))
        .collect();
    (queries, corpus, qrels)
}
