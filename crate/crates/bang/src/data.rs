//! Vocabulary, whitespace tokenization, synthetic parallel tasks, and
//! plain-text corpus ingestion.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const SEP: usize = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]", "[SEP]"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-UTF-8 byte at offset {offset}")]
    Utf8 { offset: usize },
    #[error("length range {lo}..={hi} exceeds max positions {max}")]
    LenRange { lo: usize, hi: usize, max: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset line {line}: {msg}")]
    BadLine { line: usize, msg: String },
}

/// Token <-> id bijection with the six reserved specials at fixed ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Frequency-ranked vocabulary (lexicographic tie-break) truncated to
    /// `max_size - 6`, with the specials prepended.
    pub fn build(docs: &[Vec<String>], max_size: usize) -> Result<Self, DataError> {
        if docs.iter().all(|d| d.is_empty()) {
            return Err(DataError::EmptyCorpus);
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for tok in doc {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(SPECIALS.len()))
                .map(|(t, _)| t.to_string()),
        );
        Ok(Self::from_tokens(tokens))
    }

    /// Vocabulary of exactly the given payload tokens after the specials.
    pub fn from_payload(payload: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(payload.iter().cloned());
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        tokenize(line).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(DataError::BadLine {
                line: tokens.len(),
                msg: "vocab file shorter than the reserved specials".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|s| s.to_string()).collect()
}

/// One source/target pair of token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub id: String,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(format!("unknown task kind {other}")),
        }
    }
}

/// A synthetic dataset with disjoint 80/10/10 splits by pair index.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub vocab: Vocabulary,
    pub pairs: Vec<ParallelPair>,
}

impl SynthDataset {
    pub fn train(&self) -> &[ParallelPair] {
        &self.pairs[..self.pairs.len() * 8 / 10]
    }
    pub fn dev(&self) -> &[ParallelPair] {
        let n = self.pairs.len();
        &self.pairs[n * 8 / 10..n * 9 / 10]
    }
    pub fn test(&self) -> &[ParallelPair] {
        let n = self.pairs.len();
        &self.pairs[n * 9 / 10..]
    }
}

/// Deterministic synthetic parallel corpus: copy, reverse, or sort over
/// a payload alphabet `w00..`.
pub fn synth_task(
    kind: TaskKind,
    vocab_payload_size: usize,
    len_range: (usize, usize),
    n_pairs: usize,
    seed: u64,
    max_positions: usize,
) -> Result<SynthDataset, DataError> {
    if len_range.1 > max_positions || len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(DataError::LenRange {
            lo: len_range.0,
            hi: len_range.1,
            max: max_positions,
        });
    }
    let payload: Vec<String> = (0..vocab_payload_size).map(|i| format!("w{i:02}")).collect();
    let vocab = Vocabulary::from_payload(&payload);
    let first = SPECIALS.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let len = rng.gen_range(len_range.0..=len_range.1);
        let src: Vec<usize> = (0..len)
            .map(|_| first + rng.gen_range(0..vocab_payload_size))
            .collect();
        let tgt = match kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.clone();
                t.sort_unstable();
                t
            }
        };
        pairs.push(ParallelPair {
            id: format!("{i:06}"),
            src,
            tgt,
        });
    }
    Ok(SynthDataset { vocab, pairs })
}

/// Tokenized documents, one per non-blank line, in file order.
pub fn ingest_text(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let bytes = std::fs::read(path)?;
    let text = match std::str::from_utf8(&bytes) {
        Ok(t) => t,
        Err(e) => return Err(DataError::Utf8 { offset: e.valid_up_to() }),
    };
    Ok(text
        .replace("\r\n", "\n")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(tokenize)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    id: String,
    src: String,
    tgt: String,
}

/// JSONL dataset format: one {id, src, tgt} object per line with
/// space-joined tokens.
pub fn write_pairs(
    path: &Path,
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let line = PairLine {
            id: p.id.clone(),
            src: vocab.decode(&p.src),
            tgt: vocab.decode(&p.tgt),
        };
        writeln!(f, "{}", serde_json::to_string(&line).unwrap())?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<ParallelPair>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pl: PairLine = serde_json::from_str(line).map_err(|e| DataError::BadLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        pairs.push(ParallelPair {
            id: pl.id,
            src: vocab.encode_line(&pl.src),
            tgt: vocab.encode_line(&pl.tgt),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_then_lex_order() {
        let docs = vec![tokenize("a a b")];
        let v = Vocabulary::build(&docs, 64).unwrap();
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.id("b"), 7);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let docs = vec![tokenize("c a b b a c c"), tokenize("d a")];
        let v1 = Vocabulary::build(&docs, 64).unwrap();
        let v2 = Vocabulary::build(&docs, 64).unwrap();
        assert_eq!(v1.tokens, v2.tokens);
        // c:3, a:3 -> 'a' wins the tie lexicographically
        assert_eq!(v1.id("a"), 6);
        assert_eq!(v1.id("c"), 7);
    }

    #[test]
    fn synth_kinds() {
        let ds = synth_task(TaskKind::Copy, 8, (3, 3), 10, 1, 128).unwrap();
        for p in &ds.pairs {
            assert_eq!(p.src, p.tgt);
        }
        let ds = synth_task(TaskKind::Reverse, 8, (3, 3), 10, 1, 128).unwrap();
        for p in &ds.pairs {
            let mut r = p.src.clone();
            r.reverse();
            assert_eq!(r, p.tgt);
        }
        let ds = synth_task(TaskKind::Sort, 8, (3, 3), 10, 1, 128).unwrap();
        for p in &ds.pairs {
            let mut s = p.src.clone();
            s.sort_unstable();
            assert_eq!(s, p.tgt);
            assert!(p.tgt.iter().all(|&t| t >= SPECIALS.len()));
        }
    }

    #[test]
    fn synth_deterministic_and_split_disjoint() {
        let a = synth_task(TaskKind::Sort, 16, (4, 8), 100, 9, 128).unwrap();
        let b = synth_task(TaskKind::Sort, 16, (4, 8), 100, 9, 128).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let train_ids: std::collections::HashSet<_> =
            a.train().iter().map(|p| p.id.clone()).collect();
        for p in a.dev().iter().chain(a.test()) {
            assert!(!train_ids.contains(&p.id));
        }
        assert_eq!(a.train().len() + a.dev().len() + a.test().len(), 100);
    }

    #[test]
    fn ingest_skips_blank_lines_and_normalizes_crlf() {
        let dir = std::env::temp_dir().join("bang_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("lf.txt");
        let p2 = dir.join("crlf.txt");
        std::fs::write(&p1, "a b\n\nc d\ne\n").unwrap();
        std::fs::write(&p2, "a b\r\n\r\nc d\r\ne\r\n").unwrap();
        let d1 = ingest_text(&p1).unwrap();
        let d2 = ingest_text(&p2).unwrap();
        assert_eq!(d1.len(), 3);
        assert_eq!(d1, d2);
    }

    #[test]
    fn ingest_reports_utf8_offset() {
        let dir = std::env::temp_dir().join("bang_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.txt");
        std::fs::write(&p, [b'o', b'k', 0xff, b'x']).unwrap();
        match ingest_text(&p) {
            Err(DataError::Utf8 { offset }) => assert_eq!(offset, 2),
            other => panic!("expected utf8 error, got {other:?}"),
        }
    }

    #[test]
    fn pairs_roundtrip() {
        let ds = synth_task(TaskKind::Copy, 8, (2, 5), 20, 3, 128).unwrap();
        let dir = std::env::temp_dir().join("bang_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("pairs.jsonl");
        write_pairs(&p, &ds.pairs, &ds.vocab).unwrap();
        let back = read_pairs(&p, &ds.vocab).unwrap();
        assert_eq!(back, ds.pairs);
    }
}
