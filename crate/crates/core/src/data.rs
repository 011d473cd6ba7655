//! Character vocabulary, tokenization, corpus loading, the synthetic class
//! imbalanced generator and the stratified split.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOUNDARY: usize = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["[pad]", "[unk]", "[cls]", "[sep]", "[boundary]"];

pub const DEFAULT_MAX_SEQ_LEN: usize = 400;
pub const DEFAULT_PROFILE: [usize; 8] = [19, 1726, 1323, 2671, 378, 689, 612, 2231];

pub const BACKGROUND_SIZE: usize = 200;
pub const SIGNATURE_SIZE: usize = 40;
pub const MIN_DOC_LEN: usize = 20;
pub const MAX_DOC_LEN: usize = 200;
const ALPHABET_BASE: u32 = 0x4E00;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<usize>,
}

impl LabeledExample {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
            tokens: Vec::new(),
        }
    }
}

/// Character vocabulary with the reserved tokens at ids `0..5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, ch: char) -> usize {
        let mut buf = [0u8; 4];
        self.index.get(ch.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Characters with frequency ≥ `min_count`, by descending frequency then code point.
pub fn build_vocab(corpus: &[LabeledExample], min_count: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if min_count == 0 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    let mut counts: HashMap<char, usize> = HashMap::new();
    for ex in corpus {
        for ch in ex.text.chars() {
            *counts.entry(ch).or_default() += 1;
        }
    }
    let mut chars: Vec<(char, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(chars.into_iter().map(|(c, _)| c.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

/// `[cls] chars.. [sep]`, cropped to the first `max_seq_len` ids.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::Empty("text"));
    }
    if max_seq_len == 0 {
        return Err(Error::invalid("max_seq_len must be at least 1"));
    }
    let mut ids = Vec::with_capacity(max_seq_len.min(text.len() + 2));
    ids.push(CLS);
    ids.extend(text.chars().take(max_seq_len - 1).map(|c| vocab.id(c)));
    if ids.len() < max_seq_len {
        ids.push(SEP);
    }
    Ok(ids)
}

/// Fills `tokens` on every example.
pub fn tokenize_all(examples: &mut [LabeledExample], vocab: &Vocab, max_seq_len: usize) -> Result<()> {
    for ex in examples {
        ex.tokens = tokenize(&ex.text, vocab, max_seq_len)?;
    }
    Ok(())
}

/// Per-class example counts for the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
}

impl Default for ClassProfile {
    fn default() -> Self {
        Self {
            counts: DEFAULT_PROFILE.to_vec(),
        }
    }
}

impl ClassProfile {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        let p = Self { counts };
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(json)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() < 2 {
            return Err(Error::invalid("a class profile needs at least two classes"));
        }
        if let Some(i) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("class {i} has a zero count in the profile")));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn scaled(&self, scale: f64) -> Result<Vec<usize>> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid(format!("scale must be in (0, 1], got {scale}")));
        }
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &c)| match (scale * c as f64).round() as usize {
                0 => Err(Error::invalid(format!("class {i} scales to zero examples at scale {scale}"))),
                n => Ok(n),
            })
            .collect()
    }
}

pub fn background_alphabet() -> Vec<char> {
    (0..BACKGROUND_SIZE as u32).map(code_point).collect()
}

pub fn signature_alphabet(class: usize) -> Vec<char> {
    let start = (BACKGROUND_SIZE + SIGNATURE_SIZE * class) as u32;
    (start..start + SIGNATURE_SIZE as u32).map(code_point).collect()
}

fn code_point(offset: u32) -> char {
    char::from_u32(ALPHABET_BASE + offset).expect("CJK block code point")
}

/// Class-by-class documents; each character comes from the class signature
/// alphabet with probability `q`, otherwise from the shared background.
pub fn generate_synthetic(profile: &ClassProfile, scale: f64, q: f64, seed: u64) -> Result<Vec<LabeledExample>> {
    profile.validate()?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("separability must be in [0, 1], got {q}")));
    }
    let counts = profile.scaled(scale)?;
    if profile.classes() * SIGNATURE_SIZE + BACKGROUND_SIZE > 0x9FFF - ALPHABET_BASE as usize {
        return Err(Error::invalid("too many classes for the signature alphabets"));
    }
    let background = background_alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (label, &n) in counts.iter().enumerate() {
        let signature = signature_alphabet(label);
        for _ in 0..n {
            let len = rng.gen_range(MIN_DOC_LEN..=MAX_DOC_LEN);
            let text: String = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < q {
                        signature[rng.gen_range(0..SIGNATURE_SIZE)]
                    } else {
                        background[rng.gen_range(0..BACKGROUND_SIZE)]
                    }
                })
                .collect();
            out.push(LabeledExample::new(text, label));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Largest-remainder allocation of `n` items; ties go to the earlier partition.
/// With `n ≥ 3` every partition receives at least one item.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    let frac = |i: usize| exact[i] - sizes[i] as f64;
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.total_cmp(&fa)
        }
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    if n >= 3 {
        while let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let donor = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("three partitions");
            sizes[donor] -= 1;
            sizes[empty] += 1;
        }
    }
    sizes
}

/// Stratified split: each class is shuffled by `seed` and cut contiguously.
pub fn split(examples: &[LabeledExample], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<&LabeledExample>> = vec![Vec::new(); classes];
    for ex in examples {
        by_class[ex.label].push(ex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
                required: 3,
            });
        }
        members.shuffle(&mut rng);
        let [a, b, _] = allocate(members.len(), &ratios);
        out.train.extend(members[..a].iter().map(|e| (*e).clone()));
        out.val.extend(members[a..a + b].iter().map(|e| (*e).clone()));
        out.test.extend(members[a + b..].iter().map(|e| (*e).clone()));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: i64,
}

/// One `{"text": .., "label": ..}` object per line; blank lines are skipped.
pub fn load_jsonl(path: &Path, classes: usize) -> Result<Vec<LabeledExample>> {
    let raw = fs::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if rec.label < 0 || rec.label as u64 >= classes as u64 {
            return Err(parse_err(
                i + 1,
                format!("label {} out of range for {classes} classes", rec.label),
            ));
        }
        out.push(LabeledExample::new(rec.text, rec.label as usize));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&serde_json::json!({"text": ex.text, "label": ex.label}).to_string());
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Predicts the class whose signature alphabet occurs most often in `text`.
pub fn nearest_signature(text: &str, classes: usize) -> usize {
    let mut hits = vec![0usize; classes];
    let first = ALPHABET_BASE + BACKGROUND_SIZE as u32;
    for ch in text.chars() {
        let cp = ch as u32;
        if cp >= first {
            let class = ((cp - first) / SIGNATURE_SIZE as u32) as usize;
            if class < classes {
                hits[class] += 1;
            }
        }
    }
    let mut best = 0;
    for (c, &h) in hits.iter().enumerate() {
        if h > hits[best] {
            best = c;
        }
    }
    best
}
