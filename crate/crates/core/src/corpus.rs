//! Tokenization, JSONL ingestion, stratified splitting and synthetic tasks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NUM_TOKEN: &str = "NUM";
pub const STR_TOKEN: &str = "STR";

/// Class counts of the full ReVeal corpus.
pub const REVEAL_FULL: ClassStats = ClassStats {
    n_pos: 2240,
    n_neg: 20494,
};

/// Rule-based code tokenizer.
///
/// Identifiers and keywords are kept verbatim, numeric literals collapse to
/// `NUM`, string and character literals to `STR`, every other non-space
/// character is its own token. Comments are dropped.
pub fn tokenize(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            i = (i + 2).min(chars.len());
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            // 0x1f, 1.5e-3, 10UL
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E' | 'p' | 'P');
                if d.is_alphanumeric() || d == '.' || d == '_' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            out.push(NUM_TOKEN.into());
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < chars.len() && chars[i] != c {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(chars.len());
            out.push(STR_TOKEN.into());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Right-pad with [`PAD`] or truncate the tail to exactly `len` ids.
pub fn pad_truncate(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out: Vec<u32> = ids.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassStats {
    pub fn from_labels(labels: impl IntoIterator<Item = u8>) -> Self {
        let mut s = Self::default();
        for l in labels {
            if l == 1 {
                s.n_pos += 1;
            } else {
                s.n_neg += 1;
            }
        }
        s
    }

    pub fn total(&self) -> usize {
        self.n_pos + self.n_neg
    }
}

/// Token → id map with `PAD = 0` and `UNK = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Tokens ordered by descending frequency, ties broken lexicographically.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        counts.remove(PAD_TOKEN);
        counts.remove(UNK_TOKEN);
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One labeled example at token-string level.
#[derive(Clone, Debug, PartialEq)]
pub struct RawExample {
    pub tokens: Vec<String>,
    pub label: u8,
}

/// Labeled token sequences before vocabulary assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub examples: Vec<RawExample>,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: u8,
}

/// Encoded, labeled sequences with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub stats: ClassStats,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Back to token strings, e.g. for writing JSONL.
    pub fn to_corpus(&self) -> Corpus {
        Corpus {
            examples: self
                .examples
                .iter()
                .map(|e| RawExample {
                    tokens: e.ids.iter().map(|&i| self.vocab.token(i).to_string()).collect(),
                    label: e.label,
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn stats(&self) -> ClassStats {
        ClassStats::from_labels(self.examples.iter().map(|e| e.label))
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::build(self.examples.iter().map(|e| e.tokens.as_slice()))
    }

    /// Encode with `vocab` and pad/truncate every sequence to `len`.
    pub fn encode(&self, vocab: &Vocab, len: usize) -> Dataset {
        let examples: Vec<Example> = self
            .examples
            .iter()
            .map(|e| Example {
                ids: pad_truncate(&vocab.encode(&e.tokens), len),
                label: e.label,
            })
            .collect();
        Dataset {
            stats: ClassStats::from_labels(examples.iter().map(|e| e.label)),
            examples,
            vocab: vocab.clone(),
            provenance: self.provenance.clone(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Corpus {
        Corpus {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn split(&self, spec: &SplitSpec) -> Result<Splits<Corpus>> {
        let (a, b, c) = split_indices(&self.labels(), spec)?;
        Ok(Splits {
            train: self.subset(&a),
            val: self.subset(&b),
            test: self.subset(&c),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.examples {
            let line = serde_json::json!({ "tokens": e.tokens, "label": e.label });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed,
            stratified: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

/// Largest-remainder rounding of `total·weights` to integers summing to `total`.
fn apportion(total: usize, weights: [f64; 3]) -> [usize; 3] {
    let ideal = weights.map(|w| w * total as f64);
    let mut counts = ideal.map(|v| v.floor() as usize);
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Disjoint, exhaustive `(train, val, test)` index sets.
///
/// Split sizes follow the fractions by largest-remainder rounding. With
/// stratification each split's positive count is within one example of its
/// proportional share.
pub fn split_indices(labels: &[u8], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).split(crate::numeric::rng::SPLIT);
    let n = labels.len();
    let sizes = apportion(n, [spec.train, spec.val, spec.test]);
    let mut parts: [Vec<usize>; 3] = Default::default();
    if spec.stratified {
        let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
        let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
        rng.shuffle(&mut neg);
        rng.shuffle(&mut pos);
        let weights = sizes.map(|s| if n == 0 { 0.0 } else { s as f64 / n as f64 });
        let pos_counts = apportion(pos.len(), weights);
        // Negative counts fill each split to its size; each stays within one of its share.
        let mut pos_it = pos.into_iter();
        let mut neg_it = neg.into_iter();
        for s in 0..3 {
            let np = pos_counts[s].min(sizes[s]);
            parts[s].extend(pos_it.by_ref().take(np));
            parts[s].extend(neg_it.by_ref().take(sizes[s] - np));
        }
        // Rounding can leave a straggler; hand it to the test split.
        parts[2].extend(pos_it);
        parts[2].extend(neg_it);
        for p in &mut parts {
            rng.shuffle(p);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        let mut it = all.into_iter();
        for s in 0..3 {
            parts[s].extend(it.by_ref().take(sizes[s]));
        }
    }
    let [a, b, c] = parts;
    Ok((a, b, c))
}

fn parse_label(v: Option<&Value>, line: usize) -> Result<u8> {
    let err = |msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    match v {
        None => Err(err("missing field `label`")),
        Some(Value::Number(n)) => match n.as_u64() {
            Some(0) => Ok(0),
            Some(1) => Ok(1),
            _ => Err(err("`label` must be 0 or 1")),
        },
        Some(Value::Bool(b)) => Ok(*b as u8),
        Some(_) => Err(err("`label` must be 0 or 1")),
    }
}

/// Reads one JSON object per line: `{"code": "...", "label": 0|1}` or
/// `{"tokens": ["...", ...], "label": 0|1}`. Blank lines are skipped;
/// line numbers in errors are 1-based.
pub fn ingest_jsonl(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut saw_code = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let obj = v.as_object().ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected a JSON object".into(),
        })?;
        let label = parse_label(obj.get("label"), lineno)?;
        let tokens = match (obj.get("code"), obj.get("tokens")) {
            (Some(Value::String(code)), _) => {
                saw_code = true;
                tokenize(code)
            }
            (None, Some(Value::Array(items))) => items
                .iter()
                .map(|t| {
                    t.as_str().map(str::to_string).ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: "`tokens` must be an array of strings".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            (None, None) => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "missing field `code` (or `tokens`)".into(),
                })
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "`code` must be a string, `tokens` an array".into(),
                })
            }
        };
        examples.push(RawExample { tokens, label });
    }
    Ok(Corpus {
        examples,
        provenance: if saw_code { "reveal".into() } else { "jsonl".into() },
    })
}

/// Alias kept for the real-data entry point.
pub fn ingest_reveal(path: &Path) -> Result<Corpus> {
    ingest_jsonl(path)
}

pub const BACKGROUND_SIZE: usize = 50;
pub const MARKER: &str = "MARK";
pub const PARTNER: &str = "PARTNER";
pub const DECOY: &str = "DECOY";
pub const LOCAL_TRIGRAM: [&str; 3] = ["t7", "t21", "t42"];
/// Planted tokens keep this distance from the sequence ends and from each other,
/// so no width-6 window ever contains two of them or any padding.
const CLEARANCE: usize = 8;

fn background_token(i: usize) -> String {
    format!("t{i}")
}

fn synth_vocab() -> Vocab {
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend((0..BACKGROUND_SIZE).map(background_token));
    tokens.extend([MARKER, PARTNER, DECOY].map(String::from));
    Vocab::from(tokens)
}

fn background(len: usize, vocab: &Vocab, rng: &mut Rng) -> Vec<u32> {
    (0..len)
        .map(|_| vocab.id(&background_token(rng.below(BACKGROUND_SIZE))))
        .collect()
}

fn finish(examples: Vec<Example>, vocab: Vocab, provenance: String) -> Dataset {
    Dataset {
        stats: ClassStats::from_labels(examples.iter().map(|e| e.label)),
        examples,
        vocab,
        provenance,
    }
}

/// Long-range pairing task.
///
/// Every sequence holds one `MARK` at position `p` and both candidate
/// tokens `PARTNER` and `DECOY` exactly once. The token at `p + d` is
/// `PARTNER` for label 1 and `DECOY` for label 0; the other candidate sits
/// somewhere before the marker. Each planted token is isolated from the
/// others and from the sequence ends, so local windows carry no label
/// information; only relating `p` and `p + d` does.
pub fn synth_longrange(n: usize, len: usize, distance: usize, rng: &mut Rng) -> Result<Dataset> {
    if distance < 2 || distance + 2 > len {
        return Err(Error::InvalidConfig(format!(
            "distance {distance} outside 2..={}",
            len.saturating_sub(2)
        )));
    }
    if distance < CLEARANCE || 3 * CLEARANCE + distance > len {
        return Err(Error::InvalidConfig(format!(
            "length {len} too short for distance {distance} with {CLEARANCE}-token clearance"
        )));
    }
    let vocab = synth_vocab();
    let (mark, partner, decoy) = (vocab.id(MARKER), vocab.id(PARTNER), vocab.id(DECOY));
    // p ∈ [2C, len - C - d); the early candidate lands in [C, p - C].
    let p_lo = 2 * CLEARANCE;
    let p_hi = len - CLEARANCE - distance;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.bernoulli(0.5) as u8;
        let mut ids = background(len, &vocab, rng);
        let p = p_lo + rng.below(p_hi - p_lo);
        let q = CLEARANCE + rng.below(p - 2 * CLEARANCE + 1);
        let (late, early) = if label == 1 { (partner, decoy) } else { (decoy, partner) };
        ids[p] = mark;
        ids[p + distance] = late;
        ids[q] = early;
        examples.push(Example { ids, label });
    }
    Ok(finish(examples, vocab, format!("synth_longrange(d={distance})")))
}

fn contains_trigram(ids: &[u32], tri: &[u32; 3]) -> Option<usize> {
    ids.windows(3).position(|w| w == tri)
}

/// Short-range control: label 1 iff the fixed trigram `t7 t21 t42` occurs.
pub fn synth_local(n: usize, len: usize, rng: &mut Rng) -> Result<Dataset> {
    if len < 3 {
        return Err(Error::InvalidConfig(format!("length {len} < 3")));
    }
    let vocab = synth_vocab();
    let tri = LOCAL_TRIGRAM.map(|t| vocab.id(t));
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.bernoulli(0.5) as u8;
        let mut ids = background(len, &vocab, rng);
        // Break accidental occurrences.
        while let Some(pos) = contains_trigram(&ids, &tri) {
            ids[pos + 1] = vocab.id(&background_token(rng.below(BACKGROUND_SIZE)));
        }
        if label == 1 {
            let p = rng.below(len - 2);
            ids[p..p + 3].copy_from_slice(&tri);
        }
        examples.push(Example { ids, label });
    }
    Ok(finish(examples, vocab, "synth_local".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizes_condition() {
        assert_eq!(tokenize("if (x > 0)"), toks(&["if", "(", "x", ">", "NUM", ")"]));
    }

    #[test]
    fn whitespace_invariant() {
        assert_eq!(tokenize("a+b"), tokenize("a + b"));
        assert!(tokenize("   \n\t").is_empty());
    }

    #[test]
    fn literals_and_comments() {
        let t = tokenize(r#"printf("a \"b\"", 'c', 0x1F, 1.5e-3); // gone
            /* also gone */ x"#);
        assert_eq!(
            t,
            toks(&["printf", "(", "STR", ",", "STR", ",", "NUM", ",", "NUM", ")", ";", "x"])
        );
    }

    #[test]
    fn pad_and_truncate() {
        let p = pad_truncate(&[5, 6, 7], 256);
        assert_eq!(p.len(), 256);
        assert_eq!(&p[..3], &[5, 6, 7]);
        assert!(p[3..].iter().all(|&v| v == PAD));
        let long: Vec<u32> = (0..300).collect();
        assert_eq!(pad_truncate(&long, 256), (0..256).collect::<Vec<u32>>());
    }

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let seqs = [toks(&["b", "a", "b"])];
        let v = Vocab::build(seqs.iter().map(|s| s.as_slice()));
        assert_eq!(v.id(PAD_TOKEN), PAD);
        assert_eq!(v.id(UNK_TOKEN), UNK);
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn split_sizes_and_stratification() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 10 == 0) as u8).collect();
        let (a, b, c) = split_indices(&labels, &SplitSpec::standard(1)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let pos = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!((pos(&a), pos(&b), pos(&c)), (8, 1, 1));
    }

    #[test]
    fn split_seeds_differ() {
        let labels = vec![0u8; 50];
        let s1 = split_indices(&labels, &SplitSpec::standard(1)).unwrap();
        let s2 = split_indices(&labels, &SplitSpec::standard(2)).unwrap();
        assert_ne!(s1.0, s2.0);
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let spec = SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.2,
            seed: 0,
            stratified: false,
        };
        assert!(split_indices(&[0, 1], &spec).is_err());
    }

    #[test]
    fn longrange_structure() {
        let ds = synth_longrange(200, 256, 64, &mut Rng::new(4)).unwrap();
        let (mark, partner, decoy) = (ds.vocab.id(MARKER), ds.vocab.id(PARTNER), ds.vocab.id(DECOY));
        for e in &ds.examples {
            assert_eq!(e.ids.len(), 256);
            let p = e.ids.iter().position(|&t| t == mark).unwrap();
            let expect = if e.label == 1 { partner } else { decoy };
            assert_eq!(e.ids[p + 64], expect);
            assert_eq!(e.ids.iter().filter(|&&t| t == partner).count(), 1);
            assert_eq!(e.ids.iter().filter(|&&t| t == decoy).count(), 1);
        }
        assert_eq!(ds.stats.total(), 200);
    }

    #[test]
    fn longrange_rejects_bad_distance() {
        assert!(synth_longrange(10, 256, 1, &mut Rng::new(0)).is_err());
        assert!(synth_longrange(10, 256, 255, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn local_trigram_iff_positive() {
        let ds = synth_local(300, 64, &mut Rng::new(2)).unwrap();
        let tri = LOCAL_TRIGRAM.map(|t| ds.vocab.id(t));
        for e in &ds.examples {
            assert_eq!(contains_trigram(&e.ids, &tri).is_some(), e.label == 1);
        }
    }
}
