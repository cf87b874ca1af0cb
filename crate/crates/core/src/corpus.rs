//! Synthetic multi-domain corpora over a byte vocabulary.
//!
//! Six registered domains each have a small text generator. Train and eval
//! streams of a domain come from two ChaCha streams of the same key, so they
//! never share generator state. Calibration batches are windows of the train
//! stream at seeded offsets.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::rng::DetRng;

pub const VOCAB: usize = 256;

pub const DOMAINS: [&str; 6] = ["prose", "arith", "code", "tabular", "qa", "shuffle"];

const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DomainId {
    index: usize,
}

impl DomainId {
    pub fn from_name(name: &str) -> Result<Self> {
        DOMAINS
            .iter()
            .position(|d| *d == name)
            .map(|index| DomainId { index })
            .ok_or_else(|| DiveError::Registry(name.to_string()))
    }

    pub fn from_index(index: usize) -> Result<Self> {
        DOMAINS
            .get(index)
            .map(|_| DomainId { index })
            .ok_or_else(|| DiveError::Registry(format!("#{index}")))
    }

    pub fn all() -> Vec<DomainId> {
        (0..DOMAINS.len()).map(|i| Self::from_index(i).expect("registered")).collect()
    }

    pub fn name(&self) -> &'static str {
        DOMAINS[self.index]
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for DomainId {
    type Error = DiveError;
    fn try_from(s: String) -> Result<Self> {
        Self::from_name(&s)
    }
}

impl From<DomainId> for String {
    fn from(d: DomainId) -> String {
        d.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub domain: DomainId,
    pub seed: u64,
    pub train_bytes: usize,
    pub eval_bytes: usize,
    pub calibration_samples: usize,
    pub sample_len: usize,
}

impl CorpusSpec {
    pub fn new(domain: &str, seed: u64, train_bytes: usize, eval_bytes: usize) -> Result<Self> {
        Ok(Self {
            domain: DomainId::from_name(domain)?,
            seed,
            train_bytes,
            eval_bytes,
            calibration_samples: 1024,
            sample_len: 256,
        })
    }

    pub fn with_calibration(mut self, samples: usize, sample_len: usize) -> Self {
        self.calibration_samples = samples;
        self.sample_len = sample_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_bytes == 0 {
            return Err(DiveError::Parameter(format!("{}: train_bytes must be positive", self.domain)));
        }
        if self.calibration_samples.saturating_mul(self.sample_len) > self.train_bytes {
            return Err(DiveError::Capacity(format!(
                "{}: {} calibration samples of {} tokens exceed {} train bytes",
                self.domain, self.calibration_samples, self.sample_len, self.train_bytes
            )));
        }
        Ok(())
    }

    fn key(&self) -> u64 {
        DetRng::derive_seed(self.seed, self.domain.name())
    }

    pub fn train_stream(&self) -> Vec<u8> {
        generate_stream(&self.domain, self.key(), TRAIN_STREAM, self.train_bytes)
    }

    pub fn eval_stream(&self) -> Vec<u8> {
        generate_stream(&self.domain, self.key(), EVAL_STREAM, self.eval_bytes)
    }
}

/// Row-major `[batch x seq_len]` token ids with one domain tag per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub seq_len: usize,
    pub domains: Vec<usize>,
}

impl TokenBatch {
    pub fn empty(seq_len: usize) -> Self {
        Self {
            tokens: Vec::new(),
            seq_len,
            domains: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.domains.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn push_row(&mut self, row: &[usize], domain: usize) {
        debug_assert_eq!(row.len(), self.seq_len);
        self.tokens.extend_from_slice(row);
        self.domains.push(domain);
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    if spec.train_bytes == 0 {
        return Err(DiveError::Parameter(format!("{}: train_bytes must be positive", spec.domain)));
    }
    Ok((spec.train_stream(), spec.eval_stream()))
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| DiveError::Index(format!("token id {i} outside the byte vocabulary")))
        })
        .collect()
}

pub fn sample_calibration(spec: &CorpusSpec, count: usize, sample_len: usize, seed: u64) -> Result<TokenBatch> {
    if count == 0 {
        return Ok(TokenBatch::empty(sample_len));
    }
    let train = spec.train_stream();
    sample_windows(&train, spec.domain.index, count, sample_len, seed)
}

/// `count` windows of `sample_len` bytes at uniformly drawn offsets.
pub fn sample_windows(stream: &[u8], domain: usize, count: usize, sample_len: usize, seed: u64) -> Result<TokenBatch> {
    let mut batch = TokenBatch::empty(sample_len);
    if count == 0 {
        return Ok(batch);
    }
    if sample_len == 0 || stream.len() < sample_len {
        return Err(DiveError::Capacity(format!(
            "cannot cut {sample_len}-token samples from a {}-byte stream",
            stream.len()
        )));
    }
    let mut rng = DetRng::new(DetRng::derive_seed(seed, "calibration"));
    let span = stream.len() - sample_len + 1;
    for _ in 0..count {
        let off = rng.below(span);
        batch.push_row(&tokenize(&stream[off..off + sample_len]), domain);
    }
    Ok(batch)
}

/// Share of `total` given to each of `m` members: `total / m` each, the
/// first `total % m` members one extra.
pub fn mix_counts(total: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| total / m + usize::from(i < total % m)).collect()
}

/// Uniform mixture of member calibration samples, rows interleaved
/// round-robin. Member `i` samples with `seed + i * golden`, so a single
/// member reproduces [`sample_calibration`] exactly.
pub fn mix_cluster_calibration(members: &[CorpusSpec], total: usize, sample_len: usize, seed: u64) -> Result<TokenBatch> {
    if members.is_empty() {
        return Err(DiveError::Parameter("cluster calibration needs at least one member".into()));
    }
    let counts = mix_counts(total, members.len());
    let parts = members
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (spec, &n))| sample_calibration(spec, n, sample_len, member_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(interleave(&parts, sample_len))
}

pub(crate) fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(GOLDEN))
}

pub(crate) fn interleave(parts: &[TokenBatch], sample_len: usize) -> TokenBatch {
    let mut out = TokenBatch::empty(sample_len);
    let longest = parts.iter().map(TokenBatch::rows).max().unwrap_or(0);
    for r in 0..longest {
        for p in parts {
            if r < p.rows() {
                out.push_row(p.row(r), p.domains[r]);
            }
        }
    }
    out
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct DomainCorpus {
    pub spec: CorpusSpec,
    pub train: Vec<u8>,
    pub eval: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct CorpusSet {
    pub domains: Vec<DomainCorpus>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    specs: Vec<CorpusSpec>,
}

impl CorpusSet {
    pub fn generate(specs: &[CorpusSpec]) -> Result<Self> {
        let domains = specs
            .iter()
            .map(|spec| {
                let (train, eval) = generate_corpus(spec)?;
                Ok(DomainCorpus {
                    spec: spec.clone(),
                    train,
                    eval,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domains })
    }

    pub fn get(&self, name: &str) -> Result<&DomainCorpus> {
        self.domains
            .iter()
            .find(|d| d.spec.domain.name() == name)
            .ok_or_else(|| DiveError::Registry(name.to_string()))
    }

    pub fn specs(&self) -> Vec<CorpusSpec> {
        self.domains.iter().map(|d| d.spec.clone()).collect()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.domains.iter().map(|d| d.spec.domain.name()).collect()
    }

    /// Writes `<domain>.<split>.bin` files and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DiveError::io(dir, e))?;
        for d in &self.domains {
            for (split, bytes) in [("train", &d.train), ("eval", &d.eval)] {
                let path = dir.join(format!("{}.{split}.bin", d.spec.domain));
                fs::write(&path, bytes).map_err(|e| DiveError::io(&path, e))?;
            }
        }
        let manifest = Manifest {
            format_version: 1,
            specs: self.specs(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| DiveError::io(&path, e))
    }

    /// Loads a saved corpus and checks every file against its spec.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| DiveError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut domains = Vec::new();
        for spec in manifest.specs {
            let read = |split: &str, expected: usize| -> Result<Vec<u8>> {
                let path = dir.join(format!("{}.{split}.bin", spec.domain));
                let bytes = fs::read(&path).map_err(|e| DiveError::io(&path, e))?;
                if bytes.len() != expected {
                    return Err(DiveError::Format(format!(
                        "{} holds {} bytes, manifest says {expected}",
                        path.display(),
                        bytes.len()
                    )));
                }
                Ok(bytes)
            };
            let train = read("train", spec.train_bytes)?;
            let eval = read("eval", spec.eval_bytes)?;
            domains.push(DomainCorpus { spec, train, eval });
        }
        Ok(Self { domains })
    }
}

// --------------------------------------------------------------- generators

const WORDS: &str = "the of and to in is was for on that with as by at from his her they this have \
    had not are but one all were when we there can an which their said if do will each about how up \
    out them then she many some so these would other into has more two like him see time could no make \
    than first been its who now people my made over did down only way find use may water long little \
    very after words called just where most know get through back much before go good new write our \
    used me man too any day same right look think also around another came come work three word must \
    because does part even place well such here take why things help put years different away again \
    off went old number great tell men say small every found still between name should home big give \
    air line set own under read last never us left end along while might next sound below saw something \
    thought both few those always looked show large often together asked house world going want school \
    important until form food keep children feet land side without boy once animals life enough took \
    sometimes four head above kind began almost live page got earth need far hand high year mother light \
    parts country father let night following picture being study second eyes soon times story boys since \
    white days ever paper hard near sentence better best across during today others however sure means \
    knew try told young miles sun ways thing whole hear example heard several change answer room sea \
    against top turned learn point city play toward five using himself usually money seen car morning \
    river garden stone window winter forest music";

fn words() -> Vec<&'static str> {
    WORDS.split_whitespace().collect()
}

const NOUNS: [&str; 24] = [
    "apple", "river", "teacher", "engine", "garden", "window", "doctor", "planet", "bridge", "violin",
    "harbor", "market", "forest", "letter", "candle", "mirror", "basket", "pencil", "castle", "rocket",
    "pillow", "ladder", "camera", "island",
];
const ADJECTIVES: [&str; 16] = [
    "red", "quiet", "heavy", "bright", "small", "ancient", "cold", "narrow", "green", "broken", "tall",
    "soft", "empty", "golden", "wooden", "busy",
];
const PLACES: [&str; 12] = [
    "kitchen", "station", "library", "valley", "office", "museum", "village", "attic", "hallway", "park",
    "cellar", "beach",
];
const NAMES: [&str; 16] = [
    "Ada", "Bruno", "Chen", "Dara", "Emil", "Farah", "Gus", "Hana", "Ivo", "Jun", "Kofi", "Lena", "Mira",
    "Nils", "Omar", "Pia",
];
const MATERIALS: [&str; 8] = ["oak", "steel", "glass", "clay", "wool", "brass", "stone", "paper"];

fn generate_stream(domain: &DomainId, key: u64, stream: u64, n: usize) -> Vec<u8> {
    let mut rng = DetRng::with_stream(key, stream);
    let mut out = String::with_capacity(n + 256);
    let vocab = words();
    let mut state = Generator::default();
    while out.len() < n {
        match domain.name() {
            "prose" => prose_chunk(&mut rng, &vocab, &mut state, &mut out),
            "arith" => arith_chunk(&mut rng, &mut out),
            "code" => code_chunk(&mut rng, &vocab, &mut out),
            "tabular" => tabular_chunk(&mut rng, &mut state, &mut out),
            "qa" => qa_chunk(&mut rng, &mut out),
            "shuffle" => shuffle_chunk(&mut rng, &vocab, &mut out),
            other => unreachable!("unregistered domain {other}"),
        }
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n);
    bytes
}

#[derive(Default)]
struct Generator {
    prev_word: usize,
    sentence_start: bool,
    rows_left: usize,
    row_id: u32,
}

/// Successor `j` of word `w` in the fixed Markov table.
fn successor(w: usize, j: usize, n: usize) -> usize {
    let h = DetRng::derive_seed(w as u64, "succ") ^ (j as u64).wrapping_mul(GOLDEN);
    (h % n as u64) as usize
}

fn prose_chunk(rng: &mut DetRng, vocab: &[&str], st: &mut Generator, out: &mut String) {
    if out.is_empty() {
        st.sentence_start = true;
        st.prev_word = rng.below(vocab.len());
    }
    let w = successor(st.prev_word, rng.below(32), vocab.len());
    st.prev_word = w;
    let word = vocab[w];
    if st.sentence_start {
        let mut c = word.chars();
        let first = c.next().expect("nonempty word");
        out.extend(first.to_uppercase());
        out.push_str(c.as_str());
        st.sentence_start = false;
    } else {
        out.push_str(word);
    }
    let r = rng.uniform();
    if r < 0.10 {
        out.push_str(if rng.uniform() < 0.25 { ".\n" } else { ". " });
        st.sentence_start = true;
    } else if r < 0.16 {
        out.push_str(", ");
    } else {
        out.push(' ');
    }
}

fn arith_chunk(rng: &mut DetRng, out: &mut String) {
    use std::fmt::Write;
    let a = rng.below(1000) as i64;
    let b = rng.below(1000) as i64;
    let line = match rng.below(4) {
        0 => format!("{a} + {b} = {}", a + b),
        1 => format!("{a} - {b} = {}", a - b),
        2 => {
            let (a, b) = (a % 100, b % 100);
            format!("{a} * {b} = {}", a * b)
        }
        _ => {
            let c = rng.below(100) as i64;
            format!("({a} + {b}) - {c} = {}", a + b - c)
        }
    };
    let _ = writeln!(out, "{line}");
}

fn ident(rng: &mut DetRng, vocab: &[&str]) -> String {
    let a = vocab[rng.below(vocab.len())];
    if rng.uniform() < 0.5 {
        format!("{a}_{}", vocab[rng.below(vocab.len())])
    } else {
        a.to_string()
    }
}

fn code_chunk(rng: &mut DetRng, vocab: &[&str], out: &mut String) {
    use std::fmt::Write;
    let f = ident(rng, vocab);
    let x = ident(rng, vocab);
    let y = ident(rng, vocab);
    let k = rng.below(64);
    let _ = match rng.below(4) {
        0 => write!(
            out,
            "fn {f}({x}: i32) -> i32 {{\n    let {y} = {x} * {k};\n    return {y} + 1;\n}}\n"
        ),
        1 => write!(out, "if ({x} > {k}) {{\n    {y} = {y} + {x};\n}} else {{\n    {y} = 0;\n}}\n"),
        2 => write!(out, "for i in 0..{k} {{\n    {x}[i] = {f}(i);\n}}\n"),
        _ => write!(out, "while ({x} != {k}) {{ {x} = {f}({x}, {y}); }}\n"),
    };
}

fn tabular_chunk(rng: &mut DetRng, st: &mut Generator, out: &mut String) {
    use std::fmt::Write;
    if st.rows_left == 0 {
        out.push_str("id,qty,price,total\n");
        st.rows_left = 8 + rng.below(24);
        st.row_id = rng.below(9000) as u32 + 1000;
    }
    let qty = rng.below(50) + 1;
    let cents = rng.below(10_000) + 100;
    let total = qty * cents;
    let _ = writeln!(
        out,
        "{},{qty},{}.{:02},{}.{:02}",
        st.row_id,
        cents / 100,
        cents % 100,
        total / 100,
        total % 100
    );
    st.row_id += 1;
    st.rows_left -= 1;
}

fn qa_chunk(rng: &mut DetRng, out: &mut String) {
    use std::fmt::Write;
    let n = NOUNS[rng.below(NOUNS.len())];
    let a = ADJECTIVES[rng.below(ADJECTIVES.len())];
    let p = PLACES[rng.below(PLACES.len())];
    let m = NOUNS[rng.below(NOUNS.len())];
    let who = NAMES[rng.below(NAMES.len())];
    let k = 1 + rng.below(9999);
    let r = 1000 + rng.below(9000);
    let _ = match rng.below(4) {
        0 => writeln!(out, "Q: On day {r}, how many {n}s did {who} count in the {p}?\nA: {k}, all {a}."),
        1 => writeln!(
            out,
            "Q: In room {r}, what is the {a} {n} made of?\nA: {}, said {who} at {}:{:02}.",
            MATERIALS[rng.below(MATERIALS.len())],
            rng.below(24),
            rng.below(60)
        ),
        2 => writeln!(
            out,
            "Q: At {}:{:02}, who moved the {n} {k} steps toward the {p}?\nA: {who}, from box {r}.",
            rng.below(24),
            rng.below(60)
        ),
        _ => writeln!(
            out,
            "Q: Is the {n} in box {r} heavier than the {m}?\nA: {}, by {k} grams.",
            if rng.below(2) == 0 { "Yes" } else { "No" }
        ),
    };
}

fn shuffle_chunk(rng: &mut DetRng, vocab: &[&str], out: &mut String) {
    out.push_str(vocab[rng.below(vocab.len())]);
    out.push(if rng.below(16) == 0 { '\n' } else { ' ' });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: &str) -> CorpusSpec {
        CorpusSpec::new(d, 11, 64 * 1024, 16 * 1024).unwrap()
    }

    #[test]
    fn registry() {
        assert_eq!(DomainId::from_name("arith").unwrap().index(), 1);
        assert!(matches!(DomainId::from_name("poetry"), Err(DiveError::Registry(_))));
        let json = serde_json::to_string(&DomainId::from_name("qa").unwrap()).unwrap();
        assert_eq!(json, "\"qa\"");
    }

    #[test]
    fn deterministic_and_sized() {
        for d in DOMAINS {
            let s = spec(d);
            let (a, b) = generate_corpus(&s).unwrap();
            assert_eq!(a.len(), 64 * 1024);
            assert_eq!(b.len(), 16 * 1024);
            assert_eq!(generate_corpus(&s).unwrap(), (a.clone(), b.clone()));
            assert_ne!(&a[..1024], &b[..1024]);
        }
        let mut s = spec("prose");
        s.eval_bytes = 0;
        assert!(generate_corpus(&s).unwrap().1.is_empty());
    }

    #[test]
    fn train_prefix_is_stable() {
        let long = spec("code");
        let mut short = long.clone();
        short.train_bytes = 1000;
        assert_eq!(short.train_stream(), long.train_stream()[..1000]);
    }

    #[test]
    fn mix_counts_remainder_rule() {
        assert_eq!(mix_counts(4, 2), vec![2, 2]);
        assert_eq!(mix_counts(4, 3), vec![2, 1, 1]);
        assert_eq!(mix_counts(0, 3), vec![0, 0, 0]);
    }

    #[test]
    fn detokenize_rejects_large_ids() {
        assert!(matches!(detokenize(&[97, 256]), Err(DiveError::Index(_))));
        assert_eq!(detokenize(&tokenize(b"abc")).unwrap(), b"abc");
    }
}
