//! Corpora: file ingestion, vocabulary, splits and a synthetic generator with
//! known per-token polarity.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const MAX_LEN: usize = 64;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    /// Vocabulary with the reserved ids followed by `tokens` in order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let mut v = Vocab { tokens: all, index: HashMap::new() };
        v.reindex();
        v
    }

    /// Rebuild the lookup table (needed after deserializing).
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Lowercased whitespace tokens, capped at [`MAX_LEN`].
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().take(MAX_LEN).map(str::to_lowercase).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Per-token ground truth: +1 supports the label, -1 opposes it, 0 neutral.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Vec<i8>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn only_unknown(&self) -> bool {
        self.tokens.iter().all(|&t| t == UNK)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub vocab: Vocab,
    pub classes: usize,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Examples that consist solely of unknown tokens; kept, but worth reporting.
    pub fn unknown_only_count(&self) -> usize {
        self.examples.iter().filter(|e| e.only_unknown()).count()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(Example::len).max().unwrap_or(0)
    }

    fn subset(&self, idx: &[usize], split: Split) -> Corpus {
        Corpus {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            vocab: self.vocab.clone(),
            classes: self.classes,
            split,
        }
    }

    pub fn write(&self, path: &Path, format: Format) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for ex in &self.examples {
            let text = self.vocab.decode(&ex.tokens);
            match format {
                Format::Tsv => writeln!(out, "{text}\t{}", ex.label)?,
                Format::JsonLines => {
                    writeln!(out, "{}", serde_json::json!({ "text": text, "label": ex.label }))?
                }
            }
        }
        out.flush()?;
        if self.examples.iter().any(|e| e.polarity.is_some()) {
            let mut side = BufWriter::new(fs::File::create(polarity_sidecar(path))?);
            for ex in &self.examples {
                let tags = ex.polarity.as_deref().unwrap_or(&[]);
                writeln!(side, "{}", tags.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))?;
            }
            side.flush()?;
        }
        Ok(())
    }
}

pub fn polarity_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".polarity");
    s.into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Tsv,
    JsonLines,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::JsonLines,
            _ => Format::Tsv,
        }
    }
}

fn read_rows(path: &Path, format: Format, classes: usize) -> Result<Vec<(Vec<String>, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (body, label) = match format {
            Format::Tsv => {
                let (body, label) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| Error::Parse { line: line_no, msg: "expected text<TAB>label".into() })?;
                let label: usize = label
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse { line: line_no, msg: format!("bad label {label:?}") })?;
                (body.to_string(), label)
            }
            Format::JsonLines => {
                #[derive(Deserialize)]
                struct Row {
                    text: String,
                    label: usize,
                }
                let row: Row = serde_json::from_str(line)
                    .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
                (row.text, row.label)
            }
        };
        if label >= classes {
            return Err(Error::Parse { line: line_no, msg: format!("label {label} outside {classes} classes") });
        }
        let tokens = tokenize(&body);
        if tokens.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty text".into() });
        }
        rows.push((tokens, label));
    }
    Ok(rows)
}

fn rows_to_corpus(rows: Vec<(Vec<String>, usize)>, vocab: Vocab, classes: usize, split: Split) -> Corpus {
    let examples = rows
        .into_iter()
        .enumerate()
        .map(|(id, (toks, label))| Example {
            id,
            tokens: toks.iter().map(|t| vocab.id(t)).collect(),
            label,
            polarity: None,
        })
        .collect();
    Corpus { examples, vocab, classes, split }
}

/// Load a training file and build its vocabulary (tokens seen at least twice).
pub fn load_corpus(path: &Path, format: Format, classes: usize) -> Result<Corpus> {
    let rows = read_rows(path, format, classes)?;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (toks, _) in &rows {
        for t in toks {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.as_str());
            }
            *c += 1;
        }
    }
    let vocab = Vocab::from_tokens(order.into_iter().filter(|t| counts[t] >= 2));
    Ok(rows_to_corpus(rows, vocab, classes, Split::Train))
}

/// Load an evaluation file against an existing vocabulary.
pub fn load_corpus_with_vocab(path: &Path, format: Format, vocab: &Vocab, classes: usize, split: Split) -> Result<Corpus> {
    let rows = read_rows(path, format, classes)?;
    Ok(rows_to_corpus(rows, vocab.clone(), classes, split))
}

/// Parameters of the synthetic polarity corpus.
///
/// Each class owns `words_per_class` lexicon words with fixed impact
/// magnitudes; an example's label is the class with the largest summed
/// impact, accepted only when it leads the runner-up by `margin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub examples: usize,
    pub words_per_class: usize,
    pub neutral_words: usize,
    pub magnitude: (f64, f64),
    pub length: (usize, usize),
    /// Probability that a position holds a lexicon word rather than a neutral one.
    pub lexicon_rate: f64,
    /// Probability that a lexicon word is drawn from the example's target class.
    pub support_rate: f64,
    pub margin: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            examples: 1000,
            words_per_class: 8,
            neutral_words: 24,
            magnitude: (0.5, 2.0),
            length: (6, 14),
            lexicon_rate: 0.4,
            support_rate: 0.65,
            margin: 0.5,
            noise: 0.0,
            seed: 0,
        }
    }
}

struct Lexicon {
    /// `(class, magnitude)` per vocabulary id; `None` for neutral words.
    impact: Vec<Option<(usize, f64)>>,
    by_class: Vec<Vec<usize>>,
    neutral: Vec<usize>,
}

fn word_name(classes: usize, class: usize, i: usize) -> String {
    match (classes, class) {
        (2, 0) => format!("neg{i}"),
        (2, 1) => format!("pos{i}"),
        _ => format!("c{class}w{i}"),
    }
}

fn build_lexicon(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vocab, Lexicon) {
    let mut names = Vec::new();
    let mut impacts = Vec::new();
    for c in 0..spec.classes {
        for i in 0..spec.words_per_class {
            names.push(word_name(spec.classes, c, i));
            impacts.push(Some((c, rng.random_range(spec.magnitude.0..=spec.magnitude.1))));
        }
    }
    for i in 0..spec.neutral_words {
        names.push(format!("neu{i}"));
        impacts.push(None);
    }
    let vocab = Vocab::from_tokens(names.clone());
    let mut impact = vec![None; vocab.len()];
    let mut by_class = vec![Vec::new(); spec.classes];
    let mut neutral = Vec::new();
    for (name, imp) in names.iter().zip(impacts) {
        let id = vocab.id(name);
        impact[id] = imp;
        match imp {
            Some((c, _)) => by_class[c].push(id),
            None => neutral.push(id),
        }
    }
    (vocab, Lexicon { impact, by_class, neutral })
}

/// Label under the lexicon-sum rule, `None` when the margin is not met.
fn lexicon_label(lex: &Lexicon, tokens: &[usize], classes: usize, margin: f64) -> Option<usize> {
    let mut scores = vec![0.0; classes];
    for &t in tokens {
        if let Some(Some((c, m))) = lex.impact.get(t) {
            scores[*c] += m;
        }
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    (scores[order[0]] - scores[order[1]] >= margin).then_some(order[0])
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.classes < 2 || spec.words_per_class == 0 || spec.margin <= 0.0 {
        return Err(invalid("synthetic corpus needs ≥2 classes, lexicon words and a positive margin"));
    }
    if spec.length.0 == 0 || spec.length.0 > spec.length.1 || spec.length.1 > MAX_LEN {
        return Err(invalid(format!("bad length range {:?}", spec.length)));
    }
    if spec.neutral_words == 0 && spec.lexicon_rate < 1.0 {
        return Err(invalid("lexicon_rate < 1 needs neutral words"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (vocab, lex) = build_lexicon(spec, &mut rng);
    let mut examples = Vec::with_capacity(spec.examples);
    for id in 0..spec.examples {
        let target = rng.random_range(0..spec.classes);
        let (tokens, label) = loop {
            let len = rng.random_range(spec.length.0..=spec.length.1);
            let tokens: Vec<usize> = (0..len)
                .map(|_| {
                    if rng.random_bool(spec.lexicon_rate) {
                        let class = if rng.random_bool(spec.support_rate) {
                            target
                        } else {
                            let other = rng.random_range(0..spec.classes - 1);
                            if other >= target { other + 1 } else { other }
                        };
                        *lex.by_class[class].choose(&mut rng).expect("non-empty class lexicon")
                    } else {
                        *lex.neutral.choose(&mut rng).expect("neutral words")
                    }
                })
                .collect();
            if let Some(label) = lexicon_label(&lex, &tokens, spec.classes, spec.margin) {
                if label == target {
                    break (tokens, label);
                }
            }
        };
        let polarity = tokens
            .iter()
            .map(|&t| match lex.impact[t] {
                Some((c, _)) if c == label => 1,
                Some(_) => -1,
                None => 0,
            })
            .collect();
        let label = if spec.noise > 0.0 && rng.random_bool(spec.noise) {
            let other = rng.random_range(0..spec.classes - 1);
            if other >= label { other + 1 } else { other }
        } else {
            label
        };
        examples.push(Example { id, tokens, label, polarity: Some(polarity) });
    }
    Ok(Corpus { examples, vocab, classes: spec.classes, split: Split::Train })
}

/// Label `tokens` by the generator's rule for `spec` (regenerates the lexicon).
pub fn synthetic_rule_label(spec: &SyntheticSpec, tokens: &[usize]) -> Option<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (_, lex) = build_lexicon(spec, &mut rng);
    lexicon_label(&lex, tokens, spec.classes, spec.margin)
}

/// Seeded shuffle into disjoint train/val/test parts.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((corpus.subset(train, Split::Train), corpus.subset(val, Split::Val), corpus.subset(test, Split::Test)))
}
