//! Corpus ingestion, the BMES tag codec, vocabulary construction, pretrained
//! embedding files, dev splits, character normalization, and synthetic
//! multi-criteria corpus generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{B, E, M, S};
use crate::error::{Error, Result};
#[allow(unused_imports)]
use crate::layers::{EmbeddingTable, PAD_ID, UNK_ID};

/// Sentence-final boundary symbol used for the last bigram (x_n, ·).
pub const BIGRAM_BOUNDARY: char = '\u{1}';

/// One segmented sentence: characters, word spans, and the BMES tags the
/// spans induce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSentence {
    pub chars: Vec<char>,
    pub spans: Vec<(usize, usize)>,
    pub tags: Vec<usize>,
}

impl TaggedSentence {
    pub fn from_words(words: &[&str]) -> Result<Self> {
        let chars: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
        let mut spans = Vec::with_capacity(words.len());
        let mut pos = 0;
        for w in words {
            let len = w.chars().count();
            if len == 0 {
                return Err(Error::Data("empty word".into()));
            }
            spans.push((pos, pos + len));
            pos += len;
        }
        let tags = spans_to_bmes(&spans, chars.len())?;
        Ok(TaggedSentence { chars, spans, tags })
    }

    pub fn from_spans(chars: Vec<char>, spans: Vec<(usize, usize)>) -> Result<Self> {
        let tags = spans_to_bmes(&spans, chars.len())?;
        Ok(TaggedSentence { chars, spans, tags })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Word surface strings in order.
    pub fn words(&self) -> Vec<String> {
        self.spans
            .iter()
            .map(|&(s, e)| self.chars[s..e].iter().collect())
            .collect()
    }

    pub fn to_line(&self) -> String {
        self.words().join(" ")
    }
}

/// Train/dev/test splits plus the training lexicon for one segmentation
/// criterion. Dev is carved from train before any training; test is never
/// used for model selection.
#[derive(Clone, Debug)]
pub struct CriterionCorpus {
    pub name: String,
    pub train: Vec<TaggedSentence>,
    pub dev: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
    pub train_word_set: HashSet<String>,
}

impl CriterionCorpus {
    pub fn new(
        name: impl Into<String>,
        train: Vec<TaggedSentence>,
        dev: Vec<TaggedSentence>,
        test: Vec<TaggedSentence>,
    ) -> Self {
        let train_word_set = train.iter().flat_map(|s| s.words()).collect();
        CriterionCorpus {
            name: name.into(),
            train,
            dev,
            test,
            train_word_set,
        }
    }
}

/// Map a span partition of [0, n) to BMES tags: a length-1 span becomes S, a
/// length-k span becomes B M…M E.
pub fn spans_to_bmes(spans: &[(usize, usize)], n: usize) -> Result<Vec<usize>> {
    let mut pos = 0;
    let mut tags = Vec::with_capacity(n);
    for &(s, e) in spans {
        if s != pos || e <= s || e > n {
            return Err(Error::Data(format!(
                "spans do not partition [0, {n}): bad span ({s}, {e}) at position {pos}"
            )));
        }
        if e - s == 1 {
            tags.push(S);
        } else {
            tags.push(B);
            for _ in s + 1..e - 1 {
                tags.push(M);
            }
            tags.push(E);
        }
        pos = e;
    }
    if pos != n {
        return Err(Error::Data(format!(
            "spans cover [0, {pos}) but the sentence has {n} characters"
        )));
    }
    Ok(tags)
}

/// Invert BMES tags to spans, repairing structurally invalid sequences.
///
/// A word opens at B, at S, or at any tag following a word close; it closes
/// at E, at S, or just before the next B/S. Total and deterministic, so any
/// of the 4ⁿ tag sequences a decoder can emit yields a valid partition.
pub fn bmes_to_spans(tags: &[usize]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            _ if t == S => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                spans.push((i, i + 1));
            }
            _ if t == B => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                open = Some(i);
            }
            _ if t == E => {
                let s = open.take().unwrap_or(i);
                spans.push((s, i + 1));
            }
            // M (or anything else) continues the open word
            _ => {
                if open.is_none() {
                    open = Some(i);
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

#[derive(Serialize, Deserialize)]
struct VocabData {
    chars: Vec<char>,
    bigrams: Vec<(char, char)>,
}

/// Character and bigram id maps with reserved ids 0 = PAD, 1 = UNK.
///
/// Ids are dense and assigned in sorted symbol order, so two builds from the
/// same corpora agree and serialization round-trips are stable.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "VocabData", into = "VocabData")]
pub struct Vocabulary {
    chars: Vec<char>,
    bigrams: Vec<(char, char)>,
    char_index: HashMap<char, usize>,
    bigram_index: HashMap<(char, char), usize>,
}

impl From<VocabData> for Vocabulary {
    fn from(d: VocabData) -> Self {
        Vocabulary::from_lists(d.chars, d.bigrams)
    }
}

impl From<Vocabulary> for VocabData {
    fn from(v: Vocabulary) -> Self {
        VocabData {
            chars: v.chars,
            bigrams: v.bigrams,
        }
    }
}

impl Vocabulary {
    fn from_lists(chars: Vec<char>, bigrams: Vec<(char, char)>) -> Self {
        let char_index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        let bigram_index = bigrams
            .iter()
            .enumerate()
            .map(|(i, &b)| (b, i + 2))
            .collect();
        Vocabulary {
            chars,
            bigrams,
            char_index,
            bigram_index,
        }
    }

    /// Number of unigram rows including PAD and UNK.
    pub fn n_chars(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn n_bigrams(&self) -> usize {
        self.bigrams.len() + 2
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn bigram_id(&self, a: char, b: char) -> usize {
        self.bigram_index.get(&(a, b)).copied().unwrap_or(UNK_ID)
    }

    pub fn known_chars(&self) -> &[char] {
        &self.chars
    }

    /// SHA-256 over the sorted symbol lists, hex-encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for c in &self.chars {
            hasher.update((*c as u32).to_le_bytes());
        }
        hasher.update([0xff]);
        for (a, b) in &self.bigrams {
            hasher.update((*a as u32).to_le_bytes());
            hasher.update((*b as u32).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self, sentence: &TaggedSentence) -> EncodedSentence {
        let n = sentence.len();
        let char_ids = sentence.chars.iter().map(|&c| self.char_id(c)).collect();
        let bigram_ids = (0..n)
            .map(|i| {
                let next = if i + 1 < n {
                    sentence.chars[i + 1]
                } else {
                    BIGRAM_BOUNDARY
                };
                self.bigram_id(sentence.chars[i], next)
            })
            .collect();
        EncodedSentence {
            char_ids,
            bigram_ids,
            tags: sentence.tags.clone(),
        }
    }

    /// Encode raw characters with no gold segmentation (for inference).
    pub fn encode_chars(&self, chars: &[char]) -> EncodedSentence {
        let n = chars.len();
        EncodedSentence {
            char_ids: chars.iter().map(|&c| self.char_id(c)).collect(),
            bigram_ids: (0..n)
                .map(|i| {
                    let next = if i + 1 < n { chars[i + 1] } else { BIGRAM_BOUNDARY };
                    self.bigram_id(chars[i], next)
                })
                .collect(),
            tags: Vec::new(),
        }
    }
}

/// A sentence mapped to embedding-table ids.
#[derive(Clone, Debug)]
pub struct EncodedSentence {
    pub char_ids: Vec<usize>,
    pub bigram_ids: Vec<usize>,
    pub tags: Vec<usize>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}

/// Count characters and bigrams over the train splits of all corpora and keep
/// symbols with frequency ≥ min_freq. The vocabulary is joint across corpora
/// because all criteria share one embedding matrix.
pub fn build_vocab(corpora: &[CriterionCorpus], min_freq: usize) -> Result<Vocabulary> {
    if corpora.is_empty() {
        return Err(Error::Data("build_vocab over no corpora".into()));
    }
    let mut char_freq: BTreeMap<char, usize> = BTreeMap::new();
    let mut bigram_freq: BTreeMap<(char, char), usize> = BTreeMap::new();
    for corpus in corpora {
        for sentence in &corpus.train {
            let n = sentence.len();
            for (i, &c) in sentence.chars.iter().enumerate() {
                *char_freq.entry(c).or_default() += 1;
                let next = if i + 1 < n {
                    sentence.chars[i + 1]
                } else {
                    BIGRAM_BOUNDARY
                };
                *bigram_freq.entry((c, next)).or_default() += 1;
            }
        }
    }
    let chars = char_freq
        .into_iter()
        .filter(|&(_, f)| f >= min_freq)
        .map(|(c, _)| c)
        .collect();
    let bigrams = bigram_freq
        .into_iter()
        .filter(|&(_, f)| f >= min_freq)
        .map(|(b, _)| b)
        .collect();
    Ok(Vocabulary::from_lists(chars, bigrams))
}

/// Parse a whitespace-segmented corpus file: one sentence per line, words
/// separated by runs of Unicode whitespace, empty lines skipped.
pub fn read_segmented_corpus(path: &Path) -> Result<Vec<TaggedSentence>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count()
            + 1;
        Error::Data(format!("{}: invalid UTF-8 at line {line}", path.display()))
    })?;
    parse_segmented_text(&text)
}

pub fn parse_segmented_text(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        out.push(TaggedSentence::from_words(&words)?);
    }
    Ok(out)
}

pub fn write_segmented_corpus(path: &Path, sentences: &[TaggedSentence]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load word2vec text-format embeddings for the unigram table.
///
/// Format: an optional header line "count dim", then one token per line
/// followed by `dim` floats. Tokens missing from the file (and the bigram
/// table, which is always trained from scratch) are initialized uniformly in
/// `(low, high)`.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    d_e: usize,
    low: f64,
    high: f64,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    let mut table = EmbeddingTable::new_random(vocab.n_chars(), vocab.n_bigrams(), d_e, low, high, rng);
    let mut lines = text.lines().enumerate().peekable();
    if let Some(&(_, first)) = lines.peek() {
        let fields: Vec<&str> = first.split_whitespace().collect();
        if fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let dim: usize = fields[1].parse().unwrap();
            if dim != d_e {
                return Err(Error::Data(format!(
                    "{}: embedding dimension {dim} does not match d_e={d_e}",
                    path.display()
                )));
            }
            lines.next();
        }
    }
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields
            .next()
            .ok_or_else(|| Error::Data(format!("{}: malformed line {}", path.display(), idx + 1)))?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("{}: malformed line {}", path.display(), idx + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d_e {
            return Err(Error::Data(format!(
                "{}: line {} has {} values, expected {d_e}",
                path.display(),
                idx + 1,
                values.len()
            )));
        }
        let mut chars = token.chars();
        let (c, rest) = (chars.next(), chars.next());
        if let (Some(c), None) = (c, rest) {
            let id = vocab.char_id(c);
            if id != UNK_ID {
                for (j, v) in values.iter().enumerate() {
                    table.unigram.set(id, j, *v);
                }
            }
        }
        // multi-character tokens (words) are skipped: only characters are embedded
    }
    Ok(table)
}

/// Write the unigram rows of an embedding table in word2vec text format.
pub fn save_embeddings(path: &Path, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    let mut out = format!("{} {}\n", vocab.known_chars().len(), table.d_e);
    for (i, &c) in vocab.known_chars().iter().enumerate() {
        out.push(c);
        for j in 0..table.d_e {
            out.push_str(&format!(" {:?}", table.unigram.get(i + 2, j)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministically shuffle and carve the first ⌈fraction·N⌉ sentences off
/// as the development set.
pub fn split_dev(
    train: &[TaggedSentence],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TaggedSentence>, Vec<TaggedSentence>)> {
    if train.is_empty() {
        return Err(Error::Data("split_dev on empty train set".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("dev fraction {fraction} out of (0, 1)")));
    }
    let mut shuffled: Vec<TaggedSentence> = train.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_dev = (fraction * train.len() as f64).ceil() as usize;
    let rest = shuffled.split_off(n_dev);
    Ok((rest, shuffled))
}

/// Load a two-column "from<TAB>to" character mapping file.
pub fn load_char_mapping(path: &Path) -> Result<HashMap<char, char>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let from = fields.next().map(|f| f.chars().collect::<Vec<_>>());
        let to = fields.next().map(|f| f.chars().collect::<Vec<_>>());
        match (from, to, fields.next()) {
            (Some(f), Some(t), None) if f.len() == 1 && t.len() == 1 => {
                map.insert(f[0], t[0]);
            }
            _ => {
                return Err(Error::Data(format!(
                    "{}: malformed mapping line {}",
                    path.display(),
                    idx + 1
                )))
            }
        }
    }
    Ok(map)
}

/// Replace characters per the mapping; spans and tags are untouched because
/// the mapping is length-preserving.
pub fn normalize_chars(sentence: &TaggedSentence, mapping: Option<&HashMap<char, char>>) -> TaggedSentence {
    match mapping {
        None => sentence.clone(),
        Some(map) => TaggedSentence {
            chars: sentence
                .chars
                .iter()
                .map(|c| map.get(c).copied().unwrap_or(*c))
                .collect(),
            spans: sentence.spans.clone(),
            tags: sentence.tags.clone(),
        },
    }
}

/// A deterministic segmentation rule over letter/digit character streams.
///
/// All rules agree that a word never mixes letters and digits; they differ in
/// how runs are split, standing in for heterogeneous segmentation criteria
/// over the same underlying text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegRule {
    /// Every maximal same-class run is one word.
    ClassRuns,
    /// Letter runs are words; every digit is its own word.
    SplitDigits,
    /// Digit runs are words; every letter is its own word.
    SplitLetters,
}

impl SegRule {
    pub fn name(&self) -> &'static str {
        match self {
            SegRule::ClassRuns => "class-runs",
            SegRule::SplitDigits => "split-digits",
            SegRule::SplitLetters => "split-letters",
        }
    }

    pub fn segment(&self, chars: &[char]) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..=chars.len() {
            let boundary = i == chars.len() || {
                let prev_digit = chars[i - 1].is_ascii_digit();
                let cur_digit = chars[i].is_ascii_digit();
                let class_change = prev_digit != cur_digit;
                match self {
                    SegRule::ClassRuns => class_change,
                    SegRule::SplitDigits => class_change || prev_digit,
                    SegRule::SplitLetters => class_change || !prev_digit,
                }
            };
            if boundary {
                spans.push((start, i));
                start = i;
            }
        }
        spans
    }
}

/// Generate identical random character streams and segment each under every
/// rule, yielding one corpus per criterion that share underlying structure
/// but disagree on word boundaries.
pub fn generate_synthetic_corpora(
    alphabet_size: usize,
    n_sentences: usize,
    rules: &[SegRule],
    seed: u64,
) -> Result<Vec<CriterionCorpus>> {
    if rules.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 segmentation rules, got {}",
            rules.len()
        )));
    }
    if alphabet_size == 0 || n_sentences == 0 {
        return Err(Error::Data("alphabet_size and n_sentences must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_test = (n_sentences / 5).max(1);
    let streams: Vec<Vec<char>> = (0..n_sentences + n_test)
        .map(|_| random_stream(alphabet_size, &mut rng))
        .collect();

    rules
        .iter()
        .map(|rule| {
            let tagged: Vec<TaggedSentence> = streams
                .iter()
                .map(|chars| TaggedSentence::from_spans(chars.clone(), rule.segment(chars)))
                .collect::<Result<_>>()?;
            let (train_pool, test) = (&tagged[..n_sentences], &tagged[n_sentences..]);
            let (train, dev) = split_dev(train_pool, 0.10, seed ^ 0x5eed)?;
            Ok(CriterionCorpus::new(rule.name(), train, dev, test.to_vec()))
        })
        .collect()
}

fn random_stream(alphabet_size: usize, rng: &mut impl Rng) -> Vec<char> {
    let n_tokens = rng.gen_range(3..=8);
    let mut chars = Vec::new();
    for _ in 0..n_tokens {
        let digits = rng.gen_bool(0.5);
        let run = rng.gen_range(1..=4);
        for _ in 0..run {
            let c = if digits {
                (b'0' + rng.gen_range(0..10u8.min(alphabet_size as u8))) as char
            } else {
                (b'a' + rng.gen_range(0..alphabet_size.min(26)) as u8) as char
            };
            chars.push(c);
        }
    }
    chars
}
