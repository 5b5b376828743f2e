//! Corpus ingestion: tokenization, vocabulary construction, split assignment,
//! and the extrapolation sub-dataset used to test compositional generalization.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

pub mod synthetic;

/// A point in HSV color-space, every channel scaled to `[0, 1]`.
/// Hue is circular: distance wraps around 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorPoint {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl ColorPoint {
    pub fn new(h: f64, s: f64, v: f64) -> Result<Self> {
        for x in [h, s, v] {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(Error::DomainError(x));
            }
        }
        Ok(Self { h, s, v })
    }

    pub fn channel(&self, index: usize) -> f64 {
        [self.h, self.s, self.v][index]
    }

    /// Circular distance in the hue channel.
    pub fn hue_distance(h1: f64, h2: f64) -> f64 {
        let d = (h1 - h2).abs();
        d.min(1.0 - d)
    }
}

/// One survey response: a description plus the color point the respondent picked.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Normalized (lowercased, whitespace-collapsed) description text.
    pub description: String,
    /// Token indices into the corpus vocabulary.
    pub tokens: Vec<usize>,
    pub color: ColorPoint,
}

/// Bidirectional token <-> dense-index map, built from the training split only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from token strings in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::default();
        for tok in tokens {
            vocab.intern(tok.as_ref());
        }
        vocab
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&idx) = self.token_to_index.get(token) {
            return idx;
        }
        let idx = self.index_to_token.len();
        self.token_to_index.insert(token.to_string(), idx);
        self.index_to_token.push(token.to_string());
        idx
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index_to_token.iter().map(String::as_str)
    }

    /// Maps token strings to indices, collecting every unknown token.
    pub fn indices(&self, tokens: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut unknown = Vec::new();
        for tok in tokens {
            match self.index_of(tok) {
                Some(idx) => out.push(idx),
                None => unknown.push(tok.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(out)
        } else {
            unknown.sort();
            unknown.dedup();
            Err(Error::UnknownTokens { tokens: unknown })
        }
    }

    /// One token per line; the line number is the index.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for tok in &self.index_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Train/dev/test observation lists sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Observation>,
    pub dev: Vec<Observation>,
    pub test: Vec<Observation>,
    pub vocabulary: Vocabulary,
}

impl CorpusSplit {
    pub fn observation_count(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitLabel {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Train => "train",
            SplitLabel::Dev => "dev",
            SplitLabel::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "dev" => Ok(SplitLabel::Dev),
            "test" => Ok(SplitLabel::Test),
            other => Err(Error::InvalidInput(format!("unknown split label {other:?}"))),
        }
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_description(description: &str) -> String {
    description
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

// Affix splitting floors. "ish" splits off stems of >= 3 characters
// ("bluish" -> "blu", "ish"); "y" requires >= 4 so that "grey" and "ruby"
// stay whole.
const ISH_STEM_MIN: usize = 3;
const Y_STEM_MIN: usize = 4;

/// Splits a description into lowercase tokens: words on whitespace, each
/// hyphen its own `-` token, and trailing `ish`/`y` affixes split off.
pub fn tokenize(description: &str) -> Result<Vec<String>> {
    let normalized = normalize_description(description);
    if normalized.is_empty() {
        return Err(Error::InvalidInput(
            "description is empty after trimming whitespace".into(),
        ));
    }
    let mut tokens = Vec::new();
    for word in normalized.split(' ') {
        let mut rest = word;
        loop {
            match rest.find('-') {
                Some(pos) => {
                    if pos > 0 {
                        push_with_affix(&mut tokens, &rest[..pos]);
                    }
                    tokens.push("-".to_string());
                    rest = &rest[pos + 1..];
                }
                None => {
                    if !rest.is_empty() {
                        push_with_affix(&mut tokens, rest);
                    }
                    break;
                }
            }
        }
    }
    Ok(tokens)
}

fn push_with_affix(tokens: &mut Vec<String>, word: &str) {
    if let Some(stem) = word.strip_suffix("ish") {
        if stem.chars().count() >= ISH_STEM_MIN {
            tokens.push(stem.to_string());
            tokens.push("ish".to_string());
            return;
        }
    }
    if let Some(stem) = word.strip_suffix('y') {
        if stem.chars().count() >= Y_STEM_MIN {
            tokens.push(stem.to_string());
            tokens.push("y".to_string());
            return;
        }
    }
    tokens.push(word.to_string());
}

/// Inverse of [`tokenize`] for tokenizer-produced sequences: affix tokens
/// reattach to the preceding word and `-` joins its neighbours.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    let mut word_has_affix = false;
    for tok in tokens {
        let tok = tok.as_ref();
        if tok == "-" {
            out.push('-');
            glue_next = true;
            word_has_affix = false;
            continue;
        }
        // Reattach an affix only when the result would re-split identically:
        // the stem must meet the length floor and not already carry an affix.
        let prev_len = out
            .rsplit([' ', '-'])
            .next()
            .map(|w| w.chars().count())
            .unwrap_or(0);
        let is_affix = !out.is_empty()
            && !out.ends_with('-')
            && !word_has_affix
            && ((tok == "ish" && prev_len >= ISH_STEM_MIN)
                || (tok == "y" && prev_len >= Y_STEM_MIN));
        if !out.is_empty() && !glue_next && !is_affix {
            out.push(' ');
            word_has_affix = false;
        }
        out.push_str(tok);
        if is_affix {
            word_has_affix = true;
        }
        glue_next = false;
    }
    out
}

/// One raw input row, prior to tokenization and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub line: usize,
    pub description: String,
    pub h: f64,
    pub s: f64,
    pub v: f64,
    pub split: Option<SplitLabel>,
}

/// How records are assigned to train/dev/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Every record must carry an explicit split label.
    Labeled,
    /// Deterministic shuffle with the given seed, then proportional cut.
    Ratio { train: f64, dev: f64, seed: u64 },
}

/// Parses TSV rows `description<TAB>h<TAB>s<TAB>v[<TAB>split]`.
/// Lines starting with `#` and blank lines are skipped.
pub fn parse_tsv(text: &str, has_header: bool) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    let mut saw_header = !has_header;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(Error::MalformedRecord {
                line: lineno,
                message: format!("expected 4 or 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let mut channels = [0.0; 3];
        for (slot, raw) in channels.iter_mut().zip(&fields[1..4]) {
            *slot = raw.trim().parse::<f64>().map_err(|_| Error::MalformedRecord {
                line: lineno,
                message: format!("cannot parse {raw:?} as a float"),
            })?;
        }
        let split = match fields.get(4) {
            Some(raw) => Some(raw.trim().parse::<SplitLabel>().map_err(|_| {
                Error::MalformedRecord {
                    line: lineno,
                    message: format!("unknown split label {raw:?}"),
                }
            })?),
            None => None,
        };
        records.push(RawRecord {
            line: lineno,
            description: fields[0].to_string(),
            h: channels[0],
            s: channels[1],
            v: channels[2],
            split,
        });
    }
    Ok(records)
}

/// Serializes observations back to the manifest TSV schema (4 columns).
pub fn observations_to_tsv(observations: &[Observation]) -> String {
    let mut out = String::new();
    for obs in observations {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            obs.description, obs.color.h, obs.color.s, obs.color.v
        ));
    }
    out
}

/// Tokenizes and validates records, assigns splits, builds the vocabulary from
/// the train portion, and verifies dev/test token coverage.
pub fn ingest(records: &[RawRecord], spec: &SplitSpec) -> Result<CorpusSplit> {
    struct Tokenized {
        description: String,
        tokens: Vec<String>,
        color: ColorPoint,
        label: SplitLabel,
    }

    let mut labeled = Vec::with_capacity(records.len());
    let assignments = assign_splits(records, spec)?;
    for (record, label) in records.iter().zip(assignments) {
        for (channel, value) in [('h', record.h), ('s', record.s), ('v', record.v)] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(Error::ChannelOutOfRange {
                    line: record.line,
                    channel,
                    value,
                });
            }
        }
        let tokens = tokenize(&record.description)?;
        labeled.push(Tokenized {
            description: normalize_description(&record.description),
            tokens,
            color: ColorPoint::new(record.h, record.s, record.v)?,
            label,
        });
    }

    let vocabulary = Vocabulary::from_tokens(
        labeled
            .iter()
            .filter(|t| t.label == SplitLabel::Train)
            .flat_map(|t| t.tokens.iter()),
    );

    let mut split = CorpusSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        vocabulary,
    };
    for t in labeled {
        let tokens = split.vocabulary.indices(&t.tokens)?;
        let obs = Observation {
            description: t.description,
            tokens,
            color: t.color,
        };
        match t.label {
            SplitLabel::Train => split.train.push(obs),
            SplitLabel::Dev => split.dev.push(obs),
            SplitLabel::Test => split.test.push(obs),
        }
    }
    Ok(split)
}

fn assign_splits(records: &[RawRecord], spec: &SplitSpec) -> Result<Vec<SplitLabel>> {
    match spec {
        SplitSpec::Labeled => records
            .iter()
            .map(|r| {
                r.split.ok_or(Error::MalformedRecord {
                    line: r.line,
                    message: "missing split column".into(),
                })
            })
            .collect(),
        SplitSpec::Ratio { train, dev, seed } => {
            if !(0.0..=1.0).contains(train) || !(0.0..=1.0).contains(dev) || train + dev > 1.0 {
                return Err(Error::Config("split ratios must be in [0,1] and sum to <= 1".into()));
            }
            let n = records.len();
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            order.shuffle(&mut rng);
            let n_train = (n as f64 * train).floor() as usize;
            let n_dev = (n as f64 * dev).floor() as usize;
            let mut labels = vec![SplitLabel::Test; n];
            for (pos, &idx) in order.iter().enumerate() {
                labels[idx] = if pos < n_train {
                    SplitLabel::Train
                } else if pos < n_train + n_dev {
                    SplitLabel::Dev
                } else {
                    SplitLabel::Test
                };
            }
            Ok(labels)
        }
    }
}

/// Rebuilds a split where the `count` rarest descriptions are held out of
/// training entirely, subject to every one of their tokens having at least
/// `min_other_uses` observations among the remaining descriptions.
///
/// Held-out observations keep their original dev/test labels; their
/// train-labeled observations are dropped, and all observations of
/// non-selected descriptions become training data. Ties in rarity break
/// lexicographically. Returns the new split and the selected descriptions.
pub fn build_extrapolation_split(
    full: &CorpusSplit,
    count: usize,
    min_other_uses: usize,
) -> Result<(CorpusSplit, Vec<String>)> {
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let all: Vec<(&Observation, SplitLabel)> = full
        .train
        .iter()
        .map(|o| (o, SplitLabel::Train))
        .chain(full.dev.iter().map(|o| (o, SplitLabel::Dev)))
        .chain(full.test.iter().map(|o| (o, SplitLabel::Test)))
        .collect();

    // Observation count per description, and per token (one use per
    // observation per distinct token).
    let mut desc_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut desc_tokens: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let mut token_uses: HashMap<usize, usize> = HashMap::new();
    for (obs, _) in &all {
        *desc_counts.entry(&obs.description).or_default() += 1;
        let distinct: BTreeSet<usize> = obs.tokens.iter().copied().collect();
        for &tok in &distinct {
            *token_uses.entry(tok).or_default() += 1;
        }
        desc_tokens.entry(&obs.description).or_insert(distinct);
    }

    if desc_counts.len() <= count {
        return Err(Error::InfeasibleSelection {
            requested: count,
            achievable: 0,
        });
    }

    let mut candidates: Vec<(&str, usize)> =
        desc_counts.iter().map(|(d, c)| (*d, *c)).collect();
    candidates.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));

    let mut remaining = token_uses;
    let mut selected: Vec<String> = Vec::new();
    for (desc, obs_count) in candidates {
        if selected.len() == count {
            break;
        }
        let tokens = &desc_tokens[desc];
        let feasible = tokens
            .iter()
            .all(|tok| remaining[tok].saturating_sub(obs_count) >= min_other_uses);
        if feasible {
            for tok in tokens {
                *remaining.get_mut(tok).unwrap() -= obs_count;
            }
            selected.push(desc.to_string());
        }
    }
    if selected.len() < count {
        return Err(Error::InfeasibleSelection {
            requested: count,
            achievable: selected.len(),
        });
    }

    let selected_set: HashSet<&str> = selected.iter().map(String::as_str).collect();
    let mut train_raw = Vec::new();
    let mut dev_raw = Vec::new();
    let mut test_raw = Vec::new();
    for (obs, label) in &all {
        if selected_set.contains(obs.description.as_str()) {
            match label {
                SplitLabel::Dev => dev_raw.push(*obs),
                SplitLabel::Test => test_raw.push(*obs),
                SplitLabel::Train => {} // dropped: training must not see them
            }
        } else {
            train_raw.push(*obs);
        }
    }

    // Re-index against a vocabulary built from the new training set.
    let vocabulary = Vocabulary::from_tokens(
        train_raw
            .iter()
            .flat_map(|o| o.tokens.iter().map(|&t| full.vocabulary.token(t).unwrap())),
    );
    let reindex = |obs: &Observation| -> Result<Observation> {
        let strings: Vec<String> = obs
            .tokens
            .iter()
            .map(|&t| full.vocabulary.token(t).unwrap().to_string())
            .collect();
        Ok(Observation {
            description: obs.description.clone(),
            tokens: vocabulary.indices(&strings)?,
            color: obs.color,
        })
    };
    let split = CorpusSplit {
        train: train_raw.iter().map(|o| reindex(o)).collect::<Result<_>>()?,
        dev: dev_raw.iter().map(|o| reindex(o)).collect::<Result<_>>()?,
        test: test_raw.iter().map(|o| reindex(o)).collect::<Result<_>>()?,
        vocabulary,
    };
    Ok((split, selected))
}
