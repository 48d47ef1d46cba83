//! Dataset ingestion: tokenization, vocabulary, TSV loading, folds and
//! training-fraction subsampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Index of the out-of-vocabulary token.
pub const UNK: usize = 0;
/// Surface form reserved for [`UNK`].
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token to index mapping with [`UNK`] pinned at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            token_to_index: HashMap::new(),
            index_to_token: vec![UNK_TOKEN.to_owned()],
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized sentences.
    ///
    /// Tokens seen at least `min_count` times get indices `1..` in
    /// descending frequency, ties broken lexicographically. A `min_count`
    /// of zero is treated as one.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for token in sentence {
                *counts.entry(token.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count && tok != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Self::default();
        for (token, _) in kept {
            vocab.push(token.to_owned());
        }
        vocab
    }

    /// Builds from an explicit token list; index `i + 1` for `tokens[i]`.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut vocab = Self::default();
        for token in tokens {
            if token == UNK_TOKEN || vocab.token_to_index.contains_key(&token) {
                return Err(Error::invalid("tokens", format!("duplicate token {token:?}")));
            }
            vocab.push(token);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        self.token_to_index
            .insert(token.clone(), self.index_to_token.len());
        self.index_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    /// Always false; UNK is present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t.as_ref())).collect()
    }
}

/// Free-function form of [`Vocabulary::encode`].
pub fn encode<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Vec<usize> {
    vocab.encode(tokens)
}

/// Class name to class index, ordered by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::invalid("labels", "need at least two classes"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || names[..i].contains(n) {
                return Err(Error::invalid("labels", format!("bad or duplicate label {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        examples: Vec<LabeledExample>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        for ex in &examples {
            if ex.label >= num_classes {
                return Err(Error::invalid(
                    "label",
                    format!("label {} >= num_classes {num_classes}", ex.label),
                ));
            }
            if ex.tokens.is_empty() {
                return Err(Error::invalid("tokens", "examples must have at least one token"));
            }
        }
        Ok(Self {
            name: name.into(),
            examples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Copy holding only `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// Largest token index plus one, or 0 for an empty dataset.
    pub fn max_token_bound(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| e.tokens.iter())
            .max()
            .map_or(0, |&m| m + 1)
    }
}

/// One raw `<label>\t<text>` record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvRecord {
    pub line: usize,
    pub label: String,
    pub text: String,
}

/// Parses TSV text. Blank and `#` lines are skipped; line numbers are
/// one-based.
pub fn parse_tsv(path: &Path, content: &str) -> Result<Vec<TsvRecord>> {
    let mut records = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let Some((label, text)) = raw.split_once('\t') else {
            return Err(Error::Parse {
                path: path.to_owned(),
                line,
                message: "expected `<label>\\t<text>`".into(),
            });
        };
        records.push(TsvRecord {
            line,
            label: label.trim().to_owned(),
            text: text.to_owned(),
        });
    }
    Ok(records)
}

pub fn read_tsv(path: &Path) -> Result<Vec<TsvRecord>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(path, &content)
}

/// Converts raw records to a dataset. Empty texts become `[UNK]`.
pub fn records_to_dataset(
    name: &str,
    records: &[TsvRecord],
    vocab: &Vocabulary,
    labels: &LabelMap,
) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(records.len());
    for rec in records {
        let label = labels.index(&rec.label).ok_or_else(|| Error::UnknownLabel {
            label: rec.label.clone(),
            line: rec.line,
        })?;
        let mut tokens = vocab.encode(&tokenize(&rec.text));
        if tokens.is_empty() {
            tokens.push(UNK);
        }
        examples.push(LabeledExample { tokens, label });
    }
    Dataset::new(name, examples, labels.num_classes())
}

pub fn load_tsv(path: &Path, vocab: &Vocabulary, labels: &LabelMap) -> Result<Dataset> {
    let records = read_tsv(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    records_to_dataset(&name, &records, vocab, labels)
}

/// Dev-fold membership for `k`-fold cross-validation over `n` items.
///
/// Item `perm[j]` lands in fold `j % k`, so fold sizes differ by at most one.
pub fn cv_fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("k", "need at least two folds"));
    }
    if k > n {
        return Err(Error::invalid("k", format!("{k} folds for {n} examples")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (j, idx) in perm.into_iter().enumerate() {
        folds[j % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// `k` (train, dev) partitions of `dataset`.
pub fn split_cv(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let folds = cv_fold_indices(dataset.len(), k, seed)?;
    Ok(folds
        .iter()
        .map(|dev| {
            let mut in_dev = vec![false; dataset.len()];
            for &i in dev {
                in_dev[i] = true;
            }
            let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_dev[i]).collect();
            (dataset.select(&train), dataset.select(dev))
        })
        .collect())
}

fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    // 0.1 * 30 lands just above 3.0
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Indices of a stratified sample of `ceil(fraction * N)` examples, sorted.
///
/// Per-class quotas use largest remainders so the total is exact.
pub fn stratified_sample_indices(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} not in (0, 1]")));
    }
    let n = dataset.len();
    let target = ceil_count(fraction, n).min(n);

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }

    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, members)| {
            let exact = fraction * members.len() as f64;
            let base = (exact.floor() as usize).min(members.len());
            (c, base, exact - base as f64)
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    while assigned < target {
        let mut progressed = false;
        for &qi in &order {
            if assigned == target {
                break;
            }
            let cap = by_class[&quotas[qi].0].len();
            if quotas[qi].1 < cap {
                quotas[qi].1 += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut chosen = Vec::with_capacity(target);
    for (c, quota, _) in quotas {
        let mut members = by_class[&c].clone();
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..quota]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Stratified subsample; `fraction == 1.0` returns the dataset unchanged.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let idx = stratified_sample_indices(dataset, fraction, seed)?;
    Ok(dataset.select(&idx))
}

/// Splits off a stratified held-out part: `(rest, held_out)`.
pub fn split_holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} not in (0, 1)")));
    }
    let held = stratified_sample_indices(dataset, fraction, seed)?;
    let mut is_held = vec![false; dataset.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| !is_held[i]).collect();
    if rest.is_empty() || held.is_empty() {
        return Err(Error::invalid(
            "fraction",
            format!("holdout of {fraction} leaves an empty side of {} examples", dataset.len()),
        ));
    }
    Ok((dataset.select(&rest), dataset.select(&held)))
}
