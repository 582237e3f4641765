//! Corpus ingestion: character tokenization, vocabulary, fixed-length
//! encoding, stratified splits and batch iteration.

mod embeddings;
pub mod synthetic;

pub use embeddings::{load_pretrained_embeddings, PretrainedEmbeddings};

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CoreError, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Character-level token inventory with four fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const SEP: usize = 3;

    fn with_reserved() -> Self {
        let id_to_token: Vec<String> =
            [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN].iter().map(|s| s.to_string()).collect();
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { token_to_id, id_to_token }
    }

    /// Rebuild from a full id-ordered token list (reserved ids first), as
    /// stored in checkpoints.
    pub fn from_id_list(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];
        if tokens.len() < reserved.len()
            || tokens[..reserved.len()].iter().map(String::as_str).ne(reserved)
        {
            return Err(CoreError::contract(
                "vocab list must start with [PAD], [UNK], [CLS], [SEP]".to_string(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(CoreError::contract(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Vocab { token_to_id, id_to_token: tokens })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Vocab::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_reserved(id: usize) -> bool {
        id < 4
    }

    /// Map ids back to text, dropping reserved tokens.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Vocab::is_reserved(id))
            .filter_map(|&id| self.token(id))
            .collect()
    }
}

/// One labeled headline.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Examples plus the label-name inventory in first-appearance order.
#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
}

/// `[CLS]`, one token per non-whitespace character, `[SEP]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::with_capacity(text.chars().count() + 2);
    tokens.push(CLS_TOKEN.to_string());
    for ch in text.chars() {
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    tokens.push(SEP_TOKEN.to_string());
    tokens
}

/// Vocabulary over tokens with frequency ≥ `min_freq`, ordered by
/// (frequency desc, first occurrence asc) after the reserved ids.
pub fn build_vocab(examples: &[Example], min_freq: usize) -> Result<Vocab> {
    if examples.is_empty() {
        return Err(CoreError::contract("build_vocab: empty corpus".to_string()));
    }
    let mut freq: HashMap<String, (usize, usize)> = HashMap::new(); // token -> (count, first_pos)
    let mut pos = 0usize;
    for ex in examples {
        for token in tokenize(&ex.text) {
            if token == CLS_TOKEN || token == SEP_TOKEN {
                continue;
            }
            let entry = freq.entry(token).or_insert((0, pos));
            entry.0 += 1;
            pos += 1;
        }
    }
    let mut ranked: Vec<(String, usize, usize)> =
        freq.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
    ranked.retain(|&(_, c, _)| c >= min_freq);
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let mut vocab = Vocab::with_reserved();
    for (token, _, _) in ranked {
        let id = vocab.id_to_token.len();
        vocab.token_to_id.insert(token.clone(), id);
        vocab.id_to_token.push(token);
    }
    Ok(vocab)
}

/// Fixed-length encoding of one text row.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRow {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedRow {
    /// Count of real (non-[PAD]) tokens; always ≥ 2 ([CLS] and [SEP]).
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Tokenize, map unknowns to [UNK], truncate to `text_size` keeping [CLS]
/// first and forcing [SEP] into the last kept slot, right-pad with [PAD].
pub fn encode(text: &str, vocab: &Vocab, text_size: usize) -> Result<EncodedRow> {
    if text_size < 3 {
        return Err(CoreError::contract(format!(
            "encode: text_size {text_size} < 3 leaves no room for [CLS] and [SEP]"
        )));
    }
    let mut ids: Vec<usize> = tokenize(text).iter().map(|t| vocab.id_or_unk(t)).collect();
    if ids.len() > text_size {
        ids.truncate(text_size);
        ids[text_size - 1] = Vocab::SEP;
    }
    let mask: Vec<bool> = (0..text_size).map(|i| i < ids.len()).collect();
    ids.resize(text_size, Vocab::PAD);
    Ok(EncodedRow { ids, mask })
}

/// Encoded example ready for batching.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub row: EncodedRow,
    pub label: usize,
}

pub fn encode_corpus(examples: &[Example], vocab: &Vocab, text_size: usize) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| Ok(EncodedExample { row: encode(&ex.text, vocab, text_size)?, label: ex.label }))
        .collect()
}

/// Padded id matrix, mask and labels for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[bool], usize) {
        (&self.token_ids[i], &self.mask[i], self.labels[i])
    }
}

/// Load a `text<TAB>label` TSV. Labels are mapped to ids by first
/// appearance; blank lines are skipped; any malformed line fails the load
/// with its line number.
pub fn load_tsv(path: &Path) -> Result<LoadedCorpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| CoreError::io(format!("cannot read dataset {}", path.display()), e))?;
    let display = path.display().to_string();

    let mut labels: Vec<String> = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::new();

    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = idx + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.is_empty() {
            continue;
        }
        let line = std::str::from_utf8(raw).map_err(|e| CoreError::DataFormat {
            path: display.clone(),
            line: line_no,
            msg: format!("invalid UTF-8: {e}"),
        })?;
        let Some((text, label)) = line.split_once('\t') else {
            return Err(CoreError::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: "missing tab separator between text and label".into(),
            });
        };
        if text.is_empty() {
            return Err(CoreError::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: "empty text field".into(),
            });
        }
        if label.is_empty() {
            return Err(CoreError::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: "empty label field".into(),
            });
        }
        let next = labels.len();
        let label_id = *label_ids.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            next
        });
        examples.push(Example { text: text.to_string(), label: label_id });
    }
    Ok(LoadedCorpus { examples, labels })
}

/// Label-stratified split at integer ratios (largest-remainder rounding),
/// shuffled per class by the seed. The three parts are disjoint and exhaust
/// the input.
pub fn split(
    examples: &[Example],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    let denom = (ratios.0 + ratios.1 + ratios.2) as usize;
    if denom == 0 {
        return Err(CoreError::contract("split: ratios sum to zero".to_string()));
    }
    if examples.is_empty() {
        return Err(CoreError::contract("split: empty corpus".to_string()));
    }
    let classes = examples.iter().map(|e| e.label).max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.label].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(CoreError::contract(format!("split: class {empty} has no examples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = [ratios.0 as usize, ratios.1 as usize, ratios.2 as usize];
    let mut out: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, indices) in by_class.iter_mut().enumerate() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        if n < denom {
            log::warn!(
                "split: class {class} has {n} examples, fewer than the ratio denominator {denom}; \
                 some parts may be empty"
            );
        }
        let counts = largest_remainder(n, &parts);
        let mut cursor = 0;
        for (part, &count) in counts.iter().enumerate() {
            for &idx in &indices[cursor..cursor + count] {
                out[part].push(examples[idx].clone());
            }
            cursor += count;
        }
    }
    let [train, val, test] = out;
    Ok((train, val, test))
}

/// Apportion `n` into shares proportional to `weights`, exactly.
fn largest_remainder(n: usize, weights: &[usize]) -> Vec<usize> {
    let denom: usize = weights.iter().sum();
    let mut base: Vec<usize> = weights.iter().map(|&w| n * w / denom).collect();
    let assigned: usize = base.iter().sum();
    let mut rema: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (i, (n * w) % denom))
        .collect();
    // biggest fractional part first; ties to the earlier part
    rema.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        base[rema[k].0] += 1;
    }
    base
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batches in a per-(seed, epoch) reproducible order. The final short batch
/// is always emitted.
pub fn batch_iter<'a>(
    data: &'a [EncodedExample],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(CoreError::contract("batch_iter: batch_size must be ≥ 1".to_string()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        order.shuffle(&mut rng);
    }
    Ok((0..data.len().div_ceil(batch_size)).map(move |chunk| {
        let span = &order[chunk * batch_size..((chunk + 1) * batch_size).min(order.len())];
        Batch {
            token_ids: span.iter().map(|&i| data[i].row.ids.clone()).collect(),
            mask: span.iter().map(|&i| data[i].row.mask.clone()).collect(),
            labels: span.iter().map(|&i| data[i].label).collect(),
        }
    }))
}
