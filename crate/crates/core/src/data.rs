//! Synthetic parallel/monolingual corpora, BPE, vocabularies and batching.
//!
//! The synthetic language pair is a Markov-chain source language whose
//! translation is a bijective word cipher followed by a local reordering.
//! Both monolingual corpora come from the same generator, so target-side
//! language structure learned from monolingual text carries over to
//! translation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AptError, Result};
use crate::model::{pad_targets, teacher_forcing_pair, TokenBatch, BOS, EOS, MASK, PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CipherKind {
    Identity,
    Permutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Word-type counts per language; the cipher needs them equal.
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub markov_order: usize,
    /// Number of successors each Markov state can move to.
    pub branching: usize,
    pub transition_seed: u64,
    pub cipher: CipherKind,
    /// Reverses every aligned block of this many tokens; 2 swaps adjacent pairs.
    pub reorder_window: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub mono_src: usize,
    pub mono_tgt: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            src_vocab: 64,
            tgt_vocab: 64,
            markov_order: 1,
            branching: 4,
            transition_seed: 17,
            cipher: CipherKind::Permutation,
            reorder_window: 2,
            min_len: 4,
            max_len: 12,
            train_pairs: 2000,
            valid_pairs: 200,
            test_pairs: 200,
            mono_src: 50_000,
            mono_tgt: 50_000,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(AptError::DegenerateSpec(m));
        if self.src_vocab < 8 || self.tgt_vocab < 8 {
            return fail(format!("vocabularies must have at least 8 words (got {}, {})", self.src_vocab, self.tgt_vocab));
        }
        if self.src_vocab != self.tgt_vocab {
            return fail("a bijective cipher needs equal source and target vocabularies".into());
        }
        if self.reorder_window < 1 {
            return fail("reorder window must be at least 1".into());
        }
        if self.markov_order < 1 || self.branching < 1 || self.branching > self.src_vocab {
            return fail("markov order and branching must be in range".into());
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return fail(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        Ok(())
    }
}

/// The generator itself: Markov chain, cipher and reorder rule.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// Context (last `order` words) to successor list with probabilities.
    transitions: HashMap<Vec<usize>, Vec<(usize, f64)>>,
    cipher: Vec<usize>,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    tgt_index: HashMap<String, usize>,
}

fn surface_form(i: usize, consonants: &[u8], vowels: &[u8]) -> String {
    let syllables = consonants.len() * vowels.len();
    let mut n = i;
    let mut out = String::new();
    loop {
        let s = n % syllables;
        out.push(consonants[s / vowels.len()] as char);
        out.push(vowels[s % vowels.len()] as char);
        n /= syllables;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    out
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.transition_seed);
        let v = spec.src_vocab;
        let cipher: Vec<usize> = match spec.cipher {
            CipherKind::Identity => (0..v).collect(),
            CipherKind::Permutation => {
                let mut p: Vec<usize> = (0..v).collect();
                p.shuffle(&mut rng);
                p
            }
        };
        let mut transitions = HashMap::new();
        let mut contexts: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..spec.markov_order {
            contexts = contexts
                .into_iter()
                .flat_map(|c| {
                    (0..v).map(move |w| {
                        let mut c = c.clone();
                        c.push(w);
                        c
                    })
                })
                .collect();
        }
        let all: Vec<usize> = (0..v).collect();
        for ctx in contexts {
            let succ: Vec<usize> = all.choose_multiple(&mut rng, spec.branching).copied().collect();
            let weights: Vec<f64> = succ.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let z: f64 = weights.iter().sum();
            transitions.insert(ctx, succ.into_iter().zip(weights.into_iter().map(|w| w / z)).collect());
        }
        let src_words: Vec<String> = (0..v).map(|i| surface_form(i, b"ktpsmnlr", b"aeiou")).collect();
        let tgt_words: Vec<String> = (0..v).map(|i| surface_form(i, b"bdgfvzhj", b"aeiy")).collect();
        let tgt_index = tgt_words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(SyntheticTask { spec, transitions, cipher, src_words, tgt_words, tgt_index })
    }

    /// Samples one source sentence as word indices.
    pub fn sample_source(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let order = self.spec.markov_order;
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            if out.len() < order {
                out.push(rng.gen_range(0..self.spec.src_vocab));
                continue;
            }
            let ctx = &out[out.len() - order..];
            let succ = &self.transitions[ctx];
            let mut u: f64 = rng.gen();
            let mut next = succ[succ.len() - 1].0;
            for &(w, p) in succ {
                if u < p {
                    next = w;
                    break;
                }
                u -= p;
            }
            out.push(next);
        }
        out
    }

    pub fn reorder<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        let w = self.spec.reorder_window;
        seq.chunks(w).flat_map(|c| c.iter().rev().cloned()).collect()
    }

    /// The exact translation of a source sentence (word indices).
    pub fn translate_ids(&self, src: &[usize]) -> Vec<usize> {
        let ciphered: Vec<usize> = src.iter().map(|&w| self.cipher[w]).collect();
        self.reorder(&ciphered)
    }

    pub fn source_text(&self, src: &[usize]) -> String {
        src.iter().map(|&w| self.src_words[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn target_text(&self, tgt: &[usize]) -> String {
        tgt.iter().map(|&w| self.tgt_words[w].as_str()).collect::<Vec<_>>().join(" ")
    }

    /// Reference translation of a source sentence in surface form.
    pub fn translate_text(&self, src: &str) -> Option<String> {
        let index: HashMap<&str, usize> = self.src_words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let ids: Option<Vec<usize>> = src.split_whitespace().map(|w| index.get(w).copied()).collect();
        ids.map(|ids| self.target_text(&self.translate_ids(&ids)))
    }

    pub fn target_word_index(&self, w: &str) -> Option<usize> {
        self.tgt_index.get(w).copied()
    }

    /// Successor distribution for an order-`k` context.
    pub fn successors(&self, ctx: &[usize]) -> &[(usize, f64)] {
        &self.transitions[ctx]
    }

    /// Expected per-prediction negative log-likelihood (nats) of the true
    /// generator on a source sentence scored as `z_1 … z_n EOS`.
    ///
    /// Only defined for first-order chains.
    pub fn source_cross_entropy(&self) -> f64 {
        assert_eq!(self.spec.markov_order, 1, "closed form assumes a first-order chain");
        let v = self.spec.src_vocab;
        let (lo, hi) = (self.spec.min_len, self.spec.max_len);
        let lengths = (hi - lo + 1) as f64;
        let row_entropy: Vec<f64> = (0..v)
            .map(|w| -self.transitions[&vec![w]].iter().map(|&(_, p)| p * p.ln()).sum::<f64>())
            .collect();
        // Marginal over the word at each position, starting uniform.
        let mut marginal = vec![1.0 / v as f64; v];
        let mut position_entropy = vec![(v as f64).ln()];
        for _ in 1..hi {
            position_entropy.push(marginal.iter().zip(&row_entropy).map(|(m, h)| m * h).sum());
            let mut next = vec![0.0; v];
            for (w, &m) in marginal.iter().enumerate() {
                for &(s, p) in &self.transitions[&vec![w]] {
                    next[s] += m * p;
                }
            }
            marginal = next;
        }
        // EOS decision after each position t: hazard of stopping given len >= t.
        let mut total_nll = 0.0;
        let mut total_predictions = 0.0;
        for n in lo..=hi {
            let mut nll: f64 = position_entropy[..n].iter().sum();
            for t in 1..=n {
                if t < lo {
                    continue;
                }
                let remaining = (hi - t + 1) as f64;
                let stop = 1.0 / remaining;
                nll -= if t == n { stop.ln() } else { (1.0 - stop).ln() };
            }
            total_nll += nll / lengths;
            total_predictions += (n + 1) as f64 / lengths;
        }
        total_nll / total_predictions
    }
}

/// Parallel pairs and monolingual text, one sentence per entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpora {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub mono_src: Vec<String>,
    pub mono_tgt: Vec<String>,
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(SyntheticTask, Corpora)> {
    let task = SyntheticTask::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(AptError::DegenerateSpec("cannot draw enough distinct sentences".into()));
            }
            let src = task.sample_source(rng);
            if !seen.insert(src.clone()) {
                continue;
            }
            out.push((task.source_text(&src), task.target_text(&task.translate_ids(&src))));
        }
        Ok(out)
    };
    let train = split(spec.train_pairs, &mut rng)?;
    let valid = split(spec.valid_pairs, &mut rng)?;
    let test = split(spec.test_pairs, &mut rng)?;
    let mono_src = (0..spec.mono_src).map(|_| task.source_text(&task.sample_source(&mut rng))).collect();
    let mono_tgt = (0..spec.mono_tgt)
        .map(|_| task.target_text(&task.translate_ids(&task.sample_source(&mut rng))))
        .collect();
    Ok((task, Corpora { train, valid, test, mono_src, mono_tgt }))
}

pub const END_OF_WORD: &str = "</w>";

/// Ordered BPE merge list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

fn merge_pair(symbols: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Greedy most-frequent-pair merges; ties go to the lexicographically
/// smallest pair.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], merge_count: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(AptError::EmptyCorpus);
    }
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *words.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut segmented: Vec<(Vec<String>, usize)> = words.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect();
    let mut merges = Vec::with_capacity(merge_count);
    for _ in 0..merge_count {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &segmented {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first max wins ties.
        let Some(((a, b), _)) = counts.iter().fold(None, |best: Option<(&(&str, &str), &usize)>, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        }) else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in &mut segmented {
            *syms = merge_pair(syms, &a, &b);
        }
        merges.push((a, b));
    }
    Ok(BpeModel { merges })
}

impl BpeModel {
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        let rank: HashMap<(&str, &str), usize> =
            self.merges.iter().enumerate().map(|(i, (a, b))| ((a.as_str(), b.as_str()), i)).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| rank.get(&(p[0].as_str(), p[1].as_str())).copied())
                .min();
            let Some(r) = best else { break };
            let (a, b) = &self.merges[r];
            syms = merge_pair(&syms, a, b);
        }
        syms
    }

    pub fn apply(&self, text: &str) -> Vec<String> {
        text.split_whitespace().flat_map(|w| self.segment_word(w)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (a, b) in &self.merges {
            writeln!(f, "{a} {b}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut merges = Vec::new();
        for line in f.lines() {
            let line = line?;
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(AptError::Config(format!("malformed merge line `{line}`"))),
            }
        }
        Ok(BpeModel { merges })
    }
}

/// Concatenates subword tokens back into space-separated words.
pub fn join_subwords<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(stem) = t.strip_suffix(END_OF_WORD) {
            out.push_str(stem);
            out.push(' ');
        } else {
            out.push_str(t);
        }
    }
    out.trim_end().to_string()
}

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Token-id map; ids `0..5` are the reserved pad/bos/eos/unk/mask symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(AptError::Config("vocabulary must start with the reserved symbols".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(AptError::Config("duplicate vocabulary entry".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Every atom seen in the segmented corpus, then merged symbols by
    /// descending frequency, up to `max_size` entries in total.
    pub fn build<S: AsRef<str>>(corpus: &[S], bpe: &BpeModel, max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(AptError::EmptyCorpus);
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut word_cache: HashMap<String, Vec<String>> = HashMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                let segs = word_cache.entry(w.to_string()).or_insert_with(|| bpe.segment_word(w));
                for s in segs.iter() {
                    *freq.entry(s.clone()).or_default() += 1;
                }
            }
        }
        let mut atoms: Vec<String> = freq
            .keys()
            .flat_map(|s| {
                let stem = s.strip_suffix(END_OF_WORD);
                let chars: Vec<char> = stem.unwrap_or(s).chars().collect();
                let mut out: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
                if let Some(last) = chars.last() {
                    out.push(format!("{last}{END_OF_WORD}"));
                }
                out
            })
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        atoms.sort();
        let atom_set: HashSet<&String> = atoms.iter().collect();
        let mut merged: Vec<(&String, usize)> = freq.iter().filter(|(s, _)| !atom_set.contains(s)).map(|(s, &c)| (s, c)).collect();
        merged.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(atoms.iter().cloned());
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(merged.into_iter().take(room).map(|(s, _)| s.clone()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// BPE segmentation plus vocabulary lookup for one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn learn<S: AsRef<str>>(corpus: &[S], merge_count: usize, max_vocab: usize) -> Result<Self> {
        let bpe = learn_bpe(corpus, merge_count)?;
        let vocab = Vocabulary::build(corpus, &bpe, max_vocab)?;
        Ok(Tokenizer { bpe, vocab })
    }

    pub fn with_index(mut self) -> Self {
        self.vocab.rebuild_index();
        self
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            let segs = self.bpe.segment_word(w);
            if segs.iter().all(|s| self.vocab.id(s).is_some()) {
                out.extend(segs.iter().map(|s| self.vocab.id(s).unwrap_or(UNK)));
            } else {
                // Fall back to atoms for merged symbols cut from the vocabulary.
                for s in word_symbols(w) {
                    out.push(self.vocab.id(&s).unwrap_or(UNK));
                }
            }
        }
        out
    }

    /// Inverse of [`Tokenizer::encode`]; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i > MASK || i == UNK)
            .map(|&i| self.vocab.token(i).unwrap_or("<unk>"))
            .collect();
        join_subwords(&toks)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Writes the merge list and the vocabulary, one entry per line.
    pub fn save(&self, bpe_path: &Path, vocab_path: &Path) -> Result<()> {
        self.bpe.save(bpe_path)?;
        write_lines(vocab_path, self.vocab.tokens())
    }

    pub fn load(bpe_path: &Path, vocab_path: &Path) -> Result<Self> {
        let bpe = BpeModel::load(bpe_path)?;
        let vocab = Vocabulary::from_tokens(read_lines(vocab_path)?)?;
        Ok(Tokenizer { bpe, vocab })
    }
}

/// A tokenized sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// A padded training batch. `targets` is aligned with `tgt_in` and holds
/// `PAD` at padded positions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: TokenBatch,
    pub tgt_in: TokenBatch,
    pub targets: Vec<usize>,
    /// Positions of the batch members in the input corpus.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], indices: Vec<usize>) -> Self {
        let src: Vec<Vec<usize>> = examples.iter().map(|e| source_input(&e.src)).collect();
        let (tgt_in, targets): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            examples.iter().map(|e| teacher_forcing_pair(&e.tgt)).unzip();
        let tgt_in = TokenBatch::from_seqs(&tgt_in);
        let targets = pad_targets(&targets, tgt_in.layout.len);
        Batch { src: TokenBatch::from_seqs(&src), tgt_in, targets, indices }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn pad_tokens(&self) -> usize {
        let src_pad = self.src.layout.mask.iter().filter(|&&m| !m).count();
        let tgt_pad = self.tgt_in.layout.mask.iter().filter(|&&m| !m).count();
        src_pad + tgt_pad
    }

    pub fn total_slots(&self) -> usize {
        self.src.layout.rows() + self.tgt_in.layout.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Examples dropped because a side exceeded `max_len`.
    pub filtered: usize,
}

impl Batches {
    pub fn pad_fraction(&self) -> f64 {
        let pad: usize = self.batches.iter().map(Batch::pad_tokens).sum();
        let total: usize = self.batches.iter().map(Batch::total_slots).sum();
        if total == 0 {
            0.0
        } else {
            pad as f64 / total as f64
        }
    }
}

/// Encoder input for a tokenized source sentence: `x_1 … x_n EOS`.
pub fn source_input(x: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(x.len() + 1);
    out.extend_from_slice(x);
    out.push(EOS);
    out
}

fn fits(e: &Example, max_len: usize) -> bool {
    !e.src.is_empty() && e.src.len() < max_len && e.tgt.len() < max_len
}

/// Length-sorted bucketing. Examples are ordered by (source, target) length,
/// cut into consecutive batches, and the batch order is shuffled with `seed`.
pub fn make_batches(examples: &[Example], batch_size: usize, max_len: usize, seed: u64) -> Batches {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut kept: Vec<usize> = (0..examples.len())
        .filter(|&i| fits(&examples[i], max_len))
        .collect();
    let filtered = examples.len() - kept.len();
    kept.sort_by_key(|&i| (examples[i].src.len(), examples[i].tgt.len(), i));
    let mut batches: Vec<Batch> = kept
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&members, chunk.to_vec())
        })
        .collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Batches { batches, filtered }
}

/// Random-order batching, used as a reference for padding efficiency.
pub fn make_random_batches(examples: &[Example], batch_size: usize, max_len: usize, seed: u64) -> Batches {
    let mut kept: Vec<usize> = (0..examples.len())
        .filter(|&i| fits(&examples[i], max_len))
        .collect();
    let filtered = examples.len() - kept.len();
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = kept
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&members, chunk.to_vec())
        })
        .collect();
    Batches { batches, filtered }
}

pub fn tokenize_pairs(pairs: &[(String, String)], src: &Tokenizer, tgt: &Tokenizer) -> Vec<Example> {
    pairs.iter().map(|(s, t)| Example { src: src.encode(s), tgt: tgt.encode(t) }).collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines().map(|l| l.map_err(AptError::from)).collect()
}

pub fn write_lines<S: fmt::Display>(path: &Path, lines: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Sentinel helper for monolingual causal LM batches: inputs `BOS z`, targets `z EOS`.
pub fn lm_pair(z: &[usize]) -> (Vec<usize>, Vec<usize>) {
    teacher_forcing_pair(z)
}

/// Ids with special meaning that raw text never maps to.
pub fn is_reserved(id: usize) -> bool {
    matches!(id, PAD | BOS | EOS | MASK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn small_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            src_vocab: 16,
            tgt_vocab: 16,
            train_pairs: 300,
            valid_pairs: 30,
            test_pairs: 30,
            mono_src: 100,
            mono_tgt: 100,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn identity_cipher_and_window_one_copy_source() {
        let spec = SyntheticTaskSpec { cipher: CipherKind::Identity, reorder_window: 1, ..small_spec() };
        let (task, corpora) = generate_synthetic(&spec).unwrap();
        for (s, t) in &corpora.train {
            let ids: Vec<usize> = s
                .split_whitespace()
                .map(|w| task.src_words.iter().position(|x| x == w).unwrap())
                .collect();
            assert_eq!(task.translate_ids(&ids), ids);
            assert_eq!(task.target_text(&ids), *t);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap().1;
        let b = generate_synthetic(&small_spec()).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn every_pair_satisfies_the_oracle() {
        let (task, corpora) = generate_synthetic(&small_spec()).unwrap();
        let src_index: HashMap<&str, usize> =
            task.src_words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        for (s, t) in corpora.train.iter().chain(&corpora.valid).chain(&corpora.test) {
            let ids: Vec<usize> = s.split_whitespace().map(|w| src_index[w]).collect();
            // Independent application: cipher each word, then reverse blocks of w.
            let ciphered: Vec<usize> = ids.iter().map(|&w| task.cipher[w]).collect();
            let mut expected = Vec::new();
            for block in ciphered.chunks(task.spec.reorder_window) {
                for &w in block.iter().rev() {
                    expected.push(w);
                }
            }
            let got: Vec<usize> = t.split_whitespace().map(|w| task.target_word_index(w).unwrap()).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let (_, c) = generate_synthetic(&small_spec()).unwrap();
        let train: HashSet<&String> = c.train.iter().map(|p| &p.0).collect();
        assert!(c.valid.iter().chain(&c.test).all(|p| !train.contains(&p.0)));
        let valid: HashSet<&String> = c.valid.iter().map(|p| &p.0).collect();
        assert!(c.test.iter().all(|p| !valid.contains(&p.0)));
    }

    #[test]
    fn degenerate_specs_rejected() {
        let spec = SyntheticTaskSpec { src_vocab: 7, tgt_vocab: 7, ..small_spec() };
        assert!(matches!(SyntheticTask::new(spec), Err(AptError::DegenerateSpec(_))));
        let spec = SyntheticTaskSpec { reorder_window: 0, ..small_spec() };
        assert!(matches!(SyntheticTask::new(spec), Err(AptError::DegenerateSpec(_))));
    }

    #[test]
    fn bpe_zero_merges_is_character_level() {
        let bpe = learn_bpe(&["abc ab"], 0).unwrap();
        assert!(bpe.merges.is_empty());
        assert_eq!(bpe.apply("abc"), vec!["a", "b", "c</w>"]);
    }

    #[test]
    fn bpe_first_merge_on_ababab() {
        let bpe = learn_bpe(&["ababab"], 1).unwrap();
        assert_eq!(bpe.merges, vec![("a".to_string(), "b".to_string())]);
        assert!(matches!(learn_bpe::<&str>(&[], 3), Err(AptError::EmptyCorpus)));
    }

    #[test]
    fn bpe_file_round_trip() {
        let bpe = learn_bpe(&["kata kato tako"], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.txt");
        bpe.save(&path).unwrap();
        assert_eq!(BpeModel::load(&path).unwrap(), bpe);
    }

    #[test]
    fn tokenizer_round_trips_corpus_and_avoids_reserved_ids() {
        let (_, c) = generate_synthetic(&small_spec()).unwrap();
        let lines: Vec<&String> = c.mono_src.iter().chain(c.train.iter().map(|p| &p.0)).collect();
        for merges in [0, 10, 200] {
            let tok = Tokenizer::learn(&lines, merges, 512).unwrap();
            for l in &lines {
                let ids = tok.encode(l);
                assert!(ids.iter().all(|&i| !is_reserved(i) && i != UNK));
                assert_eq!(tok.decode(&ids), **l);
            }
        }
    }

    #[test]
    fn capped_vocabulary_still_round_trips() {
        let (_, c) = generate_synthetic(&small_spec()).unwrap();
        let tok = Tokenizer::learn(&c.mono_tgt, 100, 30).unwrap();
        assert!(tok.vocab_size() <= 30.max(RESERVED.len() + 24));
        for l in &c.mono_tgt {
            assert_eq!(tok.decode(&tok.encode(l)), *l);
        }
    }

    #[test]
    fn tokenizer_files_round_trip() {
        let (_, c) = generate_synthetic(&small_spec()).unwrap();
        let tok = Tokenizer::learn(&c.mono_src, 40, 200).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (b, v) = (dir.path().join("src.bpe"), dir.path().join("src.vocab"));
        tok.save(&b, &v).unwrap();
        let back = Tokenizer::load(&b, &v).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.encode(&c.mono_src[0]), tok.encode(&c.mono_src[0]));
    }

    fn examples(lens: &[(usize, usize)]) -> Vec<Example> {
        lens.iter().map(|&(s, t)| Example { src: vec![7; s], tgt: vec![8; t] }).collect()
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let ex = examples(&[(4, 5); 10]);
        let b = make_batches(&ex, 3, 20, 0);
        assert_eq!(b.pad_fraction(), 0.0);
        assert_eq!(b.batches.len(), 4);
    }

    #[test]
    fn batches_partition_filtered_corpus() {
        let ex = examples(&[(3, 4), (9, 2), (30, 4), (2, 2), (5, 40), (6, 6), (1, 1)]);
        let b = make_batches(&ex, 2, 20, 9);
        assert_eq!(b.filtered, 2);
        let mut seen: Vec<usize> = b.batches.iter().flat_map(|x| x.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 3, 5, 6]);
        for batch in &b.batches {
            for (k, &i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.src.seqs()[k], source_input(&ex[i].src));
            }
        }
    }

    #[test]
    fn sorted_batching_pads_less_than_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lens: Vec<(usize, usize)> = (0..500).map(|_| (rng.gen_range(2..30), rng.gen_range(2..30))).collect();
        let ex = examples(&lens);
        let sorted = make_batches(&ex, 16, 64, 1).pad_fraction();
        let random = make_random_batches(&ex, 16, 64, 1).pad_fraction();
        assert!(sorted <= random, "{sorted} > {random}");
    }

    #[test]
    fn source_cross_entropy_matches_monte_carlo() {
        let spec = SyntheticTaskSpec { src_vocab: 8, tgt_vocab: 8, branching: 3, min_len: 3, max_len: 6, ..small_spec() };
        let task = SyntheticTask::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut nll, mut n) = (0.0, 0usize);
        for _ in 0..40_000 {
            let z = task.sample_source(&mut rng);
            nll += (8f64).ln();
            for w in z.windows(2) {
                let p = task.successors(&w[..1]).iter().find(|s| s.0 == w[1]).unwrap().1;
                nll -= p.ln();
            }
            for t in 1..=z.len() {
                if t < 3 {
                    continue;
                }
                let stop = 1.0 / (6 - t + 1) as f64;
                nll -= if t == z.len() { stop.ln() } else { (1.0 - stop).ln() };
            }
            n += z.len() + 1;
        }
        let mc = nll / n as f64;
        assert!((mc - task.source_cross_entropy()).abs() < 0.01, "{mc} vs {}", task.source_cross_entropy());
    }

    proptest! {
        #[test]
        fn bpe_round_trip(words in proptest::collection::vec("[a-e]{1,6}", 1..12), merges in 0usize..30) {
            let line = words.join(" ");
            let bpe = learn_bpe(&[line.clone()], merges).unwrap();
            prop_assert_eq!(join_subwords(&bpe.apply(&line)), line);
        }
    }
}
