//! Beam-search decoding and corpus BLEU.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autograd::SeqLayout;
use crate::data::source_input;
use crate::error::{AptError, Result};
use crate::model::{EncoderState, Session, TokenBatch, BOS, EOS, MASK, PAD};
use crate::params::ParamStore;
use crate::pretrain::teacher_representations;
use crate::strategy::{Student, Teachers};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids; ends with EOS when `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Mean log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the closing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Ids a decoder may emit.
pub fn generable(id: usize) -> bool {
    !matches!(id, PAD | BOS | MASK)
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

impl<F> StepScorer for F
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self(prefixes)
    }
}

fn search(scorer: &mut dyn StepScorer, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut pool = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let last = step + 1 == max_len;
        let mut cands = Vec::new();
        for (h, lp) in alive.iter().zip(&scores) {
            for (k, &l) in lp.iter().enumerate().filter(|(k, _)| generable(*k)) {
                let mut tokens = h.tokens.clone();
                tokens.push(k);
                cands.push(Hypothesis { tokens, log_prob: h.log_prob + l, finished: k == EOS });
            }
        }
        // Candidates all have the same length here, so ranking by the mean
        // is ranking by total log-probability.
        cands.sort_by(rank);
        cands.truncate(beam);
        let (done, next): (Vec<_>, Vec<_>) = cands.into_iter().partition(|h| h.finished || last);
        pool.extend(done);
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    Ok(pool)
}

/// Beam search ranked by mean log-probability per token. Each step keeps
/// the best `beam` extensions; those ending in EOS leave the beam as
/// candidates, and at `max_len` the survivors are stopped unfinished. For `beam > 1` the greedy hypothesis is also a
/// candidate, so widening the beam never lowers the best score.
pub fn beam_search(scorer: &mut dyn StepScorer, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(AptError::Config("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(AptError::Config("max_len must be at least 1".into()));
    }
    let mut pool = search(scorer, beam, max_len)?;
    if beam > 1 {
        pool.push(greedy(scorer, max_len)?);
    }
    pool.sort_by(rank);
    pool.into_iter().next().ok_or_else(|| AptError::Config("no generable token".into()))
}

/// Highest-probability token at every step.
pub fn greedy(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&h.tokens))?;
        let (k, l) = lp[0]
            .iter()
            .enumerate()
            .filter(|(k, _)| generable(*k))
            .fold(None, |best: Option<(usize, f64)>, (k, &l)| match best {
                Some((_, bl)) if bl >= l => best,
                _ => Some((k, l)),
            })
            .ok_or_else(|| AptError::Config("no generable token".into()))?;
        h.tokens.push(k);
        h.log_prob += l;
        if k == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Sufficient statistics of corpus BLEU-4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped n-gram matches for n = 1..4.
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Unsmoothed BLEU in `[0, 100]`.
    pub fn score(&self) -> f64 {
        if (1..=4).any(|n| self.matches[n - 1] == 0) {
            return 0.0;
        }
        let log_mean = (1..=4).map(|n| self.precision(n).ln()).sum::<f64>() / 4.0;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

pub fn bleu_stats<T: Eq + Hash, S: AsRef<[T]>>(hypotheses: &[S], references: &[S]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(AptError::LengthMismatch(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(AptError::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats)
}

/// Corpus-level BLEU-4 over pre-tokenized sentences.
pub fn bleu<T: Eq + Hash, S: AsRef<[T]>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

/// BLEU statistics over whitespace-tokenized lines.
pub fn bleu_line_stats(hypotheses: &[String], references: &[String]) -> Result<BleuStats> {
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
    };
    bleu_stats(&split(hypotheses), &split(references))
}

pub fn bleu_lines(hypotheses: &[String], references: &[String]) -> Result<f64> {
    Ok(bleu_line_stats(hypotheses, references)?.score())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Decodes with a trained student and whatever teachers its fusion banks
/// need. Decoder-side fusion runs the target teacher on the generated
/// prefix.
#[derive(Clone, Copy)]
pub struct Translator<'a> {
    pub student: &'a Student,
    pub store: &'a ParamStore,
    pub teachers: Teachers<'a>,
}

impl Translator<'_> {
    /// Beam search for one tokenized source sentence (without EOS).
    pub fn translate(&self, src: &[usize], beam: usize, max_len: usize) -> Result<Hypothesis> {
        let input = TokenBatch::single(&source_input(src));
        let enc_teacher = match (&self.student.encoder_bank, self.teachers.encoder) {
            (Some(_), Some(t)) => Some(teacher_representations(t, &input)?),
            _ => None,
        };
        let mut s = Session::inference(self.store);
        let (enc, _) = self.student.encode(&mut s, &input, enc_teacher.as_deref())?;
        let memory = s.graph.value(enc.output()).clone();
        let src_len = input.layout.len;
        // The decoder input grows by one token per step and includes BOS.
        let cap = max_len.min(self.student.config().max_len.saturating_sub(1)).max(1);
        let mut scorer = |prefixes: &[Vec<usize>]| -> Result<Vec<Vec<f64>>> {
            let k = prefixes.len();
            let mut s = Session::inference(self.store);
            let d = memory.cols();
            let mut tiled = Vec::with_capacity(k * memory.len());
            for _ in 0..k {
                tiled.extend_from_slice(memory.data());
            }
            let mem = s.graph.constant(Tensor::from_raw(vec![k * src_len, d], tiled, memory.dtype()));
            let enc = EncoderState { layers: vec![mem], layout: SeqLayout::dense(k, src_len), attention: Vec::new() };
            let seqs: Vec<Vec<usize>> = prefixes
                .iter()
                .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
                .collect();
            let tgt_in = TokenBatch::from_seqs(&seqs);
            let dec_teacher = match (&self.student.decoder_bank, self.teachers.decoder) {
                (Some(_), Some(t)) => Some(teacher_representations(t, &tgt_in)?),
                _ => None,
            };
            let (logits, _, _) = self.student.decode(&mut s, &tgt_in, &enc, dec_teacher.as_deref())?;
            let logits = s.graph.value(logits);
            let len = tgt_in.layout.len;
            Ok((0..k).map(|b| log_softmax(logits.row(b * len + len - 1))).collect())
        };
        beam_search(&mut scorer, beam, cap)
    }

    /// Translates every sentence, splitting the work over `threads` workers.
    /// Output order and content do not depend on the thread count.
    pub fn translate_all(&self, sources: &[Vec<usize>], beam: usize, max_len: usize, threads: usize) -> Result<Vec<Vec<usize>>> {
        let run = |chunk: &[Vec<usize>]| -> Result<Vec<Vec<usize>>> {
            chunk.iter().map(|x| Ok(self.translate(x, beam, max_len)?.output().to_vec())).collect()
        };
        let threads = threads.max(1);
        if threads == 1 || sources.len() < 2 {
            return run(sources);
        }
        let chunk = sources.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Vec<usize>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = sources.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("translation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(sources.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
