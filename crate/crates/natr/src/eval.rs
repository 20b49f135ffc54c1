//! Corpus evaluation, reports and file decoding.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use natr_core::data::{pad, EncodedPair};
use natr_core::decode::{decode_batch, DecodeResult};
use natr_core::metrics::{corpus_bleu, entropy_metric, repetition_rate};
use natr_core::model::{ModelKind, NatModel};
use natr_core::{Corpus, Vocabulary};

#[derive(Clone, Copy, Debug)]
pub struct DecodeSettings {
    /// Mask-predict iterations.
    pub iterations: usize,
    pub length_candidates: usize,
    pub batch_size: usize,
}

/// Decodes every source in order.
pub fn decode_all(
    model: &NatModel<f32>,
    sources: &[Vec<usize>],
    s: DecodeSettings,
) -> Result<Vec<DecodeResult>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(s.batch_size.max(1)) {
        let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let (flat, lens, _) = pad(&rows);
        out.extend(decode_batch(
            model,
            &flat,
            &lens,
            s.iterations,
            s.length_candidates,
        )?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub bleu: f64,
    /// Mean per-position entropy in nats.
    pub entropy: f64,
    pub repetition: f64,
}

pub fn score(results: &[DecodeResult], pairs: &[EncodedPair]) -> Result<Scores> {
    let hyps: Vec<Vec<usize>> = results.iter().map(|r| r.tokens.clone()).collect();
    let refs: Vec<Vec<Vec<usize>>> = pairs.iter().map(|p| p.references.clone()).collect();
    Ok(Scores {
        bleu: corpus_bleu(&hyps, &refs)?,
        entropy: entropy_metric(results.iter().map(|r| r.entropies.as_slice())),
        repetition: repetition_rate(&hyps),
    })
}

pub fn evaluate(model: &NatModel<f32>, pairs: &[EncodedPair], s: DecodeSettings) -> Result<Scores> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).collect();
    score(&decode_all(model, &sources, s)?, pairs)
}

/// Longest source the model accepts.
pub fn max_source_len(model: &NatModel<f32>) -> usize {
    let c = model.config();
    match c.model_kind {
        ModelKind::Ctc => c.max_len / c.ctc_upsample,
        _ => c.max_len,
    }
}

/// Encodes a corpus, naming the line of the first token the vocabulary
/// lacks.
pub fn encode_corpus(
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<EncodedPair>> {
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let single = Corpus {
                pairs: vec![p.clone()],
            };
            single
                .encode(vocab, max_len)
                .map(|mut v| v.remove(0))
                .with_context(|| format!("line {}", i + 1))
        })
        .collect()
}

/// Encodes one source sentence per line.
pub fn encode_sources(
    lines: &[Vec<String>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            let ids = vocab
                .encode(toks)
                .with_context(|| format!("line {}", i + 1))?;
            if ids.len() > max_len {
                bail!(
                    "line {}: {} tokens, the model accepts at most {max_len}",
                    i + 1,
                    ids.len()
                );
            }
            Ok(ids)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub kind: ModelKind,
    pub sentences: usize,
    pub scores: Scores,
    /// Mask-predict scores by iteration count (CMLM only).
    pub by_iterations: Vec<(usize, Scores)>,
}

pub fn report(
    model: &NatModel<f32>,
    pairs: &[EncodedPair],
    s: DecodeSettings,
    iteration_table: &[usize],
) -> Result<Report> {
    if pairs.is_empty() {
        return Err(anyhow!("evaluation corpus is empty"));
    }
    let scores = evaluate(model, pairs, s)?;
    let mut by_iterations = Vec::new();
    if model.kind() == ModelKind::Cmlm {
        for &i in iteration_table {
            let settings = DecodeSettings { iterations: i, ..s };
            by_iterations.push((i, evaluate(model, pairs, settings)?));
        }
    }
    Ok(Report {
        kind: model.kind(),
        sentences: pairs.len(),
        scores,
        by_iterations,
    })
}

impl Report {
    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model_kind = {}", self.kind.name());
        let _ = writeln!(s, "sentences = {}", self.sentences);
        let _ = writeln!(s, "bleu = {:.4}", self.scores.bleu);
        let _ = writeln!(s, "entropy = {:.6}", self.scores.entropy);
        let _ = writeln!(s, "repetition_rate = {:.6}", self.scores.repetition);
        for (i, sc) in &self.by_iterations {
            let _ = writeln!(s, "iterations.{i}.bleu = {:.4}", sc.bleu);
            let _ = writeln!(s, "iterations.{i}.entropy = {:.6}", sc.entropy);
            let _ = writeln!(s, "iterations.{i}.repetition_rate = {:.6}", sc.repetition);
        }
        s
    }

    /// Single-line JSON summary.
    pub fn to_json(&self) -> String {
        let rows: Vec<_> = self
            .by_iterations
            .iter()
            .map(|(i, sc)| json!({"iterations": i, "bleu": sc.bleu, "entropy": sc.entropy, "repetition_rate": sc.repetition}))
            .collect();
        json!({
            "model_kind": self.kind.name(),
            "sentences": self.sentences,
            "bleu": self.scores.bleu,
            "entropy": self.scores.entropy,
            "repetition_rate": self.scores.repetition,
            "iterations": rows,
        })
        .to_string()
    }

    /// The iteration table as aligned text (CMLM only).
    pub fn iteration_table(&self) -> String {
        let mut s = String::from("iterations\tbleu\tentropy\trepetition_rate\n");
        for (i, sc) in &self.by_iterations {
            let _ = writeln!(
                s,
                "{i}\t{:.4}\t{:.6}\t{:.6}",
                sc.bleu, sc.entropy, sc.repetition
            );
        }
        s
    }
}

/// Hypothesis lines, optionally followed by a tab and the geometric mean of
/// the chosen-token probabilities.
pub fn format_hypotheses(
    results: &[DecodeResult],
    vocab: &Vocabulary,
    confidence: bool,
) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&vocab.decode(&r.tokens)?.join(" "));
        if confidence {
            let _ = write!(out, "\t{:.6}", r.mean_logprob().exp());
        }
        out.push('\n');
    }
    Ok(out)
}
