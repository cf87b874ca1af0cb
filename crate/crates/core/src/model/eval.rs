use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, LanguageModel, Pass};
use crate::corpus::tokenize;
use crate::error::{DiveError, Result};
use crate::scalar::Scalar;
use crate::tensor::Graph;

const EVAL_TOKENS_PER_GRAPH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub tokens: usize,
    pub mean_nll: f64,
}

impl EvalReport {
    fn from_sum(nll: f64, tokens: usize) -> Self {
        let mean_nll = nll / tokens as f64;
        Self {
            perplexity: mean_nll.exp(),
            tokens,
            mean_nll,
        }
    }
}

pub fn eval_perplexity<T: Scalar, M: LanguageModel<T> + Sync + ?Sized>(model: &M, stream: &[u8], seq_len: usize) -> Result<EvalReport> {
    eval_tokens(model, &tokenize(stream), seq_len)
}

/// Perplexity over non-overlapping windows of `seq_len` tokens. Each window
/// predicts its positions `1..len`; a trailing partial window of at least
/// two tokens is scored too. Window sums are combined in stream order.
pub fn eval_tokens<T: Scalar, M: LanguageModel<T> + Sync + ?Sized>(model: &M, tokens: &[usize], seq_len: usize) -> Result<EvalReport> {
    if tokens.len() < 2 {
        return Err(DiveError::Parameter(format!(
            "evaluation needs at least two tokens, got {}",
            tokens.len()
        )));
    }
    if seq_len < 2 {
        return Err(DiveError::Parameter(format!("evaluation seq_len must be >= 2, got {seq_len}")));
    }
    let full = tokens.len() / seq_len;
    let per_graph = (EVAL_TOKENS_PER_GRAPH / seq_len).max(1);
    let mut jobs: Vec<(usize, usize, usize)> = (0..full)
        .step_by(per_graph)
        .map(|w| (w * seq_len, (per_graph).min(full - w), seq_len))
        .collect();
    let tail = tokens.len() - full * seq_len;
    if tail >= 2 {
        jobs.push((full * seq_len, 1, tail));
    }
    let parts: Vec<Result<(f64, usize)>> = jobs
        .par_iter()
        .map(|&(start, batch, len)| window_nll(model, &tokens[start..start + batch * len], batch, len))
        .collect();
    let mut nll = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, c) = p?;
        nll += s;
        count += c;
    }
    Ok(EvalReport::from_sum(nll, count))
}

fn window_nll<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, tokens: &[usize], batch: usize, len: usize) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let out = forward(model, &mut g, tokens, batch, len, &mut Pass::eval())?;
    let v = model.config().vocab;
    let logits = g.value(out);
    let mut nll = 0.0f64;
    for b in 0..batch {
        for p in 0..len - 1 {
            let row = &logits[(b * len + p) * v..(b * len + p + 1) * v];
            let target = tokens[b * len + p + 1];
            nll += neg_log_prob(row, target);
        }
    }
    Ok((nll, batch * (len - 1)))
}

pub(crate) fn neg_log_prob<T: Scalar>(row: &[T], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
    let sum: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
    m + sum.ln() - row[target].as_f64()
}
