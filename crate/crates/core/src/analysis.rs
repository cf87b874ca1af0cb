//! Routing statistics, per-token expert attribution, heatmap export and
//! perplexity comparison tables.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{DiveError, Result};
use crate::model::{eval_tokens, forward, DenseModel, Pass};
use crate::moe::MoeModel;
use crate::scalar::Scalar;
use crate::tensor::{topk_desc, Graph};

const TOKENS_PER_GRAPH: usize = 4096;

/// A named evaluation stream.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub bytes: &'a [u8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub sets: Vec<String>,
    pub n_experts: usize,
    pub n_layers: usize,
    pub top_k: usize,
    /// `counts[set][layer][expert]`: routing events into that expert.
    pub counts: Vec<Vec<Vec<u64>>>,
    /// `ratios[set][expert]`: share of all `tokens * layers * k` slots.
    pub ratios: Vec<Vec<f64>>,
}

/// Top-`k` router choices for every row, `[layer][row] -> experts`.
/// Rows are processed as windows of `seq` tokens; a shorter trailing
/// window is run on its own.
pub fn router_choices<T: Scalar>(model: &MoeModel<T>, tokens: &[usize], seq: usize, k: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    if k == 0 || k > model.n_experts {
        return Err(DiveError::Parameter(format!(
            "top_k must lie in 1..={}, got {k}",
            model.n_experts
        )));
    }
    if seq == 0 {
        return Err(DiveError::Parameter("window length must be positive".into()));
    }
    let full = tokens.len() / seq;
    let per_graph = (TOKENS_PER_GRAPH / seq).max(1);
    let mut jobs: Vec<(usize, usize, usize)> = (0..full)
        .step_by(per_graph)
        .map(|w| (w * seq, per_graph.min(full - w), seq))
        .collect();
    if tokens.len() > full * seq {
        jobs.push((full * seq, 1, tokens.len() - full * seq));
    }
    let mut out = vec![Vec::with_capacity(tokens.len()); model.config.n_layers];
    for (start, batch, len) in jobs {
        let mut g = Graph::new();
        let mut pass = Pass::eval();
        forward(model, &mut g, &tokens[start..start + batch * len], batch, len, &mut pass)?;
        for (l, z) in pass.router_logits.iter().enumerate() {
            let z = g.value(*z);
            for row in z.chunks(model.n_experts) {
                out[l].push(topk_desc(row, k));
            }
        }
    }
    Ok(out)
}

/// Counts every (token, layer) routing event into its `k` selected experts.
/// Each selected expert counts one activation, so ratios are normalized by
/// `tokens * layers * k`. Sets are capped at `max_tokens` tokens when given.
pub fn routing_distribution<T: Scalar>(
    model: &MoeModel<T>,
    sets: &[EvalSet<'_>],
    k: usize,
    seq: usize,
    max_tokens: Option<usize>,
) -> Result<RoutingStats> {
    if sets.is_empty() {
        return Err(DiveError::Parameter("routing statistics need at least one eval set".into()));
    }
    let n = model.n_experts;
    let layers = model.config.n_layers;
    let counts: Vec<Vec<Vec<u64>>> = sets
        .par_iter()
        .map(|s| {
            let mut tokens = tokenize(s.bytes);
            if let Some(cap) = max_tokens {
                tokens.truncate(cap);
            }
            if tokens.is_empty() {
                return Err(DiveError::Parameter(format!("eval set `{}` is empty", s.name)));
            }
            let choices = router_choices(model, &tokens, seq, k).map_err(|e| e.with_context(format!("routing on `{}`", s.name)))?;
            let mut c = vec![vec![0u64; n]; layers];
            for (l, rows) in choices.iter().enumerate() {
                for sel in rows {
                    for &e in sel {
                        c[l][e] += 1;
                    }
                }
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let ratios = counts
        .iter()
        .map(|per_layer| {
            let total: u64 = per_layer.iter().flatten().sum();
            (0..n)
                .map(|e| per_layer.iter().map(|c| c[e]).sum::<u64>() as f64 / total as f64)
                .collect()
        })
        .collect();
    Ok(RoutingStats {
        sets: sets.iter().map(|s| s.name.to_string()).collect(),
        n_experts: n,
        n_layers: layers,
        top_k: k,
        counts,
        ratios,
    })
}

impl RoutingStats {
    pub fn heatmap(&self) -> Heatmap {
        Heatmap {
            rows: self.sets.clone(),
            cols: (0..self.n_experts).map(|e| format!("expert{e}")).collect(),
            values: self.ratios.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub position: usize,
    pub token: usize,
    pub expert: usize,
}

/// The expert chosen most often as top-1 across layers; ties go to the
/// lower id.
pub fn majority_expert(per_layer: &[usize], n_experts: usize) -> usize {
    let mut votes = vec![0usize; n_experts];
    for &e in per_layer {
        votes[e] += 1;
    }
    let mut best = 0;
    for (e, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = e;
        }
    }
    best
}

/// Per-token majority top-1 expert over layers, reading `text` in windows
/// of `seq` bytes.
pub fn token_attribution<T: Scalar>(model: &MoeModel<T>, text: &[u8], seq: usize) -> Result<Vec<TokenAttribution>> {
    let tokens = tokenize(text);
    let choices = router_choices(model, &tokens, seq, 1)?;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &token)| {
            let per_layer: Vec<usize> = choices.iter().map(|layer| layer[i][0]).collect();
            TokenAttribution {
                position: i,
                token,
                expert: majority_expert(&per_layer, model.n_experts),
            }
        })
        .collect())
}

/// Labelled rectangular data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.rows.len() || self.values.iter().any(|r| r.len() != self.cols.len()) {
            return Err(DiveError::Dimension(format!(
                "heatmap has {} row labels and {} column labels but a ragged or mismatched body",
                self.rows.len(),
                self.cols.len()
            )));
        }
        for l in self.rows.iter().chain(&self.cols) {
            if l.is_empty() || l.contains([',', '\n', '\r', '"']) {
                return Err(DiveError::Parameter(format!("label `{l}` cannot be written to CSV")));
            }
        }
        Ok(())
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.cols.iter().position(|c| c == col)?;
        Some(self.values[i][j])
    }
}

/// `row,col,value` in row-major order. Values use the shortest decimal
/// form that parses back to the same float.
pub fn emit_heatmap_csv(path: &Path, h: &Heatmap) -> Result<()> {
    h.validate()?;
    let mut out = String::from("row,col,value\n");
    for (r, vals) in h.rows.iter().zip(&h.values) {
        for (c, v) in h.cols.iter().zip(vals) {
            out.push_str(&format!("{r},{c},{v}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| DiveError::io(path, e))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Heatmap> {
    let text = std::fs::read_to_string(path).map_err(|e| DiveError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("row,col,value") {
        return Err(DiveError::Format(format!("{}: missing `row,col,value` header", path.display())));
    }
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut cells = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || DiveError::Format(format!("{}:{}: malformed line `{line}`", path.display(), n + 2));
        if f.len() != 3 {
            return Err(bad());
        }
        let v: f64 = f[2].parse().map_err(|_| bad())?;
        if !rows.iter().any(|r| r == f[0]) {
            rows.push(f[0].to_string());
        }
        if !cols.iter().any(|c| c == f[1]) {
            cols.push(f[1].to_string());
        }
        cells.push((f[0], f[1], v));
    }
    let mut values = vec![vec![f64::NAN; cols.len()]; rows.len()];
    let mut seen = 0;
    for (r, c, v) in cells {
        let i = rows.iter().position(|x| x == r).expect("collected above");
        let j = cols.iter().position(|x| x == c).expect("collected above");
        if !values[i][j].is_nan() {
            return Err(DiveError::Format(format!("{}: duplicate cell ({r}, {c})", path.display())));
        }
        values[i][j] = v;
        seen += 1;
    }
    if seen != rows.len() * cols.len() {
        return Err(DiveError::Format(format!("{}: matrix is not rectangular", path.display())));
    }
    Ok(Heatmap { rows, cols, values })
}

/// A model entry for [`compare_report`].
pub enum Candidate<'a, T> {
    Dense(&'a DenseModel<T>),
    Moe(&'a MoeModel<T>),
}

fn percent(part: usize, whole: usize) -> String {
    let p = (1000.0 * part as f64 / whole as f64).round() / 10.0;
    format!("{p}%")
}

impl<T: Scalar> Candidate<'_, T> {
    /// Active FFN width relative to the original: `"100%"` for a dense
    /// model, `"25% × 2"` for an MoE with two active quarter-width experts.
    pub fn ffn_label(&self) -> Result<String> {
        match self {
            Candidate::Dense(m) => Ok(percent(m.ffn_width(0)?, m.config.d_ff)),
            Candidate::Moe(m) => {
                let active = m.top_k().unwrap_or(m.n_experts);
                Ok(format!("{} × {active}", percent(m.expert_width, m.config.d_ff)))
            }
        }
    }

    fn eval(&self, tokens: &[usize], seq: usize) -> Result<f64> {
        Ok(match self {
            Candidate::Dense(m) => eval_tokens(*m, tokens, seq)?.perplexity,
            Candidate::Moe(m) => eval_tokens(*m, tokens, seq)?.perplexity,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub ffn_size: String,
    pub perplexity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub sets: Vec<String>,
    pub rows: Vec<CompareRow>,
}

pub fn compare_report<T: Scalar>(models: &[(&str, Candidate<'_, T>)], sets: &[EvalSet<'_>], seq: usize) -> Result<CompareTable> {
    if models.is_empty() {
        return Err(DiveError::Parameter("comparison needs at least one model".into()));
    }
    let tokens: Vec<Vec<usize>> = sets.iter().map(|s| tokenize(s.bytes)).collect();
    let mut rows = Vec::with_capacity(models.len());
    for (name, m) in models {
        let mut perplexity = Vec::with_capacity(sets.len());
        for (s, t) in sets.iter().zip(&tokens) {
            perplexity.push(m.eval(t, seq).map_err(|e| e.with_context(format!("evaluating `{name}` on `{}`", s.name)))?);
        }
        rows.push(CompareRow {
            model: name.to_string(),
            ffn_size: m.ffn_label()?,
            perplexity,
        });
    }
    Ok(CompareTable {
        sets: sets.iter().map(|s| s.name.to_string()).collect(),
        rows,
    })
}

impl CompareTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,ffn_size,{}\n", self.sets.join(","));
        for r in &self.rows {
            let ppl: Vec<String> = r.perplexity.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", r.model, r.ffn_size, ppl.join(",")));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| DiveError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::moe::{random_split_baseline, Routing};

    fn tiny_moe(n: usize, k: usize) -> MoeModel<f64> {
        let dense = DenseModel::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        random_split_baseline(&dense, n, 0.5, 9, Routing::Sparse { top_k: k }).unwrap()
    }

    #[test]
    fn constant_router_sends_everything_to_one_expert() {
        let mut m = tiny_moe(4, 1);
        for l in 0..m.config.n_layers {
            let r = m.params.get_mut(&MoeModel::<f64>::router_name(l)).unwrap();
            r.data_mut().fill(0.0);
        }
        let text = b"hello routing world, again and again";
        let set = EvalSet { name: "x", bytes: text };
        let s = routing_distribution(&m, &[set], 1, 8, None).unwrap();
        assert_eq!(s.ratios[0], vec![1.0, 0.0, 0.0, 0.0]);
        let total: u64 = s.counts[0].iter().flatten().sum();
        assert_eq!(total as usize, text.len() * m.config.n_layers);
        assert!(matches!(routing_distribution(&m, &[], 1, 8, None), Err(DiveError::Parameter(_))));
    }

    #[test]
    fn top2_ratios_count_slots() {
        let m = tiny_moe(4, 2);
        let set = EvalSet { name: "x", bytes: b"some arbitrary text for routing" };
        let s = routing_distribution(&m, &[set], 2, 8, None).unwrap();
        let total: u64 = s.counts[0].iter().flatten().sum();
        assert_eq!(total as usize, 31 * 2 * m.config.n_layers);
        assert!((s.ratios[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority_expert(&[2, 1, 2, 1], 4), 1);
        assert_eq!(majority_expert(&[3, 3, 0], 4), 3);
        assert_eq!(majority_expert(&[2], 4), 2);
    }

    #[test]
    fn attribution_does_not_depend_on_batching() {
        let m = tiny_moe(4, 1);
        let text: Vec<u8> = b"abc 123 + 456 = 579; def ".repeat(5);
        let all = token_attribution(&m, &text, 16).unwrap();
        assert_eq!(all.len(), text.len());
        for (w, chunk) in text.chunks(16).enumerate() {
            let part = token_attribution(&m, chunk, 16).unwrap();
            for (a, b) in part.iter().zip(&all[w * 16..]) {
                assert_eq!(a.expert, b.expert);
            }
        }
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = Heatmap {
            rows: vec!["a".into(), "b".into()],
            cols: vec!["x".into(), "y".into()],
            values: vec![vec![1.0, 0.1 + 0.2], vec![1e-300, 2.0 / 3.0]],
        };
        emit_heatmap_csv(&p, &h).unwrap();
        assert_eq!(read_heatmap_csv(&p).unwrap(), h);
        let empty = Heatmap {
            rows: vec![],
            cols: vec![],
            values: vec![],
        };
        emit_heatmap_csv(&p, &empty).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "row,col,value\n");
        let bad = Heatmap {
            rows: vec!["a,b".into()],
            cols: vec!["x".into()],
            values: vec![vec![1.0]],
        };
        assert!(emit_heatmap_csv(&p, &bad).is_err());
    }

    #[test]
    fn ffn_labels() {
        let dense = DenseModel::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        assert_eq!(Candidate::Dense(&dense).ffn_label().unwrap(), "100%");
        let m = tiny_moe(4, 1);
        assert_eq!(Candidate::Moe(&m).ffn_label().unwrap(), "50% × 1");
    }

    #[test]
    fn single_model_report_matches_eval() {
        let dense = DenseModel::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let text = b"a short evaluation stream of bytes";
        let t = compare_report(&[("dense", Candidate::Dense(&dense))], &[EvalSet { name: "s", bytes: text }], 8).unwrap();
        let direct = crate::model::eval_perplexity(&dense, text, 8).unwrap().perplexity;
        assert_eq!(t.rows[0].perplexity, vec![direct]);
        assert_eq!(t.rows[0].ffn_size, "100%");
    }
}
