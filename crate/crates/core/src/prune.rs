//! Fluctuation-based structured pruning of FFN intermediate channels.
//!
//! A channel's score is the variance of its post-SwiGLU activation over all
//! calibration tokens times the squared norm of the `down` column that
//! consumes it. The lowest-scoring channels are removed and their mean
//! contribution is folded into an output bias.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{DiveError, Result};
use crate::model::{forward, DenseModel, Pass};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

const TOKENS_PER_GRAPH: usize = 4096;

/// Running mean and sum of squared deviations per channel.
#[derive(Clone, Debug)]
pub struct ChannelAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn push<T: Scalar>(&mut self, row: &[T]) {
        self.count += 1;
        let n = self.count as f64;
        for ((x, mean), m2) in row.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let x = x.as_f64();
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    pub fn finish(self) -> Result<ChannelStats> {
        if self.count < 2 {
            return Err(DiveError::Statistics(format!(
                "variance needs at least two tokens, got {}",
                self.count
            )));
        }
        let denom = (self.count - 1) as f64;
        Ok(ChannelStats {
            var: self.m2.iter().map(|m| (m / denom).max(0.0)).collect(),
            mean: self.mean,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluctuationStats {
    pub layers: Vec<ChannelStats>,
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub layers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
    pub keep_count: usize,
}

impl PruneMask {
    /// Kept channel indices of layer `l`, ascending.
    pub fn kept(&self, l: usize) -> Vec<usize> {
        self.keep[l]
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn all_keep(n_layers: usize, width: usize) -> Self {
        Self {
            keep: vec![vec![true; width]; n_layers],
            keep_count: width,
        }
    }
}

/// `round((1 - ratio) * width)`, at least one.
pub fn keep_count(width: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DiveError::Parameter(format!("pruning ratio must lie in (0, 1), got {ratio}")));
    }
    let k = ((1.0 - ratio) * width as f64).round() as usize;
    if k == 0 {
        return Err(DiveError::Parameter(format!(
            "pruning {width} channels at ratio {ratio} keeps none"
        )));
    }
    Ok(k)
}

/// Per-layer channel mean and unbiased variance of the post-SwiGLU
/// activation over every calibration token.
///
/// Rows are visited in lexicographic order, so the result does not depend
/// on the order of rows in `calibration`.
pub fn collect_fluctuation_stats<T: Scalar>(model: &DenseModel<T>, calibration: &TokenBatch) -> Result<FluctuationStats> {
    let seq = calibration.seq_len;
    let total = calibration.rows() * seq;
    if total < 2 {
        return Err(DiveError::Statistics(format!(
            "calibration holds {total} token(s); at least two are needed"
        )));
    }
    let mut order: Vec<usize> = (0..calibration.rows()).collect();
    order.sort_by(|&a, &b| calibration.row(a).cmp(calibration.row(b)).then(a.cmp(&b)));
    let n_layers = model.config.n_layers;
    let mut acc = (0..n_layers)
        .map(|l| Ok(ChannelAccumulator::new(model.ffn_width(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows_per_graph = (TOKENS_PER_GRAPH / seq).max(1);
    for chunk in order.chunks(rows_per_graph) {
        let tokens: Vec<usize> = chunk.iter().flat_map(|&r| calibration.row(r).iter().copied()).collect();
        let mut g = Graph::new();
        let mut pass = Pass::eval();
        forward(model, &mut g, &tokens, chunk.len(), seq, &mut pass)?;
        for (l, a) in pass.ffn_act.iter().enumerate() {
            let width = g.shape(*a)[1];
            for row in g.value(*a).chunks(width) {
                acc[l].push(row);
            }
        }
    }
    let layers = acc.into_iter().map(ChannelAccumulator::finish).collect::<Result<Vec<_>>>()?;
    Ok(FluctuationStats {
        layers,
        token_count: total,
    })
}

/// `S_j = var_j * ||down[:, j]||^2` per layer.
pub fn score_channels<T: Scalar>(stats: &FluctuationStats, model: &DenseModel<T>) -> Result<ChannelScores> {
    if stats.layers.len() != model.config.n_layers {
        return Err(DiveError::Dimension(format!(
            "statistics for {} layers, model has {}",
            stats.layers.len(),
            model.config.n_layers
        )));
    }
    let mut layers = Vec::with_capacity(stats.layers.len());
    for (l, st) in stats.layers.iter().enumerate() {
        let down = model.params.get(&format!("{}.down", DenseModel::<T>::ffn_prefix(l)))?;
        let (d, w) = (down.shape()[0], down.shape()[1]);
        if st.var.len() != w {
            return Err(DiveError::Dimension(format!(
                "layer {l}: {} channel statistics for width {w}",
                st.var.len()
            )));
        }
        let mut norms = vec![0.0f64; w];
        for i in 0..d {
            for (j, n) in norms.iter_mut().enumerate() {
                let v = down.data()[i * w + j].as_f64();
                *n += v * v;
            }
        }
        layers.push(st.var.iter().zip(&norms).map(|(v, n)| v * n).collect());
    }
    Ok(ChannelScores { layers })
}

/// Keeps the `keep_count` best channels per layer, ties to the lower index.
pub fn select_mask(scores: &ChannelScores, ratio: f64) -> Result<PruneMask> {
    let width = scores.layers.first().map_or(0, Vec::len);
    if scores.layers.iter().any(|l| l.len() != width) {
        return Err(DiveError::Dimension("layers have different widths".into()));
    }
    let k = keep_count(width, ratio)?;
    let keep = scores
        .layers
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            let mut keep = vec![false; s.len()];
            idx[..k].iter().for_each(|&i| keep[i] = true);
            keep
        })
        .collect();
    Ok(PruneMask { keep, keep_count: k })
}

/// Removes dropped channels and adds `B0 = down((1 - M) * mean)` to the
/// FFN output bias. Everything outside the FFNs is copied unchanged.
pub fn apply_prune<T: Scalar>(model: &DenseModel<T>, mask: &PruneMask, stats: &FluctuationStats) -> Result<DenseModel<T>> {
    let n_layers = model.config.n_layers;
    if mask.keep.len() != n_layers || stats.layers.len() != n_layers {
        return Err(DiveError::Dimension(format!(
            "mask covers {} layers and stats {}, model has {n_layers}",
            mask.keep.len(),
            stats.layers.len()
        )));
    }
    let mut out = model.clone();
    let mut all_kept = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let width = model.ffn_width(l)?;
        let keep = &mask.keep[l];
        let kept = mask.kept(l);
        if keep.len() != width || stats.layers[l].mean.len() != width || kept.len() != mask.keep_count || kept.is_empty() {
            return Err(DiveError::Dimension(format!(
                "layer {l}: mask of {} ({} kept, expected {}) for width {width}",
                keep.len(),
                kept.len(),
                mask.keep_count
            )));
        }
        let pre = DenseModel::<T>::ffn_prefix(l);
        let pruned = prune_ffn(
            model.params.get(&format!("{pre}.gate"))?,
            model.params.get(&format!("{pre}.up"))?,
            model.params.get(&format!("{pre}.down"))?,
            &kept,
            &stats.layers[l].mean,
        )?;
        let bias_name = format!("{pre}.bias");
        let mut bias = pruned.bias;
        if let Ok(old) = model.params.get(&bias_name) {
            bias.iter_mut().zip(old.data()).for_each(|(b, &o)| *b += o);
        }
        out.params.insert(format!("{pre}.gate"), pruned.gate);
        out.params.insert(format!("{pre}.up"), pruned.up);
        out.params.insert(format!("{pre}.down"), pruned.down);
        out.params.insert(bias_name, Tensor::new(&[bias.len()], bias)?);
        let original: Vec<usize> = match &model.kept {
            Some(prev) => kept.iter().map(|&j| prev[l][j]).collect(),
            None => kept,
        };
        all_kept.push(original);
    }
    out.kept = Some(all_kept);
    Ok(out)
}

pub struct PrunedFfn<T> {
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
    pub bias: Vec<T>,
}

/// Compacts one FFN to the `kept` channels. `mean` supplies the baseline
/// activation of dropped channels for the compensation bias.
pub fn prune_ffn<T: Scalar>(gate: &Tensor<T>, up: &Tensor<T>, down: &Tensor<T>, kept: &[usize], mean: &[f64]) -> Result<PrunedFfn<T>> {
    let (width, d) = (gate.shape()[0], gate.shape()[1]);
    if up.shape() != gate.shape() || down.shape() != [d, width] || mean.len() != width {
        return Err(DiveError::Dimension("inconsistent FFN shapes".into()));
    }
    let mut is_kept = vec![false; width];
    for &j in kept {
        if j >= width {
            return Err(DiveError::Index(format!("channel {j} outside width {width}")));
        }
        is_kept[j] = true;
    }
    let rows = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let data = kept.iter().flat_map(|&j| t.row(j).iter().copied()).collect();
        Tensor::new(&[kept.len(), d], data)
    };
    let mut down_data = Vec::with_capacity(d * kept.len());
    let mut bias = Vec::with_capacity(d);
    for i in 0..d {
        let row = down.row(i);
        down_data.extend(kept.iter().map(|&j| row[j]));
        let b: f64 = (0..width)
            .filter(|&j| !is_kept[j])
            .map(|j| row[j].as_f64() * mean[j])
            .sum();
        bias.push(T::of(b));
    }
    Ok(PrunedFfn {
        gate: rows(gate)?,
        up: rows(up)?,
        down: Tensor::new(&[d, kept.len()], down_data)?,
        bias,
    })
}

/// Everything computed while pruning one model.
#[derive(Clone, Debug)]
pub struct PruneReport {
    pub stats: FluctuationStats,
    pub scores: ChannelScores,
    pub mask: PruneMask,
}

pub fn prune_model<T: Scalar>(model: &DenseModel<T>, calibration: &TokenBatch, ratio: f64) -> Result<(DenseModel<T>, PruneReport)> {
    let stats = collect_fluctuation_stats(model, calibration)?;
    let scores = score_channels(&stats, model)?;
    let mask = select_mask(&scores, ratio)?;
    let pruned = apply_prune(model, &mask, &stats)?;
    Ok((pruned, PruneReport { stats, scores, mask }))
}

/// `layer,channel,mean,var,score,kept` rows.
pub fn write_prune_csv(path: &Path, report: &PruneReport) -> Result<()> {
    let mut out = String::from("layer,channel,mean,var,score,kept\n");
    for (l, st) in report.stats.layers.iter().enumerate() {
        for j in 0..st.mean.len() {
            out.push_str(&format!(
                "{l},{j},{},{},{},{}\n",
                st.mean[j],
                st.var[j],
                report.scores.layers[l][j],
                u8::from(report.mask.keep[l][j])
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| DiveError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| DiveError::io(path, e))
}
