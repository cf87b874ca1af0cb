//! Domain affinity mining: prune on each task's calibration data, measure
//! perplexity on every task, normalize per evaluation column, and cluster
//! the calibration profiles by correlation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mix_cluster_calibration, sample_windows, CorpusSet, CorpusSpec, TokenBatch};
use crate::error::{DiveError, Result};
use crate::model::{eval_perplexity, DenseModel};
use crate::prune::prune_model;
use crate::rng::DetRng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub tasks: Vec<String>,
    /// `raw[i][j]`: perplexity on task `j` of the model pruned on task `i`.
    pub raw: Vec<Vec<f64>>,
    pub norm: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub ratio: f64,
    pub calibration_samples: usize,
    pub sample_len: usize,
    pub eval_seq_len: usize,
    /// Evaluate on at most this many bytes of each eval stream.
    pub eval_bytes: Option<usize>,
    pub seed: u64,
}

/// Calibration batch of one task, keyed by its domain name so a task
/// listed twice gets the same batch.
pub fn task_calibration(train: &[u8], spec: &CorpusSpec, count: usize, sample_len: usize, seed: u64) -> Result<TokenBatch> {
    let s = DetRng::derive_seed(seed, spec.domain.name());
    sample_windows(train, spec.domain.index(), count, sample_len, s)
}

pub fn build_ppl_matrix<T: Scalar>(model: &DenseModel<T>, corpus: &CorpusSet, cfg: &AffinityConfig) -> Result<AffinityMatrix> {
    let n = corpus.domains.len();
    if n < 2 {
        return Err(DiveError::Parameter(format!("affinity mining needs at least two tasks, got {n}")));
    }
    let evals: Vec<&[u8]> = corpus
        .domains
        .iter()
        .map(|d| &d.eval[..cfg.eval_bytes.unwrap_or(usize::MAX).min(d.eval.len())])
        .collect();
    let raw = corpus
        .domains
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let calib = task_calibration(&d.train, &d.spec, cfg.calibration_samples, cfg.sample_len, cfg.seed)
                .map_err(|e| e.with_context(format!("calibration {i}")))?;
            let (pruned, _) = prune_model(model, &calib, cfg.ratio).map_err(|e| e.with_context(format!("pruning on task {i}")))?;
            evals
                .iter()
                .enumerate()
                .map(|(j, ev)| {
                    eval_perplexity(&pruned, ev, cfg.eval_seq_len)
                        .map(|r| r.perplexity)
                        .map_err(|e| e.with_context(format!("cell ({i}, {j})")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = normalize_ppl(&raw)?;
    Ok(AffinityMatrix {
        tasks: corpus.names().iter().map(|s| s.to_string()).collect(),
        raw,
        norm,
    })
}

/// `norm[i][j] = min_k raw[k][j] / raw[i][j]`.
pub fn normalize_ppl(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cols = raw.first().map_or(0, Vec::len);
    for row in raw {
        if row.len() != cols {
            return Err(DiveError::Dimension("ragged perplexity matrix".into()));
        }
        if let Some(bad) = row.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(DiveError::Domain(format!("perplexity entries must be positive and finite, got {bad}")));
        }
    }
    let mins: Vec<f64> = (0..cols)
        .map(|j| raw.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(raw
        .iter()
        .map(|r| r.iter().zip(&mins).map(|(v, m)| m / v).collect())
        .collect())
}

/// Pearson correlation. The arguments are put in a canonical order first,
/// so `pearson_corr(a, b)` and `pearson_corr(b, a)` are bitwise equal.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DiveError::Dimension(format!(
            "correlation needs equal lengths of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (x, y) = if canonical_le(a, b) { (a, b) } else { (b, a) };
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DiveError::UndefinedCorrelation("a vector has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn canonical_le(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// `1 - corr`. A zero-variance row is at distance 0 from an identical row
/// and 1 from anything else.
pub fn correlation_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    match pearson_corr(a, b) {
        Ok(c) => Ok(1.0 - c),
        Err(DiveError::UndefinedCorrelation(_)) => Ok(if a == b { 0.0 } else { 1.0 }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Smallest member index of each merged cluster.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub n_clusters: usize,
    /// Cluster id per task; ids are numbered by each cluster's smallest task.
    pub labels: Vec<usize>,
    pub merges: Vec<Merge>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

/// Average-linkage agglomerative clustering on `1 - corr` distances, cut
/// at `n` clusters. Ties merge the pair with the lowest smallest-members.
pub fn hierarchical_cluster(rows: &[Vec<f64>], n: usize) -> Result<ClusterAssignment> {
    let m = rows.len();
    if n < 1 || n > m {
        return Err(DiveError::Parameter(format!("cannot form {n} clusters from {m} tasks")));
    }
    let mut dist = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = correlation_distance(&rows[i], &rows[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut merges = Vec::new();
    while clusters.len() > n {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += dist[i][j];
                    }
                }
                let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (height, a, b) = best.expect("at least two clusters remain");
        let right = clusters.remove(b);
        merges.push(Merge {
            left: clusters[a][0],
            right: right[0],
            height,
            size: clusters[a].len() + right.len(),
        });
        clusters[a].extend(right);
        clusters[a].sort_unstable();
    }
    // Clusters stay sorted by smallest member: merging into `a` keeps its
    // minimum and removal preserves order.
    let mut labels = vec![0; m];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c;
        }
    }
    Ok(ClusterAssignment {
        n_clusters: n,
        labels,
        merges,
    })
}

/// One uniformly mixed calibration batch per cluster.
pub fn build_cluster_calibrations(assignment: &ClusterAssignment, specs: &[CorpusSpec], budget: usize, sample_len: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if assignment.labels.len() != specs.len() {
        return Err(DiveError::Dimension(format!(
            "assignment covers {} tasks, {} specs given",
            assignment.labels.len(),
            specs.len()
        )));
    }
    (0..assignment.n_clusters)
        .map(|c| {
            let members: Vec<CorpusSpec> = assignment.members(c).into_iter().map(|i| specs[i].clone()).collect();
            assert!(!members.is_empty(), "cluster {c} has no members");
            mix_cluster_calibration(&members, budget, sample_len, DetRng::derive_seed(seed, &format!("cluster{c}")))
        })
        .collect()
}

/// `calib,eval,raw_ppl,norm_ppl` rows.
pub fn write_matrix_csv(path: &Path, m: &AffinityMatrix) -> Result<()> {
    let mut out = String::from("calib,eval,raw_ppl,norm_ppl\n");
    for (i, ci) in m.tasks.iter().enumerate() {
        for (j, ej) in m.tasks.iter().enumerate() {
            out.push_str(&format!("{ci},{ej},{},{}\n", m.raw[i][j], m.norm[i][j]));
        }
    }
    std::fs::write(path, out).map_err(|e| DiveError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<AffinityMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| DiveError::io(path, e))?;
    let mut tasks: Vec<String> = Vec::new();
    let mut cells = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(DiveError::Format(format!("{}:{}: expected 4 fields", path.display(), n + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| DiveError::Format(format!("{}:{}: bad number `{s}`", path.display(), n + 1)))
        };
        for name in [f[0], f[1]] {
            if !tasks.iter().any(|t| t == name) {
                tasks.push(name.to_string());
            }
        }
        cells.push((f[0].to_string(), f[1].to_string(), num(f[2])?, num(f[3])?));
    }
    let k = tasks.len();
    let idx = |s: &str| tasks.iter().position(|t| t == s).expect("collected above");
    let mut raw = vec![vec![f64::NAN; k]; k];
    let mut norm = vec![vec![f64::NAN; k]; k];
    for (c, e, r, nv) in &cells {
        raw[idx(c)][idx(e)] = *r;
        norm[idx(c)][idx(e)] = *nv;
    }
    if cells.len() != k * k {
        return Err(DiveError::Format(format!("{}: matrix is not square", path.display())));
    }
    Ok(AffinityMatrix { tasks, raw, norm })
}

/// `task,cluster` rows.
pub fn write_assignment_csv(path: &Path, tasks: &[String], a: &ClusterAssignment) -> Result<()> {
    let mut out = String::from("task,cluster\n");
    for (t, l) in tasks.iter().zip(&a.labels) {
        out.push_str(&format!("{t},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| DiveError::io(path, e))
}
