//! Mixture-of-experts reassembly: pruned FFNs become experts behind a
//! per-layer linear router, gated densely (temperature softmax over all
//! experts) or sparsely (softmax over the top-k logits).

use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::model::{gaussian, is_trunk_param, layer_prefix, swiglu_ffn, DenseModel, LanguageModel, LoraSpec, ModelConfig, Pass};
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Routing {
    /// Every expert runs; weights are `softmax(z / temperature)`.
    Dense { temperature: f64 },
    /// Only the `top_k` best experts run; weights are a softmax over them.
    Sparse { top_k: usize },
}

impl Routing {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        match *self {
            Routing::Dense { temperature } if !(temperature > 0.0) || !temperature.is_finite() => Err(
                DiveError::Parameter(format!("temperature must be > 0, got {temperature}")),
            ),
            Routing::Sparse { top_k } if top_k == 0 || top_k > n_experts => Err(DiveError::Parameter(format!(
                "top-k must lie in 1..={n_experts}, got {top_k}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Gate weights for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput<T> {
    pub weights: Vec<T>,
    /// Experts with nonzero weight, by descending logit.
    pub selected: Vec<usize>,
    pub logits: Vec<T>,
}

fn gate_with<T: Scalar>(z: &[T], f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let zv = g.input(&[1, z.len()], z.to_vec(), false)?;
    let w = f(&mut g, zv)?;
    Ok(g.value(w).to_vec())
}

/// Softmax over the `k` largest logits; ties go to the lower index.
pub fn sparse_gate<T: Scalar>(z: &[T], k: usize) -> Result<GateOutput<T>> {
    let weights = gate_with(z, |g, zv| g.topk_softmax(zv, k))?;
    Ok(GateOutput {
        weights,
        selected: crate::tensor::topk_desc(z, k),
        logits: z.to_vec(),
    })
}

/// Temperature softmax over all experts.
pub fn dense_gate<T: Scalar>(z: &[T], t: f64) -> Result<GateOutput<T>> {
    let weights = gate_with(z, |g, zv| g.softmax(zv, t))?;
    Ok(GateOutput {
        weights,
        selected: crate::tensor::topk_desc(z, z.len()),
        logits: z.to_vec(),
    })
}

/// Provenance of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertInfo {
    /// Calibration tasks whose data shaped this expert.
    pub cluster: Vec<String>,
    /// Original FFN channels kept, per layer.
    pub kept: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub n_experts: usize,
    pub expert_width: usize,
    pub routing: Routing,
    pub experts: Vec<ExpertInfo>,
    /// Adapter settings while low-rank adapters are attached.
    pub lora: Option<LoraSpec>,
}

impl<T: Scalar> MoeModel<T> {
    pub fn router_name(layer: usize) -> String {
        format!("{}.moe.router", layer_prefix(layer))
    }

    pub fn expert_prefix(layer: usize, expert: usize) -> String {
        format!("{}.moe.experts.{expert}", layer_prefix(layer))
    }

    pub fn is_router(name: &str) -> bool {
        name.ends_with(".moe.router")
    }

    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        crate::model::logits(self, tokens, batch, seq)
    }

    /// FFN weights per layer: expert projections plus the router.
    pub fn ffn_params_per_layer(&self) -> usize {
        self.n_experts * 3 * self.config.d_model * self.expert_width + self.n_experts * self.config.d_model
    }

    pub fn top_k(&self) -> Option<usize> {
        match self.routing {
            Routing::Sparse { top_k } => Some(top_k),
            Routing::Dense { .. } => None,
        }
    }

    pub fn with_routing(mut self, routing: Routing) -> Result<Self> {
        routing.validate(self.n_experts)?;
        self.routing = routing;
        Ok(self)
    }

    fn add_routers(&mut self, seed: u64) {
        for l in 0..self.config.n_layers {
            let name = Self::router_name(l);
            let w = gaussian(&[self.n_experts, self.config.d_model], ROUTER_INIT_STD, seed, &name);
            self.params.insert(name, w);
        }
    }
}

impl<T: Scalar> LanguageModel<T> for MoeModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn ffn(&self, g: &mut Graph<T>, layer: usize, x: Var, pass: &mut Pass) -> Result<Var> {
        let router = self.params.bind(g, &Self::router_name(layer))?;
        let z = g.linear(x, router)?;
        pass.router_logits.push(z);
        let (rows, d) = (g.shape(x)[0], g.shape(x)[1]);
        let lora = self.lora.as_ref();
        let mut parts = Vec::with_capacity(self.n_experts);
        match self.routing {
            Routing::Dense { temperature } => {
                let w = g.softmax(z, temperature)?;
                let all: Vec<usize> = (0..rows).collect();
                for e in 0..self.n_experts {
                    let (y, _) = swiglu_ffn(g, &self.params, &Self::expert_prefix(layer, e), x, lora, pass)?;
                    let we = g.gather_column(w, e, &all)?;
                    parts.push((g.scale_rows(y, we)?, all.clone()));
                }
            }
            Routing::Sparse { top_k } => {
                let w = g.topk_softmax(z, top_k)?;
                let n = self.n_experts;
                let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
                for (r, row) in g.value(w).chunks(n).enumerate() {
                    for (e, &we) in row.iter().enumerate() {
                        if we > T::zero() {
                            routed[e].push(r);
                        }
                    }
                }
                // Experts with no routed token are never evaluated.
                for (e, rows_e) in routed.into_iter().enumerate() {
                    if rows_e.is_empty() {
                        continue;
                    }
                    let xe = g.gather_rows(x, &rows_e)?;
                    let (y, _) = swiglu_ffn(g, &self.params, &Self::expert_prefix(layer, e), xe, lora, pass)?;
                    let we = g.gather_column(w, e, &rows_e)?;
                    parts.push((g.scale_rows(y, we)?, rows_e));
                }
            }
        }
        g.scatter_rows(rows, d, parts)
    }
}

/// Builds an MoE whose expert `i` in every layer is the FFN of
/// `pruned[i]`, with freshly initialized routers. The trunk is taken from
/// the first model and must be bitwise identical across all of them.
pub fn reconstruct_moe<T: Scalar>(pruned: &[DenseModel<T>], clusters: Vec<Vec<String>>, router_seed: u64, routing: Routing) -> Result<MoeModel<T>> {
    let first = pruned
        .first()
        .ok_or_else(|| DiveError::Parameter("reconstruction needs at least one model".into()))?;
    if clusters.len() != pruned.len() {
        return Err(DiveError::Parameter(format!(
            "{} cluster descriptions for {} models",
            clusters.len(),
            pruned.len()
        )));
    }
    let cfg = first.config;
    let width = first.ffn_width(0)?;
    for (i, m) in pruned.iter().enumerate() {
        if m.config != cfg {
            return Err(DiveError::Consistency(format!("model {i} has a different configuration")));
        }
        for (name, t) in first.params.iter().filter(|(n, _)| is_trunk_param(n)) {
            if !m.params.get(name).is_ok_and(|o| o.bit_eq(t)) {
                return Err(DiveError::Consistency(format!("model {i} differs from model 0 in `{name}`")));
            }
        }
        for l in 0..cfg.n_layers {
            if m.ffn_width(l)? != width {
                return Err(DiveError::Dimension(format!(
                    "model {i} layer {l} has width {}, expected {width}",
                    m.ffn_width(l)?
                )));
            }
        }
    }
    routing.validate(pruned.len())?;
    let mut params: ParamStore<T> = first
        .params
        .iter()
        .filter(|(n, _)| is_trunk_param(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let mut experts = Vec::with_capacity(pruned.len());
    for (e, (m, cluster)) in pruned.iter().zip(clusters).enumerate() {
        for l in 0..cfg.n_layers {
            let src = DenseModel::<T>::ffn_prefix(l);
            let dst = MoeModel::<T>::expert_prefix(l, e);
            for part in ["gate", "up", "down", "bias"] {
                if let Ok(t) = m.params.get(&format!("{src}.{part}")) {
                    params.insert(format!("{dst}.{part}"), t.clone());
                }
            }
        }
        let kept = m
            .kept
            .clone()
            .unwrap_or_else(|| vec![(0..width).collect(); cfg.n_layers]);
        experts.push(ExpertInfo { cluster, kept });
    }
    let mut moe = MoeModel {
        config: cfg,
        params,
        n_experts: pruned.len(),
        expert_width: width,
        routing,
        experts,
        lora: None,
    };
    moe.add_routers(router_seed);
    Ok(moe)
}

/// `n` random channel subsets of size `size` whose union is `0..width`.
///
/// A shuffled permutation of all channels is cut into consecutive subsets
/// (the last one topped up with random channels not yet in it), the
/// remaining experts draw arbitrary subsets, and the expert order is
/// shuffled. Subsets are returned sorted ascending.
pub fn random_cover(width: usize, n: usize, size: usize, rng: &mut DetRng) -> Result<Vec<Vec<usize>>> {
    if n == 0 || size == 0 || size > width {
        return Err(DiveError::Parameter(format!(
            "cannot split {width} channels into {n} subsets of {size}"
        )));
    }
    if n * size < width {
        return Err(DiveError::Parameter(format!(
            "{n} subsets of {size} channels cannot cover {width} channels"
        )));
    }
    let mut perm: Vec<usize> = (0..width).collect();
    rng.shuffle(&mut perm);
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    for chunk in perm.chunks(size) {
        let mut s = chunk.to_vec();
        if s.len() < size {
            let mut rest: Vec<usize> = (0..width).filter(|c| !s.contains(c)).collect();
            rng.shuffle(&mut rest);
            s.extend_from_slice(&rest[..size - s.len()]);
        }
        sets.push(s);
    }
    while sets.len() < n {
        sets.push(rng.sample_distinct(width, size));
    }
    rng.shuffle(&mut sets);
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(sets)
}

/// Experts built by copying random, possibly overlapping channel subsets
/// of the dense FFN, without bias compensation.
pub fn random_split_baseline<T: Scalar>(dense: &DenseModel<T>, n: usize, expert_fraction: f64, seed: u64, routing: Routing) -> Result<MoeModel<T>> {
    let cfg = dense.config;
    let width = dense.ffn_width(0)?;
    let size = (expert_fraction * width as f64).round() as usize;
    if !(expert_fraction > 0.0 && expert_fraction <= 1.0) {
        return Err(DiveError::Parameter(format!("expert fraction must lie in (0, 1], got {expert_fraction}")));
    }
    routing.validate(n)?;
    let mut params: ParamStore<T> = dense
        .params
        .iter()
        .filter(|(name, _)| is_trunk_param(name))
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();
    let mut experts: Vec<ExpertInfo> = (0..n)
        .map(|_| ExpertInfo {
            cluster: Vec::new(),
            kept: Vec::new(),
        })
        .collect();
    for l in 0..cfg.n_layers {
        let mut rng = DetRng::new(DetRng::derive_seed(seed, &format!("split{l}")));
        let sets = random_cover(width, n, size, &mut rng)?;
        let src = DenseModel::<T>::ffn_prefix(l);
        let (gate, up, down) = (
            dense.params.get(&format!("{src}.gate"))?,
            dense.params.get(&format!("{src}.up"))?,
            dense.params.get(&format!("{src}.down"))?,
        );
        let zero_mean = vec![0.0; width];
        for (e, set) in sets.into_iter().enumerate() {
            let p = crate::prune::prune_ffn(gate, up, down, &set, &zero_mean)?;
            let dst = MoeModel::<T>::expert_prefix(l, e);
            params.insert(format!("{dst}.gate"), p.gate);
            params.insert(format!("{dst}.up"), p.up);
            params.insert(format!("{dst}.down"), p.down);
            experts[e].kept.push(set);
        }
    }
    let mut moe = MoeModel {
        config: cfg,
        params,
        n_experts: n,
        expert_width: size,
        routing,
        experts,
        lora: None,
    };
    moe.add_routers(DetRng::derive_seed(seed, "routers"));
    Ok(moe)
}
