#![allow(dead_code)]

use dive_core::model::{forward, DenseModel, LanguageModel, LoraSpec, ModelConfig, Pass};
use dive_core::moe::{random_split_baseline, MoeModel, Routing};
use dive_core::retrain::attach_lora;
use dive_core::{DetRng, Graph, Result, Scalar, Var};

pub type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

pub struct OpCase<T> {
    pub name: &'static str,
    pub leaves: Vec<(Vec<usize>, Vec<f64>)>,
    pub build: Build<T>,
}

/// Fixed weights that turn any output into a scalar loss.
pub fn probe(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect()
}

fn normal(rng: &mut DetRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * std).collect()
}

/// Logits whose entries are at least 0.3 apart, so a small perturbation
/// never changes a top-k selection.
fn separated(rng: &mut DetRng, rows: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        out.extend(order.iter().map(|&o| o as f64 * 0.5 - 1.0 + 0.1 * rng.uniform()));
    }
    out
}

pub fn op_cases<T: Scalar>(seed: u64) -> Vec<OpCase<T>> {
    let mut rng = DetRng::new(DetRng::derive_seed(seed, "gradcheck"));
    let r = &mut rng;
    let mut cases: Vec<OpCase<T>> = Vec::new();
    let mut add = |name: &'static str, leaves: Vec<(Vec<usize>, Vec<f64>)>, build: Build<T>| {
        cases.push(OpCase { name, leaves, build });
    };
    add("matmul", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![4, 5], normal(r, 20, 1.0))], Box::new(|g, v| g.matmul(v[0], v[1])));
    add("matmul_at", vec![(vec![4, 3], normal(r, 12, 1.0)), (vec![4, 5], normal(r, 20, 1.0))], Box::new(|g, v| g.matmul_ex(v[0], v[1], true, false)));
    add("matmul_bt", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![5, 4], normal(r, 20, 1.0))], Box::new(|g, v| g.matmul_ex(v[0], v[1], false, true)));
    add("matmul_atbt", vec![(vec![4, 3], normal(r, 12, 1.0)), (vec![5, 4], normal(r, 20, 1.0))], Box::new(|g, v| g.matmul_ex(v[0], v[1], true, true)));
    add("linear", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![6, 4], normal(r, 24, 1.0))], Box::new(|g, v| g.linear(v[0], v[1])));
    add("add", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.add(v[0], v[1])));
    add("mul", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.mul(v[0], v[1])));
    add("add_bias", vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![4], normal(r, 4, 1.0))], Box::new(|g, v| g.add_bias(v[0], v[1])));
    add("scale", vec![(vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.scale(v[0], -1.7)));
    add("swish", vec![(vec![3, 4], normal(r, 12, 1.5))], Box::new(|g, v| g.swish(v[0])));
    add("swiglu", vec![(vec![3, 4], normal(r, 12, 1.5)), (vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.swiglu(v[0], v[1])));
    add(
        "rms_norm",
        vec![(vec![4, 6], normal(r, 24, 1.0)), (vec![6], normal(r, 6, 1.0))],
        Box::new(|g, v| g.rms_norm(v[0], v[1], 1e-5)),
    );
    let ids = vec![3, 0, 7, 3, 9];
    add(
        "embedding",
        vec![(vec![10, 4], normal(r, 40, 1.0))],
        Box::new(move |g, v| g.embedding(v[0], &ids)),
    );
    add("rope", vec![(vec![6, 8], normal(r, 48, 1.0))], Box::new(|g, v| g.rope(v[0], 2, 3, 10_000.0)));
    add(
        "causal_attention",
        vec![
            (vec![6, 8], normal(r, 48, 1.0)),
            (vec![6, 8], normal(r, 48, 1.0)),
            (vec![6, 8], normal(r, 48, 1.0)),
        ],
        Box::new(|g, v| g.causal_attention(v[0], v[1], v[2], 2, 3, 2)),
    );
    add("softmax", vec![(vec![3, 5], normal(r, 15, 1.0))], Box::new(|g, v| g.softmax(v[0], 0.5)));
    add("topk_softmax", vec![(vec![3, 5], separated(r, 3, 5))], Box::new(|g, v| g.topk_softmax(v[0], 2)));
    let targets = vec![1, 6, 0, 3];
    add(
        "cross_entropy",
        vec![(vec![4, 7], normal(r, 28, 1.5))],
        Box::new(move |g, v| g.cross_entropy(v[0], &targets)),
    );
    add("sum", vec![(vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.sum(v[0])));
    add("gather_rows", vec![(vec![4, 3], normal(r, 12, 1.0))], Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2])));
    add("gather_column", vec![(vec![4, 3], normal(r, 12, 1.0))], Box::new(|g, v| g.gather_column(v[0], 1, &[3, 1, 1])));
    add(
        "scale_rows",
        vec![(vec![3, 4], normal(r, 12, 1.0)), (vec![3], normal(r, 3, 1.0))],
        Box::new(|g, v| g.scale_rows(v[0], v[1])),
    );
    add(
        "scatter_rows",
        vec![(vec![2, 3], normal(r, 6, 1.0)), (vec![3, 3], normal(r, 9, 1.0))],
        Box::new(|g, v| g.scatter_rows(4, 3, vec![(v[0], vec![1, 3]), (v[1], vec![0, 1, 2])])),
    );
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    add(
        "dropout_with_mask",
        vec![(vec![3, 4], normal(r, 12, 1.0))],
        Box::new(move |g, v| g.dropout_with_mask(v[0], mask.iter().map(|&m| T::of(m)).collect())),
    );
    add("reshape", vec![(vec![3, 4], normal(r, 12, 1.0))], Box::new(|g, v| g.reshape(v[0], &[2, 6])));
    cases
}

fn case_loss<T: Scalar>(case: &OpCase<T>, leaves: &[(Vec<usize>, Vec<f64>)]) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = leaves
        .iter()
        .map(|(s, d)| g.input(s, d.iter().map(|&x| T::of(x)).collect(), true))
        .collect::<Result<Vec<_>>>()?;
    let y = (case.build)(&mut g, &vars)?;
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = g.input(&shape, probe(n).into_iter().map(T::of).collect(), false)?;
    let prod = g.mul(y, w)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn floored_rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Largest floored relative error between backprop and central differences
/// over every leaf coordinate.
pub fn check_case<T: Scalar>(case: &OpCase<T>, h: f64) -> Result<f64> {
    let (mut g, vars, loss) = case_loss(case, &case.leaves)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (li, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*var) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; case.leaves[li].1.len()],
        };
        for c in 0..case.leaves[li].1.len() {
            let mut plus = case.leaves.clone();
            plus[li].1[c] += h;
            let mut minus = case.leaves.clone();
            minus[li].1[c] -= h;
            let (gp, _, lp) = case_loss(case, &plus)?;
            let (gm, _, lm) = case_loss(case, &minus)?;
            let numeric = (gp.scalar(lp).as_f64() - gm.scalar(lm).as_f64()) / (2.0 * h);
            worst = worst.max(floored_rel(analytic[c], numeric));
        }
    }
    Ok(worst)
}

fn model_loss<T: Scalar, M: LanguageModel<T>>(m: &M, tokens: &[usize], targets: &[usize], batch: usize, seq: usize) -> Result<(Graph<T>, Var)> {
    let mut g = Graph::new();
    let logits = forward(m, &mut g, tokens, batch, seq, &mut Pass::eval())?;
    let loss = g.cross_entropy(logits, targets)?;
    Ok((g, loss))
}

/// Compares backprop against central differences on `coords` random
/// coordinates of the model's trainable parameters.
pub fn check_model<T: Scalar, M: LanguageModel<T>>(model: &mut M, seed: u64, coords: usize, h: f64) -> Result<f64> {
    let mut rng = DetRng::new(DetRng::derive_seed(seed, "model-check"));
    let (batch, seq) = (2, 8);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.below(256)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.below(256)).collect();
    let (mut g, loss) = model_loss(&*model, &tokens, &targets, batch, seq)?;
    g.backward(loss)?;
    let grads: Vec<(String, Vec<f64>)> = g
        .param_grads()
        .map(|(n, gr)| (n.to_string(), gr.iter().map(|v| v.as_f64()).collect()))
        .collect();
    let names = model.params().trainable_names();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let name = rng.pick(&names).clone();
        let len = model.params().get(&name)?.numel();
        let c = rng.below(len);
        let analytic = grads.iter().find(|(n, _)| *n == name).map_or(0.0, |(_, gr)| gr[c]);
        let orig = model.params().get(&name)?.data()[c];
        let mut eval_at = |v: f64| -> Result<f64> {
            model.params_mut().get_mut(&name)?.data_mut()[c] = T::of(v);
            let (g, l) = model_loss(&*model, &tokens, &targets, batch, seq)?;
            Ok(g.scalar(l).as_f64())
        };
        let x = orig.as_f64();
        let numeric = (eval_at(x + h)? - eval_at(x - h)?) / (2.0 * h);
        model.params_mut().get_mut(&name)?.data_mut()[c] = orig;
        worst = worst.max(floored_rel(analytic, numeric));
    }
    Ok(worst)
}

/// Tiny config with a large init so gradients are far from zero.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        init_std: 0.3,
        ..ModelConfig::tiny()
    }
}

pub fn tiny_dense<T: Scalar>(seed: u64) -> DenseModel<T> {
    let mut m = DenseModel::init(check_config(), seed).expect("tiny config is valid");
    m.params.set_trainable(|_| true);
    m
}

/// A dense-routed MoE with nonzero adapters, everything trainable.
pub fn tiny_adapted_moe<T: Scalar>(seed: u64) -> MoeModel<T> {
    let dense: DenseModel<T> = DenseModel::init(check_config(), seed).expect("tiny config is valid");
    let mut m = random_split_baseline(&dense, 3, 0.5, seed, Routing::Dense { temperature: 0.7 }).expect("valid split");
    attach_lora(&mut m, LoraSpec { rank: 2, alpha: 4.0, dropout: 0.1 }, seed).expect("fresh model");
    let mut rng = DetRng::new(seed ^ 0x5eed);
    let names: Vec<String> = m.params.names().filter(|n| n.ends_with(".lora_b")).map(String::from).collect();
    for n in names {
        for v in m.params.get_mut(&n).unwrap().data_mut() {
            *v = T::of(rng.normal() * 0.05);
        }
    }
    m.params.set_trainable(|_| true);
    m
}

/// Pearson correlation by the raw-moment formula, as an independent check.
pub fn reference_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

/// Column-min over value, one cell at a time.
pub fn reference_normalize(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = raw.to_vec();
    for (i, row) in raw.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let mut m = f64::INFINITY;
            for other in raw {
                if other[j] < m {
                    m = other[j];
                }
            }
            out[i][j] = m / v;
        }
    }
    out
}
