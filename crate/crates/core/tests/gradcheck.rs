mod common;

use common::{check_case, check_model, op_cases, tiny_adapted_moe, tiny_dense};
use dive_core::model::{forward, Pass};
use dive_core::moe::Routing;
use dive_core::{DetRng, Graph};

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_central_differences_f64() {
    for seed in 0..SEEDS {
        for case in op_cases::<f64>(seed) {
            let err = check_case(&case, 1e-5).unwrap();
            assert!(err < 1e-6, "{} seed {seed}: {err:e}", case.name);
        }
    }
}

#[test]
fn every_op_matches_central_differences_f32() {
    for seed in 0..SEEDS {
        for case in op_cases::<f32>(seed) {
            let err = check_case(&case, 1e-2).unwrap();
            assert!(err < 1e-3, "{} seed {seed}: {err:e}", case.name);
        }
    }
}

#[test]
fn dense_model_loss_gradients() {
    for seed in 0..4 {
        let mut m = tiny_dense::<f64>(seed);
        let err = check_model(&mut m, seed, 40, 1e-5).unwrap();
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn adapted_moe_loss_gradients() {
    for seed in 0..4 {
        let mut m = tiny_adapted_moe::<f64>(seed);
        let err = check_model(&mut m, seed, 40, 1e-5).unwrap();
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn tied_router_starves_every_expert_but_the_first() {
    let mut m = tiny_adapted_moe::<f64>(1).with_routing(Routing::Sparse { top_k: 1 }).unwrap();
    let routers: Vec<String> = m.params.names().filter(|n| n.ends_with(".moe.router")).map(String::from).collect();
    for r in &routers {
        m.params.get_mut(r).unwrap().data_mut().fill(0.0);
    }
    let mut rng = DetRng::new(3);
    let tokens: Vec<usize> = (0..16).map(|_| rng.below(256)).collect();
    let mut g = Graph::new();
    let logits = forward(&m, &mut g, &tokens, 2, 8, &mut Pass::eval()).unwrap();
    let loss = g.cross_entropy(logits, &tokens).unwrap();
    g.backward(loss).unwrap();
    let mut saw_expert0 = false;
    for (name, grad) in g.param_grads() {
        if name.contains(".moe.experts.0.") {
            saw_expert0 |= grad.iter().any(|v| *v != 0.0);
        } else if name.contains(".moe.experts.") {
            assert!(grad.iter().all(|v| *v == 0.0), "{name} received gradient");
        }
    }
    assert!(saw_expert0);
}
