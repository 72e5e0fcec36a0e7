//! Independent re-implementations of the MoE forward semantics, compared
//! against the taped model.

use diep::moe::{topk_indices, MoEModel, ModelConfig, PruneMask, PruneParams, RunMode};
use diep::tensor::{finite_diff, grad_close, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Value-level expert FFN: relu(x W_up + b_up) W_down + b_down for one token.
fn expert_apply(model: &MoEModel, layer: usize, expert: usize, x: &[f64]) -> Vec<f64> {
    let e = &model.layers[layer].experts[expert];
    let (d, h) = (model.config.hidden, model.config.inner());
    let mut hid = vec![0.0; h];
    for j in 0..h {
        let mut s = 0.0;
        for p in 0..d {
            s += x[p] * e.w_up.at(p, j);
        }
        hid[j] = (s + e.b_up.data()[j]).max(0.0);
    }
    let mut out = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for p in 0..h {
            s += hid[p] * e.w_down.at(p, j);
        }
        out[j] = s + e.b_down.data()[j];
    }
    out
}

/// Brute-force full forward for a single token, written directly from the
/// layer definition: softmax routing, top-k, renormalize, weighted sum of
/// expert outputs, residual, head.
fn brute_force_forward(model: &MoEModel, token: usize) -> Vec<f64> {
    let d = model.config.hidden;
    let mut x: Vec<f64> = model.embedding.data()[token * d..(token + 1) * d].to_vec();
    for l in 0..model.config.layers {
        let n = model.layers[l].expert_count();
        let mut logits = vec![0.0; n];
        for i in 0..n {
            for p in 0..d {
                logits[i] += x[p] * model.layers[l].router.at(p, i);
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let sel = topk_indices(&w, model.config.top_k);
        let sel_total: f64 = sel.iter().map(|&i| w[i]).sum();
        let mut y = x.clone();
        for &i in &sel {
            let out = expert_apply(model, l, i, &x);
            let weight = w[i] / sel_total;
            for j in 0..d {
                y[j] += weight * out[j];
            }
        }
        x = y;
    }
    let mut logits = vec![0.0; model.config.classes];
    for c in 0..model.config.classes {
        for p in 0..d {
            logits[c] += x[p] * model.head_w.at(p, c);
        }
        logits[c] += model.head_b.data()[c];
    }
    logits
}

#[test]
fn full_forward_matches_brute_force_recomputation() {
    let config = ModelConfig::toy(3, 4, 2, 6, 17, 4);
    let model = MoEModel::init(config, 101).unwrap();
    let tokens: Vec<usize> = vec![0, 3, 9, 16, 5];
    let out = model.run(&tokens, RunMode::Full).unwrap();
    for (row, &tok) in tokens.iter().enumerate() {
        let oracle = brute_force_forward(&model, tok);
        for (c, want) in oracle.iter().enumerate() {
            assert!(
                (out.at(row, c) - want).abs() < 1e-12,
                "token {tok} class {c}"
            );
        }
    }
}

#[test]
fn masked_forward_matches_model_surgery() {
    // Pruned routing must agree with physically deleting the pruned experts.
    let config = ModelConfig::toy(3, 4, 2, 5, 13, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let model = MoEModel::init(config.clone(), 200 + trial).unwrap();
        // random mask retaining at least k = 2 per layer
        let keep: Vec<Vec<bool>> = (0..3)
            .map(|_| {
                let drop = rng.gen_range(0..=2);
                let mut row = vec![true; 4];
                let mut order: Vec<usize> = (0..4).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                for &i in order.iter().take(drop) {
                    row[i] = false;
                }
                row
            })
            .collect();
        let mask = PruneMask::new(keep, 2).unwrap();
        let shrunk = model.surgery(&mask).unwrap();

        let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..13)).collect();
        let masked = model.run(&tokens, RunMode::Masked(&mask)).unwrap();
        let small_mask = PruneMask {
            keep: shrunk.layers.iter().map(|l| vec![true; l.expert_count()]).collect(),
            pruned: vec![],
        };
        let rebuilt = shrunk.run(&tokens, RunMode::Masked(&small_mask)).unwrap();
        for (a, b) in masked.data().iter().zip(rebuilt.data().iter()) {
            assert!((a - b).abs() < 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn relaxed_matches_hand_composed_softmax_weighted_sum() {
    let config = ModelConfig::toy(2, 3, 2, 4, 9, 3);
    let model = MoEModel::init(config, 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = PruneParams {
        alpha: (0..2)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        beta: (0..2).map(|_| rng.gen_range(0.2..1.5)).collect(),
    };
    let tokens = [4usize, 7];
    let out = model.run(&tokens, RunMode::Relaxed(&params)).unwrap();

    // oracle: per token, y = beta * sum_i abar_i FFN_i(x) + x per layer
    let d = model.config.hidden;
    for (row, &tok) in tokens.iter().enumerate() {
        let mut x: Vec<f64> = model.embedding.data()[tok * d..(tok + 1) * d].to_vec();
        for l in 0..2 {
            let abar = params.alpha_bar(l);
            let mut mix = vec![0.0; d];
            for i in 0..3 {
                let e = expert_apply(&model, l, i, &x);
                for j in 0..d {
                    mix[j] += abar[i] * e[j];
                }
            }
            for j in 0..d {
                x[j] += params.beta[l] * mix[j];
            }
        }
        for c in 0..model.config.classes {
            let mut s = model.head_b.data()[c];
            for p in 0..d {
                s += x[p] * model.head_w.at(p, c);
            }
            assert!((out.at(row, c) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_relaxation_matches_masked_forward() {
    // With a zeroed router every token top-1 routes to expert 0 (tie-break),
    // so a near-one-hot abar on expert 0 with beta = 1 must reproduce the
    // masked model that retains exactly expert 0 per layer.
    let mut config = ModelConfig::toy(2, 3, 1, 4, 9, 3);
    config.renormalize_topk = true;
    let mut model = MoEModel::init(config, 77).unwrap();
    for layer in &mut model.layers {
        layer.router = Tensor::zeros(vec![4, 3]);
    }

    let mut params = PruneParams::init(2, 3);
    for row in &mut params.alpha {
        row[0] = 60.0; // softmax puts ~1 - 2e-26 mass on expert 0
    }
    let tokens = [1usize, 4, 8];
    let relaxed = model.run(&tokens, RunMode::Relaxed(&params)).unwrap();

    let mask = PruneMask::from_pruned(2, 3, &[(0, 1), (0, 2), (1, 1), (1, 2)], 1).unwrap();
    let masked = model.run(&tokens, RunMode::Masked(&mask)).unwrap();
    for (a, b) in relaxed.data().iter().zip(masked.data().iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn relaxed_output_is_differentiable_in_alpha_and_beta() {
    let config = ModelConfig::toy(2, 3, 2, 4, 9, 3);
    let model = MoEModel::init(config, 55).unwrap();
    let tokens = [2usize, 6, 1];
    let base = PruneParams {
        alpha: vec![vec![0.3, -0.4, 0.1], vec![-0.2, 0.5, 0.0]],
        beta: vec![0.9, 1.2],
    };

    // loss: sum of relaxed logits
    let eval = |params: &PruneParams| -> f64 {
        model
            .run(&tokens, RunMode::Relaxed(params))
            .unwrap()
            .data()
            .iter()
            .sum()
    };

    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape);
    let bound = params_bound(&mut tape, &base);
    let logits = model
        .forward_bound(
            &mut tape,
            &nodes,
            &tokens,
            &diep::moe::BoundMode::Relaxed {
                params: bound.clone(),
                router_weighted: false,
            },
            None,
        )
        .unwrap();
    let loss = tape.sum(logits);
    let grads = tape.backward(loss, &bound.all_ids()).unwrap();

    for l in 0..2 {
        let alpha_t = Tensor::new(vec![1, 3], base.alpha[l].clone()).unwrap();
        let fd = finite_diff(
            |v| {
                let mut p = base.clone();
                p.alpha[l] = v.data().to_vec();
                eval(&p)
            },
            &alpha_t,
            1e-5,
        );
        let report = grad_close(grads.grad(bound.alpha[l]), &fd, 1e-5, 1e-8);
        assert!(report.pass, "alpha layer {l}: {}", report.max_rel_diff);

        let beta_t = Tensor::scalar(base.beta[l]);
        let fd = finite_diff(
            |v| {
                let mut p = base.clone();
                p.beta[l] = v.item();
                eval(&p)
            },
            &beta_t,
            1e-5,
        );
        let report = grad_close(grads.grad(bound.beta[l]), &fd, 1e-5, 1e-8);
        assert!(report.pass, "beta layer {l}: {}", report.max_rel_diff);
    }
}

fn params_bound(tape: &mut Tape, params: &PruneParams) -> diep::moe::ParamNodes {
    params.bind(tape)
}

#[test]
fn permuting_experts_with_their_logits_leaves_relaxed_output_unchanged() {
    let config = ModelConfig::toy(2, 4, 2, 4, 9, 3);
    let model = MoEModel::init(config, 31).unwrap();
    let params = PruneParams {
        alpha: vec![vec![0.7, -0.3, 0.2, 0.0], vec![0.1, 0.4, -0.6, 0.9]],
        beta: vec![1.1, 0.8],
    };
    let tokens = [0usize, 5, 8];
    let base = model.run(&tokens, RunMode::Relaxed(&params)).unwrap();

    let perm = [3usize, 0, 2, 1];
    let mut permuted_model = model.clone();
    let mut permuted_params = params.clone();
    for l in 0..2 {
        let experts = model.layers[l].experts.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted_model.layers[l].experts[new_i] = experts[old_i].clone();
            permuted_params.alpha[l][new_i] = params.alpha[l][old_i];
        }
    }
    let swapped = permuted_model
        .run(&tokens, RunMode::Relaxed(&permuted_params))
        .unwrap();
    for (a, b) in base.data().iter().zip(swapped.data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn router_weighted_variant_scales_by_routing_weights() {
    // single layer, beta 1: y = sum_i abar_i * w_i * FFN_i(x) + x
    let config = ModelConfig::toy(1, 3, 2, 4, 9, 3);
    let model = MoEModel::init(config, 63).unwrap();
    let params = PruneParams {
        alpha: vec![vec![0.4, 0.0, -0.5]],
        beta: vec![1.0],
    };
    let tokens = [3usize];
    let out = model
        .run(&tokens, RunMode::RelaxedRouterWeighted(&params))
        .unwrap();

    let d = model.config.hidden;
    let x: Vec<f64> = model.embedding.data()[3 * d..4 * d].to_vec();
    let xt = Tensor::matrix(&[x.clone()]).unwrap();
    let w = diep::moe::router_weights(&model, &xt, 0).unwrap();
    let abar = params.alpha_bar(0);
    let mut y = x.clone();
    for i in 0..3 {
        let e = expert_apply(&model, 0, i, &x);
        for j in 0..d {
            y[j] += abar[i] * w.data()[i] * e[j];
        }
    }
    for c in 0..model.config.classes {
        let mut s = model.head_b.data()[c];
        for p in 0..d {
            s += y[p] * model.head_w.at(p, c);
        }
        assert!((out.at(0, c) - s).abs() < 1e-12);
    }
}
