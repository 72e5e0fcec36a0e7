//! From learned scores to pruning masks: global bottom-K selection with
//! per-layer retention floors, the random / activation-frequency /
//! exhaustive-search baselines, and the optional similarity-weighted merge
//! of pruned experts into retained ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cka::{expert_features, gram, hsic, KernelKind};
use crate::error::{DiepError, Result};
use crate::moe::{topk_indices, MoEModel, PruneMask, PruneParams, RunMode};
use crate::synth::CalibrationSet;
use crate::tensor::Tensor;

/// How per-expert scores are formed from the learned parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// Softmax-normalized intra-layer weights times the layer scalar;
    /// normalization keeps cross-layer magnitudes comparable.
    #[default]
    NormalizedAlphaBeta,
    /// Raw logits times the layer scalar. Sign-sensitive: negative logits
    /// flip under a negative beta.
    RawAlphaBeta,
}

/// One scored expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    pub expert: usize,
    pub score: f64,
}

/// All L x N expert scores under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
    pub variant: ScoreVariant,
    pub layers: usize,
    pub experts: usize,
}

impl ScoreTable {
    pub fn score(&self, layer: usize, expert: usize) -> f64 {
        self.entries[layer * self.experts + expert].score
    }
}

/// A pruning decision: the mask, the target count, and the pruned list in
/// pruning order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub mask: PruneMask,
    /// Total experts pruned (K).
    pub k_pruned: usize,
    pub retained_counts: Vec<usize>,
    /// Pruned experts in the order they were selected.
    pub pruned: Vec<(usize, usize)>,
}

impl PruneDecision {
    fn from_pruned(
        layers: usize,
        experts: usize,
        pruned: Vec<(usize, usize)>,
        floor: usize,
    ) -> Result<Self> {
        let mask = PruneMask::from_pruned(layers, experts, &pruned, floor)?;
        Ok(PruneDecision {
            k_pruned: pruned.len(),
            retained_counts: mask.retained_counts(),
            mask,
            pruned,
        })
    }
}

/// Global expert scores from the learned parameters.
pub fn global_scores(params: &PruneParams, variant: ScoreVariant) -> Result<ScoreTable> {
    let layers = params.alpha.len();
    let experts = params.alpha.first().map_or(0, Vec::len);
    if layers == 0 || experts == 0 {
        return Err(DiepError::EmptyInput {
            what: "global_scores",
        });
    }
    let finite = params.alpha.iter().flatten().all(|v| v.is_finite())
        && params.beta.iter().all(|v| v.is_finite());
    if !finite {
        return Err(DiepError::NonFinite {
            context: "prune params".to_string(),
        });
    }
    let mut entries = Vec::with_capacity(layers * experts);
    for l in 0..layers {
        let weights: Vec<f64> = match variant {
            ScoreVariant::NormalizedAlphaBeta => params.alpha_bar(l),
            ScoreVariant::RawAlphaBeta => params.alpha[l].clone(),
        };
        for (i, w) in weights.iter().enumerate() {
            entries.push(ScoreEntry {
                layer: l,
                expert: i,
                score: w * params.beta[l],
            });
        }
    }
    Ok(ScoreTable {
        entries,
        variant,
        layers,
        experts,
    })
}

/// Number of experts to prune for sparsity ratio r, rounded to nearest.
pub fn prune_count(layers: usize, experts: usize, r: f64) -> usize {
    (layers as f64 * experts as f64 * r).round() as usize
}

/// Globally sort all experts ascending by score and prune the bottom K,
/// skipping any expert whose removal would push its layer below the floor
/// of `k` retained experts. Ties break by lower layer then lower index.
pub fn select_bottom_k(scores: &ScoreTable, r: f64, k: usize) -> Result<PruneDecision> {
    if !(0.0..=1.0).contains(&r) {
        return Err(DiepError::InvalidConfig {
            field: "r".to_string(),
            reason: "sparsity ratio must lie in [0, 1]".to_string(),
        });
    }
    let (layers, experts) = (scores.layers, scores.experts);
    let target = prune_count(layers, experts, r);
    let max_feasible = layers * experts.saturating_sub(k);
    if target > max_feasible {
        return Err(DiepError::Infeasible {
            requested_k: target,
            max_feasible_k: max_feasible,
        });
    }
    let mut order: Vec<&ScoreEntry> = scores.entries.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.expert.cmp(&b.expert))
    });
    let mut retained = vec![experts; layers];
    let mut pruned = Vec::with_capacity(target);
    for entry in order {
        if pruned.len() == target {
            break;
        }
        if retained[entry.layer] > k {
            retained[entry.layer] -= 1;
            pruned.push((entry.layer, entry.expert));
        }
    }
    debug_assert_eq!(pruned.len(), target);
    PruneDecision::from_pruned(layers, experts, pruned, k)
}

/// Uniform draw over floor-respecting masks with exactly K pruned experts.
///
/// Per-layer prune counts are sampled with probability proportional to the
/// number of masks realizing them, then experts are drawn uniformly within
/// each layer, which makes every feasible mask equally likely.
pub fn random_prune(
    layers: usize,
    experts: usize,
    k_pruned: usize,
    k: usize,
    seed: u64,
) -> Result<PruneDecision> {
    let per_layer_cap = experts.saturating_sub(k);
    let max_feasible = layers * per_layer_cap;
    if k_pruned > max_feasible {
        return Err(DiepError::Infeasible {
            requested_k: k_pruned,
            max_feasible_k: max_feasible,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // weight[c] = C(experts, c): masks of a layer pruning c experts
    let choose: Vec<u128> = (0..=per_layer_cap).map(|c| binomial(experts, c)).collect();
    // count[l][j]: weighted number of ways to prune j experts in layers l..L
    let mut count = vec![vec![0u128; k_pruned + 1]; layers + 1];
    count[layers][0] = 1;
    for l in (0..layers).rev() {
        for j in 0..=k_pruned {
            let mut total = 0u128;
            for c in 0..=per_layer_cap.min(j) {
                total += choose[c] * count[l + 1][j - c];
            }
            count[l][j] = total;
        }
    }
    if count[0][k_pruned] == 0 {
        return Err(DiepError::Infeasible {
            requested_k: k_pruned,
            max_feasible_k: max_feasible,
        });
    }

    let mut pruned = Vec::with_capacity(k_pruned);
    let mut remaining = k_pruned;
    for l in 0..layers {
        // sample this layer's count conditional on the remainder
        let total = count[l][remaining];
        let mut draw = loop {
            let v = rng.gen_range(0..u128::MAX);
            let bound = u128::MAX - u128::MAX % total;
            if v < bound {
                break v % total;
            }
        };
        let mut c_l = 0;
        for c in 0..=per_layer_cap.min(remaining) {
            let ways = choose[c] * count[l + 1][remaining - c];
            if draw < ways {
                c_l = c;
                break;
            }
            draw -= ways;
        }
        // uniform c_l-subset of this layer's experts
        let mut slots: Vec<usize> = (0..experts).collect();
        for i in 0..c_l {
            let j = rng.gen_range(i..experts);
            slots.swap(i, j);
        }
        let mut chosen: Vec<usize> = slots[..c_l].to_vec();
        chosen.sort_unstable();
        for e in chosen {
            pruned.push((l, e));
        }
        remaining -= c_l;
    }
    PruneDecision::from_pruned(layers, experts, pruned, k)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out = 1u128;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

/// Prune the K least-activated experts under full routing over the
/// calibration set; ties break by (layer, index). Returns the decision and
/// the activation counts.
pub fn frequency_prune(
    model: &MoEModel,
    calibration: &CalibrationSet,
    k_pruned: usize,
    k: usize,
) -> Result<(PruneDecision, Vec<Vec<usize>>)> {
    calibration.check_tokens(model.config.vocab)?;
    let (layers, experts) = (model.config.layers, model.config.experts);
    let max_feasible = layers * experts.saturating_sub(k);
    if k_pruned > max_feasible {
        return Err(DiepError::Infeasible {
            requested_k: k_pruned,
            max_feasible_k: max_feasible,
        });
    }
    let (tokens, _) = calibration.flattened();
    let (_, trace) = model.run_traced(&tokens, RunMode::Full)?;
    let mut counts = vec![vec![0usize; experts]; layers];
    for (l, per_layer) in trace.selections.iter().enumerate() {
        for per_token in per_layer {
            for &i in per_token {
                counts[l][i] += 1;
            }
        }
    }
    let mut order: Vec<(usize, usize)> = (0..layers)
        .flat_map(|l| (0..experts).map(move |i| (l, i)))
        .collect();
    order.sort_by_key(|&(l, i)| (counts[l][i], l, i));
    let mut retained = vec![experts; layers];
    let mut pruned = Vec::with_capacity(k_pruned);
    for (l, i) in order {
        if pruned.len() == k_pruned {
            break;
        }
        if retained[l] > k {
            retained[l] -= 1;
            pruned.push((l, i));
        }
    }
    Ok((
        PruneDecision::from_pruned(layers, experts, pruned, k)?,
        counts,
    ))
}

/// Per-layer record of the exhaustive search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveReport {
    /// Subsets evaluated per layer.
    pub evaluated: Vec<usize>,
    /// Reconstruction error of the chosen subset per layer.
    pub best_error: Vec<f64>,
}

/// Guard on the per-layer enumeration size.
pub const MAX_SUBSETS_PER_LAYER: u128 = 10_000;

/// Per layer independently, enumerate every keep-subset and retain the one
/// minimizing the Frobenius error between the masked layer output and the
/// full layer output on the calibration set (uniform per-layer sparsity).
pub fn exhaustive_layer_search(
    model: &MoEModel,
    calibration: &CalibrationSet,
    keep: usize,
) -> Result<(PruneDecision, ExhaustiveReport)> {
    calibration.check_tokens(model.config.vocab)?;
    let (layers, experts) = (model.config.layers, model.config.experts);
    let k = model.config.top_k;
    if keep < k || keep > experts {
        return Err(DiepError::InvalidConfig {
            field: "keep".to_string(),
            reason: format!("must satisfy top_k <= keep <= experts, got {keep}"),
        });
    }
    let subsets = binomial(experts, keep);
    if subsets > MAX_SUBSETS_PER_LAYER {
        return Err(DiepError::Capacity {
            what: format!(
                "exhaustive search over {subsets} subsets per layer exceeds the guard of {MAX_SUBSETS_PER_LAYER}"
            ),
        });
    }

    let (tokens, _) = calibration.flattened();
    let (_, trace) = model.run_traced(&tokens, RunMode::Full)?;
    let mut pruned = Vec::new();
    let mut report = ExhaustiveReport {
        evaluated: Vec::with_capacity(layers),
        best_error: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let inputs = &trace.layer_inputs[l];
        let full_out = &trace.layer_outputs[l];
        let features = expert_features(model, l, inputs)?;
        let logits = layer_router_logits(model, l, inputs);

        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut evaluated = 0usize;
        for subset in k_subsets(experts, keep) {
            let err = subset_reconstruction_error(
                model, &subset, &features, &logits, inputs, full_out, k,
            );
            evaluated += 1;
            let better = match &best {
                None => true,
                Some((e, s)) => err < *e || (err == *e && subset < *s),
            };
            if better {
                best = Some((err, subset));
            }
        }
        let (err, kept) = best.expect("at least one subset");
        report.evaluated.push(evaluated);
        report.best_error.push(err);
        for i in 0..experts {
            if !kept.contains(&i) {
                pruned.push((l, i));
            }
        }
    }
    Ok((
        PruneDecision::from_pruned(layers, experts, pruned, k)?,
        report,
    ))
}

/// Router logits for every token at one layer, `[tokens][experts]`.
fn layer_router_logits(model: &MoEModel, layer: usize, inputs: &Tensor) -> Vec<Vec<f64>> {
    let (t, d) = (inputs.shape()[0], inputs.shape()[1]);
    let router = &model.layers[layer].router;
    let n = model.layers[layer].expert_count();
    (0..t)
        .map(|row| {
            (0..n)
                .map(|i| {
                    (0..d)
                        .map(|p| inputs.at(row, p) * router.at(p, i))
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Frobenius error of one keep-subset against the full layer output.
fn subset_reconstruction_error(
    model: &MoEModel,
    subset: &[usize],
    features: &[Tensor],
    logits: &[Vec<f64>],
    inputs: &Tensor,
    full_out: &Tensor,
    k: usize,
) -> f64 {
    let (t, d) = (inputs.shape()[0], inputs.shape()[1]);
    let renorm = model.config.renormalize_topk;
    let mut sq = 0.0;
    for row in 0..t {
        // softmax over the subset's logits
        let sub_logits: Vec<f64> = subset.iter().map(|&i| logits[row][i]).collect();
        let max = sub_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sub_logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let top = topk_indices(&w, k);
        let sel_total: f64 = top.iter().map(|&j| w[j]).sum();
        for col in 0..d {
            let mut y = inputs.at(row, col);
            for &j in &top {
                let weight = if renorm { w[j] / sel_total } else { w[j] };
                y += weight * features[subset[j]].at(row, col);
            }
            let diff = y - full_out.at(row, col);
            sq += diff * diff;
        }
    }
    sq.sqrt()
}

/// All k-subsets of 0..n in lexicographic order.
fn k_subsets(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut current: Option<Vec<usize>> = Some((0..k).collect());
    std::iter::from_fn(move || {
        let out = current.clone()?;
        // advance to the next combination
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                current = None;
                break;
            }
            i -= 1;
            if next[i] != i + n - k {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                current = Some(next);
                break;
            }
        }
        Some(out)
    })
}

/// Softmax weights over a group's similarity scores (merge weighting).
pub fn merge_weights(similarities: &[f64]) -> Vec<f64> {
    let max = similarities
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = similarities.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Merge each pruned expert into its most similar retained expert of the
/// same layer: the retained expert's weights become the softmax-of-CKA
/// weighted average of its group. The router is untouched; pruned logits
/// stay disabled by the mask.
pub fn merge_pruned(
    model: &MoEModel,
    decision: &PruneDecision,
    calibration: &CalibrationSet,
    kernel: KernelKind,
) -> Result<MoEModel> {
    decision.mask.check_shape(&model.config)?;
    let inputs = crate::cka::layer_inputs(model, calibration)?;
    let mut merged = model.clone();
    for l in 0..model.config.layers {
        let retained: Vec<usize> = (0..model.config.experts)
            .filter(|&i| decision.mask.keep[l][i])
            .collect();
        let pruned: Vec<usize> = (0..model.config.experts)
            .filter(|&i| !decision.mask.keep[l][i])
            .collect();
        if pruned.is_empty() {
            continue;
        }
        let features = expert_features(model, l, &inputs[l])?;
        let grams: Vec<Tensor> = features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                gram(f, kernel).map_err(|e| DiepError::Degenerate {
                    context: format!("layer {l} expert {i}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let cka_of = |a: usize, b: usize| -> Result<f64> {
            let hab = hsic(&grams[a], &grams[b])?;
            let haa = hsic(&grams[a], &grams[a])?;
            let hbb = hsic(&grams[b], &grams[b])?;
            if haa <= 0.0 || hbb <= 0.0 {
                return Err(DiepError::Degenerate {
                    context: format!("layer {l} experts ({a},{b}): constant features"),
                });
            }
            Ok(hab / (haa * hbb).sqrt())
        };

        // group[r] = pruned experts whose most similar retained expert is r
        let mut groups: Vec<Vec<(usize, f64)>> = vec![Vec::new(); retained.len()];
        for &p in &pruned {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (ri, &r) in retained.iter().enumerate() {
                let sim = cka_of(p, r)?;
                if sim > best_sim {
                    best_sim = sim;
                    best = ri;
                }
            }
            groups[best].push((p, best_sim));
        }

        for (ri, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let r = retained[ri];
            // the retained anchor scores its self-similarity (exactly 1)
            let mut sims = vec![1.0];
            let mut members = vec![r];
            for &(p, sim) in group {
                sims.push(sim);
                members.push(p);
            }
            let weights = merge_weights(&sims);
            let average = |pick: fn(&crate::moe::Expert) -> &Tensor| -> Tensor {
                let shape = pick(&model.layers[l].experts[r]).shape().to_vec();
                let mut out = vec![0.0; shape.iter().product()];
                for (&m, &w) in members.iter().zip(weights.iter()) {
                    for (o, v) in out.iter_mut().zip(pick(&model.layers[l].experts[m]).data()) {
                        *o += w * v;
                    }
                }
                Tensor::new(shape, out).expect("member shapes agree")
            };
            merged.layers[l].experts[r] = crate::moe::Expert {
                w_up: average(|e| &e.w_up),
                b_up: average(|e| &e.b_up),
                w_down: average(|e| &e.w_down),
                b_down: average(|e| &e.b_down),
            };
        }
    }
    Ok(merged)
}
