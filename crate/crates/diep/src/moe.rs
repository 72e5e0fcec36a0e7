//! Toy mixture-of-experts model with three forward modes: full top-k
//! routing, masked (pruned) routing, and the continuous relaxation used
//! during importance search.
//!
//! The model is a per-token residual MoE stack: embedding, L expert layers,
//! output head. There is no attention; tasks are per-token, so every token
//! flows through the network independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiepError, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Shape of a toy MoE model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of MoE layers (L).
    pub layers: usize,
    /// Experts per layer (N).
    pub experts: usize,
    /// Experts activated per token (k).
    pub top_k: usize,
    /// Hidden width (d).
    pub hidden: usize,
    /// Expert inner width; 0 means "twice the hidden width".
    #[serde(default)]
    pub expert_inner: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Output class count.
    pub classes: usize,
    /// Renormalize the selected top-k weights to sum to 1. The
    /// unrenormalized variant keeps the raw softmax weights.
    #[serde(default = "default_true")]
    pub renormalize_topk: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Convenience constructor with the default inner width and
    /// renormalizing top-k.
    pub fn toy(
        layers: usize,
        experts: usize,
        top_k: usize,
        hidden: usize,
        vocab: usize,
        classes: usize,
    ) -> Self {
        ModelConfig {
            layers,
            experts,
            top_k,
            hidden,
            expert_inner: 0,
            vocab,
            classes,
            renormalize_topk: true,
        }
    }

    /// Resolved expert inner width.
    pub fn inner(&self) -> usize {
        if self.expert_inner == 0 {
            2 * self.hidden
        } else {
            self.expert_inner
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, reason: &str| {
            Err(DiepError::InvalidConfig {
                field: name.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.layers == 0 {
            return field("model.layers", "must be at least 1");
        }
        if self.hidden == 0 {
            return field("model.hidden", "must be at least 1");
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return field("model.top_k", "must satisfy 1 <= k <= experts");
        }
        if self.vocab == 0 {
            return field("model.vocab", "must be at least 1");
        }
        if self.classes < 2 {
            return field("model.classes", "must be at least 2");
        }
        Ok(())
    }
}

/// One feed-forward expert: up projection, ReLU, down projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl Expert {
    fn init(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Self {
        Expert {
            w_up: rand_matrix(rng, d, h),
            b_up: Tensor::zeros(vec![h]),
            w_down: rand_matrix(rng, h, d),
            b_down: Tensor::zeros(vec![d]),
        }
    }
}

/// One MoE layer: a router over the layer's experts plus the experts.
/// Constructed layers hold exactly `config.experts` experts; layers produced
/// by [`MoEModel::surgery`] may hold fewer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// Router weights, `hidden x expert_count`.
    pub router: Tensor,
    pub experts: Vec<Expert>,
}

impl MoeLayer {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }
}

/// The full toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    /// Token embedding table, `vocab x hidden`.
    pub embedding: Tensor,
    pub layers: Vec<MoeLayer>,
    /// Output head, `hidden x classes`.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("random matrix shape")
}

impl MoEModel {
    /// Random initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.hidden, config.inner());
        let embedding = rand_matrix(&mut rng, config.vocab, d);
        let layers = (0..config.layers)
            .map(|_| MoeLayer {
                router: rand_matrix(&mut rng, d, config.experts),
                experts: (0..config.experts)
                    .map(|_| Expert::init(&mut rng, d, h))
                    .collect(),
            })
            .collect();
        let head_w = rand_matrix(&mut rng, d, config.classes);
        let head_b = Tensor::zeros(vec![config.classes]);
        Ok(MoEModel {
            config,
            embedding,
            layers,
            head_w,
            head_b,
        })
    }

    /// Register every weight tensor on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ModelNodes {
        ModelNodes {
            embedding: tape.leaf(self.embedding.clone()),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerNodes {
                    router: tape.leaf(layer.router.clone()),
                    experts: layer
                        .experts
                        .iter()
                        .map(|e| ExpertNodes {
                            w_up: tape.leaf(e.w_up.clone()),
                            b_up: tape.leaf(e.b_up.clone()),
                            w_down: tape.leaf(e.w_down.clone()),
                            b_down: tape.leaf(e.b_down.clone()),
                        })
                        .collect(),
                })
                .collect(),
            head_w: tape.leaf(self.head_w.clone()),
            head_b: tape.leaf(self.head_b.clone()),
        }
    }

    /// Physically rebuild the model with pruned experts deleted: routers lose
    /// the pruned columns, expert lists shrink.
    pub fn surgery(&self, mask: &PruneMask) -> Result<MoEModel> {
        mask.check_shape(&self.config)?;
        let d = self.config.hidden;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let retained: Vec<usize> = (0..layer.expert_count())
                .filter(|&i| mask.keep[l][i])
                .collect();
            let mut router = Vec::with_capacity(d * retained.len());
            for row in 0..d {
                for &i in &retained {
                    router.push(layer.router.at(row, i));
                }
            }
            layers.push(MoeLayer {
                router: Tensor::new(vec![d, retained.len()], router)?,
                experts: retained.iter().map(|&i| layer.experts[i].clone()).collect(),
            });
        }
        Ok(MoEModel {
            config: self.config.clone(),
            embedding: self.embedding.clone(),
            layers,
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
        })
    }

    /// Evaluate the model on a token batch without keeping gradients.
    pub fn run(&self, tokens: &[usize], mode: RunMode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, tokens, mode, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Evaluate and record per-layer inputs, outputs, routing weights and
    /// top-k selections.
    pub fn run_traced(
        &self,
        tokens: &[usize],
        mode: RunMode<'_>,
    ) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let mut builder = TraceBuilder::new(self.layers.len());
        let logits = self.forward(&mut tape, tokens, mode, Some(&mut builder))?;
        Ok((tape.value(logits).clone(), builder.finish(tokens.len())?))
    }

    /// Build the forward computation on an existing tape, binding weights and
    /// (for relaxed modes) prune parameters as fresh leaves.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mode: RunMode<'_>,
        trace: Option<&mut TraceBuilder>,
    ) -> Result<NodeId> {
        let nodes = self.bind(tape);
        let binding = match mode {
            RunMode::Full => BoundMode::Full,
            RunMode::Masked(mask) => BoundMode::Masked(mask),
            RunMode::Relaxed(params) => BoundMode::Relaxed {
                params: params.bind(tape),
                router_weighted: false,
            },
            RunMode::RelaxedRouterWeighted(params) => BoundMode::Relaxed {
                params: params.bind(tape),
                router_weighted: true,
            },
        };
        self.forward_bound(tape, &nodes, tokens, &binding, trace)
    }

    /// Forward pass over pre-bound nodes; the caller keeps the node handles
    /// for gradient queries and updates.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        tokens: &[usize],
        mode: &BoundMode<'_>,
        mut trace: Option<&mut TraceBuilder>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(DiepError::EmptyInput {
                what: "model_forward",
            });
        }
        for &t in tokens {
            if t >= self.config.vocab {
                return Err(DiepError::IndexOutOfRange {
                    what: "token",
                    index: t,
                    bound: self.config.vocab,
                });
            }
        }
        match mode {
            BoundMode::Relaxed {
                params,
                router_weighted: false,
            } => self.forward_relaxed_batched(tape, nodes, tokens, params, trace.as_deref_mut()),
            _ => self.forward_per_token(tape, nodes, tokens, mode, trace),
        }
    }

    /// Batched relaxed forward: the expert mixture weights are shared by all
    /// tokens, so the whole batch moves through each layer as one matrix.
    fn forward_relaxed_batched(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        tokens: &[usize],
        params: &ParamNodes,
        mut trace: Option<&mut TraceBuilder>,
    ) -> Result<NodeId> {
        params.check_shape(&self.config)?;
        let mut x = tape.embed(nodes.embedding, tokens.to_vec())?;
        for (l, layer_nodes) in nodes.layers.iter().enumerate() {
            if let Some(t) = trace.as_deref_mut() {
                t.layer_inputs[l].push(tape.value(x).clone());
            }
            let abar = tape.softmax(params.alpha[l])?;
            let items: Vec<NodeId> = layer_nodes
                .experts
                .iter()
                .map(|e| expert_forward(tape, x, e))
                .collect::<Result<_>>()?;
            let mix = tape.weighted_sum(items, abar)?;
            let scaled = tape.mul_scalar(mix, params.beta[l])?;
            let y = tape.add(scaled, x)?;
            if let Some(t) = trace.as_deref_mut() {
                t.layer_outputs[l].push(tape.value(y).clone());
            }
            x = y;
        }
        let logits = tape.matmul(x, nodes.head_w)?;
        tape.add_bias(logits, nodes.head_b)
    }

    fn forward_per_token(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        tokens: &[usize],
        mode: &BoundMode<'_>,
        mut trace: Option<&mut TraceBuilder>,
    ) -> Result<NodeId> {
        let mut rows = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let mut x = tape.embed(nodes.embedding, vec![tok])?;
            for (l, layer_nodes) in nodes.layers.iter().enumerate() {
                if let Some(t) = trace.as_deref_mut() {
                    t.layer_inputs[l].push(tape.value(x).clone());
                }
                let y = match mode {
                    BoundMode::Full => {
                        self.layer_routed(tape, nodes, x, l, None, trace.as_deref_mut(), None)?
                    }
                    BoundMode::Masked(mask) => {
                        self.layer_routed(tape, nodes, x, l, Some(mask), trace.as_deref_mut(), None)?
                    }
                    BoundMode::Relaxed { params, .. } => {
                        // router-weighted relaxation: per-token routing weights
                        // multiply the normalized importance weights
                        let logits = tape.matmul(x, layer_nodes.router)?;
                        let w = tape.softmax(logits)?;
                        let abar = tape.softmax(params.alpha[l])?;
                        let combined = tape.mul(abar, w)?;
                        let items: Vec<NodeId> = layer_nodes
                            .experts
                            .iter()
                            .map(|e| expert_forward(tape, x, e))
                            .collect::<Result<_>>()?;
                        let mix = tape.weighted_sum(items, combined)?;
                        let scaled = tape.mul_scalar(mix, params.beta[l])?;
                        tape.add(scaled, x)?
                    }
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.layer_outputs[l].push(tape.value(y).clone());
                }
                x = y;
            }
            let head = tape.matmul(x, nodes.head_w)?;
            rows.push(tape.add_bias(head, nodes.head_b)?);
        }
        tape.concat_rows(rows)
    }

    /// Routed layer forward shared by the full, masked, and skip engines:
    /// top-k selection among surviving experts, optional renormalization,
    /// residual connection. `skip` carries the adaptive-skipping rule.
    pub(crate) fn layer_routed(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        x: NodeId,
        layer: usize,
        mask: Option<&PruneMask>,
        mut trace: Option<&mut TraceBuilder>,
        skip: Option<&mut SkipHook<'_>>,
    ) -> Result<NodeId> {
        if layer >= nodes.layers.len() {
            return Err(DiepError::IndexOutOfRange {
                what: "layer",
                index: layer,
                bound: nodes.layers.len(),
            });
        }
        let layer_nodes = &nodes.layers[layer];
        let n = layer_nodes.experts.len();
        let keep: Vec<bool> = match mask {
            Some(m) => {
                m.check_layer(layer, n)?;
                m.keep[layer].clone()
            }
            None => vec![true; n],
        };
        let available = keep.iter().filter(|&&b| b).count();
        let k = self.config.top_k;
        if k > available {
            return Err(DiepError::Capacity {
                what: format!(
                    "top-{k} routing with only {available} retained experts in layer {layer}"
                ),
            });
        }

        let logits = tape.matmul(x, layer_nodes.router)?;
        let masked_logits = if keep.iter().all(|&b| b) {
            logits
        } else {
            tape.mask_fill(logits, keep.clone(), f64::NEG_INFINITY)?
        };
        let w = tape.softmax(masked_logits)?;
        if let Some(t) = trace.as_deref_mut() {
            t.routing_weights[layer].push(tape.value(w).clone());
        }
        let selected = topk_indices(tape.value(w).data(), k);
        if let Some(t) = trace.as_deref_mut() {
            t.selections[layer].push(selected.clone());
        }

        // Adaptive skipping: optionally drop the lower-weighted of the top-2.
        let (chosen, forced_weight) = match skip {
            Some(hook) => hook.apply(layer, tape.value(w).data(), &selected),
            None => (selected, None),
        };

        let gathered = tape.gather(w, chosen.clone())?;
        let weights = match forced_weight {
            Some(wt) => tape.leaf(Tensor::new(vec![1, chosen.len()], vec![wt; chosen.len()])?),
            None if self.config.renormalize_topk => {
                let total = tape.sum(gathered);
                tape.div_scalar(gathered, total)?
            }
            None => gathered,
        };
        let items: Vec<NodeId> = chosen
            .iter()
            .map(|&i| expert_forward(tape, x, &layer_nodes.experts[i]))
            .collect::<Result<_>>()?;
        let mix = tape.weighted_sum(items, weights)?;
        tape.add(mix, x)
    }
}

/// Expert feed-forward on a row matrix (one token or a whole batch).
pub fn expert_forward(tape: &mut Tape, x: NodeId, e: &ExpertNodes) -> Result<NodeId> {
    let up = tape.matmul(x, e.w_up)?;
    let up = tape.add_bias(up, e.b_up)?;
    let hidden = tape.relu(up);
    let down = tape.matmul(hidden, e.w_down)?;
    tape.add_bias(down, e.b_down)
}

/// Indices of the k largest weights, ties broken by lowest index.
pub fn topk_indices(w: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Top-k routing over a weight vector: returns `(expert index, weight)` with
/// the selected weights renormalized to sum to 1 when requested. Entries with
/// weight exactly 0 are treated as masked-out and never selected.
pub fn topk_route(w: &Tensor, k: usize, renormalize: bool) -> Result<Vec<(usize, f64)>> {
    let available = w.data().iter().filter(|&&v| v > 0.0).count();
    if k > available {
        return Err(DiepError::Capacity {
            what: format!("top-{k} routing with only {available} available experts"),
        });
    }
    let selected = topk_indices(w.data(), k);
    let total: f64 = selected.iter().map(|&i| w.data()[i]).sum();
    Ok(selected
        .into_iter()
        .map(|i| {
            let weight = if renormalize {
                w.data()[i] / total
            } else {
                w.data()[i]
            };
            (i, weight)
        })
        .collect())
}

/// Routing weights for one token at one layer (softmax of the router logits).
pub fn router_weights(model: &MoEModel, x: &Tensor, layer: usize) -> Result<Tensor> {
    if layer >= model.layers.len() {
        return Err(DiepError::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: model.layers.len(),
        });
    }
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let rn = tape.leaf(model.layers[layer].router.clone());
    let logits = tape.matmul(xn, rn)?;
    let w = tape.softmax(logits)?;
    Ok(tape.value(w).clone())
}

/// Node handles for one expert's weights.
#[derive(Debug, Clone, Copy)]
pub struct ExpertNodes {
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub w_down: NodeId,
    pub b_down: NodeId,
}

/// Node handles for one layer.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub router: NodeId,
    pub experts: Vec<ExpertNodes>,
}

/// Node handles for the whole model.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub embedding: NodeId,
    pub layers: Vec<LayerNodes>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl ModelNodes {
    /// Every parameter id, in a fixed order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embedding];
        for layer in &self.layers {
            ids.push(layer.router);
            for e in &layer.experts {
                ids.extend([e.w_up, e.b_up, e.w_down, e.b_down]);
            }
        }
        ids.extend([self.head_w, self.head_b]);
        ids
    }
}

/// Forward mode over pre-bound nodes.
pub enum BoundMode<'a> {
    Full,
    Masked(&'a PruneMask),
    Relaxed {
        params: ParamNodes,
        router_weighted: bool,
    },
}

/// Forward mode for one-shot evaluation.
pub enum RunMode<'a> {
    Full,
    Masked(&'a PruneMask),
    Relaxed(&'a PruneParams),
    /// Ablation variant: per-token routing weights multiply the normalized
    /// importance weights inside the relaxed sum.
    RelaxedRouterWeighted(&'a PruneParams),
}

/// Learnable importance scores: intra-layer logits alpha (L x N) and
/// inter-layer scalars beta (L). These are the only trainables during search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneParams {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

impl PruneParams {
    /// Neutral initialization: alpha = 0 (uniform normalized importance),
    /// beta = 1 (unscaled layers).
    pub fn init(layers: usize, experts: usize) -> Self {
        PruneParams {
            alpha: vec![vec![0.0; experts]; layers],
            beta: vec![1.0; layers],
        }
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.alpha.len() == config.layers
            && self.beta.len() == config.layers
            && self.alpha.iter().all(|row| row.len() == config.experts);
        if !ok {
            return Err(DiepError::ShapeMismatch {
                op: "prune_params",
                lhs: vec![self.alpha.len(), self.alpha.first().map_or(0, Vec::len)],
                rhs: vec![config.layers, config.experts],
            });
        }
        let finite = self.alpha.iter().flatten().all(|v| v.is_finite())
            && self.beta.iter().all(|v| v.is_finite());
        if !finite {
            return Err(DiepError::NonFinite {
                context: "prune params".to_string(),
            });
        }
        Ok(())
    }

    /// Register alpha rows (shape `[1,N]`) and beta scalars on a tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            alpha: self
                .alpha
                .iter()
                .map(|row| {
                    tape.leaf(Tensor::new(vec![1, row.len()], row.clone()).expect("alpha row"))
                })
                .collect(),
            beta: self.beta.iter().map(|&b| tape.scalar(b)).collect(),
        }
    }

    /// Softmax-normalized intra-layer importance weights for one layer.
    pub fn alpha_bar(&self, layer: usize) -> Vec<f64> {
        let row = &self.alpha[layer];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

/// Node handles for bound prune parameters.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    /// One `[1,N]` leaf per layer.
    pub alpha: Vec<NodeId>,
    /// One scalar leaf per layer.
    pub beta: Vec<NodeId>,
}

impl ParamNodes {
    fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        if self.alpha.len() != config.layers || self.beta.len() != config.layers {
            return Err(DiepError::ShapeMismatch {
                op: "param_nodes",
                lhs: vec![self.alpha.len(), self.beta.len()],
                rhs: vec![config.layers, config.layers],
            });
        }
        Ok(())
    }

    pub fn all_ids(&self) -> Vec<NodeId> {
        self.alpha.iter().chain(self.beta.iter()).copied().collect()
    }
}

/// Binary retention mask over experts plus the pruned set P.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    /// `keep[l][i]` is true when expert i of layer l is retained.
    pub keep: Vec<Vec<bool>>,
    /// Zero entries of the mask, sorted by (layer, expert).
    pub pruned: Vec<(usize, usize)>,
}

impl PruneMask {
    /// Build from a keep matrix, enforcing the per-layer floor of `k`
    /// retained experts.
    pub fn new(keep: Vec<Vec<bool>>, k: usize) -> Result<Self> {
        let mut pruned = Vec::new();
        for (l, row) in keep.iter().enumerate() {
            let retained = row.iter().filter(|&&b| b).count();
            if retained < k {
                return Err(DiepError::Capacity {
                    what: format!("layer {l} retains {retained} experts, below the floor {k}"),
                });
            }
            for (i, &b) in row.iter().enumerate() {
                if !b {
                    pruned.push((l, i));
                }
            }
        }
        Ok(PruneMask { keep, pruned })
    }

    pub fn all_ones(layers: usize, experts: usize) -> Self {
        PruneMask {
            keep: vec![vec![true; experts]; layers],
            pruned: Vec::new(),
        }
    }

    pub fn from_pruned(
        layers: usize,
        experts: usize,
        pruned: &[(usize, usize)],
        k: usize,
    ) -> Result<Self> {
        let mut keep = vec![vec![true; experts]; layers];
        for &(l, i) in pruned {
            if l >= layers || i >= experts {
                return Err(DiepError::IndexOutOfRange {
                    what: "prune entry",
                    index: i.max(l),
                    bound: experts.max(layers),
                });
            }
            keep[l][i] = false;
        }
        PruneMask::new(keep, k)
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.keep.len() == config.layers
            && self.keep.iter().all(|row| row.len() == config.experts);
        if !ok {
            return Err(DiepError::ShapeMismatch {
                op: "prune_mask",
                lhs: vec![self.keep.len(), self.keep.first().map_or(0, Vec::len)],
                rhs: vec![config.layers, config.experts],
            });
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize, experts: usize) -> Result<()> {
        if layer >= self.keep.len() || self.keep[layer].len() != experts {
            return Err(DiepError::ShapeMismatch {
                op: "prune_mask",
                lhs: vec![self.keep.len()],
                rhs: vec![layer, experts],
            });
        }
        Ok(())
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.keep
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned.len()
    }
}

/// Per-layer record of a traced forward pass, stacked over the token batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Layer inputs (pre-routing token representations), `[tokens, d]` per layer.
    pub layer_inputs: Vec<Tensor>,
    /// Layer outputs after the residual, `[tokens, d]` per layer.
    pub layer_outputs: Vec<Tensor>,
    /// Routing weights per layer, `[tokens, N]`; empty in relaxed mode.
    pub routing_weights: Vec<Tensor>,
    /// Top-k selections per layer per token; empty in relaxed mode.
    pub selections: Vec<Vec<Vec<usize>>>,
}

/// Accumulator used while the forward pass runs.
pub struct TraceBuilder {
    layer_inputs: Vec<Vec<Tensor>>,
    layer_outputs: Vec<Vec<Tensor>>,
    routing_weights: Vec<Vec<Tensor>>,
    selections: Vec<Vec<Vec<usize>>>,
}

impl TraceBuilder {
    pub fn new(layers: usize) -> Self {
        TraceBuilder {
            layer_inputs: vec![Vec::new(); layers],
            layer_outputs: vec![Vec::new(); layers],
            routing_weights: vec![Vec::new(); layers],
            selections: vec![Vec::new(); layers],
        }
    }

    pub fn finish(self, tokens: usize) -> Result<ForwardTrace> {
        let stack = |rows: Vec<Vec<Tensor>>| -> Result<Vec<Tensor>> {
            rows.into_iter()
                .map(|row| {
                    if row.len() == 1 && row[0].shape()[0] == tokens {
                        // batched relaxed mode already yields [tokens, d]
                        return Ok(row.into_iter().next().expect("one block"));
                    }
                    let cols = row[0].shape()[1];
                    let mut data = Vec::with_capacity(tokens * cols);
                    for r in &row {
                        data.extend_from_slice(r.data());
                    }
                    Tensor::new(vec![tokens, cols], data)
                })
                .collect()
        };
        Ok(ForwardTrace {
            layer_inputs: stack(self.layer_inputs)?,
            layer_outputs: stack(self.layer_outputs)?,
            routing_weights: if self.routing_weights.iter().all(|r| r.is_empty()) {
                Vec::new()
            } else {
                stack(self.routing_weights)?
            },
            selections: self.selections,
        })
    }
}

/// Per-layer skip rule and tallies used by the adaptive-skipping engine.
pub struct SkipHook<'a> {
    /// Per-layer thresholds gamma.
    pub gamma: &'a [f64],
    /// When an expert is skipped, the survivor's weight: 1.0 under the
    /// full-weight convention, or its renormalized 2-way weight.
    pub full_weight_on_skip: bool,
    /// Skip tallies per layer.
    pub skips: Vec<usize>,
    /// Expert evaluations per layer.
    pub evaluations: Vec<usize>,
}

impl SkipHook<'_> {
    /// Returns the experts to evaluate plus an optional forced weight for a
    /// lone survivor.
    pub(crate) fn apply(
        &mut self,
        layer: usize,
        w: &[f64],
        selected: &[usize],
    ) -> (Vec<usize>, Option<f64>) {
        debug_assert_eq!(selected.len(), 2, "skip engine requires k = 2");
        let (e0, e1) = (selected[0], selected[1]);
        let (w0, w1) = (w[e0], w[e1]);
        if w1 < self.gamma[layer] * w0 {
            self.skips[layer] += 1;
            self.evaluations[layer] += 1;
            let weight = if self.full_weight_on_skip {
                1.0
            } else {
                w0 / (w0 + w1)
            };
            (vec![e0], Some(weight))
        } else {
            self.evaluations[layer] += 2;
            (selected.to_vec(), None)
        }
    }
}
