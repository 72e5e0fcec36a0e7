//! Synthetic per-token classification tasks, toy pretraining, planted
//! expert redundancy, and text ingestion for calibration data.
//!
//! Domains play the role of topics: the vocabulary is partitioned into one
//! block per domain and every token's class is a deterministic hash of
//! (domain, token, mapping seed). Per-token tasks keep the attention-free
//! model sufficient.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DiepError, Result};
use crate::moe::{MoEModel, ModelNodes, RunMode};
use crate::tensor::{GradientMap, Tape, Tensor};

/// Description of a synthetic multi-domain token classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Domain count D.
    pub domains: usize,
    pub vocab: usize,
    pub classes: usize,
    /// Seed of the per-domain token-to-class mapping.
    pub mapping_seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub calibration_samples: usize,
    /// Tokens per sample sequence.
    pub seq_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            domains: 4,
            vocab: 64,
            classes: 4,
            mapping_seed: 7,
            train_samples: 256,
            eval_samples: 128,
            calibration_samples: 128,
            seq_len: 8,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, reason: &str| {
            Err(DiepError::InvalidConfig {
                field: name.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.domains < 2 {
            return field("task.domains", "must be at least 2");
        }
        if self.vocab < self.domains {
            return field("task.vocab", "must be at least the domain count");
        }
        if self.classes < 2 {
            return field("task.classes", "must be at least 2");
        }
        if self.seq_len == 0 {
            return field("task.seq_len", "must be at least 1");
        }
        if self.train_samples == 0 || self.eval_samples == 0 || self.calibration_samples == 0 {
            return field("task.*_samples", "all splits must be non-empty");
        }
        Ok(())
    }

    /// Deterministic class of a token within a domain.
    pub fn class_of(&self, domain: usize, token: usize) -> usize {
        (splitmix(
            self.mapping_seed ^ (domain as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
        .wrapping_add(splitmix(token as u64)) as usize)
            % self.classes
    }

    /// Domain block of the vocabulary: `[start, end)`.
    pub fn domain_block(&self, domain: usize) -> (usize, usize) {
        let width = self.vocab / self.domains;
        let start = domain * width;
        let end = if domain + 1 == self.domains {
            self.vocab
        } else {
            start + width
        };
        (start, end)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One token sequence with per-token targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Generating domain, when known (None for ingested text).
    pub domain: Option<usize>,
}

/// Batched token inputs with targets; used for training, search, gamma
/// calibration, and baselines alike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<Sample>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }

    /// All tokens and targets flattened in sample order.
    pub fn flattened(&self) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(self.token_count());
        let mut targets = Vec::with_capacity(self.token_count());
        for s in &self.samples {
            tokens.extend_from_slice(&s.tokens);
            targets.extend_from_slice(&s.targets);
        }
        (tokens, targets)
    }

    /// Flattened (tokens, targets) batches of `batch_size` samples, in order.
    pub fn batches(&self, batch_size: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.samples
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let mut tokens = Vec::new();
                let mut targets = Vec::new();
                for s in chunk {
                    tokens.extend_from_slice(&s.tokens);
                    targets.extend_from_slice(&s.targets);
                }
                (tokens, targets)
            })
            .collect()
    }

    pub fn check_tokens(&self, vocab: usize) -> Result<()> {
        if self.samples.is_empty() {
            return Err(DiepError::EmptyInput {
                what: "calibration set",
            });
        }
        for s in &self.samples {
            for &t in &s.tokens {
                if t >= vocab {
                    return Err(DiepError::IndexOutOfRange {
                        what: "calibration token",
                        index: t,
                        bound: vocab,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Generate train/eval/calibration splits from disjoint seed streams.
pub fn gen_task(spec: &TaskSpec, seed: u64) -> (CalibrationSet, CalibrationSet, CalibrationSet) {
    let train = gen_split(spec, splitmix(seed ^ 0x7261_696e), spec.train_samples);
    let eval = gen_split(spec, splitmix(seed ^ 0x6576_616c), spec.eval_samples);
    let calib = gen_split(spec, splitmix(seed ^ 0x6361_6c69), spec.calibration_samples);
    (train, eval, calib)
}

fn gen_split(spec: &TaskSpec, seed: u64, count: usize) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let domain = rng.gen_range(0..spec.domains);
            let (start, end) = spec.domain_block(domain);
            let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(start..end)).collect();
            let targets = tokens.iter().map(|&t| spec.class_of(domain, t)).collect();
            Sample {
                tokens,
                targets,
                domain: Some(domain),
            }
        })
        .collect();
    CalibrationSet { samples }
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle stream.
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 30,
            learning_rate: 0.5,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Per-epoch pretraining record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Train every model parameter by SGD on cross-entropy under full top-k
/// routing. Returns per-epoch mean batch loss and final train accuracy.
pub fn pretrain_toy(
    model: &mut MoEModel,
    train: &CalibrationSet,
    opts: &PretrainOptions,
) -> Result<PretrainReport> {
    train.check_tokens(model.config.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut tokens = Vec::new();
            let mut targets = Vec::new();
            for &s in chunk {
                tokens.extend_from_slice(&train.samples[s].tokens);
                targets.extend_from_slice(&train.samples[s].targets);
            }
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let logits =
                model.forward_bound(&mut tape, &nodes, &tokens, &crate::moe::BoundMode::Full, None)?;
            let loss = tape.cross_entropy(logits, targets)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(DiepError::TrainingDiverged {
                    step,
                    context: format!("pretraining loss = {loss_value}"),
                });
            }
            let grads = tape.backward(loss, &nodes.param_ids())?;
            apply_sgd(model, &nodes, &grads, opts.learning_rate)?;
            epoch_loss += loss_value;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    let final_train_accuracy = accuracy(model, train, RunMode::Full)?;
    Ok(PretrainReport {
        epoch_losses,
        final_train_accuracy,
    })
}

/// SGD step over every bound parameter; the binding order fixes which
/// gradient belongs to which tensor.
pub fn apply_sgd(
    model: &mut MoEModel,
    nodes: &ModelNodes,
    grads: &GradientMap,
    lr: f64,
) -> Result<()> {
    let step_into = |tensor: &mut Tensor, id: crate::tensor::NodeId| -> Result<()> {
        let g = grads.grad(id);
        if !g.is_finite() {
            return Err(DiepError::NonFinite {
                context: "sgd gradient".to_string(),
            });
        }
        for (w, d) in tensor.data_mut().iter_mut().zip(g.data().iter()) {
            *w -= lr * d;
        }
        Ok(())
    };
    step_into(&mut model.embedding, nodes.embedding)?;
    for (layer, layer_nodes) in model.layers.iter_mut().zip(nodes.layers.iter()) {
        step_into(&mut layer.router, layer_nodes.router)?;
        for (expert, en) in layer.experts.iter_mut().zip(layer_nodes.experts.iter()) {
            step_into(&mut expert.w_up, en.w_up)?;
            step_into(&mut expert.b_up, en.b_up)?;
            step_into(&mut expert.w_down, en.w_down)?;
            step_into(&mut expert.b_down, en.b_down)?;
        }
    }
    step_into(&mut model.head_w, nodes.head_w)?;
    step_into(&mut model.head_b, nodes.head_b)
}

/// Classification accuracy of a model over a set, argmax with lowest-index
/// tie-break.
pub fn accuracy(model: &MoEModel, set: &CalibrationSet, mode: RunMode<'_>) -> Result<f64> {
    let (tokens, targets) = set.flattened();
    let logits = model.run(&tokens, mode)?;
    let classes = logits.shape()[1];
    let mut hits = 0usize;
    for (row, &target) in targets.iter().enumerate() {
        let row_data = &logits.data()[row * classes..(row + 1) * classes];
        let argmax = crate::moe::topk_indices(row_data, 1)[0];
        if argmax == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / targets.len() as f64)
}

/// Mean per-token cross-entropy of a model over a set.
pub fn mean_cross_entropy(model: &MoEModel, set: &CalibrationSet, mode: RunMode<'_>) -> Result<f64> {
    let (tokens, targets) = set.flattened();
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &tokens, mode, None)?;
    let ce = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(ce).item())
}

/// One redundancy directive: clone `source` into `clones` free slots of the
/// layer, perturbed by Gaussian noise of scale `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyDirective {
    pub layer: usize,
    pub source: usize,
    pub clones: usize,
    pub sigma: f64,
}

/// Planted redundancy description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RedundancySpec {
    pub directives: Vec<RedundancyDirective>,
}

/// Bookkeeping of one planted clone, kept for ground-truth tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedClone {
    pub layer: usize,
    pub source: usize,
    pub target: usize,
    pub sigma: f64,
}

/// All planted clones of a model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantedClones {
    pub clones: Vec<PlantedClone>,
}

impl PlantedClones {
    /// (layer, expert) pairs of the clone targets.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.clones.iter().map(|c| (c.layer, c.target)).collect()
    }
}

/// Overwrite designated experts with copies of a source expert plus noise.
///
/// Clone targets are the highest-index experts of the layer not already used
/// as a source or an earlier target; planting happens after pretraining so
/// the clones are exact functional duplicates at sigma = 0.
pub fn plant_redundancy(
    model: &mut MoEModel,
    spec: &RedundancySpec,
    seed: u64,
) -> Result<PlantedClones> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = PlantedClones::default();
    let layers = model.layers.len();
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); layers];
    for d in &spec.directives {
        if d.layer >= layers {
            return Err(DiepError::IndexOutOfRange {
                what: "redundancy layer",
                index: d.layer,
                bound: layers,
            });
        }
        let n = model.layers[d.layer].expert_count();
        if d.source >= n {
            return Err(DiepError::IndexOutOfRange {
                what: "redundancy source",
                index: d.source,
                bound: n,
            });
        }
        if d.sigma < 0.0 {
            return Err(DiepError::InvalidConfig {
                field: "redundancy.sigma".to_string(),
                reason: "must be non-negative".to_string(),
            });
        }
        used[d.layer].push(d.source);
        for _ in 0..d.clones {
            let target = (0..n)
                .rev()
                .find(|i| !used[d.layer].contains(i))
                .ok_or_else(|| DiepError::Capacity {
                    what: format!("layer {} has no free slot for another clone", d.layer),
                })?;
            used[d.layer].push(target);
            let source = model.layers[d.layer].experts[d.source].clone();
            let mut clone = source.clone();
            if d.sigma > 0.0 {
                let normal = Normal::new(0.0, d.sigma).expect("sigma checked non-negative");
                for t in [
                    &mut clone.w_up,
                    &mut clone.b_up,
                    &mut clone.w_down,
                    &mut clone.b_down,
                ] {
                    for v in t.data_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            model.layers[d.layer].experts[target] = clone;
            planted.clones.push(PlantedClone {
                layer: d.layer,
                source: d.source,
                target,
                sigma: d.sigma,
            });
        }
    }
    Ok(planted)
}

/// Result of text ingestion.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub set: CalibrationSet,
    /// True when the requested sample count exceeds the number of
    /// non-overlapping windows in the file, so windows were reused.
    pub wrapped: bool,
}

/// Byte-level ingestion of an external file: tokens are bytes folded into
/// the vocabulary by modulo, targets are the next token (self-supervised).
/// Use a model with `classes == vocab` to consume such a set.
pub fn ingest_text(
    path: &Path,
    vocab: usize,
    sample_count: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Ingested> {
    if vocab == 0 || seq_len == 0 || sample_count == 0 {
        return Err(DiepError::InvalidConfig {
            field: "ingest".to_string(),
            reason: "vocab, seq_len and sample_count must be positive".to_string(),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| DiepError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if bytes.len() < seq_len + 1 {
        return Err(DiepError::Io {
            path: path.display().to_string(),
            reason: format!(
                "file holds {} bytes, need at least {} for one window",
                bytes.len(),
                seq_len + 1
            ),
        });
    }
    let usable = bytes.len() - seq_len; // valid start offsets
    let windows = usable.div_ceil(seq_len);
    let wrapped = sample_count > windows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..sample_count)
        .map(|_| {
            let start = rng.gen_range(0..usable);
            let tokens: Vec<usize> = (0..seq_len)
                .map(|i| bytes[start + i] as usize % vocab)
                .collect();
            let targets: Vec<usize> = (0..seq_len)
                .map(|i| bytes[start + i + 1] as usize % vocab)
                .collect();
            Sample {
                tokens,
                targets,
                domain: None,
            }
        })
        .collect();
    Ok(Ingested {
        set: CalibrationSet { samples },
        wrapped,
    })
}

/// Per-domain expert activation frequencies and their pairwise
/// total-variation distances, a soft measure of expert specialization.
pub fn specialization_tv(model: &MoEModel, sets_by_domain: &[CalibrationSet]) -> Result<Vec<f64>> {
    let mut dists = Vec::new();
    let mut freqs: Vec<Vec<f64>> = Vec::new();
    for set in sets_by_domain {
        let (tokens, _) = set.flattened();
        let (_, trace) = model.run_traced(&tokens, RunMode::Full)?;
        let mut counts = vec![0.0; model.config.layers * model.config.experts];
        for (l, sels) in trace.selections.iter().enumerate() {
            for per_token in sels {
                for &i in per_token {
                    counts[l * model.config.experts + i] += 1.0;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        for c in counts.iter_mut() {
            *c /= total;
        }
        freqs.push(counts);
    }
    for i in 0..freqs.len() {
        for j in (i + 1)..freqs.len() {
            let tv = 0.5
                * freqs[i]
                    .iter()
                    .zip(freqs[j].iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            dists.push(tv);
        }
    }
    Ok(dists)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_generation_is_deterministic() {
        let spec = TaskSpec::default();
        let (a_train, a_eval, a_cal) = gen_task(&spec, 5);
        let (b_train, b_eval, b_cal) = gen_task(&spec, 5);
        assert_eq!(a_train, b_train);
        assert_eq!(a_eval, b_eval);
        assert_eq!(a_cal, b_cal);

        let (c_train, _, _) = gen_task(&spec, 6);
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn splits_use_disjoint_streams() {
        let spec = TaskSpec::default();
        let (train, eval, cal) = gen_task(&spec, 11);
        assert_eq!(train.len(), spec.train_samples);
        assert_eq!(eval.len(), spec.eval_samples);
        assert_eq!(cal.len(), spec.calibration_samples);
        assert_ne!(train.samples[0], eval.samples[0]);
        assert_ne!(eval.samples[0], cal.samples[0]);
    }

    #[test]
    fn label_distribution_is_roughly_uniform() {
        // chi-squared sanity bound over the whole vocabulary mapping
        let spec = TaskSpec {
            vocab: 4096,
            domains: 4,
            classes: 4,
            ..TaskSpec::default()
        };
        let mut counts = vec![0usize; spec.classes];
        for domain in 0..spec.domains {
            let (start, end) = spec.domain_block(domain);
            for token in start..end {
                counts[spec.class_of(domain, token)] += 1;
            }
        }
        let expected = spec.vocab as f64 / spec.classes as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 3 degrees of freedom; 16.27 is the 0.1% critical value
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn class_targets_match_mapping() {
        let spec = TaskSpec::default();
        let (train, _, _) = gen_task(&spec, 3);
        for s in &train.samples {
            let domain = s.domain.unwrap();
            let (start, end) = spec.domain_block(domain);
            for (&t, &y) in s.tokens.iter().zip(s.targets.iter()) {
                assert!(t >= start && t < end);
                assert_eq!(y, spec.class_of(domain, t));
            }
        }
    }

    #[test]
    fn zero_epoch_pretraining_leaves_model_unchanged() {
        let spec = TaskSpec::default();
        let (train, _, _) = gen_task(&spec, 4);
        let mut model =
            MoEModel::init(crate::moe::ModelConfig::toy(2, 3, 2, 8, spec.vocab, spec.classes), 1)
                .unwrap();
        let before = model.clone();
        let opts = PretrainOptions {
            epochs: 0,
            ..PretrainOptions::default()
        };
        pretrain_toy(&mut model, &train, &opts).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sigma_zero_clone_is_bit_exact() {
        let mut model =
            MoEModel::init(crate::moe::ModelConfig::toy(2, 4, 2, 6, 16, 4), 9).unwrap();
        let spec = RedundancySpec {
            directives: vec![RedundancyDirective {
                layer: 0,
                source: 1,
                clones: 2,
                sigma: 0.0,
            }],
        };
        let planted = plant_redundancy(&mut model, &spec, 0).unwrap();
        assert_eq!(planted.clones.len(), 2);
        // targets fill from the top index down
        assert_eq!(planted.clones[0].target, 3);
        assert_eq!(planted.clones[1].target, 2);
        for c in &planted.clones {
            let src = &model.layers[c.layer].experts[c.source];
            let tgt = &model.layers[c.layer].experts[c.target];
            assert_eq!(src, tgt);
        }
    }

    #[test]
    fn clone_overflow_is_an_error() {
        let mut model =
            MoEModel::init(crate::moe::ModelConfig::toy(1, 3, 1, 4, 8, 3), 10).unwrap();
        let spec = RedundancySpec {
            directives: vec![RedundancyDirective {
                layer: 0,
                source: 0,
                clones: 3,
                sigma: 0.0,
            }],
        };
        assert!(plant_redundancy(&mut model, &spec, 0).is_err());
    }

    #[test]
    fn swapping_clone_and_source_routing_is_output_invariant() {
        // With sigma = 0 the clone computes the identical function, so
        // swapping the router columns of clone and source cannot change
        // the model output beyond roundoff.
        let mut model =
            MoEModel::init(crate::moe::ModelConfig::toy(2, 4, 2, 6, 16, 4), 11).unwrap();
        let spec = RedundancySpec {
            directives: vec![RedundancyDirective {
                layer: 1,
                source: 0,
                clones: 1,
                sigma: 0.0,
            }],
        };
        let planted = plant_redundancy(&mut model, &spec, 0).unwrap();
        let (src, tgt) = (planted.clones[0].source, planted.clones[0].target);

        let tokens: Vec<usize> = (0..16).collect();
        let before = model.run(&tokens, RunMode::Full).unwrap();

        let mut swapped = model.clone();
        let r = &model.layers[1].router;
        let d = model.config.hidden;
        let mut data = r.data().to_vec();
        for row in 0..d {
            data.swap(row * 4 + src, row * 4 + tgt);
        }
        swapped.layers[1].router = Tensor::new(vec![d, 4], data).unwrap();
        let after = swapped.run(&tokens, RunMode::Full).unwrap();
        for (a, b) in before.data().iter().zip(after.data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ingest_requires_readable_nonempty_file() {
        let dir = std::env::temp_dir();
        let missing = dir.join("diep-ingest-missing.txt");
        let _ = std::fs::remove_file(&missing);
        assert!(ingest_text(&missing, 16, 4, 8, 0).is_err());

        let empty = dir.join("diep-ingest-empty.txt");
        std::fs::write(&empty, b"").unwrap();
        assert!(ingest_text(&empty, 16, 4, 8, 0).is_err());
        let _ = std::fs::remove_file(&empty);
    }

    #[test]
    fn ingest_is_deterministic_and_wraps_when_short() {
        let dir = std::env::temp_dir();
        let path = dir.join("diep-ingest-sample.txt");
        std::fs::write(&path, b"the quick brown fox jumps over the lazy dog").unwrap();

        // 43 bytes, seq_len 8 -> 35 offsets, 5 non-overlapping windows
        let a = ingest_text(&path, 32, 4, 8, 3).unwrap();
        let b = ingest_text(&path, 32, 4, 8, 3).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.set.len(), 4);
        assert!(!a.wrapped);
        for s in &a.set.samples {
            assert!(s.tokens.iter().all(|&t| t < 32));
            assert_eq!(s.tokens.len(), 8);
        }

        let c = ingest_text(&path, 32, 40, 8, 3).unwrap();
        assert!(c.wrapped);
        assert_eq!(c.set.len(), 40);
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn ingest_targets_are_next_token() {
        let dir = std::env::temp_dir();
        let path = dir.join("diep-ingest-next.txt");
        std::fs::write(&path, (0u8..64).collect::<Vec<u8>>()).unwrap();
        let out = ingest_text(&path, 256, 4, 6, 1).unwrap();
        for s in &out.set.samples {
            for i in 0..5 {
                assert_eq!(s.targets[i], s.tokens[i + 1]);
            }
        }
        let _ = std::fs::remove_file(&path);
    }
}
