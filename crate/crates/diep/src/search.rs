//! The reconstruction-regularized objective and the alternating optimizer
//! that learns intra-layer (alpha) and inter-layer (beta) importance scores.
//!
//! Model weights stay frozen throughout; full-model teacher outputs are
//! cached per batch and enter the objective as constants. Alternation runs
//! `alt_ratio` alpha steps then one beta step per batch, all steps sharing
//! one cosine-decayed step clock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiepError, Result};
use crate::moe::{BoundMode, MoEModel, PruneParams, RunMode};
use crate::synth::CalibrationSet;
use crate::tensor::{Tape, Tensor};

/// Loss increases below this relative tolerance are treated as floating-point
/// noise, not descent violations: near a stationary point the true decrease
/// underflows the rounding error of the loss evaluation itself.
pub const DESCENT_TOLERANCE: f64 = 1e-12;

/// Learning-rate schedule over the planned step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Decay each rate from its initial value to 0 with the cosine profile.
    Cosine,
    /// Constant step sizes (used by the convergence property runs).
    Fixed,
}

/// Hyperparameters of the importance search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Samples per mini-batch.
    pub batch_size: usize,
    /// Alpha steps per beta step.
    pub alt_ratio: usize,
    pub schedule: LrSchedule,
    /// Multiply per-token routing weights into the relaxed sum (ablation).
    #[serde(default)]
    pub router_weighted: bool,
    /// Seed of the per-epoch batch-order shuffle.
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr_alpha: 5e-3,
            lr_beta: 5e-3,
            lambda: 0.01,
            epochs: 10,
            batch_size: 16,
            alt_ratio: 3,
            schedule: LrSchedule::Cosine,
            router_weighted: false,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, reason: &str| {
            Err(DiepError::InvalidConfig {
                field: name.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.lr_alpha <= 0.0 || self.lr_beta <= 0.0 {
            return field("search.lr", "learning rates must be positive");
        }
        if self.lambda < 0.0 {
            return field("search.lambda", "must be non-negative");
        }
        if self.alt_ratio == 0 {
            return field("search.alt_ratio", "must be at least 1");
        }
        if self.batch_size == 0 {
            return field("search.batch_size", "must be at least 1");
        }
        Ok(())
    }
}

/// Decomposed objective value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub phi: f64,
}

/// Which block an optimizer step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Alpha,
    Beta,
}

/// One optimizer step of the alternating search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub loss: LossParts,
    /// `||theta_{t+1} - theta_t||` of the updated block.
    pub update_norm: f64,
    pub lr: f64,
}

/// Optimization history: per-step records plus full-batch loss at epoch
/// boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub params: PruneParams,
    pub steps: Vec<StepRecord>,
    /// Full-calibration loss before training and after each epoch.
    pub epoch_losses: Vec<LossParts>,
    pub steps_per_epoch: usize,
}

/// Convergence diagnostics over a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Full-batch loss non-increasing at every epoch boundary.
    pub monotone: bool,
    /// Count of tolerated-exceeded increases in the full-batch curve.
    pub violations: usize,
    pub loss_curve: Vec<f64>,
    pub alpha_first_epoch_mean_update: f64,
    pub alpha_final_epoch_mean_update: f64,
    pub beta_first_epoch_mean_update: f64,
    pub beta_final_epoch_mean_update: f64,
    pub final_alpha_update_norm: f64,
    pub final_beta_update_norm: f64,
    /// Final-epoch means below 10x the first-epoch means.
    pub updates_shrinking: bool,
}

/// Completed search output.
#[derive(Debug, Clone)]
pub struct SearchRun {
    pub params: PruneParams,
    pub state: TrainState,
    pub report: ConvergenceReport,
}

/// Phi normalization: Frobenius distance over stacked logits divided by the
/// square root of the token count, so lambda's effect is batch-size
/// invariant.
pub fn phi_value(pruned: &Tensor, teacher: &Tensor) -> f64 {
    debug_assert_eq!(pruned.shape(), teacher.shape());
    let mut sq = 0.0;
    for (a, b) in pruned.data().iter().zip(teacher.data().iter()) {
        let d = a - b;
        sq += d * d;
    }
    (sq / pruned.shape()[0] as f64).sqrt()
}

/// Reconstruction penalty of the relaxed model against the frozen full
/// model on one token batch.
pub fn reconstruction_penalty(
    model: &MoEModel,
    tokens: &[usize],
    params: &PruneParams,
    router_weighted: bool,
) -> Result<f64> {
    let teacher = model.run(tokens, RunMode::Full)?;
    let mode = if router_weighted {
        RunMode::RelaxedRouterWeighted(params)
    } else {
        RunMode::Relaxed(params)
    };
    let pruned = model.run(tokens, mode)?;
    Ok(phi_value(&pruned, &teacher))
}

/// Full objective on one batch: cross-entropy of the relaxed model plus
/// lambda times the reconstruction penalty.
pub fn total_objective(
    model: &MoEModel,
    tokens: &[usize],
    targets: &[usize],
    params: &PruneParams,
    lambda: f64,
    router_weighted: bool,
) -> Result<LossParts> {
    let teacher = model.run(tokens, RunMode::Full)?;
    let mut searcher = Searcher::from_batches(
        model,
        vec![(tokens.to_vec(), targets.to_vec())],
        lambda,
        router_weighted,
    );
    searcher.teachers[0] = Some(teacher);
    searcher.objective_parts(0, params)
}

/// In-place gradient step; returns the update norm `lr * ||grad||`.
pub fn gradient_step(values: &mut [f64], grads: &[f64], lr: f64) -> f64 {
    let mut sq = 0.0;
    for (v, g) in values.iter_mut().zip(grads.iter()) {
        *v -= lr * g;
        sq += (lr * g) * (lr * g);
    }
    sq.sqrt()
}

/// Objective evaluator with per-batch teacher caching and block-gradient
/// steps. One searcher owns its batches exclusively.
pub struct Searcher<'m> {
    model: &'m MoEModel,
    pub lambda: f64,
    pub router_weighted: bool,
    batches: Vec<(Vec<usize>, Vec<usize>)>,
    teachers: Vec<Option<Tensor>>,
    full_batch: (Vec<usize>, Vec<usize>),
    full_teacher: Option<Tensor>,
}

impl<'m> Searcher<'m> {
    pub fn new(
        model: &'m MoEModel,
        calibration: &CalibrationSet,
        lambda: f64,
        router_weighted: bool,
        batch_size: usize,
    ) -> Result<Self> {
        calibration.check_tokens(model.config.vocab)?;
        let batches = calibration.batches(batch_size);
        Ok(Self::from_batches(model, batches, lambda, router_weighted))
    }

    fn from_batches(
        model: &'m MoEModel,
        batches: Vec<(Vec<usize>, Vec<usize>)>,
        lambda: f64,
        router_weighted: bool,
    ) -> Self {
        let teachers = vec![None; batches.len()];
        let mut full_tokens = Vec::new();
        let mut full_targets = Vec::new();
        for (tokens, targets) in &batches {
            full_tokens.extend_from_slice(tokens);
            full_targets.extend_from_slice(targets);
        }
        Searcher {
            model,
            lambda,
            router_weighted,
            batches,
            teachers,
            full_batch: (full_tokens, full_targets),
            full_teacher: None,
        }
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    fn teacher(&mut self, batch: usize) -> Result<Tensor> {
        if self.teachers[batch].is_none() {
            let logits = self.model.run(&self.batches[batch].0, RunMode::Full)?;
            self.teachers[batch] = Some(logits);
        }
        Ok(self.teachers[batch].clone().expect("teacher cached"))
    }

    /// Build the objective on a fresh tape; returns the tape, the loss and
    /// part node ids, and the bound parameter nodes.
    fn build(
        &mut self,
        tokens: &[usize],
        targets: &[usize],
        teacher: Tensor,
        params: &PruneParams,
    ) -> Result<(
        Tape,
        crate::tensor::NodeId,
        LossParts,
        crate::moe::ParamNodes,
    )> {
        let mut tape = Tape::new();
        let nodes = self.model.bind(&mut tape);
        let bound_params = params.bind(&mut tape);
        let mode = BoundMode::Relaxed {
            params: bound_params.clone(),
            router_weighted: self.router_weighted,
        };
        let logits = self
            .model
            .forward_bound(&mut tape, &nodes, tokens, &mode, None)?;
        let ce = tape.cross_entropy(logits, targets.to_vec())?;
        let teacher_node = tape.leaf(teacher);
        let diff = tape.sub(logits, teacher_node)?;
        let frob = tape.frobenius_norm(diff);
        let phi = tape.scale(frob, 1.0 / (tokens.len() as f64).sqrt());
        let weighted_phi = tape.scale(phi, self.lambda);
        let loss = tape.add(ce, weighted_phi)?;
        let parts = LossParts {
            total: tape.value(loss).item(),
            ce: tape.value(ce).item(),
            phi: tape.value(phi).item(),
        };
        Ok((tape, loss, parts, bound_params))
    }

    /// Objective value on one batch.
    pub fn objective_parts(&mut self, batch: usize, params: &PruneParams) -> Result<LossParts> {
        let teacher = self.teacher(batch)?;
        let (tokens, targets) = self.batches[batch].clone();
        let (_, _, parts, _) = self.build(&tokens, &targets, teacher, params)?;
        Ok(parts)
    }

    /// Objective value over the whole calibration set.
    pub fn full_batch_loss(&mut self, params: &PruneParams) -> Result<LossParts> {
        if self.full_teacher.is_none() {
            self.full_teacher = Some(self.model.run(&self.full_batch.0, RunMode::Full)?);
        }
        let teacher = self.full_teacher.clone().expect("teacher cached");
        let (tokens, targets) = self.full_batch.clone();
        let (_, _, parts, _) = self.build(&tokens, &targets, teacher, params)?;
        Ok(parts)
    }

    /// Block gradients of the batch objective at the given parameters.
    pub fn gradients(
        &mut self,
        batch: usize,
        params: &PruneParams,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, LossParts)> {
        let teacher = self.teacher(batch)?;
        let (tokens, targets) = self.batches[batch].clone();
        self.gradients_on(&tokens, &targets, teacher, params)
    }

    /// Block gradients of the full-calibration objective.
    pub fn full_batch_gradients(
        &mut self,
        params: &PruneParams,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, LossParts)> {
        if self.full_teacher.is_none() {
            self.full_teacher = Some(self.model.run(&self.full_batch.0, RunMode::Full)?);
        }
        let teacher = self.full_teacher.clone().expect("teacher cached");
        let (tokens, targets) = self.full_batch.clone();
        self.gradients_on(&tokens, &targets, teacher, params)
    }

    fn gradients_on(
        &mut self,
        tokens: &[usize],
        targets: &[usize],
        teacher: Tensor,
        params: &PruneParams,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>, LossParts)> {
        let (tape, loss, parts, bound) = self.build(tokens, targets, teacher, params)?;
        let grads = tape.backward(loss, &bound.all_ids())?;
        let alpha: Vec<Vec<f64>> = bound
            .alpha
            .iter()
            .map(|&id| grads.grad(id).data().to_vec())
            .collect();
        let beta: Vec<f64> = bound
            .beta
            .iter()
            .map(|&id| grads.grad(id).item())
            .collect();
        Ok((alpha, beta, parts))
    }

    /// One alpha update with beta frozen (the batch objective's alpha
    /// gradient at the current iterate).
    pub fn alpha_step(
        &mut self,
        params: &mut PruneParams,
        batch: usize,
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        let (alpha_grads, _, parts) = self.gradients(batch, params)?;
        check_finite(&alpha_grads.iter().flatten().copied().collect::<Vec<_>>(), step)?;
        let mut sq = 0.0;
        for (row, grow) in params.alpha.iter_mut().zip(alpha_grads.iter()) {
            let n = gradient_step(row, grow, lr);
            sq += n * n;
        }
        Ok(StepRecord {
            step,
            kind: StepKind::Alpha,
            loss: parts,
            update_norm: sq.sqrt(),
            lr,
        })
    }

    /// One beta update with alpha frozen; sees the alpha values already
    /// updated this round (sequential semantics).
    pub fn beta_step(
        &mut self,
        params: &mut PruneParams,
        batch: usize,
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        let (_, beta_grads, parts) = self.gradients(batch, params)?;
        check_finite(&beta_grads, step)?;
        let norm = gradient_step(&mut params.beta, &beta_grads, lr);
        Ok(StepRecord {
            step,
            kind: StepKind::Beta,
            loss: parts,
            update_norm: norm,
            lr,
        })
    }
}

fn check_finite(grads: &[f64], step: usize) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(DiepError::TrainingDiverged {
            step,
            context: "non-finite gradient".to_string(),
        });
    }
    Ok(())
}

fn schedule_factor(schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Fixed => 1.0,
        LrSchedule::Cosine => {
            if total == 0 {
                1.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

/// Run the alternating search: alpha initialized to 0 (uniform normalized
/// importance), beta to 1; per batch, `alt_ratio` alpha steps then one beta
/// step; learning rates follow the schedule over the planned step budget.
pub fn run_search(
    model: &MoEModel,
    calibration: &CalibrationSet,
    config: &SearchConfig,
) -> Result<SearchRun> {
    config.validate()?;
    let mut searcher = Searcher::new(
        model,
        calibration,
        config.lambda,
        config.router_weighted,
        config.batch_size,
    )?;
    let mut params = PruneParams::init(model.config.layers, model.config.experts);
    let batches = searcher.batch_count();
    let steps_per_epoch = batches * (config.alt_ratio + 1);
    let total_steps = config.epochs * steps_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState {
        step: 0,
        params: params.clone(),
        steps: Vec::with_capacity(total_steps),
        epoch_losses: Vec::with_capacity(config.epochs + 1),
        steps_per_epoch,
    };
    state.epoch_losses.push(searcher.full_batch_loss(&params)?);

    let mut step = 0usize;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..batches).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for &batch in &order {
            for _ in 0..config.alt_ratio {
                let lr = config.lr_alpha * schedule_factor(config.schedule, step, total_steps);
                let record = searcher.alpha_step(&mut params, batch, lr, step)?;
                ensure_finite_loss(&record, step)?;
                state.steps.push(record);
                step += 1;
            }
            let lr = config.lr_beta * schedule_factor(config.schedule, step, total_steps);
            let record = searcher.beta_step(&mut params, batch, lr, step)?;
            ensure_finite_loss(&record, step)?;
            state.steps.push(record);
            step += 1;
        }
        state.epoch_losses.push(searcher.full_batch_loss(&params)?);
    }
    state.step = step;
    state.params = params.clone();
    let report = convergence_diagnostics(&state);
    Ok(SearchRun {
        params,
        state,
        report,
    })
}

fn ensure_finite_loss(record: &StepRecord, step: usize) -> Result<()> {
    if !record.loss.total.is_finite() {
        return Err(DiepError::TrainingDiverged {
            step,
            context: format!("objective became {}", record.loss.total),
        });
    }
    Ok(())
}

/// Summarize a run: monotonicity of the full-batch loss curve and the decay
/// of per-block update norms between the first and final epoch.
pub fn convergence_diagnostics(state: &TrainState) -> ConvergenceReport {
    let curve: Vec<f64> = state.epoch_losses.iter().map(|l| l.total).collect();
    let mut violations = 0usize;
    for w in curve.windows(2) {
        if w[1] > w[0] + DESCENT_TOLERANCE * w[0].abs().max(1.0) {
            violations += 1;
        }
    }

    let epoch_mean = |epoch: usize, kind: StepKind| -> f64 {
        let start = epoch * state.steps_per_epoch;
        let end = ((epoch + 1) * state.steps_per_epoch).min(state.steps.len());
        let norms: Vec<f64> = state.steps[start..end]
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.update_norm)
            .collect();
        if norms.is_empty() {
            0.0
        } else {
            norms.iter().sum::<f64>() / norms.len() as f64
        }
    };
    let epochs = if state.steps_per_epoch == 0 {
        0
    } else {
        state.steps.len() / state.steps_per_epoch
    };
    let last_epoch = epochs.saturating_sub(1);
    let alpha_first = epoch_mean(0, StepKind::Alpha);
    let alpha_final = epoch_mean(last_epoch, StepKind::Alpha);
    let beta_first = epoch_mean(0, StepKind::Beta);
    let beta_final = epoch_mean(last_epoch, StepKind::Beta);

    let last_norm = |kind: StepKind| {
        state
            .steps
            .iter()
            .rev()
            .find(|s| s.kind == kind)
            .map_or(0.0, |s| s.update_norm)
    };

    ConvergenceReport {
        monotone: violations == 0,
        violations,
        loss_curve: curve,
        alpha_first_epoch_mean_update: alpha_first,
        alpha_final_epoch_mean_update: alpha_final,
        beta_first_epoch_mean_update: beta_first,
        beta_final_epoch_mean_update: beta_final,
        final_alpha_update_norm: last_norm(StepKind::Alpha),
        final_beta_update_norm: last_norm(StepKind::Beta),
        updates_shrinking: alpha_final < 10.0 * alpha_first && beta_final < 10.0 * beta_first,
    }
}

/// Region and sampling budget of the Lipschitz probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub bases: usize,
    pub seed: u64,
    /// Alpha logits are sampled in `[-alpha_halfwidth, alpha_halfwidth]`.
    pub alpha_halfwidth: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            bases: 32,
            seed: 0,
            alpha_halfwidth: 3.0,
            beta_min: 0.25,
            beta_max: 2.5,
        }
    }
}

impl ProbeOptions {
    /// Probe only a neighborhood of the initialization, where small-step
    /// trajectories start; callers pair this with run verification.
    pub fn near_init() -> Self {
        ProbeOptions {
            alpha_halfwidth: 0.5,
            beta_min: 0.75,
            beta_max: 1.25,
            bases: 16,
            seed: 0,
        }
    }
}

/// Probe estimate of the per-block Lipschitz constants of the full-batch
/// gradient: the maximum local gradient-difference ratio over short
/// perturbations at base points spread across the given region. Supports
/// test-side step-size selection. Local pairs are used because distant
/// secants average curvature away and underestimate the bound badly.
pub fn probe_lipschitz(
    model: &MoEModel,
    calibration: &CalibrationSet,
    config: &SearchConfig,
    opts: &ProbeOptions,
) -> Result<(f64, f64)> {
    let mut searcher = Searcher::new(
        model,
        calibration,
        config.lambda,
        config.router_weighted,
        config.batch_size,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (layers, experts) = (model.config.layers, model.config.experts);
    let aw = opts.alpha_halfwidth;
    let eps = 1e-2;
    let mut l_alpha: f64 = 0.0;
    let mut l_beta: f64 = 0.0;
    for b in 0..opts.bases {
        // always include the initialization itself as a base point
        let base = if b == 0 {
            PruneParams::init(layers, experts)
        } else {
            PruneParams {
                alpha: (0..layers)
                    .map(|_| (0..experts).map(|_| rng.gen_range(-aw..aw)).collect())
                    .collect(),
                beta: (0..layers)
                    .map(|_| rng.gen_range(opts.beta_min..opts.beta_max))
                    .collect(),
            }
        };
        let (ga_0, gb_0, _) = searcher.full_batch_gradients(&base)?;

        let mut alpha_probe = base.clone();
        let mut delta_sq = 0.0;
        for row in alpha_probe.alpha.iter_mut() {
            for v in row.iter_mut() {
                let d = eps * rng.gen_range(-1.0..1.0);
                *v += d;
                delta_sq += d * d;
            }
        }
        let (ga_1, _, _) = searcher.full_batch_gradients(&alpha_probe)?;
        let dg: Vec<f64> = ga_0
            .iter()
            .flatten()
            .zip(ga_1.iter().flatten())
            .map(|(a, b)| a - b)
            .collect();
        if delta_sq > 0.0 {
            l_alpha = l_alpha.max(norm(&dg) / delta_sq.sqrt());
        }

        let mut beta_probe = base.clone();
        let mut delta_sq = 0.0;
        for v in beta_probe.beta.iter_mut() {
            let d = eps * rng.gen_range(-1.0..1.0);
            *v += d;
            delta_sq += d * d;
        }
        let (_, gb_1, _) = searcher.full_batch_gradients(&beta_probe)?;
        let dgb: Vec<f64> = gb_0.iter().zip(gb_1.iter()).map(|(a, b)| a - b).collect();
        if delta_sq > 0.0 {
            l_beta = l_beta.max(norm(&dgb) / delta_sq.sqrt());
        }
    }
    Ok((l_alpha, l_beta))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
