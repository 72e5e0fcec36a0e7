//! Shared fixtures for the integration and acceptance suites.

use diep::moe::{MoEModel, ModelConfig};
use diep::search::{
    probe_lipschitz, run_search, LrSchedule, ProbeOptions, SearchConfig, SearchRun,
};
use diep::synth::{
    gen_task, plant_redundancy, pretrain_toy, CalibrationSet, PlantedClones, PretrainOptions,
    RedundancyDirective, RedundancySpec, TaskSpec,
};

/// A pretrained model with planted sigma = 0 redundancy plus its data.
pub struct PlantedFixture {
    pub model: MoEModel,
    pub planted: PlantedClones,
    pub train: CalibrationSet,
    pub eval: CalibrationSet,
    pub calibration: CalibrationSet,
    pub spec: TaskSpec,
}

/// Build a pretrained toy model and overwrite experts per the directives.
pub fn planted_fixture(
    seed: u64,
    config: ModelConfig,
    directives: Vec<RedundancyDirective>,
    task: TaskSpec,
) -> PlantedFixture {
    let (train, eval, calibration) = gen_task(&task, seed);
    let mut model = MoEModel::init(config, seed ^ 0x5eed).unwrap();
    pretrain_toy(
        &mut model,
        &train,
        &PretrainOptions {
            epochs: 12,
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    let planted = plant_redundancy(&mut model, &RedundancySpec { directives }, seed).unwrap();
    PlantedFixture {
        model,
        planted,
        train,
        eval,
        calibration,
        spec: task,
    }
}

/// Default task sized for multi-seed suites.
pub fn small_task(vocab: usize) -> TaskSpec {
    TaskSpec {
        vocab,
        calibration_samples: 16,
        seq_len: 4,
        train_samples: 128,
        eval_samples: 64,
        ..TaskSpec::default()
    }
}

/// Full-batch alternating descent with probe-selected fixed step sizes.
///
/// Step sizes start at 1 / L-hat probed near the initialization; the run is
/// then verified: observed loss increases halve the steps (and stretch the
/// horizon), unshrunk update norms double the horizon. Returns the first
/// run with zero violations and both final-epoch mean update norms below
/// `ratio_target` times their first-epoch means.
pub fn verified_descent_run(
    model: &MoEModel,
    calibration: &CalibrationSet,
    lambda: f64,
    min_steps: usize,
    ratio_target: f64,
) -> SearchRun {
    let base = SearchConfig {
        lambda,
        ..SearchConfig::default()
    };
    let (l_alpha, l_beta) =
        probe_lipschitz(model, calibration, &base, &ProbeOptions::near_init()).unwrap();
    let mut lr_alpha = 1.0 / l_alpha.max(1e-9);
    let mut lr_beta = 1.0 / l_beta.max(1e-9);
    // alternation 1:1 gives two steps per full-batch epoch
    let mut epochs = min_steps.div_ceil(2);
    for _attempt in 0..8 {
        let config = SearchConfig {
            lr_alpha,
            lr_beta,
            epochs,
            batch_size: usize::MAX,
            alt_ratio: 1,
            schedule: LrSchedule::Fixed,
            lambda,
            router_weighted: false,
            seed: 0,
        };
        match run_search(model, calibration, &config) {
            Ok(run) => {
                let r = &run.report;
                if r.violations > 0 {
                    lr_alpha *= 0.5;
                    lr_beta *= 0.5;
                    epochs = epochs * 3 / 2;
                    continue;
                }
                let alpha_ratio =
                    r.alpha_final_epoch_mean_update / r.alpha_first_epoch_mean_update.max(1e-300);
                let beta_ratio =
                    r.beta_final_epoch_mean_update / r.beta_first_epoch_mean_update.max(1e-300);
                if alpha_ratio >= ratio_target || beta_ratio >= ratio_target {
                    epochs *= 2;
                    continue;
                }
                return run;
            }
            Err(_) => {
                lr_alpha *= 0.5;
                lr_beta *= 0.5;
            }
        }
    }
    panic!("no violation-free converged run within the retry budget");
}
