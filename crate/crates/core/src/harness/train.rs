//! The preference-training loop.
//!
//! Per batch: corrupt each pair's image with noise keyed by
//! `(seed, pair_id, step)`, probe both responses under the current policy,
//! turn the probes into masks and factors, take the weighted loss gradient
//! against cached reference log-probabilities, and apply one Adam update.
//! Pair work fans out over a thread pool; results are collected and reduced
//! in batch order, so the thread count never changes a single bit.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{LrSchedule, Method, QuantileScope, RunConfig};
use super::report::{
    EpochRecord, EvalRecord, ReferenceRecord, RunReport, RunSummary, StepRecord, CODE_VERSION,
    SCHEMA_VERSION,
};
use crate::error::{LabError, Result};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::preference_loss::{weighted_loss, PreferencePair, ReferenceLogProbs};
use crate::rng;
use crate::synth_world::{
    attribute_accuracy, generate_dataset, generate_world, pretrain_reference, PretrainReport,
    WorldSpec,
};
use crate::toy_policy::{Matrix, PolicyParams};
use crate::uncertainty::{
    diagnose_pooled, diagnose_sequence, probe_response, Branch, ExplorationSettings,
    SequenceDiagnostics, TokenProbe,
};
use crate::visual_noise::{noise_vector, NoiseSchedule};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "UEDPO_THREADS";

/// Salt separating the run's evaluation scenes from pretraining's.
const EVAL_SALT: u64 = 0xe7a1_5ce7;

/// Worker count from `UEDPO_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The synthetic world and frozen reference policy a run trains against.
/// Both are pure functions of the config's seed, world and reference sections.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: WorldSpec,
    pub reference: PolicyParams,
    pub pretrain: PretrainReport,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let world = generate_world(config.seed, &config.world)?;
    let (reference, pretrain) = pretrain_reference(&world, &config.reference, config.seed)?;
    Ok(Prepared {
        world,
        reference,
        pretrain,
    })
}

/// The preference dataset `gen-data` writes for this config.
pub fn generate_data(config: &RunConfig) -> Result<Vec<PreferencePair>> {
    config.validate()?;
    let world = generate_world(config.seed, &config.world)?;
    Ok(generate_dataset(&world, config.seed, config.data.num_pairs))
}

/// Exploration settings per branch. An inactive branch keeps its mask (so
/// selection counts stay comparable across methods) but gets `alpha = 0`,
/// which pins every factor to exactly 1.
fn branch_settings(config: &RunConfig) -> (ExplorationSettings, ExplorationSettings) {
    let base = config.exploration();
    let off = ExplorationSettings { alpha: 0.0, ..base };
    let m = config.method;
    (
        if m.weights_preferred() { base } else { off },
        if m.weights_dispreferred() { base } else { off },
    )
}

/// Probes both responses of `pair` against its corrupted image at `step`.
pub fn probe_pair(
    theta: &PolicyParams,
    pair: &PreferencePair,
    schedule: &NoiseSchedule,
    config: &RunConfig,
    step: u64,
) -> Result<(Vec<TokenProbe>, Vec<TokenProbe>)> {
    let img = pair.image.values();
    let noise = noise_vector(config.seed, pair.pair_id, step, img.len());
    let blurred = schedule.corrupt(img, config.noise.k, &noise)?;
    Ok((
        probe_response(theta, img, &blurred.values, &pair.prompt, &pair.chosen)?,
        probe_response(theta, img, &blurred.values, &pair.prompt, &pair.rejected)?,
    ))
}

/// Per-sequence diagnostics of one pair under `config.method`.
pub fn pair_diagnostics(
    theta: &PolicyParams,
    pair: &PreferencePair,
    schedule: &NoiseSchedule,
    config: &RunConfig,
    step: u64,
) -> Result<(SequenceDiagnostics, SequenceDiagnostics)> {
    let (pw, pl) = probe_pair(theta, pair, schedule, config, step)?;
    let (sw, sl) = branch_settings(config);
    Ok((
        diagnose_sequence(&pw, Branch::Preferred, &sw)?,
        diagnose_sequence(&pl, Branch::Dispreferred, &sl)?,
    ))
}

fn batch_diagnostics(
    probes: Vec<(Vec<TokenProbe>, Vec<TokenProbe>)>,
    config: &RunConfig,
) -> Result<Vec<(SequenceDiagnostics, SequenceDiagnostics)>> {
    let (sw, sl) = branch_settings(config);
    match config.quantile_scope {
        QuantileScope::PerSequence => probes
            .iter()
            .map(|(pw, pl)| {
                Ok((
                    diagnose_sequence(pw, Branch::Preferred, &sw)?,
                    diagnose_sequence(pl, Branch::Dispreferred, &sl)?,
                ))
            })
            .collect(),
        QuantileScope::PerBatch => {
            let (ws, ls): (Vec<_>, Vec<_>) = probes.into_iter().unzip();
            let dw = diagnose_pooled(&ws, Branch::Preferred, &sw)?;
            let dl = diagnose_pooled(&ls, Branch::Dispreferred, &sl)?;
            Ok(dw.into_iter().zip(dl).collect())
        }
    }
}

fn at_step(step: usize, err: LabError) -> LabError {
    match err {
        LabError::Numeric { context, detail } => LabError::Numeric {
            context: format!("step {step}, {context}"),
            detail,
        },
        other => other,
    }
}

fn evaluate(params: &PolicyParams, world: &WorldSpec, config: &RunConfig) -> Result<EvalRecord> {
    let acc = attribute_accuracy(params, world, config.eval.n_scenes, config.seed ^ EVAL_SALT)?;
    Ok(EvalRecord::from_accuracy(acc))
}

fn check_dataset(dataset: &[PreferencePair], world: &WorldSpec) -> Result<()> {
    if dataset.is_empty() {
        return Err(LabError::invalid("empty preference dataset"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in dataset {
        p.validate(world.config.vocab_size)?;
        if p.image.dim() != world.image_dim() {
            return Err(LabError::invalid(format!(
                "pair {}: image has {} features, world expects {}",
                p.pair_id,
                p.image.dim(),
                world.image_dim()
            )));
        }
        if !seen.insert(p.pair_id) {
            return Err(LabError::invalid(format!(
                "duplicate pair id {}",
                p.pair_id
            )));
        }
    }
    Ok(())
}

/// A finished run: its report and the final policy.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub theta: PolicyParams,
}

/// Prepares world and reference from the config, then trains with the
/// worker count from [`worker_threads`].
pub fn train(config: &RunConfig, dataset: &[PreferencePair]) -> Result<TrainOutcome> {
    let prepared = prepare(config)?;
    train_prepared(config, &prepared, dataset, worker_threads())
}

/// Runs the training loop on an already prepared world and reference.
pub fn train_prepared(
    config: &RunConfig,
    prepared: &Prepared,
    dataset: &[PreferencePair],
    threads: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let world = &prepared.world;
    let reference = &prepared.reference;
    if reference.layout() != &world.layout() {
        return Err(LabError::invalid(
            "reference policy does not match the world layout",
        ));
    }
    check_dataset(dataset, world)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| LabError::invalid(format!("thread pool: {e}")))?;
    let schedule = NoiseSchedule::new(config.noise.num_steps, config.noise.interpretation)?;

    let ref_cache: Vec<ReferenceLogProbs> = pool.install(|| {
        dataset
            .par_iter()
            .map(|p| ReferenceLogProbs::compute(reference, p))
            .collect::<Result<_>>()
    })?;
    let ref_eval = evaluate(reference, world, config)?;

    let mut theta = reference.clone();
    let (rows, cols) = (theta.weights().rows(), theta.weights().cols());
    let mut adam = AdamState::new(rows * cols);
    let adam_cfg = config.optimizer.adam();
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(&[
            rng::tag::SHUFFLE,
            config.seed,
            epoch as u64,
        ]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let probes = pool
                .install(|| {
                    batch
                        .par_iter()
                        .map(|&i| probe_pair(&theta, &dataset[i], &schedule, config, step as u64))
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| at_step(step, e))?;
            let diags = batch_diagnostics(probes, config).map_err(|e| at_step(step, e))?;
            let results = pool
                .install(|| {
                    batch
                        .par_iter()
                        .zip(&diags)
                        .map(|(&i, (dw, dl))| {
                            weighted_loss(
                                &theta,
                                &ref_cache[i],
                                &dataset[i],
                                config.beta,
                                &dw.lambdas(),
                                &dl.lambdas(),
                                true,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| at_step(step, e))?;

            let n = batch.len() as f64;
            let mut grad = Matrix::zeros(rows, cols);
            let (mut loss, mut margin) = (0.0, 0.0);
            for (b, g) in &results {
                grad.add_scaled(g.as_ref().expect("gradient requested"), 1.0 / n);
                loss += b.loss / n;
                margin += b.margin / n;
            }
            let lam_mean =
                |pick: fn(&(SequenceDiagnostics, SequenceDiagnostics)) -> &SequenceDiagnostics| {
                    let (sum, count) = diags.iter().map(pick).fold((0.0, 0usize), |(s, c), d| {
                        (s + d.tokens.iter().map(|t| t.lam).sum::<f64>(), c + d.len())
                    });
                    sum / count as f64
                };
            let lr = match config.optimizer.schedule {
                LrSchedule::Cosine => cosine_lr(step, total_steps, config.optimizer.lr),
                LrSchedule::Constant => config.optimizer.lr,
            };
            adam_step(theta.weights_mut(), &grad, &mut adam, lr, &adam_cfg)
                .map_err(|e| at_step(step, e))?;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                margin,
                mean_lam_w: lam_mean(|d| &d.0),
                mean_lam_l: lam_mean(|d| &d.1),
                selected_w: diags.iter().map(|d| d.0.selected_count()).sum(),
                selected_l: diags.iter().map(|d| d.1.selected_count()).sum(),
            });
            epoch_loss += loss;
            step += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches_per_epoch as f64,
            eval: evaluate(&theta, world, config)?,
        });
    }

    let last = epochs.last().expect("at least one epoch");
    let summary = RunSummary {
        steps: steps.len(),
        num_pairs: dataset.len(),
        final_loss: last.mean_loss,
        hallucination_rate: last.eval.hallucination_rate,
        regular_accuracy: last.eval.regular_accuracy,
        underrep_accuracy: last.eval.underrep_accuracy,
        hallucination_drop: ref_eval.hallucination_rate - last.eval.hallucination_rate,
        underrep_gain: last.eval.underrep_accuracy - ref_eval.underrep_accuracy,
    };
    let report = RunReport {
        schema_version: SCHEMA_VERSION.into(),
        code_version: CODE_VERSION.into(),
        config: config.clone(),
        reference: ReferenceRecord {
            pretrain_steps: prepared.pretrain.steps,
            eval: ref_eval,
        },
        epochs,
        summary,
        steps,
    };
    Ok(TrainOutcome { report, theta })
}

/// Runs every method on one prepared world and dataset, in [`Method::ALL`] order.
pub fn train_all_methods(
    config: &RunConfig,
    prepared: &Prepared,
    dataset: &[PreferencePair],
    threads: usize,
) -> Result<Vec<(Method, RunReport)>> {
    Method::ALL
        .iter()
        .map(|&method| {
            let cfg = RunConfig {
                method,
                ..config.clone()
            };
            Ok((
                method,
                train_prepared(&cfg, prepared, dataset, threads)?.report,
            ))
        })
        .collect()
}
