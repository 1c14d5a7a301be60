//! End-to-end training of the network under the mean per-block squared
//! error, with SGD or Adam, optional pre-training of the sampling and
//! autoencoder layers, and lower-loss selection among training variants.

mod optim;

pub use optim::{
    adam_step, sgd_step, AdamHyper, OptimizerKind, OptimizerState, OPTIMIZER_FORMAT_VERSION, OPTIMIZER_MAGIC,
};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{build_model, BlockVector, MeasurementRate, Model, BLOCK_LEN, FRONT_PARAM_TENSORS};
use crate::tensor::{mse_grad, mse_loss, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainPolicy {
    On,
    Off,
    /// Train both ways and keep the lower-loss result.
    Auto,
}

impl fmt::Display for PretrainPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainPolicy::On => "on",
            PretrainPolicy::Off => "off",
            PretrainPolicy::Auto => "auto",
        })
    }
}

impl FromStr for PretrainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "on" => Ok(PretrainPolicy::On),
            "off" => Ok(PretrainPolicy::Off),
            "auto" => Ok(PretrainPolicy::Auto),
            other => Err(Error::Config(format!(
                "unknown pretrain policy `{other}` (expected on, off or auto)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Mini-batch gradient steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub pretrain: PretrainPolicy,
    pub pretrain_iterations: usize,
    pub seed: u64,
    pub adam: AdamHyper,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            iterations: 10_000,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            pretrain: PretrainPolicy::Off,
            pretrain_iterations: 2_000,
            seed: 0,
            adam: AdamHyper::default(),
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam hyperparameters {a:?}")));
        }
        Ok(())
    }
}

/// Training loss sampled every `log_interval` iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub entries: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn push(&mut self, iteration: usize, loss: f64) {
        debug_assert!(self.entries.last().is_none_or(|&(i, _)| i < iteration));
        self.entries.push((iteration, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, loss) in &self.entries {
            out.push_str(&format!("{i},{loss}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("iteration,loss") {
            return Err(Error::format("header", "expected `iteration,loss`"));
        }
        let mut history = LossHistory::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format(format!("line {}", n + 2), format!("cannot parse `{line}`"));
            let (i, loss) = line.split_once(',').ok_or_else(bad)?;
            let i: usize = i.trim().parse().map_err(|_| bad())?;
            let loss: f64 = loss.trim().parse().map_err(|_| bad())?;
            if history.entries.last().is_some_and(|&(prev, _)| prev >= i) {
                return Err(bad());
            }
            history.entries.push((i, loss));
        }
        Ok(history)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Seeded permutation sampler; reshuffles whenever an epoch is exhausted.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn gather(dataset: &[BlockVector], indices: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(indices.len() * BLOCK_LEN);
    for &i in indices {
        data.extend_from_slice(dataset[i].values());
    }
    Tensor::new(vec![indices.len(), BLOCK_LEN], data).expect("batch shape")
}

/// Mean per-block squared error of the full network over `dataset`.
pub fn dataset_loss(model: &Model, dataset: &[BlockVector]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut total = 0.0;
    for chunk in dataset.chunks(64) {
        let indices: Vec<usize> = (0..chunk.len()).collect();
        let x = gather(chunk, &indices);
        total += mse_loss(&model.forward_batch(&x)?, &x)? * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Hooks into a running training loop.
#[derive(Default)]
pub struct TrainControl<'a> {
    /// Checked before every iteration; when set the loop stops early.
    pub stop: Option<&'a AtomicBool>,
    /// Called with every logged `(iteration, loss)`.
    pub on_log: Option<&'a mut dyn FnMut(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: LossHistory,
    pub state: OptimizerState,
    pub completed_iterations: usize,
    pub interrupted: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Scope {
    Full,
    Front,
}

fn run_loop(
    mut model: Model,
    dataset: &[BlockVector],
    config: &TrainConfig,
    iterations: usize,
    scope: Scope,
    control: &mut TrainControl<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let trained = match scope {
        Scope::Full => model.params().len(),
        Scope::Front => FRONT_PARAM_TENSORS,
    };
    let mut state = OptimizerState::new(config.optimizer, &model.params()[..trained]);
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let mut history = LossHistory::default();
    let mut completed = 0;
    let mut interrupted = false;

    for iteration in 0..=iterations {
        if control.stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            interrupted = true;
            break;
        }
        let x = gather(dataset, &sampler.next_batch(config.batch_size));
        let logging = iteration % config.log_interval == 0;
        if iteration == iterations {
            // final evaluation only, no update
            if logging {
                let out = match scope {
                    Scope::Full => model.forward_batch(&x)?,
                    Scope::Front => model.front_trace(&x)?.output,
                };
                let loss = mse_loss(&out, &x)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { iteration, loss });
                }
                history.push(iteration, loss);
                if let Some(cb) = control.on_log.as_mut() {
                    cb(iteration, loss);
                }
            }
            break;
        }

        let trace = match scope {
            Scope::Full => model.forward_trace(&x)?,
            Scope::Front => model.front_trace(&x)?,
        };
        let loss = mse_loss(&trace.output, &x)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        if logging {
            history.push(iteration, loss);
            if let Some(cb) = control.on_log.as_mut() {
                cb(iteration, loss);
            }
        }
        let upstream = mse_grad(&trace.output, &x)?;
        let grads = match scope {
            Scope::Full => model.backward(&trace, &upstream)?,
            Scope::Front => model.front_backward(&trace, &upstream)?,
        };
        let mut params = model.params_mut();
        state.apply(&mut params[..trained], &grads.0, config.learning_rate, config.adam)?;
        if params[..trained].iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration, loss });
        }
        completed = iteration + 1;
    }

    Ok(TrainOutcome {
        model,
        history,
        state,
        completed_iterations: completed,
        interrupted,
    })
}

/// Trains all ten layers for `config.iterations` mini-batch steps.
pub fn train(model: Model, dataset: &[BlockVector], config: &TrainConfig) -> Result<(Model, LossHistory)> {
    let out = train_with_control(model, dataset, config, &mut TrainControl::default())?;
    Ok((out.model, out.history))
}

pub fn train_with_control(
    model: Model,
    dataset: &[BlockVector],
    config: &TrainConfig,
    control: &mut TrainControl<'_>,
) -> Result<TrainOutcome> {
    run_loop(model, dataset, config, config.iterations, Scope::Full, control)
}

/// Trains only the sampling and autoencoder layers, for
/// `config.pretrain_iterations` steps, to reproduce each block at the
/// autoencoder output. Convolution parameters are not touched.
pub fn pretrain(model: Model, dataset: &[BlockVector], config: &TrainConfig) -> Result<(Model, LossHistory)> {
    let out = pretrain_with_control(model, dataset, config, &mut TrainControl::default())?;
    Ok((out.model, out.history))
}

pub fn pretrain_with_control(
    model: Model,
    dataset: &[BlockVector],
    config: &TrainConfig,
    control: &mut TrainControl<'_>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if config.pretrain_iterations == 0 {
        let state = OptimizerState::new(config.optimizer, &model.params()[..FRONT_PARAM_TENSORS]);
        return Ok(TrainOutcome {
            model,
            history: LossHistory::default(),
            state,
            completed_iterations: 0,
            interrupted: false,
        });
    }
    run_loop(
        model,
        dataset,
        config,
        config.pretrain_iterations,
        Scope::Front,
        control,
    )
}

/// One candidate of the selection protocol.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub optimizer: OptimizerKind,
    pub pretrained: bool,
    /// Mean per-block loss over the whole dataset after training, or `None`
    /// when the variant diverged.
    pub final_loss: Option<f64>,
    pub diverged_at: Option<usize>,
    pub history: LossHistory,
    pub pretrain_history: LossHistory,
}

impl VariantResult {
    pub fn label(&self) -> String {
        format!(
            "{}/pretrain-{}",
            self.optimizer,
            if self.pretrained { "on" } else { "off" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct SelectionReport {
    pub variants: Vec<VariantResult>,
    /// Index into `variants` of the returned model.
    pub selected: usize,
}

impl SelectionReport {
    pub fn winner(&self) -> &VariantResult {
        &self.variants[self.selected]
    }
}

/// Builds a fresh model for `rate` from `config.seed`, optionally pre-trains
/// it, then trains the whole network.
pub fn train_variant(
    rate: MeasurementRate,
    dataset: &[BlockVector],
    config: &TrainConfig,
    pretrained: bool,
    control: &mut TrainControl<'_>,
) -> Result<(TrainOutcome, LossHistory)> {
    let mut model = build_model(rate, config.seed);
    let mut pretrain_history = LossHistory::default();
    if pretrained {
        let pre = pretrain_with_control(model, dataset, config, control)?;
        pretrain_history = pre.history;
        model = pre.model;
        if pre.interrupted {
            return Ok((
                TrainOutcome {
                    model,
                    history: LossHistory::default(),
                    state: OptimizerState::new(config.optimizer, &[]),
                    completed_iterations: 0,
                    interrupted: true,
                },
                pretrain_history,
            ));
        }
    }
    let outcome = train_with_control(model, dataset, config, control)?;
    Ok((outcome, pretrain_history))
}

/// Trains every (optimizer, pretrain) combination allowed by `optimizers` and
/// `config.pretrain`, each from the same seed, and keeps the one with the
/// lowest final dataset loss. Divergent variants are recorded and skipped;
/// if all diverge the first divergence is returned as the error.
pub fn train_variants(
    rate: MeasurementRate,
    dataset: &[BlockVector],
    config: &TrainConfig,
    optimizers: &[OptimizerKind],
    control: &mut TrainControl<'_>,
) -> Result<(TrainOutcome, SelectionReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let pretrain_modes: &[bool] = match config.pretrain {
        PretrainPolicy::On => &[true],
        PretrainPolicy::Off => &[false],
        PretrainPolicy::Auto => &[true, false],
    };
    let mut variants = Vec::new();
    let mut best: Option<(f64, usize, TrainOutcome)> = None;
    let mut first_error = None;
    for &optimizer in optimizers {
        for &pretrained in pretrain_modes {
            let variant_config = TrainConfig {
                optimizer,
                ..config.clone()
            };
            let result = train_variant(rate, dataset, &variant_config, pretrained, control)
                .and_then(|(outcome, pre)| Ok((dataset_loss(&outcome.model, dataset)?, outcome, pre)));
            match result {
                Ok((loss, outcome, pretrain_history)) => {
                    let interrupted = outcome.interrupted;
                    variants.push(VariantResult {
                        optimizer,
                        pretrained,
                        final_loss: Some(loss),
                        diverged_at: None,
                        history: outcome.history.clone(),
                        pretrain_history,
                    });
                    let index = variants.len() - 1;
                    if loss.is_finite() && best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                        best = Some((loss, index, outcome));
                    }
                    if interrupted {
                        break;
                    }
                }
                Err(Error::Divergence { iteration, loss }) => {
                    variants.push(VariantResult {
                        optimizer,
                        pretrained,
                        final_loss: None,
                        diverged_at: Some(iteration),
                        history: LossHistory::default(),
                        pretrain_history: LossHistory::default(),
                    });
                    first_error.get_or_insert(Error::Divergence { iteration, loss });
                }
                Err(other) => return Err(other),
            }
        }
        if control.stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            break;
        }
    }
    match best {
        Some((_, selected, outcome)) => Ok((outcome, SelectionReport { variants, selected })),
        None => Err(first_error.unwrap_or_else(|| Error::Data("no training variant completed".into()))),
    }
}

/// Adam and SGD, each with and/or without pre-training per `config.pretrain`.
pub fn train_with_selection(
    rate: MeasurementRate,
    dataset: &[BlockVector],
    config: &TrainConfig,
) -> Result<(Model, SelectionReport)> {
    let (outcome, report) = train_variants(
        rate,
        dataset,
        config,
        &[OptimizerKind::Adam, OptimizerKind::Sgd],
        &mut TrainControl::default(),
    )?;
    Ok((outcome.model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_dataset(n: usize, seed: u64) -> Vec<BlockVector> {
        // smooth blocks: random gradients plus a little texture
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
                let values = (0..BLOCK_LEN)
                    .map(|i| {
                        let (y, x) = ((i / 33) as f64 / 32.0, (i % 33) as f64 / 32.0);
                        (0.2 + 0.3 * a * x + 0.3 * b * y + 0.1 * c * (6.0 * x).sin()).clamp(0.0, 1.0)
                    })
                    .collect();
                BlockVector::new(values).unwrap()
            })
            .collect()
    }

    fn small_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 4,
            pretrain_iterations: 20,
            log_interval: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn sampler_covers_each_epoch_and_wraps() {
        let mut s = BatchSampler::new(5, 3);
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let wrapped = s.next_batch(7);
        assert_eq!(wrapped.len(), 7);
        let mut again = BatchSampler::new(5, 3);
        assert_eq!(
            again.next_batch(12),
            [BatchSampler::new(5, 3).next_batch(5), wrapped].concat()
        );
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = build_model(MeasurementRate::R01, 0);
        assert!(matches!(
            train(model.clone(), &[], &small_config(2)),
            Err(Error::Data(_))
        ));
        assert!(matches!(pretrain(model, &[], &small_config(2)), Err(Error::Data(_))));
    }

    #[test]
    fn first_logged_loss_is_untrained_loss_on_first_batch() {
        let data = toy_dataset(6, 1);
        let config = small_config(3);
        let model = build_model(MeasurementRate::R01, 0);
        let first_batch = gather(
            &data,
            &BatchSampler::new(data.len(), config.seed).next_batch(config.batch_size),
        );
        let expected = mse_loss(&model.forward_batch(&first_batch).unwrap(), &first_batch).unwrap();
        let (_, history) = train(model, &data, &config).unwrap();
        assert_eq!(history.entries[0], (0, expected));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_dataset(6, 2);
        let config = small_config(4);
        let a = train(build_model(MeasurementRate::R01, 0), &data, &config).unwrap();
        let b = train(build_model(MeasurementRate::R01, 0), &data, &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.to_csv(), b.1.to_csv());
    }

    #[test]
    fn pretrain_leaves_conv_untouched() {
        let data = toy_dataset(6, 3);
        let model = build_model(MeasurementRate::R04, 0);
        let (trained, history) = pretrain(model.clone(), &data, &small_config(1)).unwrap();
        assert_eq!(trained.conv, model.conv);
        assert_ne!(trained.sampling, model.sampling);
        assert_eq!(history.entries.len(), 5);

        let zero = TrainConfig {
            pretrain_iterations: 0,
            ..small_config(1)
        };
        let (same, _) = pretrain(model.clone(), &data, &zero).unwrap();
        assert_eq!(same, model);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let data = toy_dataset(4, 4);
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e6,
            ..small_config(50)
        };
        match train(build_model(MeasurementRate::R01, 0), &data, &config) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stop_flag_interrupts() {
        let data = toy_dataset(4, 5);
        let stop = AtomicBool::new(true);
        let mut control = TrainControl {
            stop: Some(&stop),
            on_log: None,
        };
        let out = train_with_control(
            build_model(MeasurementRate::R01, 0),
            &data,
            &small_config(10),
            &mut control,
        )
        .unwrap();
        assert!(out.interrupted);
        assert_eq!(out.completed_iterations, 0);
    }

    #[test]
    fn selection_returns_minimum_loss_variant() {
        let data = toy_dataset(6, 6);
        let config = TrainConfig {
            pretrain: PretrainPolicy::Auto,
            ..small_config(5)
        };
        let (model, report) = train_with_selection(MeasurementRate::R01, &data, &config).unwrap();
        assert_eq!(report.variants.len(), 4);
        let losses: Vec<f64> = report.variants.iter().map(|v| v.final_loss.unwrap()).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(report.winner().final_loss, Some(min));
        assert_eq!(dataset_loss(&model, &data).unwrap(), min);

        let forced = TrainConfig {
            pretrain: PretrainPolicy::Off,
            ..config
        };
        let (_, report) = train_with_selection(MeasurementRate::R01, &data, &forced).unwrap();
        assert_eq!(report.variants.len(), 2);
        assert!(report.variants.iter().all(|v| !v.pretrained));
    }

    #[test]
    fn loss_csv_round_trip() {
        let mut h = LossHistory::default();
        h.push(0, 12.5);
        h.push(100, 0.1 + 0.2);
        let text = h.to_csv();
        assert!(text.starts_with("iteration,loss\n0,12.5\n"));
        assert_eq!(LossHistory::from_csv(&text).unwrap(), h);
        assert!(LossHistory::from_csv("iteration,loss\n5,1\n5,2\n").is_err());
    }
}
