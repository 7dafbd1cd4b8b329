use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{initial_weights, ClientDataset, LearnerConfig, Model, ModelWeights, Optimizer};
use crate::error::{Error, Result};
use crate::math::{ceil, sqrt};
use crate::rng::{derive_seed, seeded, SimRng};

const INIT_STREAM: u64 = 0x1417;

/// Sliding windows over a normalized, time-major observation sequence. The
/// target of each window is channel 0 of the `future_obs` steps after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    input_len: usize,
    output_len: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Windows {
    pub fn from_flat(obs: &[f64], past_obs: usize, future_obs: usize, channels: usize) -> Result<Self> {
        if channels == 0 || obs.len() % channels != 0 {
            return Err(Error::invalid("observation length is not a multiple of the channel count"));
        }
        let steps = obs.len() / channels;
        let needed = past_obs + future_obs;
        if steps < needed {
            return Err(Error::DataTooShort { needed, got: steps });
        }
        let count = steps - needed + 1;
        let input_len = past_obs * channels;
        let mut inputs = Vec::with_capacity(count * input_len);
        let mut targets = Vec::with_capacity(count * future_obs);
        for w in 0..count {
            inputs.extend_from_slice(&obs[w * channels..(w + past_obs) * channels]);
            targets.extend((0..future_obs).map(|k| obs[(w + past_obs + k) * channels]));
        }
        Ok(Self {
            input_len,
            output_len: future_obs,
            inputs,
            targets,
        })
    }

    pub fn from_dataset(ds: &ClientDataset, cfg: &LearnerConfig) -> Result<Self> {
        if cfg.exogenous != ds.exogenous.is_some() {
            return Err(Error::invalid("exogenous channel does not match the learner configuration"));
        }
        Self::from_flat(&ds.normalized(), cfg.past_obs, cfg.future_obs, cfg.channels())
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_len.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.output_len..(i + 1) * self.output_len]
    }

    /// Splits window indices into training and (chronologically last)
    /// validation ranges.
    fn split(&self, val_split: f64, series_len: usize, cfg: &LearnerConfig) -> Result<(usize, usize)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::DataTooShort {
                needed: cfg.past_obs + cfg.future_obs + 1,
                got: series_len,
            });
        }
        let n_val = (ceil(val_split * n as f64) as usize).clamp(1, n - 1);
        Ok((n - n_val, n))
    }
}

fn mean_loss(model: &Model, params: &[f64], windows: &Windows, range: core::ops::Range<usize>) -> f64 {
    let count = (range.len() * windows.output_len) as f64;
    let total: f64 = range
        .map(|i| {
            model
                .predict(params, windows.input(i))
                .iter()
                .zip(windows.target(i))
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
        })
        .sum();
    total / count
}

/// Normalized-scale validation MSE of `weights` on the client's held-out
/// windows.
pub fn validation_loss(ds: &ClientDataset, weights: &ModelWeights, cfg: &LearnerConfig) -> Result<f64> {
    cfg.validate()?;
    let model = weights.check_for(cfg)?;
    let windows = Windows::from_dataset(ds, cfg)?;
    let (start, end) = windows.split(cfg.val_split, ds.series.len(), cfg)?;
    Ok(mean_loss(&model, &weights.params, &windows, start..end))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    b1t: f64,
    b2t: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            b1t: 1.0,
            b2t: 1.0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.b1t *= Self::B1;
        self.b2t *= Self::B2;
        let c1 = 1.0 / (1.0 - self.b1t);
        let c2 = 1.0 / (1.0 - self.b2t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m * c1) / (sqrt(*v * c2) + Self::EPS);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = sqrt(grad.iter().map(|g| g * g).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains from `init` for `cfg.epochs` epochs of shuffled minibatches and
/// returns the weights of the epoch with the lowest validation loss, with
/// that loss. Zero epochs returns `init` and its validation loss.
pub fn local_train(
    ds: &ClientDataset,
    init: &ModelWeights,
    cfg: &LearnerConfig,
    rng: &mut SimRng,
) -> Result<(ModelWeights, f64)> {
    cfg.validate()?;
    let model = init.check_for(cfg)?;
    let windows = Windows::from_dataset(ds, cfg)?;
    let (n_train, n) = windows.split(cfg.val_split, ds.series.len(), cfg)?;
    let mut params = init.params.clone();
    if cfg.epochs == 0 {
        let loss = mean_loss(&model, &params, &windows, n_train..n);
        return Ok((init.clone(), loss));
    }

    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let dropout = (cfg.dropout > 0.0).then_some(&mut *rng);
            model.loss_grad(&params, &windows, batch, dropout, &mut grad);
            clip(&mut grad, cfg.grad_clip);
            match cfg.optimizer {
                Optimizer::Sgd => params
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(p, g)| *p -= cfg.learning_rate * g),
                Optimizer::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
            }
        }
        let loss = mean_loss(&model, &params, &windows, n_train..n);
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        if best.as_ref().map_or(true, |(_, b)| loss < *b) {
            best = Some((params.clone(), loss));
        }
    }
    let (params, loss) = best.expect("at least one epoch ran");
    Ok((
        ModelWeights {
            params,
            arch_tag: init.arch_tag.clone(),
        },
        loss,
    ))
}

/// Trains a fresh learner on one building's data alone. `seed` drives both
/// the initial weights and the minibatch order.
pub fn train_local_only(ds: &ClientDataset, cfg: &LearnerConfig, seed: u64) -> Result<(ModelWeights, f64)> {
    cfg.validate()?;
    let init = initial_weights(cfg, &mut seeded(derive_seed(seed, &[INIT_STREAM])));
    local_train(ds, &init, cfg, &mut seeded(seed))
}

/// Applies the learner to one normalized input window and returns the
/// denormalized (kW) outputs.
pub fn forecast(
    cfg: &LearnerConfig,
    weights: &ModelWeights,
    window: &[f64],
    norm: &super::MinMax,
) -> Result<Vec<f64>> {
    let model = weights.check_for(cfg)?;
    if window.len() != cfg.input_len() {
        return Err(Error::WindowLength {
            expected: cfg.input_len(),
            got: window.len(),
        });
    }
    Ok(model
        .predict(&weights.params, window)
        .into_iter()
        .map(|v| norm.denormalize(v))
        .collect())
}

/// Forecasts the steps following `history` (raw kW, at least `past_obs`
/// values; only the last `past_obs` are used) with the client's scaling.
pub fn forecast_next(
    cfg: &LearnerConfig,
    weights: &ModelWeights,
    client: &ClientDataset,
    history: &[f64],
    exogenous: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let p = cfg.past_obs;
    let tail = |xs: &[f64]| -> Result<Vec<f64>> {
        if xs.len() < p {
            return Err(Error::WindowLength {
                expected: p,
                got: xs.len(),
            });
        }
        Ok(xs[xs.len() - p..].to_vec())
    };
    let target: Vec<f64> = tail(history)?.iter().map(|&v| client.norm.normalize(v)).collect();
    let window = match (cfg.exogenous, exogenous, &client.exogenous) {
        (false, _, _) => target,
        (true, Some(exo), Some((_, norm))) => target
            .into_iter()
            .zip(tail(exo)?.into_iter().map(|v| norm.normalize(v)))
            .flat_map(|(a, b)| [a, b])
            .collect(),
        (true, _, _) => return Err(Error::invalid("exogenous history is required by this learner")),
    };
    forecast(cfg, weights, &window, &client.norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{LearnerKind, TargetKind};
    use crate::model::TimeSeries;

    fn sine_client(len: usize) -> ClientDataset {
        let values = (0..len)
            .map(|k| 3.0 + 2.0 * libm::sin(2.0 * core::f64::consts::PI * k as f64 / 24.0))
            .collect();
        ClientDataset::new("b000", TargetKind::Demand, TimeSeries::new(0, values))
    }

    fn small_cfg() -> LearnerConfig {
        LearnerConfig {
            past_obs: 24,
            epochs: 6,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn windows_cover_every_offset() {
        let w = Windows::from_flat(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, 1, 1).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.input(2), &[2.0, 3.0]);
        assert_eq!(w.target(2), &[4.0]);
        assert!(matches!(
            Windows::from_flat(&[0.0, 1.0], 2, 1, 1),
            Err(Error::DataTooShort { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = sine_client(200);
        let cfg = LearnerConfig { epochs: 0, ..small_cfg() };
        let init = initial_weights(&cfg, &mut seeded(0));
        let (w, loss) = local_train(&ds, &init, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(w, init);
        assert_eq!(loss, validation_loss(&ds, &init, &cfg).unwrap());
    }

    #[test]
    fn short_series_is_rejected() {
        let ds = sine_client(25);
        let cfg = small_cfg();
        let init = initial_weights(&cfg, &mut seeded(0));
        let err = local_train(&ds, &init, &cfg, &mut seeded(1)).unwrap_err();
        assert!(matches!(err, Error::DataTooShort { needed: 26, got: 25 }));
    }

    #[test]
    fn linear_learner_fits_a_periodic_signal() {
        let ds = sine_client(24 * 30);
        let cfg = small_cfg();
        let init = initial_weights(&cfg, &mut seeded(0));
        let before = validation_loss(&ds, &init, &cfg).unwrap();
        let (w, after) = local_train(&ds, &init, &cfg, &mut seeded(1)).unwrap();
        assert!(after < 0.1 * before, "{before} -> {after}");
        assert_eq!(after, validation_loss(&ds, &w, &cfg).unwrap());
    }

    #[test]
    fn best_epoch_is_returned() {
        let ds = sine_client(24 * 20);
        let cfg = small_cfg();
        let init = initial_weights(&cfg, &mut seeded(0));
        let (_, best) = local_train(&ds, &init, &cfg, &mut seeded(1)).unwrap();
        for e in 1..=cfg.epochs {
            let partial = LearnerConfig { epochs: e, ..cfg };
            let (_, loss) = local_train(&ds, &init, &partial, &mut seeded(1)).unwrap();
            assert!(best <= loss);
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = sine_client(24 * 10);
        let cfg = LearnerConfig {
            kind: LearnerKind::Recurrent,
            cells_input: 4,
            cells_hidden: 4,
            epochs: 1,
            ..small_cfg()
        };
        let a = train_local_only(&ds, &cfg, 9).unwrap();
        let b = train_local_only(&ds, &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = train_local_only(&ds, &cfg, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn forecast_checks_window_and_denormalizes() {
        let ds = sine_client(24 * 10);
        let cfg = small_cfg();
        let zero = ModelWeights::zeros(cfg.arch_tag(), cfg.model().n_params());
        let out = forecast(&cfg, &zero, &[0.0; 24], &ds.norm).unwrap();
        assert_eq!(out, vec![ds.norm.min]);
        assert!(matches!(
            forecast(&cfg, &zero, &[0.0; 23], &ds.norm),
            Err(Error::WindowLength { expected: 24, got: 23 })
        ));
        let wrong = ModelWeights::zeros("other", 3);
        assert!(matches!(
            forecast(&cfg, &wrong, &[0.0; 24], &ds.norm),
            Err(Error::IncompatibleWeights(_))
        ));
        let next = forecast_next(&cfg, &zero, &ds, ds.series.values(), None).unwrap();
        assert_eq!(next, out);
    }
}
