//! Per-building demand and generation forecasters trained locally or with
//! federated averaging.
//!
//! Every learner maps a window of `past_obs` normalized observations (one or
//! two channels: the target and an optional exogenous weather column) to the
//! next `future_obs` normalized values. Parameters live in one flat vector,
//! [`ModelWeights`], which is what the server averages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TimeSeries;
use crate::rng::SimRng;

mod federated;
mod linear;
mod recurrent;
mod train;

pub use federated::{
    client_seed, fedavg, run_federated, run_federated_with, select_participants, FedConfig,
    FederatedRun, TrainJob, TrainLogEntry,
};
pub use linear::LinearAr;
pub use recurrent::Recurrent;
pub use train::{forecast, forecast_next, local_train, train_local_only, validation_loss, Windows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    /// Linear map from the lag window to the outputs, plus bias.
    LinearAr,
    /// Stacked ReLU LSTM layers, dropout, dense output.
    Recurrent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual moment decays; state is reset on every local
    /// training call.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Demand,
    Generation,
    /// Demand minus generation, for forecasting an aggregate directly.
    Net,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Demand => "demand",
            TargetKind::Generation => "generation",
            TargetKind::Net => "net",
        }
    }
}

impl core::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    /// Local epochs per training call.
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of windows (chronologically last) held out for validation.
    pub val_split: f64,
    pub past_obs: usize,
    pub future_obs: usize,
    /// Cells of the first recurrent layer.
    pub cells_input: usize,
    /// Cells of every further recurrent layer.
    pub cells_hidden: usize,
    pub kind: LearnerKind,
    pub learning_rate: f64,
    /// Dropout rate after the last two recurrent layers.
    pub dropout: f64,
    pub recurrent_layers: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Feed an exogenous (weather) channel next to the target.
    pub exogenous: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 4,
            val_split: 0.25,
            past_obs: 96,
            future_obs: 1,
            cells_input: 16,
            cells_hidden: 16,
            kind: LearnerKind::LinearAr,
            learning_rate: 1e-3,
            dropout: 0.2,
            recurrent_layers: 2,
            optimizer: Optimizer::Adam,
            grad_clip: 5.0,
            exogenous: false,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            return Err(Error::invalid("val_split must lie in (0, 1)"));
        }
        if self.past_obs == 0 || self.future_obs == 0 {
            return Err(Error::invalid("past_obs and future_obs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.kind == LearnerKind::Recurrent
            && (self.recurrent_layers == 0 || self.cells_input == 0 || self.cells_hidden == 0)
        {
            return Err(Error::invalid("recurrent learner needs >= 1 layer with >= 1 cell"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        1 + usize::from(self.exogenous)
    }

    /// Flattened input length: `past_obs × channels`, time-major.
    pub fn input_len(&self) -> usize {
        self.past_obs * self.channels()
    }

    pub fn model(&self) -> Model {
        match self.kind {
            LearnerKind::LinearAr => Model::Linear(LinearAr::new(self.input_len(), self.future_obs)),
            LearnerKind::Recurrent => {
                let mut sizes = vec![self.cells_input];
                sizes.extend(core::iter::repeat(self.cells_hidden).take(self.recurrent_layers - 1));
                Model::Recurrent(Recurrent::new(
                    self.channels(),
                    self.past_obs,
                    &sizes,
                    self.future_obs,
                    self.dropout,
                ))
            }
        }
    }

    pub fn arch_tag(&self) -> String {
        self.model().arch_tag()
    }
}

/// Flat parameter vector bound to an architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub params: Vec<f64>,
    pub arch_tag: String,
}

impl ModelWeights {
    pub fn new(arch_tag: impl Into<String>, params: Vec<f64>) -> Result<Self> {
        let w = Self {
            params,
            arch_tag: arch_tag.into(),
        };
        if w.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::IncompatibleWeights("non-finite parameter".into()));
        }
        Ok(w)
    }

    pub fn zeros(arch_tag: impl Into<String>, len: usize) -> Self {
        Self {
            params: vec![0.0; len],
            arch_tag: arch_tag.into(),
        }
    }

    pub fn is_averageable_with(&self, other: &ModelWeights) -> bool {
        self.arch_tag == other.arch_tag && self.params.len() == other.params.len()
    }

    pub(crate) fn check_for(&self, cfg: &LearnerConfig) -> Result<Model> {
        let model = cfg.model();
        let tag = model.arch_tag();
        if self.arch_tag != tag || self.params.len() != model.n_params() {
            return Err(Error::IncompatibleWeights(format!(
                "weights are {} ({} params), learner is {} ({} params)",
                self.arch_tag,
                self.params.len(),
                tag,
                model.n_params()
            )));
        }
        Ok(model)
    }
}

/// Starting weights for a fresh learner: zeros for the linear learner, a
/// seeded Glorot draw for the recurrent one (all-zero LSTM weights leave the
/// ReLU cells dead).
pub fn initial_weights(cfg: &LearnerConfig, rng: &mut SimRng) -> ModelWeights {
    let model = cfg.model();
    ModelWeights {
        params: model.init_params(rng),
        arch_tag: model.arch_tag(),
    }
}

/// Min-max scaling fitted on a building's training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: &[f64]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if min.is_finite() {
            Self { min, max }
        } else {
            Self { min: 0.0, max: 1.0 }
        }
    }

    /// Range used for scaling; a flat series scales by 1.
    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.span()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.span() + self.min
    }
}

/// One building's training data for one forecast system.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub building: String,
    pub target: TargetKind,
    /// Raw training series, kW.
    pub series: TimeSeries,
    pub norm: MinMax,
    pub exogenous: Option<(TimeSeries, MinMax)>,
}

impl ClientDataset {
    /// Fits the normalization on `series` (the training portion only).
    pub fn new(building: impl Into<String>, target: TargetKind, series: TimeSeries) -> Self {
        let norm = MinMax::fit(series.values());
        Self {
            building: building.into(),
            target,
            series,
            norm,
            exogenous: None,
        }
    }

    pub fn with_exogenous(mut self, exo: TimeSeries) -> Result<Self> {
        if !exo.is_aligned_with(&self.series) {
            return Err(Error::Misaligned);
        }
        let norm = MinMax::fit(exo.values());
        self.exogenous = Some((exo, norm));
        Ok(self)
    }

    /// Normalized observations, interleaved time-major with the exogenous
    /// channel when present.
    pub fn normalized(&self) -> Vec<f64> {
        let target = self.series.values().iter().map(|&v| self.norm.normalize(v));
        match &self.exogenous {
            None => target.collect(),
            Some((exo, n)) => target
                .zip(exo.values().iter().map(|&v| n.normalize(v)))
                .flat_map(|(a, b)| [a, b])
                .collect(),
        }
    }
}

/// Concrete learner behind a [`LearnerConfig`].
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearAr),
    Recurrent(Recurrent),
}

impl Model {
    pub fn arch_tag(&self) -> String {
        match self {
            Model::Linear(m) => m.arch_tag(),
            Model::Recurrent(m) => m.arch_tag(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Model::Linear(m) => m.n_params(),
            Model::Recurrent(m) => m.n_params(),
        }
    }

    pub fn init_params(&self, rng: &mut SimRng) -> Vec<f64> {
        match self {
            Model::Linear(m) => m.init_params(),
            Model::Recurrent(m) => m.init_params(rng),
        }
    }

    pub fn predict(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        match self {
            Model::Linear(m) => m.predict(params, input),
            Model::Recurrent(m) => m.predict(params, input),
        }
    }

    /// Mean squared error over `batch` and its gradient, written into `grad`.
    /// With `dropout` the recurrent learner draws masks from the generator.
    pub fn loss_grad(
        &self,
        params: &[f64],
        windows: &Windows,
        batch: &[usize],
        dropout: Option<&mut SimRng>,
        grad: &mut [f64],
    ) -> f64 {
        match self {
            Model::Linear(m) => m.loss_grad(params, windows, batch, grad),
            Model::Recurrent(m) => m.loss_grad(params, windows, batch, dropout, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_roundtrip_and_flat_series() {
        let n = MinMax::fit(&[2.0, 4.0, 3.0]);
        assert_eq!(n.normalize(2.0), 0.0);
        assert_eq!(n.normalize(4.0), 1.0);
        assert_eq!(n.denormalize(0.5), 3.0);
        let flat = MinMax::fit(&[5.0, 5.0]);
        assert_eq!(flat.normalize(5.0), 0.0);
        assert_eq!(flat.denormalize(0.0), 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::default().validate().is_ok());
        let bad = LearnerConfig {
            val_split: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LearnerConfig {
            past_obs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arch_tags_distinguish_shapes() {
        let lin = LearnerConfig::default();
        let rec = LearnerConfig {
            kind: LearnerKind::Recurrent,
            ..lin
        };
        assert_ne!(lin.arch_tag(), rec.arch_tag());
        let wider = LearnerConfig { past_obs: 48, ..lin };
        assert_ne!(lin.arch_tag(), wider.arch_tag());
        assert_eq!(lin.model().n_params(), 97);
    }

    #[test]
    fn exogenous_channel_interleaves() {
        let ds = ClientDataset::new("b", TargetKind::Demand, TimeSeries::new(0, vec![0.0, 2.0]))
            .with_exogenous(TimeSeries::new(0, vec![10.0, 20.0]))
            .unwrap();
        assert_eq!(ds.normalized(), vec![0.0, 0.0, 1.0, 1.0]);
        let misaligned = ClientDataset::new("b", TargetKind::Demand, TimeSeries::new(0, vec![0.0]))
            .with_exogenous(TimeSeries::new(0, vec![1.0, 2.0]));
        assert!(misaligned.is_err());
    }
}
