use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{initial_weights, local_train, ClientDataset, LearnerConfig, ModelWeights, TargetKind};
use crate::error::{Error, Result};
use crate::math::compensated_sum;
use crate::rng::{derive_seed, seeded, SimRng};

const SELECT_STREAM: u64 = 0x5e1;
const CLIENT_STREAM: u64 = 0xc11;
const GLOBAL_INIT_STREAM: u64 = 0x6101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FedConfig {
    pub rounds: usize,
    /// Clients sampled per round, without replacement.
    pub participants: usize,
    pub seed: u64,
}

impl FedConfig {
    pub fn new(rounds: usize, participants: usize, seed: u64) -> Self {
        Self {
            rounds,
            participants,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub round: usize,
    pub building: String,
    pub target: TargetKind,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedRun {
    pub global: ModelWeights,
    pub log: Vec<TrainLogEntry>,
}

/// One client's share of a round, handed to the executor.
#[derive(Debug, Clone, Copy)]
pub struct TrainJob<'a> {
    pub round: usize,
    pub client: &'a ClientDataset,
    pub init: &'a ModelWeights,
    pub seed: u64,
}

impl TrainJob<'_> {
    pub fn run(&self, cfg: &LearnerConfig) -> Result<(ModelWeights, f64)> {
        local_train(self.client, self.init, cfg, &mut seeded(self.seed))
    }
}

/// Unweighted coordinate-wise mean. Each coordinate is summed in sorted
/// order, so the result does not depend on the order of `models`.
pub fn fedavg(models: &[ModelWeights]) -> Result<ModelWeights> {
    let first = models
        .first()
        .ok_or_else(|| Error::IncompatibleWeights("nothing to average".into()))?;
    if let Some(bad) = models.iter().find(|m| !m.is_averageable_with(first)) {
        return Err(Error::IncompatibleWeights(format!(
            "{} ({} params) vs {} ({} params)",
            first.arch_tag,
            first.params.len(),
            bad.arch_tag,
            bad.params.len()
        )));
    }
    if models.iter().any(|m| m.params.iter().any(|p| !p.is_finite())) {
        return Err(Error::IncompatibleWeights("non-finite parameter".into()));
    }
    let k = models.len() as f64;
    let mut column = Vec::with_capacity(models.len());
    let params = (0..first.params.len())
        .map(|j| {
            column.clear();
            column.extend(models.iter().map(|m| m.params[j]));
            column.sort_by(f64::total_cmp);
            if column[0] == column[column.len() - 1] {
                column[0]
            } else {
                compensated_sum(column.iter().copied()) / k
            }
        })
        .collect();
    Ok(ModelWeights {
        params,
        arch_tag: first.arch_tag.clone(),
    })
}

/// Draws `k` distinct client indices from `0..pool`, returned sorted.
pub fn select_participants(pool: usize, k: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    if k == 0 || k > pool {
        return Err(Error::Participants { requested: k, pool });
    }
    let mut picked = index::sample(rng, pool, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Training seed of client `index` in `round`.
pub fn client_seed(seed: u64, round: usize, index: usize) -> u64 {
    derive_seed(seed, &[CLIENT_STREAM, round as u64, index as u64])
}

/// Federated training with a serial executor.
pub fn run_federated(
    clients: &[ClientDataset],
    fed: &FedConfig,
    cfg: &LearnerConfig,
    init: Option<&ModelWeights>,
) -> Result<FederatedRun> {
    run_federated_with(clients, fed, cfg, init, |jobs| jobs.iter().map(|j| j.run(cfg)).collect())
}

/// Runs `fed.rounds` rounds: sample participants, train each from the
/// current global model, average. `execute` trains a round's jobs and must
/// return results in job order; the outcome is then independent of how it
/// schedules them.
///
/// Without `init` the global model starts from [`initial_weights`] seeded
/// from `fed.seed`.
pub fn run_federated_with<F>(
    clients: &[ClientDataset],
    fed: &FedConfig,
    cfg: &LearnerConfig,
    init: Option<&ModelWeights>,
    mut execute: F,
) -> Result<FederatedRun>
where
    F: FnMut(&[TrainJob<'_>]) -> Vec<Result<(ModelWeights, f64)>>,
{
    cfg.validate()?;
    if fed.rounds == 0 {
        return Err(Error::invalid("at least one round is required"));
    }
    if fed.participants == 0 || fed.participants > clients.len() {
        return Err(Error::Participants {
            requested: fed.participants,
            pool: clients.len(),
        });
    }
    let mut global = match init {
        Some(w) => {
            w.check_for(cfg)?;
            w.clone()
        }
        None => initial_weights(cfg, &mut seeded(derive_seed(fed.seed, &[GLOBAL_INIT_STREAM]))),
    };
    let mut select_rng = seeded(derive_seed(fed.seed, &[SELECT_STREAM]));
    let mut log = Vec::with_capacity(fed.rounds * fed.participants);
    for round in 1..=fed.rounds {
        let picked = select_participants(clients.len(), fed.participants, &mut select_rng)?;
        let jobs: Vec<TrainJob<'_>> = picked
            .iter()
            .map(|&b| TrainJob {
                round,
                client: &clients[b],
                init: &global,
                seed: client_seed(fed.seed, round, b),
            })
            .collect();
        let results = execute(&jobs);
        if results.len() != jobs.len() {
            return Err(Error::invalid("executor returned the wrong number of results"));
        }
        let mut trained = Vec::with_capacity(jobs.len());
        for (job, res) in jobs.iter().zip(results) {
            let (w, loss) = res.map_err(|e| Error::Client {
                round,
                building: job.client.building.clone(),
                source: Box::new(e),
            })?;
            log.push(TrainLogEntry {
                round,
                building: job.client.building.clone(),
                target: job.client.target,
                val_loss: loss,
            });
            trained.push(w);
        }
        drop(jobs);
        global = fedavg(&trained)?;
    }
    Ok(FederatedRun { global, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeSeries;
    use alloc::vec;

    fn w(params: Vec<f64>) -> ModelWeights {
        ModelWeights::new("t", params).unwrap()
    }

    #[test]
    fn fedavg_is_the_mean() {
        let avg = fedavg(&[w(vec![1.0, 2.0]), w(vec![3.0, 6.0])]).unwrap();
        assert_eq!(avg.params, vec![2.0, 4.0]);
    }

    #[test]
    fn fedavg_of_identical_models_is_identity() {
        let m = w(vec![0.1, -0.7, 1e-9]);
        assert_eq!(fedavg(&[m.clone(), m.clone(), m.clone()]).unwrap(), m);
    }

    #[test]
    fn fedavg_rejects_mismatches() {
        assert!(fedavg(&[]).is_err());
        assert!(fedavg(&[w(vec![1.0]), w(vec![1.0, 2.0])]).is_err());
        let other = ModelWeights::new("u", vec![1.0]).unwrap();
        assert!(fedavg(&[w(vec![1.0]), other]).is_err());
    }

    #[test]
    fn participants_are_distinct_and_bounded() {
        let mut rng = seeded(5);
        let p = select_participants(10, 5, &mut rng).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.windows(2).all(|x| x[0] < x[1]));
        assert!(p.iter().all(|&i| i < 10));
        assert!(select_participants(3, 4, &mut rng).is_err());
        assert!(select_participants(3, 0, &mut rng).is_err());
    }

    fn clients(n: usize) -> Vec<ClientDataset> {
        (0..n)
            .map(|b| {
                let values = (0..24 * 8)
                    .map(|k| 1.0 + b as f64 * 0.1 + libm::sin(k as f64 * 0.26 + b as f64))
                    .collect();
                ClientDataset::new(format!("b{b:03}"), TargetKind::Demand, TimeSeries::new(0, values))
            })
            .collect()
    }

    fn cfg() -> LearnerConfig {
        LearnerConfig {
            past_obs: 24,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn rounds_log_every_participant() {
        let cs = clients(6);
        let run = run_federated(&cs, &FedConfig::new(3, 2, 7), &cfg(), None).unwrap();
        assert_eq!(run.log.len(), 6);
        assert!(run.log.iter().all(|e| e.val_loss.is_finite()));
        assert_eq!(run.log[0].round, 1);
        assert_eq!(run.log[5].round, 3);
    }

    #[test]
    fn round_zero_weights_are_shared() {
        let cs = clients(4);
        let c = cfg();
        let mut seen = Vec::new();
        run_federated_with(&cs, &FedConfig::new(1, 4, 1), &c, None, |jobs| {
            seen.extend(jobs.iter().map(|j| j.init.clone()));
            jobs.iter().map(|j| j.run(&c)).collect()
        })
        .unwrap();
        assert_eq!(seen.len(), 4);
        assert!(seen.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn transfer_init_is_used() {
        let cs = clients(4);
        let c = cfg();
        let init = run_federated(&cs, &FedConfig::new(2, 2, 3), &c, None).unwrap().global;
        let mut seen = Vec::new();
        run_federated_with(&cs, &FedConfig::new(1, 4, 4), &c, Some(&init), |jobs| {
            seen.extend(jobs.iter().map(|j| j.init.clone()));
            jobs.iter().map(|j| j.run(&c)).collect()
        })
        .unwrap();
        assert!(seen.iter().all(|w| *w == init));
        let wrong = ModelWeights::zeros("nope", 2);
        assert!(run_federated(&cs, &FedConfig::new(1, 1, 0), &c, Some(&wrong)).is_err());
    }

    #[test]
    fn client_errors_carry_context() {
        let mut cs = clients(3);
        cs[1].series = TimeSeries::new(0, vec![1.0; 10]);
        let err = run_federated(&cs, &FedConfig::new(1, 3, 0), &cfg(), None).unwrap_err();
        match err {
            Error::Client { round, building, .. } => {
                assert_eq!(round, 1);
                assert_eq!(building, "b001");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(err_root(&cs), Error::DataTooShort { .. }));
    }

    fn err_root(cs: &[ClientDataset]) -> Error {
        run_federated(cs, &FedConfig::new(1, 3, 0), &cfg(), None)
            .unwrap_err()
            .root()
            .clone()
    }

    #[test]
    fn too_many_participants() {
        let cs = clients(2);
        assert!(matches!(
            run_federated(&cs, &FedConfig::new(1, 3, 0), &cfg(), None),
            Err(Error::Participants { requested: 3, pool: 2 })
        ));
    }
}
