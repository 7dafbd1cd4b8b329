//! TOML run configuration with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tec_core::consensus::{build_graph, CommGraph, ConsensusConfig, InnovationMode, Topology, TuningSchedule};
use tec_core::data::{Month, SplitMode};
use tec_core::forecast::LearnerConfig;
use tec_core::harness::{PredictionMethod, VppSchedule};
use tec_core::model::{CostCoefficients, VppSpec, INTERVALS_PER_DAY};

use crate::error::{Result, SimError};
use crate::io::{self, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Days generated per building, from January 1st.
    pub days: usize,
    pub communities: Vec<CommunityConfig>,
    pub consensus: ConsensusSettings,
    pub learner: LearnerConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            model_dir: "models".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityConfig {
    pub name: String,
    pub buildings: usize,
    pub split: SplitMode,
    pub rounds: usize,
    pub participants: usize,
    /// Community whose final global model seeds this one's federated run.
    #[serde(default)]
    pub transfer_from: Option<String>,
    /// Empty means [`default_vpps`] scaled to the community size.
    #[serde(default)]
    pub vpps: Vec<VppSpec>,
    #[serde(default = "default_topology")]
    pub topology: Topology,
    /// Edge-list file overriding `topology`.
    #[serde(default)]
    pub edge_file: Option<PathBuf>,
    /// 96 multipliers applied to every cost coefficient per interval.
    #[serde(default)]
    pub price_profile: Option<Vec<f64>>,
}

fn default_topology() -> Topology {
    Topology::Star
}

impl CommunityConfig {
    pub fn new(name: &str, buildings: usize, split: SplitMode, rounds: usize, participants: usize) -> Self {
        Self {
            name: name.into(),
            buildings,
            split,
            rounds,
            participants,
            transfer_from: None,
            vpps: Vec::new(),
            topology: Topology::Star,
            edge_file: None,
            price_profile: None,
        }
    }

    pub fn vpp_list(&self) -> Vec<VppSpec> {
        if self.vpps.is_empty() {
            default_vpps(self.buildings)
        } else {
            self.vpps.clone()
        }
    }

    pub fn schedule(&self) -> Result<VppSchedule> {
        let base = self.vpp_list();
        let schedule = match &self.price_profile {
            None => VppSchedule::Constant(base),
            Some(profile) => {
                if profile.len() != INTERVALS_PER_DAY {
                    return Err(SimError::Config(format!(
                        "community {}: price_profile needs {INTERVALS_PER_DAY} entries, has {}",
                        self.name,
                        profile.len()
                    )));
                }
                let scale = |c: &CostCoefficients, k: f64| CostCoefficients {
                    c1: c.c1 * k,
                    c2: c.c2 * k,
                };
                VppSchedule::PerInterval(
                    profile
                        .iter()
                        .map(|&k| {
                            base.iter()
                                .map(|v| VppSpec {
                                    g2c: scale(&v.g2c, k),
                                    c2g: scale(&v.c2g, k),
                                    ..v.clone()
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        schedule
            .validate()
            .map_err(|e| SimError::Config(format!("community {}: {e}", self.name)))?;
        Ok(schedule)
    }

    pub fn graph(&self, base_dir: &Path) -> Result<CommGraph> {
        let n = self.vpp_list().len();
        let topology = match &self.edge_file {
            Some(f) => Topology::EdgeList(io::load_edge_list(&base_dir.join(f), n)?),
            None => self.topology.clone(),
        };
        build_graph(&topology, n).map_err(|e| SimError::Config(format!("community {}: {e}", self.name)))
    }
}

/// Five heterogeneous VPPs sized for `buildings` prosumers: each can move
/// 1.2 kW per building either way, with quadratic costs shrinking as the
/// community grows so prices stay comparable.
pub fn default_vpps(buildings: usize) -> Vec<VppSpec> {
    let n = buildings.max(1) as f64;
    let shape = [(0.8, 2.0), (1.2, 1.5), (1.0, 2.5), (1.6, 1.0), (0.6, 3.0)];
    shape
        .iter()
        .enumerate()
        .map(|(k, &(a, c2))| VppSpec {
            id: format!("vpp{k}"),
            g2c: CostCoefficients { c1: a / n, c2 },
            c2g: CostCoefficients {
                c1: 1.2 * a / n,
                c2: 0.5 * c2,
            },
            p_max_g2c: 1.2 * n,
            p_max_c2g: 1.2 * n,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Tuning {
    Fixed {
        alpha0: f64,
        beta0: f64,
    },
    /// Grid search on the true demand of each simulated day.
    Sweep {
        alphas: Vec<f64>,
        betas: Vec<f64>,
        /// Use every `stride`-th interval of the day.
        stride: usize,
        /// Relative price tolerance a pair must reach.
        tol: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSettings {
    pub eps: f64,
    pub n_max: usize,
    pub mode: InnovationMode,
    pub divergence_factor: f64,
    pub decay_alpha: f64,
    pub decay_beta: f64,
    pub tuning: Tuning,
}

impl Default for ConsensusSettings {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            n_max: 50_000,
            mode: InnovationMode::FixedPoint,
            divergence_factor: 1e3,
            decay_alpha: 0.0,
            decay_beta: 0.0,
            tuning: Tuning::Sweep {
                alphas: vec![1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1, 0.2, 0.5],
                betas: vec![0.05, 0.1, 0.2, 0.3],
                stride: 8,
                tol: 1e-3,
            },
        }
    }
}

impl ConsensusSettings {
    /// Solver configuration with the given constant gains.
    pub fn with_gains(&self, alpha0: f64, beta0: f64) -> ConsensusConfig {
        ConsensusConfig {
            schedule: TuningSchedule {
                alpha0,
                beta0,
                decay_alpha: self.decay_alpha,
                decay_beta: self.decay_beta,
            },
            mode: self.mode,
            eps: self.eps,
            n_max: self.n_max,
            divergence_factor: self.divergence_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Forecast demand and generation per building, then compose.
    #[default]
    PerBuilding,
    /// Forecast the community's aggregate net demand with a single model.
    DirectAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub months: Vec<Month>,
    pub methods: Vec<PredictionMethod>,
    pub granularity: Granularity,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            months: vec![Month::April, Month::August, Month::December],
            methods: PredictionMethod::ALL.to_vec(),
            granularity: Granularity::PerBuilding,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = CommunityConfig::new("a", 100, SplitMode::FullHistory, 30, 5);
        let b = CommunityConfig {
            transfer_from: Some("a".into()),
            ..CommunityConfig::new("b", 25, SplitMode::Scarce28Day, 1, 25)
        };
        Self {
            seed: 42,
            paths: Paths::default(),
            days: 365,
            communities: vec![a, b],
            consensus: ConsensusSettings::default(),
            learner: LearnerConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub methods: Option<Vec<PredictionMethod>>,
    pub communities: Option<Vec<String>>,
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `overrides`. Relative
    /// paths in the file are resolved against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| SimError::io(p, e))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", p.display())))?;
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    for d in [&mut cfg.paths.data_dir, &mut cfg.paths.model_dir, &mut cfg.paths.out_dir] {
                        if d.is_relative() {
                            *d = dir.join(&*d);
                        }
                    }
                }
                cfg
            }
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.paths.out_dir = d.clone();
        }
        if let Some(m) = &o.methods {
            self.experiment.methods = m.clone();
        }
        if let Some(names) = &o.communities {
            self.communities.retain(|c| names.contains(&c.name));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.days == 0 {
            return bad("days must be >= 1".into());
        }
        if self.communities.is_empty() {
            return bad("no communities selected".into());
        }
        self.learner.validate().map_err(|e| SimError::Config(e.to_string()))?;
        if !(self.consensus.eps > 0.0) || self.consensus.n_max == 0 {
            return bad("consensus needs eps > 0 and n_max >= 1".into());
        }
        match &self.consensus.tuning {
            Tuning::Fixed { alpha0, beta0 } => self
                .consensus
                .with_gains(*alpha0, *beta0)
                .schedule
                .validate()
                .map_err(|e| SimError::Config(e.to_string()))?,
            Tuning::Sweep { alphas, betas, .. } if alphas.is_empty() || betas.is_empty() => {
                return bad("tuning sweep needs at least one alpha and one beta".into())
            }
            Tuning::Sweep { .. } => {}
        }
        for (i, c) in self.communities.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return bad(format!("invalid community name {:?}", c.name));
            }
            if self.communities[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("duplicate community {}", c.name));
            }
            if c.buildings == 0 {
                return bad(format!("community {} has no buildings", c.name));
            }
            if c.rounds == 0 || c.participants == 0 || c.participants > c.buildings {
                return bad(format!(
                    "community {}: need rounds >= 1 and 1 <= participants <= {}",
                    c.name, c.buildings
                ));
            }
            c.schedule()?;
        }
        Ok(())
    }

    pub fn community(&self, name: &str) -> Result<&CommunityConfig> {
        self.communities
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| SimError::Config(format!("unknown community {name:?}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            communities: Some(vec!["b".into()]),
            methods: Some(vec![PredictionMethod::Rnd]),
            ..Default::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.communities.len(), 1);
        assert_eq!(cfg.experiment.methods, vec![PredictionMethod::Rnd]);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n[consensus.tuning]\nkind = \"fixed\"\nalpha0 = 0.1\nbeta0 = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.communities.len(), 2);
        assert_eq!(cfg.consensus.tuning, Tuning::Fixed { alpha0: 0.1, beta0: 0.2 });
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.communities[1].participants = 26;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.communities[0].price_profile = Some(vec![1.0; 95]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn price_profile_scales_costs() {
        let mut c = CommunityConfig::new("x", 10, SplitMode::FullHistory, 1, 1);
        let mut profile = vec![1.0; 96];
        profile[5] = 2.0;
        c.price_profile = Some(profile);
        let s = c.schedule().unwrap();
        assert_eq!(s.at(5)[0].g2c.c1, 2.0 * s.at(0)[0].g2c.c1);
        assert_eq!(s.at(5)[0].p_max_g2c, s.at(0)[0].p_max_g2c);
    }
}
