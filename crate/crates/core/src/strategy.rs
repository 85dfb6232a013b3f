//! Strategy drivers: one uniform per-batch interface over the naive
//! fine-tuning baseline, the CWR family, the AR1 family with latent replay,
//! and the growing-network learners.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::gdm::{DualMemory, GdmConfig, GdmExample};
use crate::gwr::{GammaGwrConfig, GammaGwrNet};
use crate::heads::{ConsolidationPolicy, HeadState};
use crate::reg::{ar1_train_batch, joint_sgd_step, Ar1Config, LatentReplayBuffer, SIState};
use crate::stream::TrainingBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Naive,
    Cwr,
    CwrPlus,
    CwrStar,
    Ar1,
    Ar1Star,
    Ar1StarFree,
    Gwr,
    Gdm,
    GdmNoReplay,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Naive,
        StrategyKind::Cwr,
        StrategyKind::CwrPlus,
        StrategyKind::CwrStar,
        StrategyKind::Ar1,
        StrategyKind::Ar1Star,
        StrategyKind::Ar1StarFree,
        StrategyKind::Gwr,
        StrategyKind::Gdm,
        StrategyKind::GdmNoReplay,
    ];

    /// Name safe for file stems ("cwr+" -> "cwrplus").
    pub fn file_stem(&self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Cwr => "cwr",
            StrategyKind::CwrPlus => "cwrplus",
            StrategyKind::CwrStar => "cwrstar",
            StrategyKind::Ar1 => "ar1",
            StrategyKind::Ar1Star => "ar1star",
            StrategyKind::Ar1StarFree => "ar1starfree",
            StrategyKind::Gwr => "gwr",
            StrategyKind::Gdm => "gdm",
            StrategyKind::GdmNoReplay => "gdm-noreplay",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Cwr => "cwr",
            StrategyKind::CwrPlus => "cwr+",
            StrategyKind::CwrStar => "cwr*",
            StrategyKind::Ar1 => "ar1",
            StrategyKind::Ar1Star => "ar1*",
            StrategyKind::Ar1StarFree => "ar1*free",
            StrategyKind::Gwr => "gwr",
            StrategyKind::Gdm => "gdm",
            StrategyKind::GdmNoReplay => "gdm-noreplay",
        };
        f.write_str(s)
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(StrategyKind::Naive),
            "cwr" => Ok(StrategyKind::Cwr),
            "cwr+" => Ok(StrategyKind::CwrPlus),
            "cwr*" => Ok(StrategyKind::CwrStar),
            "ar1" => Ok(StrategyKind::Ar1),
            "ar1*" => Ok(StrategyKind::Ar1Star),
            "ar1*free" => Ok(StrategyKind::Ar1StarFree),
            "gwr" => Ok(StrategyKind::Gwr),
            "gdm" => Ok(StrategyKind::Gdm),
            "gdm-noreplay" => Ok(StrategyKind::GdmNoReplay),
            other => Err(Error::config(format!(
                "strategy.name: unknown strategy '{other}' (expected one of naive, cwr, cwr+, \
                 cwr*, ar1, ar1*, ar1*free, gwr, gdm, gdm-noreplay)"
            ))),
        }
    }
}

/// All strategy hyper-parameters with their defaults; the active strategy
/// reads the keys it understands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    // gradient family
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs_per_batch: usize,
    pub minibatch: usize,
    /// Activation-record position of the latent replay layer (0 = raw input).
    pub replay_layer: usize,
    pub rm_size: usize,
    pub lambda: f64,
    pub xi: f64,
    pub replay_fraction: f64,
    /// Learning-rate multiplier for layers below the replay layer; unset
    /// means 0.01 for ar1* and 0 for ar1*free.
    pub lr_below_replay: Option<f64>,
    pub cwr_batch_weight: f64,
    // growing networks
    pub context_depth: usize,
    pub max_neurons: usize,
    pub insertion_threshold: f64,
    pub habituation_threshold: f64,
    pub eps_b: f64,
    pub eps_n: f64,
    pub beta: f64,
    pub tau_b: f64,
    pub tau_n: f64,
    pub kappa: f64,
    pub max_edge_age: u32,
    /// Test points are presented as a sequence of this many repeats so the
    /// temporal context settles.
    pub eval_repeats: usize,
    // dual memory
    pub k_em: usize,
    pub k_sm: usize,
    pub gem_max_neurons: usize,
    pub gsm_max_neurons: usize,
    pub instances_per_category: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            name: "cwr+".into(),
            hidden: vec![64, 48],
            lr: 0.02,
            epochs_per_batch: 2,
            minibatch: 8,
            replay_layer: 2,
            rm_size: 200,
            lambda: 0.5,
            xi: 0.1,
            replay_fraction: 0.5,
            lr_below_replay: None,
            cwr_batch_weight: 1.0,
            context_depth: 2,
            max_neurons: 100,
            insertion_threshold: 0.85,
            habituation_threshold: 0.3,
            eps_b: 0.1,
            eps_n: 0.01,
            beta: 0.5,
            tau_b: 0.3,
            tau_n: 0.1,
            kappa: 1.05,
            max_edge_age: 50,
            eval_repeats: 8,
            k_em: 2,
            k_sm: 2,
            gem_max_neurons: 50,
            gsm_max_neurons: 50,
            instances_per_category: 1,
        }
    }
}

impl StrategyConfig {
    pub fn kind(&self) -> Result<StrategyKind> {
        self.name.parse()
    }

    fn gwr_config(&self, context_depth: usize, max_neurons: usize) -> GammaGwrConfig {
        let mut cfg = GammaGwrConfig::with_context_depth(context_depth);
        cfg.insertion_threshold = self.insertion_threshold;
        cfg.habituation_threshold = self.habituation_threshold;
        cfg.eps_b = self.eps_b;
        cfg.eps_n = self.eps_n;
        cfg.beta = self.beta;
        cfg.tau_b = self.tau_b;
        cfg.tau_n = self.tau_n;
        cfg.kappa = self.kappa;
        cfg.max_edge_age = self.max_edge_age;
        cfg.max_neurons = max_neurons;
        cfg
    }
}

/// Combined checkpoint of a gradient learner: the shared-layer network plus
/// the dual-weight head (with its consolidation counters) under its own key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub network: Network,
    pub head: HeadState,
}

/// Per-batch statistics of one learner.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BatchStats {
    /// Examples held in external memory after this batch (0 for everything
    /// except the replay-buffer strategies).
    pub stored_examples: usize,
    pub mean_loss: Option<f64>,
    pub si_penalty: Option<f64>,
    pub aging: Option<f64>,
    pub gem_neurons: Option<usize>,
    pub gsm_neurons: Option<usize>,
    pub replayed: Option<usize>,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 over seed + salt keeps component streams decorrelated
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct GradientLearner {
    kind: StrategyKind,
    net: Network,
    head: HeadState,
    si: Option<SIState>,
    buffer: Option<LatentReplayBuffer>,
    policy: Option<ConsolidationPolicy>,
    epochs: usize,
    lr: f64,
    minibatch: usize,
    replay_fraction: f64,
    replay_tap: usize,
    reinit_rng: ChaCha8Rng,
    batches_seen: usize,
}

impl GradientLearner {
    fn build(kind: StrategyKind, cfg: &StrategyConfig, n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if cfg.hidden.is_empty() {
            return Err(Error::config("strategy.hidden: needs at least one layer"));
        }
        let mut specs = Vec::with_capacity(cfg.hidden.len());
        let mut in_dim = dim;
        for &width in &cfg.hidden {
            specs.push(LayerSpec::new(in_dim, width, Activation::Rectifier));
            in_dim = width;
        }
        let mut net = Network::new(specs, derive_seed(seed, 1))?;
        if cfg.replay_layer > net.depth() {
            return Err(Error::config(format!(
                "strategy.replay_layer: {} out of range for {} layers",
                cfg.replay_layer,
                net.depth()
            )));
        }

        let (policy, si, buffer) = match kind {
            StrategyKind::Naive => (None, None, None),
            StrategyKind::Cwr => (Some(ConsolidationPolicy::cwr(cfg.cwr_batch_weight)?), None, None),
            StrategyKind::CwrPlus => (Some(ConsolidationPolicy::cwr_plus()), None, None),
            StrategyKind::CwrStar => (Some(ConsolidationPolicy::cwr_star()), None, None),
            StrategyKind::Ar1 => (
                Some(ConsolidationPolicy::cwr_plus()),
                Some(SIState::new(&net, cfg.xi, cfg.lambda)?),
                None,
            ),
            StrategyKind::Ar1Star | StrategyKind::Ar1StarFree => {
                let below = cfg.lr_below_replay.unwrap_or(match kind {
                    StrategyKind::Ar1StarFree => 0.0,
                    _ => 0.01,
                });
                let multipliers: Vec<f64> = (0..net.depth())
                    .map(|l| if l < cfg.replay_layer { below } else { 1.0 })
                    .collect();
                net.set_lr_multipliers(&multipliers)?;
                let buffer = LatentReplayBuffer::new(
                    cfg.rm_size,
                    cfg.replay_layer,
                    net.tap_dim(cfg.replay_layer)?,
                    derive_seed(seed, 2),
                )?;
                (
                    Some(ConsolidationPolicy::cwr_star()),
                    Some(SIState::new(&net, cfg.xi, cfg.lambda)?),
                    Some(buffer),
                )
            }
            _ => unreachable!("gradient learner built for a gradient strategy"),
        };
        let head = HeadState::new(n_classes, net.output_dim())?;
        Ok(GradientLearner {
            kind,
            net,
            head,
            si,
            buffer,
            policy,
            epochs: cfg.epochs_per_batch,
            lr: cfg.lr,
            minibatch: cfg.minibatch.max(1),
            replay_fraction: cfg.replay_fraction,
            replay_tap: cfg.replay_layer,
            reinit_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
            batches_seen: 0,
        })
    }

    /// Joint SGD over shared layers and head, no consolidation bookkeeping.
    fn joint_epochs(&mut self, batch: &TrainingBatch) -> Result<f64> {
        let mut last_epoch_loss = 0.0;
        for _ in 0..self.epochs {
            let mut loss_sum = 0.0;
            let mut chunks = 0;
            for chunk in batch.examples.chunks(self.minibatch) {
                let fresh: Vec<(&[f64], usize)> =
                    chunk.iter().map(|e| (e.x.as_slice(), e.y)).collect();
                let (loss, _, _) = joint_sgd_step(
                    &mut self.net,
                    &mut self.head,
                    &fresh,
                    &[],
                    0,
                    None,
                    self.lr,
                )?;
                loss_sum += loss;
                chunks += 1;
            }
            last_epoch_loss = loss_sum / chunks as f64;
        }
        Ok(last_epoch_loss)
    }

    fn train_batch(&mut self, batch: &TrainingBatch) -> Result<BatchStats> {
        let mut stats = BatchStats::default();
        match self.kind {
            StrategyKind::Naive => {
                stats.mean_loss = Some(self.joint_epochs(batch)?);
                self.head.copy_tw_to_cw();
            }
            StrategyKind::Cwr | StrategyKind::CwrPlus | StrategyKind::CwrStar => {
                let policy = self.policy.expect("cwr family has a policy");
                self.head.reinit_tw(&policy, &mut self.reinit_rng);
                if self.batches_seen == 0 {
                    // first batch trains the shared layers, which are frozen
                    // from then on
                    stats.mean_loss = Some(self.joint_epochs(batch)?);
                    let zeros = vec![0.0; self.net.depth()];
                    self.net.set_lr_multipliers(&zeros)?;
                } else {
                    let features: Vec<(Vec<f64>, usize)> = batch
                        .examples
                        .iter()
                        .map(|e| Ok((self.net.forward(&e.x)?.output().to_vec(), e.y)))
                        .collect::<Result<_>>()?;
                    let curve =
                        self.head
                            .train_batch(&features, self.epochs, self.lr, self.minibatch)?;
                    stats.mean_loss = curve.last().copied();
                }
                self.head.consolidate(&batch.class_set(), &policy)?;
            }
            StrategyKind::Ar1 | StrategyKind::Ar1Star | StrategyKind::Ar1StarFree => {
                let policy = self.policy.expect("ar1 family has a policy");
                self.head.reinit_tw(&policy, &mut self.reinit_rng);
                let cfg = Ar1Config {
                    policy,
                    epochs: self.epochs,
                    lr: self.lr,
                    minibatch: self.minibatch,
                    replay_fraction: self.replay_fraction,
                    replay_tap: self.replay_tap,
                };
                let si = self.si.as_mut().expect("ar1 family carries SI state");
                let report =
                    ar1_train_batch(&mut self.net, &mut self.head, si, self.buffer.as_mut(), batch, &cfg)?;
                stats.mean_loss = report.epoch_losses.last().copied();
                stats.si_penalty = Some(report.si_penalty);
                stats.aging = report.aging;
            }
            _ => unreachable!(),
        }
        self.batches_seen += 1;
        stats.stored_examples = self.buffer.as_ref().map_or(0, LatentReplayBuffer::len);
        Ok(stats)
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        let latent = self.net.forward(x)?;
        self.head.predict(latent.output())
    }

    pub fn head(&self) -> &HeadState {
        &self.head
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            network: self.net.clone(),
            head: self.head.clone(),
        }
    }
}

pub struct GwrLearner {
    net: GammaGwrNet,
    eval_repeats: usize,
}

impl GwrLearner {
    fn build(cfg: &StrategyConfig, dim: usize) -> Result<Self> {
        let net = GammaGwrNet::new(dim, cfg.gwr_config(cfg.context_depth, cfg.max_neurons))?;
        Ok(GwrLearner {
            net,
            eval_repeats: cfg.eval_repeats.max(1),
        })
    }

    fn train_batch(&mut self, batch: &TrainingBatch) -> Result<BatchStats> {
        for e in &batch.examples {
            self.net.train_step(&e.x, Some(e.y))?;
        }
        Ok(BatchStats {
            gem_neurons: Some(self.net.neuron_count()),
            ..BatchStats::default()
        })
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        let seq = vec![x.to_vec(); self.eval_repeats];
        match self.net.classify(&seq) {
            // a vote-less trajectory scores as a wrong prediction
            Err(Error::State(_)) => Ok(usize::MAX),
            other => other,
        }
    }

    pub fn network(&self) -> &GammaGwrNet {
        &self.net
    }
}

pub struct GdmLearner {
    dual: DualMemory,
    instances_per_category: usize,
    eval_repeats: usize,
}

impl GdmLearner {
    fn build(cfg: &StrategyConfig, dim: usize, replay_enabled: bool) -> Result<Self> {
        if cfg.instances_per_category < 1 {
            return Err(Error::config("strategy.instances_per_category: must be >= 1"));
        }
        let gdm_cfg = GdmConfig {
            gem: cfg.gwr_config(cfg.k_em, cfg.gem_max_neurons),
            gsm: cfg.gwr_config(cfg.k_sm, cfg.gsm_max_neurons),
            replay_enabled,
        };
        Ok(GdmLearner {
            dual: DualMemory::new(dim, gdm_cfg)?,
            instances_per_category: cfg.instances_per_category,
            eval_repeats: cfg.eval_repeats.max(1),
        })
    }

    fn category_of(&self, y: usize) -> usize {
        y / self.instances_per_category
    }

    fn train_batch(&mut self, batch: &TrainingBatch) -> Result<BatchStats> {
        let examples: Vec<GdmExample> = batch
            .examples
            .iter()
            .map(|e| GdmExample {
                x: e.x.clone(),
                instance: e.y,
                category: self.category_of(e.y),
            })
            .collect();
        let report = self.dual.train_episode(&examples)?;
        Ok(BatchStats {
            gem_neurons: Some(report.gem_neurons),
            gsm_neurons: Some(report.gsm_neurons),
            replayed: Some(report.replayed),
            ..BatchStats::default()
        })
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        let seq = vec![x.to_vec(); self.eval_repeats];
        match self.dual.classify_category(&seq) {
            // a vote-less trajectory scores as a wrong prediction
            Err(Error::State(_)) => Ok(usize::MAX),
            other => other,
        }
    }

    pub fn dual(&self) -> &DualMemory {
        &self.dual
    }
}

/// A strategy instance bound to one run.
#[allow(clippy::large_enum_variant)]
pub enum Learner {
    Gradient(GradientLearner),
    Gwr(GwrLearner),
    Gdm(GdmLearner),
}

impl Learner {
    pub fn build(cfg: &StrategyConfig, n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        let kind = cfg.kind()?;
        match kind {
            StrategyKind::Gwr => Ok(Learner::Gwr(GwrLearner::build(cfg, dim)?)),
            StrategyKind::Gdm => Ok(Learner::Gdm(GdmLearner::build(cfg, dim, true)?)),
            StrategyKind::GdmNoReplay => Ok(Learner::Gdm(GdmLearner::build(cfg, dim, false)?)),
            _ => Ok(Learner::Gradient(GradientLearner::build(
                kind, cfg, n_classes, dim, seed,
            )?)),
        }
    }

    pub fn train_batch(&mut self, batch: &TrainingBatch) -> Result<BatchStats> {
        match self {
            Learner::Gradient(l) => l.train_batch(batch),
            Learner::Gwr(l) => l.train_batch(batch),
            Learner::Gdm(l) => l.train_batch(batch),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        match self {
            Learner::Gradient(l) => l.predict(x),
            Learner::Gwr(l) => l.predict(x),
            Learner::Gdm(l) => l.predict(x),
        }
    }

    /// Ground-truth label in the learner's prediction space (the dual-memory
    /// learner predicts categories).
    pub fn target(&self, y: usize) -> usize {
        match self {
            Learner::Gdm(l) => l.category_of(y),
            _ => y,
        }
    }

    pub fn stored_examples(&self) -> usize {
        match self {
            Learner::Gradient(l) => l.buffer.as_ref().map_or(0, LatentReplayBuffer::len),
            _ => 0,
        }
    }
}
