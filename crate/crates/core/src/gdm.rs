//! Growing dual-memory learning: an episodic network (G-EM) with temporal
//! synapses feeding a semantic network (G-SM), plus internally generated
//! replay.
//!
//! G-EM grows unsupervised on the raw feature stream and votes instance
//! labels; G-SM consumes G-EM prototype activations, votes category labels,
//! and gates its growth on misclassification. Temporal synapses count
//! consecutive BMU transitions; from them, reactivated neural activity
//! trajectories (RNATs) are generated and replayed to both memories when the
//! next learning episode arrives — no input examples are ever stored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gwr::{GammaGwrConfig, GammaGwrNet, InsertGate};

/// Directed transition strengths between G-EM neurons: `(i, j)` holds the
/// strength of observing neuron `j` immediately before neuron `i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemporalSynapses {
    strengths: BTreeMap<(usize, usize), f64>,
}

impl TemporalSynapses {
    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.strengths.get(&(to, from)).copied().unwrap_or(0.0)
    }

    pub fn observe(&mut self, prev: usize, cur: usize) {
        *self.strengths.entry((cur, prev)).or_insert(0.0) += 1.0;
    }

    /// Drop every synapse touching a pruned neuron.
    pub fn remove_neuron(&mut self, id: usize) {
        self.strengths.retain(|&(to, from), _| to != id && from != id);
    }

    pub fn is_empty(&self) -> bool {
        self.strengths.is_empty()
    }

    /// Sparse triplet view (to, from, strength).
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.strengths
            .iter()
            .map(|(&(to, from), &s)| (to, from, s))
            .collect()
    }

    /// Strongest successor of `from` among `live` ids excluding `exclude`;
    /// ties (including all-zero columns) resolve to the lowest id.
    fn strongest_successor<'a>(
        &self,
        from: usize,
        exclude: usize,
        live: impl Iterator<Item = usize> + 'a,
    ) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for id in live {
            if id == exclude {
                continue;
            }
            let s = self.get(id, from);
            match best {
                None => best = Some((id, s)),
                Some((_, bs)) if s > bs => best = Some((id, s)),
                _ => {}
            }
        }
        best.map(|(id, _)| id)
    }
}

/// One reactivated neural activity trajectory: lambda + 1 prototype weight
/// vectors starting at the seed neuron, plus the seed's majority instance
/// label as teaching signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rnat {
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

impl Rnat {
    /// Trajectory window lambda; the vector list holds lambda + 1 entries.
    pub fn lambda(&self) -> usize {
        self.ids.len() - 1
    }
}

/// One labeled observation for dual-memory training: instance label for the
/// episodic memory, category label for the semantic memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdmExample {
    pub x: Vec<f64>,
    pub instance: usize,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdmConfig {
    pub gem: GammaGwrConfig,
    pub gsm: GammaGwrConfig,
    pub replay_enabled: bool,
}

impl Default for GdmConfig {
    fn default() -> Self {
        GdmConfig {
            gem: GammaGwrConfig::with_context_depth(2),
            gsm: GammaGwrConfig::with_context_depth(2),
            replay_enabled: true,
        }
    }
}

/// Report of one learning episode (one pass over a mini-batch).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub gem_neurons: usize,
    pub gsm_neurons: usize,
    pub gem_insertions: usize,
    pub gsm_insertions: usize,
    /// RNATs replayed at the start of this episode (0 for the first episode
    /// and for replay-disabled memories).
    pub replayed: usize,
}

/// Episodic + semantic growing memories with temporal synapses and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GdmSnapshot", into = "GdmSnapshot")]
pub struct DualMemory {
    gem: GammaGwrNet,
    gsm: GammaGwrNet,
    synapses: TemporalSynapses,
    replay_enabled: bool,
    /// Replay fires when the next episode arrives, not inside the episode
    /// that generated the transitions.
    replay_pending: bool,
    prev_gem_bmu: Option<usize>,
    /// Instance -> category mapping learned from the stream; each instance
    /// belongs to exactly one category.
    instance_category: BTreeMap<usize, usize>,
}

impl DualMemory {
    pub fn new(dim: usize, config: GdmConfig) -> Result<Self> {
        let gem = GammaGwrNet::new(dim, config.gem)?;
        let gsm = GammaGwrNet::new(dim, config.gsm)?;
        Ok(DualMemory {
            gem,
            gsm,
            synapses: TemporalSynapses::default(),
            replay_enabled: config.replay_enabled,
            replay_pending: false,
            prev_gem_bmu: None,
            instance_category: BTreeMap::new(),
        })
    }

    pub fn gem(&self) -> &GammaGwrNet {
        &self.gem
    }

    pub fn gsm(&self) -> &GammaGwrNet {
        &self.gsm
    }

    pub fn synapses(&self) -> &TemporalSynapses {
        &self.synapses
    }

    pub fn replay_enabled(&self) -> bool {
        self.replay_enabled
    }

    /// RNAT window: K_EM + K_SM + 1.
    pub fn lambda(&self) -> usize {
        self.gem.config().context_depth + self.gsm.config().context_depth + 1
    }

    pub fn instance_category_map(&self) -> &BTreeMap<usize, usize> {
        &self.instance_category
    }

    /// Strengthen the temporal synapse for the transition `prev -> cur`.
    pub fn observe_transition(&mut self, prev: usize, cur: usize) -> Result<()> {
        if self.gem.neuron(prev).is_none() {
            return Err(Error::state(format!("neuron {prev} is not live in G-EM")));
        }
        if self.gem.neuron(cur).is_none() {
            return Err(Error::state(format!("neuron {cur} is not live in G-EM")));
        }
        self.synapses.observe(prev, cur);
        Ok(())
    }

    /// Generate the reactivated trajectory seeded at G-EM neuron `j`:
    /// lambda + 1 prototype vectors following the strongest temporal
    /// successors, never revisiting the seed.
    pub fn generate_rnat(&self, j: usize) -> Result<Rnat> {
        if self.gem.neuron_count() < 2 {
            return Err(Error::state(
                "RNAT generation needs at least two G-EM neurons",
            ));
        }
        let seed = self
            .gem
            .neuron(j)
            .ok_or_else(|| Error::state(format!("neuron {j} is not live in G-EM")))?;
        let lambda = self.lambda();
        let mut ids = Vec::with_capacity(lambda + 1);
        ids.push(j);
        for i in 1..=lambda {
            let from = ids[i - 1];
            let next = self
                .synapses
                .strongest_successor(from, j, self.gem.neuron_ids())
                .expect("two or more neurons leave a non-seed candidate");
            ids.push(next);
        }
        let vectors = ids
            .iter()
            .map(|&id| self.gem.neuron(id).expect("live id").weight.clone())
            .collect();
        Ok(Rnat {
            ids,
            vectors,
            label: seed.majority_label(),
        })
    }

    /// Current G-EM prototype for an input: the BMU weight vector, not the
    /// raw input. This is the pathway feeding the semantic memory.
    pub fn gem_to_gsm(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (b, _, _) = self.gem.find_bmu(x)?;
        Ok(self.gem.neuron(b).expect("bmu is live").weight.clone())
    }

    /// Generate one RNAT per G-EM neuron and feed every trajectory to both
    /// memories as training sequences. Consumes no external example storage.
    /// Returns the number of replayed trajectories.
    pub fn replay_all(&mut self) -> Result<usize> {
        if self.gem.neuron_count() < 2 {
            return Ok(0);
        }
        let seeds: Vec<usize> = self.gem.neuron_ids().collect();
        let rnats: Vec<Rnat> = seeds
            .iter()
            .map(|&j| self.generate_rnat(j))
            .collect::<Result<_>>()?;
        for rnat in &rnats {
            let sm_label = rnat
                .label
                .and_then(|i| self.instance_category.get(&i).copied());
            for v in &rnat.vectors {
                let step = self.gem.train_step(v, rnat.label)?;
                for p in &step.pruned {
                    self.synapses.remove_neuron(*p);
                }
                let sm_in = self.gem.neuron(step.bmu).expect("bmu is live").weight.clone();
                self.gsm
                    .train_step_with(&sm_in, sm_label, InsertGate::OnMisclassify)?;
            }
        }
        // replay breaks the observed transition chain
        self.prev_gem_bmu = None;
        Ok(rnats.len())
    }

    /// One learning episode over a mini-batch: pending replay first (replay
    /// accompanies novel experience), then per example a G-EM step with
    /// transition observation and a gated G-SM step on the G-EM prototype.
    pub fn train_episode(&mut self, batch: &[GdmExample]) -> Result<EpisodeReport> {
        if batch.is_empty() {
            return Err(Error::invalid("train_episode needs a non-empty batch"));
        }
        let mut report = EpisodeReport::default();
        if self.replay_enabled && self.replay_pending {
            report.replayed = self.replay_all()?;
        }
        self.prev_gem_bmu = None;
        for example in batch {
            match self.instance_category.get(&example.instance) {
                Some(&c) if c != example.category => {
                    return Err(Error::invalid(format!(
                        "instance {} maps to category {c}, not {}",
                        example.instance, example.category
                    )));
                }
                None => {
                    self.instance_category
                        .insert(example.instance, example.category);
                }
                _ => {}
            }

            let step = self.gem.train_step(&example.x, Some(example.instance))?;
            for p in &step.pruned {
                self.synapses.remove_neuron(*p);
                if self.prev_gem_bmu == Some(*p) {
                    self.prev_gem_bmu = None;
                }
            }
            if let Some(prev) = self.prev_gem_bmu {
                self.synapses.observe(prev, step.bmu);
            }
            self.prev_gem_bmu = Some(step.bmu);
            report.gem_insertions += usize::from(step.inserted.is_some());

            let sm_in = self.gem.neuron(step.bmu).expect("bmu is live").weight.clone();
            let sm_step =
                self.gsm
                    .train_step_with(&sm_in, Some(example.category), InsertGate::OnMisclassify)?;
            report.gsm_insertions += usize::from(sm_step.inserted.is_some());
        }
        self.replay_pending = true;
        report.gem_neurons = self.gem.neuron_count();
        report.gsm_neurons = self.gsm.neuron_count();
        Ok(report)
    }

    /// Instance-level classification from episodic label histograms.
    pub fn classify_instance(&self, sequence: &[Vec<f64>]) -> Result<usize> {
        self.gem.classify(sequence)
    }

    /// Category-level classification: the sequence is mapped through the
    /// G-EM prototype pathway and voted by the semantic memory.
    pub fn classify_category(&self, sequence: &[Vec<f64>]) -> Result<usize> {
        let trajectory = self.gem.bmu_trajectory(sequence)?;
        let prototypes: Vec<Vec<f64>> = trajectory
            .into_iter()
            .map(|id| self.gem.neuron(id).expect("live id").weight.clone())
            .collect();
        self.gsm.classify(&prototypes)
    }
}

/// Flat serialization form: both network snapshots, the synapses as sparse
/// triplets, and the derived trajectory window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdmSnapshot {
    pub gem: GammaGwrNet,
    pub gsm: GammaGwrNet,
    pub synapses: Vec<SynapseTriplet>,
    pub lambda: usize,
    pub replay_enabled: bool,
    pub replay_pending: bool,
    pub prev_gem_bmu: Option<usize>,
    pub instance_category: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynapseTriplet {
    pub to: usize,
    pub from: usize,
    pub strength: f64,
}

impl From<DualMemory> for GdmSnapshot {
    fn from(dual: DualMemory) -> Self {
        let lambda = dual.lambda();
        GdmSnapshot {
            lambda,
            synapses: dual
                .synapses
                .triplets()
                .into_iter()
                .map(|(to, from, strength)| SynapseTriplet { to, from, strength })
                .collect(),
            gem: dual.gem,
            gsm: dual.gsm,
            replay_enabled: dual.replay_enabled,
            replay_pending: dual.replay_pending,
            prev_gem_bmu: dual.prev_gem_bmu,
            instance_category: dual.instance_category,
        }
    }
}

impl TryFrom<GdmSnapshot> for DualMemory {
    type Error = Error;

    fn try_from(snap: GdmSnapshot) -> Result<Self> {
        let expect = snap.gem.config().context_depth + snap.gsm.config().context_depth + 1;
        if snap.lambda != expect {
            return Err(Error::invalid(format!(
                "lambda {} does not match K_EM + K_SM + 1 = {expect}",
                snap.lambda
            )));
        }
        if snap.gem.dim() != snap.gsm.dim() {
            return Err(Error::invalid("G-EM and G-SM dimensions differ"));
        }
        let mut synapses = TemporalSynapses::default();
        for t in snap.synapses {
            if snap.gem.neuron(t.to).is_none() || snap.gem.neuron(t.from).is_none() {
                return Err(Error::invalid("synapse references a dead G-EM neuron"));
            }
            if !t.strength.is_finite() || t.strength < 0.0 {
                return Err(Error::invalid("synapse strengths must be non-negative"));
            }
            synapses.strengths.insert((t.to, t.from), t.strength);
        }
        Ok(DualMemory {
            gem: snap.gem,
            gsm: snap.gsm,
            synapses,
            replay_enabled: snap.replay_enabled,
            replay_pending: snap.replay_pending,
            prev_gem_bmu: snap.prev_gem_bmu,
            instance_category: snap.instance_category,
        })
    }
}
