//! Gamma-GWR: a grow-when-required network with temporal context descriptors,
//! habituation-gated plasticity, edge aging, and label-histogram
//! classification.
//!
//! Each neuron carries a weight vector plus K context descriptors; the
//! network keeps a matching set of K global context vectors blended from the
//! previous best-matching unit. Neurons are inserted only where the network
//! both matches poorly (low activity) and has already trained the local
//! winner (low habituation).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGwrConfig {
    /// Number of temporal context descriptors K.
    pub context_depth: usize,
    /// K+1 distance weights: `alpha[0]` scales the input term, `alpha[k]` the
    /// k-th context term.
    pub alpha: Vec<f64>,
    /// Context blend factor between previous BMU weight and its context.
    pub beta: f64,
    /// BMU learning rate.
    pub eps_b: f64,
    /// Neighbor learning rate, strictly below `eps_b`.
    pub eps_n: f64,
    /// Insertion activity threshold a_T.
    pub insertion_threshold: f64,
    /// Insertion habituation threshold h_T.
    pub habituation_threshold: f64,
    pub tau_b: f64,
    pub tau_n: f64,
    pub kappa: f64,
    pub max_edge_age: u32,
    pub max_neurons: usize,
}

impl GammaGwrConfig {
    /// Defaults with geometrically decaying context weights normalized to
    /// sum 1.
    pub fn with_context_depth(context_depth: usize) -> Self {
        let raw: Vec<f64> = (0..=context_depth).map(|k| 0.7 * 0.5_f64.powi(k as i32)).collect();
        let sum: f64 = raw.iter().sum();
        GammaGwrConfig {
            context_depth,
            alpha: raw.into_iter().map(|a| a / sum).collect(),
            beta: 0.5,
            eps_b: 0.1,
            eps_n: 0.01,
            insertion_threshold: 0.85,
            habituation_threshold: 0.3,
            tau_b: 0.3,
            tau_n: 0.1,
            kappa: 1.05,
            max_edge_age: 50,
            max_neurons: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.context_depth + 1 {
            return Err(Error::invalid(format!(
                "alpha needs {} entries for context depth {}",
                self.context_depth + 1,
                self.context_depth
            )));
        }
        if self.alpha.iter().any(|&a| !a.is_finite() || a <= 0.0) {
            return Err(Error::invalid("alpha components must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must be in [0, 1]"));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !positive(self.eps_b) || !positive(self.eps_n) || self.eps_n >= self.eps_b {
            return Err(Error::invalid("learning rates must satisfy 0 < eps_n < eps_b"));
        }
        if !open_unit(self.insertion_threshold) {
            return Err(Error::invalid("insertion_threshold must be in (0, 1)"));
        }
        if !open_unit(self.habituation_threshold) {
            return Err(Error::invalid("habituation_threshold must be in (0, 1)"));
        }
        if !positive(self.tau_b) || !positive(self.tau_n) || self.tau_n >= self.tau_b {
            return Err(Error::invalid("habituation rates must satisfy 0 < tau_n < tau_b"));
        }
        if !positive(self.kappa) {
            return Err(Error::invalid("kappa must be > 0"));
        }
        if self.max_edge_age == 0 {
            return Err(Error::invalid("max_edge_age must be >= 1"));
        }
        if self.max_neurons < 2 {
            return Err(Error::invalid("max_neurons must be >= 2"));
        }
        Ok(())
    }
}

impl Default for GammaGwrConfig {
    fn default() -> Self {
        GammaGwrConfig::with_context_depth(2)
    }
}

/// Prototype neuron: weight vector, K context descriptors, habituation
/// counter in [0, 1] (1 = fully plastic), and an associative label histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neuron {
    pub weight: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
    pub habituation: f64,
    pub label_hist: BTreeMap<usize, u64>,
}

impl Neuron {
    /// Majority label of the histogram, ties to the lowest label.
    pub fn majority_label(&self) -> Option<usize> {
        let mut best: Option<(usize, u64)> = None;
        for (&label, &count) in &self.label_hist {
            match best {
                Some((_, c)) if count <= c => {}
                _ => best = Some((label, count)),
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Result of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub bmu: usize,
    pub second: Option<usize>,
    pub distance: f64,
    pub inserted: Option<usize>,
    pub pruned: Vec<usize>,
}

/// Controls whether a training step may grow the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertGate {
    /// Default grow-when-required behavior.
    Always,
    /// Task-relevant modulation: suppress insertion when the BMU's majority
    /// label already matches the teaching signal.
    OnMisclassify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GwrSnapshot", into = "GwrSnapshot")]
pub struct GammaGwrNet {
    config: GammaGwrConfig,
    dim: usize,
    neurons: BTreeMap<usize, Neuron>,
    next_id: usize,
    /// Undirected edges keyed by (low id, high id), value is the age.
    edges: BTreeMap<(usize, usize), u32>,
    /// Global context vectors C_1..C_K, zero until a BMU exists.
    global_context: Vec<Vec<f64>>,
    /// Weight and contexts of the previous step's BMU.
    prev_bmu: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

/// Network activity for a BMU distance: exp(-d), 1 at a perfect match.
pub fn activity(d_b: f64) -> f64 {
    (-d_b).exp()
}

impl GammaGwrNet {
    pub fn new(dim: usize, config: GammaGwrConfig) -> Result<Self> {
        if dim < 1 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        config.validate()?;
        let global_context = vec![vec![0.0; dim]; config.context_depth];
        Ok(GammaGwrNet {
            config,
            dim,
            neurons: BTreeMap::new(),
            next_id: 0,
            edges: BTreeMap::new(),
            global_context,
            prev_bmu: None,
        })
    }

    pub fn config(&self) -> &GammaGwrConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn neuron_count(&self) -> usize {
        self.neurons.len()
    }

    pub fn neuron(&self, id: usize) -> Option<&Neuron> {
        self.neurons.get(&id)
    }

    pub fn neuron_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.neurons.keys().copied()
    }

    pub fn neurons(&self) -> impl Iterator<Item = (usize, &Neuron)> {
        self.neurons.iter().map(|(&id, n)| (id, n))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.edges.iter().map(|(&(a, b), &age)| (a, b, age))
    }

    pub fn global_context(&self) -> &[Vec<f64>] {
        &self.global_context
    }

    /// True if any neuron carries label votes.
    pub fn has_labels(&self) -> bool {
        self.neurons.values().any(|n| !n.label_hist.is_empty())
    }

    fn edge_key(a: usize, b: usize) -> (usize, usize) {
        if a < b {
            (a, b)
        } else {
            (b, a)
        }
    }

    fn neighbors(&self, id: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn distance_with(&self, neuron: &Neuron, x: &[f64], context: &[Vec<f64>]) -> f64 {
        let mut d = self.config.alpha[0] * Self::euclid(x, &neuron.weight);
        for (k, c) in context.iter().enumerate() {
            d += self.config.alpha[k + 1] * Self::euclid(c, &neuron.contexts[k]);
        }
        d
    }

    /// Context-weighted distance of input `x` to neuron `j` under the current
    /// global context.
    pub fn distance(&self, j: usize, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let neuron = self
            .neurons
            .get(&j)
            .ok_or_else(|| Error::state(format!("neuron {j} does not exist")))?;
        Ok(self.distance_with(neuron, x, &self.global_context))
    }

    fn find_bmu_with(
        &self,
        x: &[f64],
        context: &[Vec<f64>],
    ) -> Result<(usize, Option<usize>, f64)> {
        if self.neurons.is_empty() {
            return Err(Error::state("find_bmu on an empty network"));
        }
        let mut best: Option<(usize, f64)> = None;
        let mut second: Option<(usize, f64)> = None;
        for (&id, neuron) in &self.neurons {
            let d = self.distance_with(neuron, x, context);
            match best {
                None => best = Some((id, d)),
                Some((_, bd)) if d < bd => {
                    second = best;
                    best = Some((id, d));
                }
                _ => match second {
                    None => second = Some((id, d)),
                    Some((_, sd)) if d < sd => second = Some((id, d)),
                    _ => {}
                },
            }
        }
        let (b, d_b) = best.expect("non-empty");
        Ok((b, second.map(|(s, _)| s), d_b))
    }

    /// Best and second-best matching units under the current global context.
    /// Ties go to the lowest id.
    pub fn find_bmu(&self, x: &[f64]) -> Result<(usize, Option<usize>, f64)> {
        self.check_dim(x)?;
        self.find_bmu_with(x, &self.global_context)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "input dim {} does not match network dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Recompute the global context from the previous BMU: C_k(t) blends the
    /// previous winner's weight with its (k-1)-th context, where context 0 is
    /// the weight itself. Stays zero until a first BMU exists.
    pub fn update_global_context(&mut self) {
        let Some((w, contexts)) = &self.prev_bmu else {
            return;
        };
        let beta = self.config.beta;
        for k in 0..self.config.context_depth {
            let lower: &[f64] = if k == 0 { w } else { &contexts[k - 1] };
            for (c, (&wv, &lv)) in self.global_context[k]
                .iter_mut()
                .zip(w.iter().zip(lower.iter()))
            {
                *c = beta * wv + (1.0 - beta) * lv;
            }
        }
    }

    /// Move the BMU and its edge-neighbors toward the input and the global
    /// context, each scaled by its own plasticity (habituation).
    pub fn adapt(&mut self, b: usize, x: &[f64]) {
        let mut targets = vec![(b, self.config.eps_b)];
        targets.extend(self.neighbors(b).into_iter().map(|n| (n, self.config.eps_n)));
        for (id, eps) in targets {
            let Some(neuron) = self.neurons.get_mut(&id) else {
                continue;
            };
            let rate = eps * neuron.habituation;
            for (w, &xv) in neuron.weight.iter_mut().zip(x) {
                *w += rate * (xv - *w);
            }
            for k in 0..self.config.context_depth {
                for (c, &gv) in neuron.contexts[k].iter_mut().zip(&self.global_context[k]) {
                    *c += rate * (gv - *c);
                }
            }
        }
    }

    /// Exponential habituation toward its floor; BMUs habituate faster than
    /// neighbors. Clamped to [0, 1].
    pub fn habituate(&mut self, id: usize, is_bmu: bool) -> Result<()> {
        let tau = if is_bmu {
            self.config.tau_b
        } else {
            self.config.tau_n
        };
        let kappa = self.config.kappa;
        let neuron = self
            .neurons
            .get_mut(&id)
            .ok_or_else(|| Error::state(format!("neuron {id} does not exist")))?;
        let h = neuron.habituation;
        neuron.habituation = (h + tau * (kappa * (1.0 - h) - 1.0)).clamp(0.0, 1.0);
        Ok(())
    }

    fn create_neuron(&mut self, weight: Vec<f64>, contexts: Vec<Vec<f64>>) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.neurons.insert(
            id,
            Neuron {
                weight,
                contexts,
                habituation: 1.0,
                label_hist: BTreeMap::new(),
            },
        );
        id
    }

    /// Grow-when-required insertion: when the activity is below the insertion
    /// threshold AND the BMU is already habituated below the habituation
    /// threshold AND the neuron budget allows, place a new neuron halfway
    /// between the BMU and the input, rewire b-s through it.
    pub fn maybe_insert(&mut self, x: &[f64], b: usize, s: usize) -> Result<Option<usize>> {
        let d_b = self.distance(b, x)?;
        let bmu = self
            .neurons
            .get(&b)
            .ok_or_else(|| Error::state(format!("neuron {b} does not exist")))?;
        if !self.neurons.contains_key(&s) {
            return Err(Error::state(format!("neuron {s} does not exist")));
        }
        let grow = activity(d_b) < self.config.insertion_threshold
            && bmu.habituation < self.config.habituation_threshold
            && self.neurons.len() < self.config.max_neurons;
        if !grow {
            return Ok(None);
        }
        let weight: Vec<f64> = bmu.weight.iter().zip(x).map(|(w, v)| (w + v) / 2.0).collect();
        let contexts: Vec<Vec<f64>> = (0..self.config.context_depth)
            .map(|k| {
                bmu.contexts[k]
                    .iter()
                    .zip(&self.global_context[k])
                    .map(|(c, g)| (c + g) / 2.0)
                    .collect()
            })
            .collect();
        let new_id = self.create_neuron(weight, contexts);
        self.edges.insert(Self::edge_key(new_id, b), 0);
        self.edges.insert(Self::edge_key(new_id, s), 0);
        self.edges.remove(&Self::edge_key(b, s));
        Ok(Some(new_id))
    }

    /// Age all edges of `b` except the one to `spare`, drop overage edges,
    /// and prune neurons that lost their last edge. Returns pruned ids.
    fn age_and_prune(&mut self, b: usize, spare: usize) -> Vec<usize> {
        let mut stale = Vec::new();
        for (&key, age) in self.edges.iter_mut() {
            let (u, v) = key;
            if u != b && v != b {
                continue;
            }
            let other = if u == b { v } else { u };
            if other == spare {
                continue;
            }
            *age += 1;
            if *age > self.config.max_edge_age {
                stale.push(key);
            }
        }
        let mut candidates = BTreeSet::new();
        for key in stale {
            self.edges.remove(&key);
            candidates.insert(key.0);
            candidates.insert(key.1);
        }
        let mut pruned = Vec::new();
        for id in candidates {
            if self.neighbors(id).is_empty() {
                self.neurons.remove(&id);
                pruned.push(id);
            }
        }
        pruned
    }

    /// One full training step (unsupervised growth plus optional label vote).
    pub fn train_step(&mut self, x: &[f64], label: Option<usize>) -> Result<StepReport> {
        self.train_step_with(x, label, InsertGate::Always)
    }

    /// Training step with an insertion gate for task-relevant modulation.
    pub fn train_step_with(
        &mut self,
        x: &[f64],
        label: Option<usize>,
        gate: InsertGate,
    ) -> Result<StepReport> {
        self.check_dim(x)?;
        self.update_global_context();

        // the first two inputs seed the network
        if self.neurons.len() < 2 {
            let contexts = self.global_context.clone();
            let id = self.create_neuron(x.to_vec(), contexts);
            if let Some(l) = label {
                *self.neurons.get_mut(&id).expect("just created").label_hist.entry(l).or_insert(0) += 1;
            }
            self.snapshot_prev_bmu(id);
            return Ok(StepReport {
                bmu: id,
                second: None,
                distance: 0.0,
                inserted: Some(id),
                pruned: Vec::new(),
            });
        }

        let (b, second, d_b) = self.find_bmu(x)?;
        let s = second.expect("two or more neurons");
        let allow_insert = match gate {
            InsertGate::Always => true,
            InsertGate::OnMisclassify => match label {
                // suppressed only when the winner already predicts the label
                Some(l) => self.neurons[&b].majority_label() != Some(l),
                None => true,
            },
        };
        let inserted = if allow_insert {
            self.maybe_insert(x, b, s)?
        } else {
            None
        };

        let pruned = if let Some(new_id) = inserted {
            self.age_and_prune(b, new_id)
        } else {
            self.adapt(b, x);
            self.habituate(b, true)?;
            for n in self.neighbors(b) {
                self.habituate(n, false)?;
            }
            self.edges.insert(Self::edge_key(b, s), 0);
            self.age_and_prune(b, s)
        };

        if let Some(l) = label {
            *self
                .neurons
                .get_mut(&b)
                .expect("bmu is never pruned in its own step")
                .label_hist
                .entry(l)
                .or_insert(0) += 1;
        }
        self.snapshot_prev_bmu(b);
        Ok(StepReport {
            bmu: b,
            second: Some(s),
            distance: d_b,
            inserted,
            pruned,
        })
    }

    fn snapshot_prev_bmu(&mut self, b: usize) {
        let neuron = &self.neurons[&b];
        self.prev_bmu = Some((neuron.weight.clone(), neuron.contexts.clone()));
    }

    /// Per-step BMU ids over a sequence, evolving a local context cursor from
    /// zero. Read-only: the network's own context is untouched.
    pub fn bmu_trajectory(&self, sequence: &[Vec<f64>]) -> Result<Vec<usize>> {
        if sequence.is_empty() {
            return Err(Error::invalid("trajectory needs a non-empty sequence"));
        }
        let mut cursor: Vec<Vec<f64>> = vec![vec![0.0; self.dim]; self.config.context_depth];
        let mut prev: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
        let mut out = Vec::with_capacity(sequence.len());
        for x in sequence {
            self.check_dim(x)?;
            if let Some((w, contexts)) = &prev {
                for k in 0..self.config.context_depth {
                    let lower: &[f64] = if k == 0 { w } else { &contexts[k - 1] };
                    for (c, (&wv, &lv)) in cursor[k].iter_mut().zip(w.iter().zip(lower.iter())) {
                        *c = self.config.beta * wv + (1.0 - self.config.beta) * lv;
                    }
                }
            }
            let (b, _, _) = self.find_bmu_with(x, &cursor)?;
            let neuron = &self.neurons[&b];
            prev = Some((neuron.weight.clone(), neuron.contexts.clone()));
            out.push(b);
        }
        Ok(out)
    }

    /// Classify a sequence by summing the label-histogram votes of per-step
    /// BMUs. Ties go to the lowest label.
    pub fn classify(&self, sequence: &[Vec<f64>]) -> Result<usize> {
        if !self.has_labels() {
            return Err(Error::state("classify on a network trained without labels"));
        }
        let mut votes: BTreeMap<usize, u64> = BTreeMap::new();
        for b in self.bmu_trajectory(sequence)? {
            for (&l, &n) in &self.neurons[&b].label_hist {
                *votes.entry(l).or_insert(0) += n;
            }
        }
        votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, _)| l)
            .ok_or_else(|| Error::state("no label votes along the sequence"))
    }

    /// Mean BMU distance over a dataset with the global context frozen at its
    /// current state.
    pub fn quantization_error(&self, dataset: &[Vec<f64>]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::invalid("quantization_error needs a non-empty dataset"));
        }
        let mut total = 0.0;
        for x in dataset {
            let (_, _, d) = self.find_bmu(x)?;
            total += d;
        }
        Ok(total / dataset.len() as f64)
    }
}

/// Flat serialization form of the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GwrSnapshot {
    pub config: GammaGwrConfig,
    pub dim: usize,
    pub next_id: usize,
    pub neurons: Vec<SnapshotNeuron>,
    pub edges: Vec<SnapshotEdge>,
    pub global_context: Vec<Vec<f64>>,
    pub prev_bmu: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotNeuron {
    pub id: usize,
    pub w: Vec<f64>,
    pub contexts: Vec<Vec<f64>>,
    pub h: f64,
    pub label_hist: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotEdge {
    pub a: usize,
    pub b: usize,
    pub age: u32,
}

impl From<GammaGwrNet> for GwrSnapshot {
    fn from(net: GammaGwrNet) -> Self {
        GwrSnapshot {
            config: net.config,
            dim: net.dim,
            next_id: net.next_id,
            neurons: net
                .neurons
                .into_iter()
                .map(|(id, n)| SnapshotNeuron {
                    id,
                    w: n.weight,
                    contexts: n.contexts,
                    h: n.habituation,
                    label_hist: n.label_hist,
                })
                .collect(),
            edges: net
                .edges
                .into_iter()
                .map(|((a, b), age)| SnapshotEdge { a, b, age })
                .collect(),
            global_context: net.global_context,
            prev_bmu: net.prev_bmu,
        }
    }
}

impl TryFrom<GwrSnapshot> for GammaGwrNet {
    type Error = Error;

    fn try_from(snap: GwrSnapshot) -> Result<Self> {
        snap.config.validate()?;
        let mut neurons = BTreeMap::new();
        for n in snap.neurons {
            if n.w.len() != snap.dim || n.contexts.len() != snap.config.context_depth {
                return Err(Error::invalid(format!("neuron {} has inconsistent shape", n.id)));
            }
            if !(0.0..=1.0).contains(&n.h) {
                return Err(Error::invalid(format!("neuron {} habituation out of range", n.id)));
            }
            if n.id >= snap.next_id {
                return Err(Error::invalid("next_id must exceed every neuron id"));
            }
            neurons.insert(
                n.id,
                Neuron {
                    weight: n.w,
                    contexts: n.contexts,
                    habituation: n.h,
                    label_hist: n.label_hist,
                },
            );
        }
        let mut edges = BTreeMap::new();
        for e in snap.edges {
            if e.a == e.b {
                return Err(Error::invalid("self-edges are not allowed"));
            }
            if !neurons.contains_key(&e.a) || !neurons.contains_key(&e.b) {
                return Err(Error::invalid(format!("edge ({}, {}) references a dead neuron", e.a, e.b)));
            }
            let key = if e.a < e.b { (e.a, e.b) } else { (e.b, e.a) };
            edges.insert(key, e.age);
        }
        if snap.global_context.len() != snap.config.context_depth
            || snap.global_context.iter().any(|c| c.len() != snap.dim)
        {
            return Err(Error::invalid("global context shape mismatch"));
        }
        Ok(GammaGwrNet {
            config: snap.config,
            dim: snap.dim,
            neurons,
            next_id: snap.next_id,
            edges,
            global_context: snap.global_context,
            prev_bmu: snap.prev_bmu,
        })
    }
}
