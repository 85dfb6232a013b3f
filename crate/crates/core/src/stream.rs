//! Continual-learning data model: datasets, non-i.i.d. batch sequences,
//! scenario kinds, content orderings, and bounded-resource auditing.
//!
//! A [`Scenario`] is the sequence of [`TrainingBatch`]es fed to a learner plus
//! a held-out test set. Scenarios are immutable after construction and safe to
//! share between threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled observation: feature vector, class id, optional task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub t: Option<i64>,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Example { x, y, t: None }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// One element of the batch sequence. `index` is 1-based and strictly
/// increasing across a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub index: usize,
    pub examples: Vec<Example>,
    pub task_label: Option<i64>,
}

impl TrainingBatch {
    /// Distinct class ids present in this batch.
    pub fn class_set(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Task-label structure over the batch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Single-incremental-task: one task label repeated on every batch.
    #[serde(rename = "SIT")]
    Sit,
    /// Multi-task: all task labels pairwise distinct.
    #[serde(rename = "MT")]
    Mt,
    /// Multi-incremental-task: at least one repeat and at least two distinct labels.
    #[serde(rename = "MIT")]
    Mit,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioKind::Sit => "SIT",
            ScenarioKind::Mt => "MT",
            ScenarioKind::Mit => "MIT",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SIT" => Ok(ScenarioKind::Sit),
            "MT" => Ok(ScenarioKind::Mt),
            "MIT" => Ok(ScenarioKind::Mit),
            other => Err(Error::config(format!(
                "scenario.kind: unknown kind '{other}' (expected SIT, MT or MIT)"
            ))),
        }
    }
}

/// Content ordering of the batch sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentKind {
    /// New instances: every batch carries all classes, disjoint instance subsets.
    #[serde(rename = "NI")]
    Ni,
    /// New classes: each batch introduces classes unseen in earlier batches.
    #[serde(rename = "NC")]
    Nc,
    /// New instances and classes: batches after the first mix known and novel classes.
    #[serde(rename = "NIC")]
    Nic,
}

impl fmt::Display for ContentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ContentKind::Ni => "NI",
            ContentKind::Nc => "NC",
            ContentKind::Nic => "NIC",
        };
        f.write_str(s)
    }
}

impl FromStr for ContentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NI" => Ok(ContentKind::Ni),
            "NC" => Ok(ContentKind::Nc),
            "NIC" => Ok(ContentKind::Nic),
            other => Err(Error::config(format!(
                "scenario.content: unknown content '{other}' (expected NI, NC or NIC)"
            ))),
        }
    }
}

/// A full continual-learning scenario: the batch sequence, the held-out test
/// set, and the seed that generated both. `test_batch_of[k]` is the 1-based
/// batch index whose evaluation split test example `k` belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub content: ContentKind,
    pub batches: Vec<TrainingBatch>,
    pub test_set: Vec<Example>,
    pub test_batch_of: Vec<usize>,
    pub seed: u64,
}

impl Scenario {
    /// Union of class ids over all training batches.
    pub fn class_set(&self) -> BTreeSet<usize> {
        self.batches.iter().flat_map(|b| b.class_set()).collect()
    }

    /// Feature dimensionality (taken from the first example).
    pub fn dim(&self) -> Result<usize> {
        self.batches
            .iter()
            .flat_map(|b| b.examples.first())
            .map(|e| e.dim())
            .next()
            .ok_or_else(|| Error::state("scenario has no training examples"))
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    /// Export the manifest view of this scenario.
    pub fn manifest(&self) -> ScenarioManifest {
        ScenarioManifest {
            kind: self.kind,
            content: self.content,
            seed: self.seed,
            batches: self
                .batches
                .iter()
                .map(|b| ManifestBatch {
                    index: b.index,
                    task_label: b.task_label,
                    class_set: b.class_set().into_iter().collect(),
                    n_examples: b.len(),
                })
                .collect(),
        }
    }
}

/// JSON manifest: the shape of a scenario without its example payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub kind: ScenarioKind,
    pub content: ContentKind,
    pub seed: u64,
    pub batches: Vec<ManifestBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBatch {
    pub index: usize,
    pub task_label: Option<i64>,
    pub class_set: Vec<usize>,
    pub n_examples: usize,
}

impl ScenarioManifest {
    /// Scenario shape modulo seed, used to refuse mixing incompatible runs.
    pub fn signature(&self) -> String {
        let classes: BTreeSet<usize> = self
            .batches
            .iter()
            .flat_map(|b| b.class_set.iter().copied())
            .collect();
        format!(
            "{}/{}/batches={}/classes={}",
            self.kind,
            self.content,
            self.batches.len(),
            classes.len()
        )
    }
}

/// Per-step memory usage records for bounded-resource auditing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceTrace {
    pub records: Vec<ResourceRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceRecord {
    /// Step index (batch position).
    pub step: usize,
    /// Examples currently held in external memory at this step.
    pub stored: usize,
    /// Total training examples seen so far.
    pub cumulative: usize,
}

impl ResourceTrace {
    pub fn push(&mut self, step: usize, stored: usize, cumulative: usize) {
        self.records.push(ResourceRecord {
            step,
            stored,
            cumulative,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Outcome of a task-structure or memory-bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub ok: bool,
    pub violation: Option<String>,
}

impl Verdict {
    fn pass() -> Self {
        Verdict {
            ok: true,
            violation: None,
        }
    }

    fn fail(msg: String) -> Self {
        Verdict {
            ok: false,
            violation: Some(msg),
        }
    }
}

/// Draw a synthetic clustered dataset: `per_class` examples per class around
/// class-specific centers, Gaussian with standard deviation `spread` per
/// coordinate. Deterministic given `seed`.
pub fn make_synthetic_dataset(
    seed: u64,
    n_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
) -> Result<Vec<Example>> {
    if n_classes < 2 {
        return Err(Error::invalid("n_classes must be >= 2"));
    }
    if dim < 1 {
        return Err(Error::invalid("dim must be >= 1"));
    }
    if per_class < 1 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::invalid("spread must be finite and >= 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while centers.len() < n_classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        // centers must be pairwise distinct; exact collisions are re-drawn
        if !centers.iter().any(|prev| prev == &c) {
            centers.push(c);
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dataset = Vec::with_capacity(n_classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| c + spread * normal.sample(&mut rng))
                .collect();
            dataset.push(Example::new(x, class));
        }
    }
    Ok(dataset)
}

/// Group dataset indices by class id, ascending.
fn indices_by_class(dataset: &[Example]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.iter().enumerate() {
        by_class.entry(e.y).or_default().push(i);
    }
    by_class
}

/// Split `n` items into `k` contiguous balanced chunk lengths.
fn balanced_chunks(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let rem = n % k;
    (0..k).map(|i| base + usize::from(i < rem)).collect()
}

fn task_labels(kind: ScenarioKind, n_batches: usize) -> Result<Vec<i64>> {
    match kind {
        ScenarioKind::Sit => Ok(vec![0; n_batches]),
        ScenarioKind::Mt => Ok((0..n_batches as i64).collect()),
        ScenarioKind::Mit => {
            if n_batches < 3 {
                return Err(Error::config(
                    "MIT requires n_batches >= 3 (a repeated label plus two distinct labels)",
                ));
            }
            Ok((0..n_batches).map(|i| (i % 2) as i64).collect())
        }
    }
}

/// Build a scenario from a dataset: a stratified held-out test split plus a
/// batch sequence matching the requested content ordering and task-label
/// structure. Pure function of its arguments.
pub fn build_scenario(
    dataset: &[Example],
    kind: ScenarioKind,
    content: ContentKind,
    n_batches: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<Scenario> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if n_batches < 1 {
        return Err(Error::config("n_batches must be >= 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction must be in [0, 1)"));
    }
    let dim = dataset[0].dim();
    if dataset.iter().any(|e| e.dim() != dim) {
        return Err(Error::config("dataset has mixed feature dimensions"));
    }

    let labels = task_labels(kind, n_batches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stratified test split: per class, a seeded shuffle then a fraction cut.
    let by_class = indices_by_class(dataset);
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let n_classes = classes.len();
    let mut test_idx: Vec<usize> = Vec::new();
    let mut train_by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&class, idxs) in &by_class {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        let mut n_test = (idxs.len() as f64 * test_fraction).round() as usize;
        n_test = n_test.min(idxs.len() - 1);
        test_idx.extend_from_slice(&shuffled[..n_test]);
        train_by_class.insert(class, shuffled[n_test..].to_vec());
    }

    // Class composition per batch (by position, 0-based).
    let batch_classes: Vec<Vec<usize>> = match content {
        ContentKind::Ni => vec![classes.clone(); n_batches],
        ContentKind::Nc => {
            if n_batches > n_classes {
                return Err(Error::config(format!(
                    "NC needs n_batches <= n_classes ({n_batches} batches, {n_classes} classes)"
                )));
            }
            let mut out = Vec::with_capacity(n_batches);
            let mut cursor = 0;
            for len in balanced_chunks(n_classes, n_batches) {
                out.push(classes[cursor..cursor + len].to_vec());
                cursor += len;
            }
            out
        }
        ContentKind::Nic => {
            let first_n = n_classes.div_ceil(2);
            let novel_remaining = n_classes - first_n;
            if n_batches.saturating_sub(1) < novel_remaining {
                return Err(Error::config(format!(
                    "NIC with {n_classes} classes needs n_batches >= {} to introduce \
                     remaining classes one per batch",
                    novel_remaining + 1
                )));
            }
            let mut out = vec![classes[..first_n].to_vec()];
            let mut seen: Vec<usize> = classes[..first_n].to_vec();
            for b in 1..n_batches {
                let mut members = Vec::new();
                let novel = first_n + b - 1;
                if novel < n_classes {
                    members.push(classes[novel]);
                }
                // new instances of known classes, chosen by seeded shuffle
                let repeats = if novel < n_classes { 2 } else { 3 };
                let mut pool = seen.clone();
                pool.shuffle(&mut rng);
                members.extend(pool.into_iter().take(repeats));
                members.sort_unstable();
                members.dedup();
                if novel < n_classes {
                    seen.push(classes[novel]);
                }
                out.push(members);
            }
            out
        }
    };

    // Appearance counts drive the per-class instance split: a class appearing
    // in k batches contributes k disjoint instance chunks.
    let mut appearances: BTreeMap<usize, usize> = BTreeMap::new();
    for members in &batch_classes {
        for &c in members {
            *appearances.entry(c).or_default() += 1;
        }
    }
    let mut chunks_by_class: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&class, train_idx) in &train_by_class {
        let k = appearances.get(&class).copied().unwrap_or(0);
        if k == 0 {
            continue;
        }
        if train_idx.len() < k {
            return Err(Error::config(format!(
                "class {class} has {} training examples but appears in {k} batches",
                train_idx.len()
            )));
        }
        let mut chunks = Vec::with_capacity(k);
        let mut cursor = 0;
        for len in balanced_chunks(train_idx.len(), k) {
            chunks.push(train_idx[cursor..cursor + len].to_vec());
            cursor += len;
        }
        chunks_by_class.insert(class, chunks);
    }

    let mut next_chunk: BTreeMap<usize, usize> = BTreeMap::new();
    let mut batches = Vec::with_capacity(n_batches);
    for (b, members) in batch_classes.iter().enumerate() {
        let mut example_idx: Vec<usize> = Vec::new();
        for &c in members {
            let slot = next_chunk.entry(c).or_default();
            example_idx.extend_from_slice(&chunks_by_class[&c][*slot]);
            *slot += 1;
        }
        // within-batch order is a seeded shuffle
        example_idx.shuffle(&mut rng);
        let task_label = Some(labels[b]);
        let examples: Vec<Example> = example_idx
            .iter()
            .map(|&i| {
                let mut e = dataset[i].clone();
                e.t = task_label;
                e
            })
            .collect();
        batches.push(TrainingBatch {
            index: b + 1,
            examples,
            task_label,
        });
    }

    // Evaluation split tags: NC/NIC test items belong to the batch that first
    // introduces their class; NI items are spread round-robin over batches.
    let first_batch_of_class: BTreeMap<usize, usize> = {
        let mut m = BTreeMap::new();
        for (b, members) in batch_classes.iter().enumerate() {
            for &c in members {
                m.entry(c).or_insert(b + 1);
            }
        }
        m
    };
    test_idx.sort_unstable();
    let mut seen_per_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut test_set = Vec::with_capacity(test_idx.len());
    let mut test_batch_of = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let class = dataset[i].y;
        let tag = match content {
            ContentKind::Ni => {
                let k = seen_per_class.entry(class).or_default();
                let tag = (*k % n_batches) + 1;
                *k += 1;
                tag
            }
            _ => first_batch_of_class[&class],
        };
        let mut e = dataset[i].clone();
        e.t = None;
        test_set.push(e);
        test_batch_of.push(tag);
    }

    Ok(Scenario {
        kind,
        content,
        batches,
        test_set,
        test_batch_of,
        seed,
    })
}

/// Check whether the batch task labels match the declared scenario kind.
pub fn check_task_structure(scenario: &Scenario) -> Verdict {
    if scenario.batches.is_empty() {
        return Verdict::fail("scenario has no batches".into());
    }
    let labels: Vec<Option<i64>> = scenario.batches.iter().map(|b| b.task_label).collect();
    match scenario.kind {
        ScenarioKind::Sit => {
            for (i, l) in labels.iter().enumerate() {
                if *l != labels[0] {
                    return Verdict::fail(format!(
                        "SIT requires equal task labels, but batch 1 has {:?} and batch {} has {:?}",
                        labels[0],
                        i + 1,
                        l
                    ));
                }
            }
            Verdict::pass()
        }
        ScenarioKind::Mt => {
            for i in 0..labels.len() {
                for j in (i + 1)..labels.len() {
                    if labels[i] == labels[j] {
                        return Verdict::fail(format!(
                            "MT requires pairwise distinct task labels, but batches {} and {} share {:?}",
                            i + 1,
                            j + 1,
                            labels[i]
                        ));
                    }
                }
            }
            Verdict::pass()
        }
        ScenarioKind::Mit => {
            let distinct: BTreeSet<_> = labels.iter().collect();
            let has_repeat = distinct.len() < labels.len();
            let has_two = distinct.len() >= 2;
            if has_repeat && has_two {
                Verdict::pass()
            } else {
                Verdict::fail(format!(
                    "MIT requires a repeated label and two distinct labels; got {} distinct over {} batches",
                    distinct.len(),
                    labels.len()
                ))
            }
        }
    }
}

/// Outcome of a memory-bound audit: pass, or the first violating step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryVerdict {
    pub ok: bool,
    pub first_violation: Option<usize>,
    pub detail: Option<String>,
}

/// Memory-bound audit: after the warmup step, the stored-example count must
/// stay strictly below the cumulative number of seen examples. An empty
/// memory never violates the bound.
pub fn audit_memory_bound(trace: &ResourceTrace, warmup: usize) -> MemoryVerdict {
    if trace.is_empty() {
        return MemoryVerdict {
            ok: false,
            first_violation: None,
            detail: Some("resource trace is empty".into()),
        };
    }
    for rec in &trace.records {
        if rec.step <= warmup {
            continue;
        }
        if rec.stored >= rec.cumulative && rec.stored > 0 {
            return MemoryVerdict {
                ok: false,
                first_violation: Some(rec.step),
                detail: Some(format!(
                    "step {}: stored {} >= cumulative {}",
                    rec.step, rec.stored, rec.cumulative
                )),
            };
        }
    }
    MemoryVerdict {
        ok: true,
        first_violation: None,
        detail: None,
    }
}

/// Load a dataset from a headered CSV file. Every non-label column is parsed
/// as a feature; the label column must hold non-negative integers.
pub fn load_csv_dataset(path: impl AsRef<Path>, label_column: usize) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())?;
    let arity = reader.headers()?.len();
    if label_column >= arity {
        return Err(Error::invalid(format!(
            "label column {label_column} out of range for {arity} columns"
        )));
    }

    let mut dataset = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // line 1 is the header
        let record = record?;
        if record.len() != arity {
            return Err(Error::Parse {
                line,
                msg: format!("expected {arity} fields, found {}", record.len()),
            });
        }
        let mut x = Vec::with_capacity(arity - 1);
        let mut y = None;
        for (col, field) in record.iter().enumerate() {
            if col == label_column {
                let label: i64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label column value '{field}' is not an integer"),
                })?;
                if label < 0 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label {label} is negative"),
                    });
                }
                y = Some(label as usize);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("feature column {col} value '{field}' is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("feature column {col} value '{field}' is not finite"),
                    });
                }
                x.push(v);
            }
        }
        dataset.push(Example::new(x, y.expect("label column checked")));
    }
    if dataset.is_empty() {
        return Err(Error::config("csv file holds a header but no data rows"));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy_dataset(n_classes: usize, per_class: usize) -> Vec<Example> {
        make_synthetic_dataset(11, n_classes, 3, per_class, 0.1).unwrap()
    }

    #[test]
    fn zero_spread_puts_examples_at_centers() {
        let d = make_synthetic_dataset(1, 2, 2, 1, 0.0).unwrap();
        assert_eq!(d.len(), 2);
        assert_ne!(d[0].x, d[1].x);
        // with one example per class at spread 0, both runs land on the centers
        let again = make_synthetic_dataset(1, 2, 2, 5, 0.0).unwrap();
        assert_eq!(again[0].x, d[0].x);
        assert_eq!(again[5].x, d[1].x);
    }

    #[test]
    fn synthetic_dataset_counts() {
        let d = make_synthetic_dataset(7, 10, 16, 50, 0.3).unwrap();
        assert_eq!(d.len(), 500);
        for c in 0..10 {
            assert_eq!(d.iter().filter(|e| e.y == c).count(), 50);
        }
        assert!(d.iter().all(|e| e.dim() == 16));
        assert!(d.iter().all(|e| e.x.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let a = make_synthetic_dataset(42, 4, 8, 10, 0.5).unwrap();
        let b = make_synthetic_dataset(42, 4, 8, 10, 0.5).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(43, 4, 8, 10, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_dataset_rejects_bad_sizes() {
        assert!(make_synthetic_dataset(0, 1, 2, 5, 0.1).is_err());
        assert!(make_synthetic_dataset(0, 2, 0, 5, 0.1).is_err());
        assert!(make_synthetic_dataset(0, 2, 2, 0, 0.1).is_err());
        assert!(make_synthetic_dataset(0, 2, 2, 5, -1.0).is_err());
    }

    #[test]
    fn nc_scenario_has_expected_class_sets() {
        let d = toy_dataset(10, 10);
        let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Nc, 5, 3, 0.2).unwrap();
        let sets: Vec<Vec<usize>> = s
            .batches
            .iter()
            .map(|b| b.class_set().into_iter().collect())
            .collect();
        assert_eq!(
            sets,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
    }

    #[test]
    fn sit_labels_are_all_equal() {
        let d = toy_dataset(4, 10);
        let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Ni, 4, 9, 0.2).unwrap();
        assert!(s.batches.iter().all(|b| b.task_label == Some(0)));
    }

    #[test]
    fn single_batch_ni_holds_every_class() {
        let d = toy_dataset(5, 6);
        let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Ni, 1, 1, 0.2).unwrap();
        assert_eq!(s.batches.len(), 1);
        assert_eq!(
            s.batches[0].class_set(),
            (0..5).collect::<BTreeSet<usize>>()
        );
    }

    #[test]
    fn nc_with_too_many_batches_is_a_config_error() {
        let d = toy_dataset(3, 10);
        let err = build_scenario(&d, ScenarioKind::Sit, ContentKind::Nc, 4, 0, 0.2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn nc_class_sets_are_disjoint_and_cover() {
        for seed in 0..20u64 {
            let d = toy_dataset(9, 8);
            let s = build_scenario(&d, ScenarioKind::Mt, ContentKind::Nc, 3, seed, 0.25).unwrap();
            let mut union = BTreeSet::new();
            for b in &s.batches {
                let set = b.class_set();
                assert!(union.is_disjoint(&set), "seed {seed}: overlapping classes");
                union.extend(set);
            }
            assert_eq!(union, (0..9).collect());
        }
    }

    #[test]
    fn ni_instance_sets_are_disjoint_and_every_batch_has_all_classes() {
        for seed in 0..20u64 {
            let d = toy_dataset(4, 12);
            let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Ni, 3, seed, 0.2).unwrap();
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for b in &s.batches {
                assert_eq!(b.class_set(), (0..4).collect());
                for e in &b.examples {
                    let key = format!("{:?}", e.x);
                    assert!(seen.insert(key), "seed {seed}: instance reused across batches");
                }
            }
        }
    }

    #[test]
    fn nic_mixes_known_and_novel_classes() {
        for seed in 0..20u64 {
            let d = toy_dataset(8, 12);
            let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Nic, 5, seed, 0.2).unwrap();
            assert_eq!(s.batches[0].class_set().len(), 4);
            let mut seen = s.batches[0].class_set();
            for b in &s.batches[1..] {
                let set = b.class_set();
                let novel: BTreeSet<usize> = set.difference(&seen).copied().collect();
                let known: BTreeSet<usize> = set.intersection(&seen).copied().collect();
                if seen.len() < 8 {
                    assert_eq!(novel.len(), 1, "seed {seed}: one novel class per batch");
                }
                assert!(!known.is_empty(), "seed {seed}: batch without known classes");
                seen.extend(set);
            }
            assert_eq!(seen, (0..8).collect());
        }
    }

    #[test]
    fn build_scenario_is_pure() {
        let d = toy_dataset(6, 10);
        let a = build_scenario(&d, ScenarioKind::Mit, ContentKind::Nic, 4, 5, 0.2).unwrap();
        let b = build_scenario(&d, ScenarioKind::Mit, ContentKind::Nic, 4, 5, 0.2).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn generated_scenarios_pass_their_own_structure_check() {
        let d = toy_dataset(6, 10);
        for kind in [ScenarioKind::Sit, ScenarioKind::Mt, ScenarioKind::Mit] {
            for content in [ContentKind::Ni, ContentKind::Nc, ContentKind::Nic] {
                let s = build_scenario(&d, kind, content, 4, 2, 0.2).unwrap();
                let v = check_task_structure(&s);
                assert!(v.ok, "{kind}/{content}: {:?}", v.violation);
            }
        }
    }

    #[test]
    fn test_split_is_disjoint_from_training() {
        let d = toy_dataset(5, 10);
        let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Ni, 2, 8, 0.2).unwrap();
        let train: BTreeSet<String> = s
            .batches
            .iter()
            .flat_map(|b| b.examples.iter().map(|e| format!("{:?}", e.x)))
            .collect();
        assert!(!s.test_set.is_empty());
        assert_eq!(s.test_set.len(), s.test_batch_of.len());
        for e in &s.test_set {
            assert!(!train.contains(&format!("{:?}", e.x)));
        }
        let total: usize = s.batches.iter().map(|b| b.len()).sum();
        assert_eq!(total + s.test_set.len(), d.len());
    }

    fn scenario_with_labels(kind: ScenarioKind, labels: &[i64]) -> Scenario {
        let batches = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| TrainingBatch {
                index: i + 1,
                examples: vec![Example::new(vec![0.0], 0)],
                task_label: Some(l),
            })
            .collect();
        Scenario {
            kind,
            content: ContentKind::Ni,
            batches,
            test_set: vec![],
            test_batch_of: vec![],
            seed: 0,
        }
    }

    #[test]
    fn task_structure_verdicts() {
        assert!(check_task_structure(&scenario_with_labels(ScenarioKind::Sit, &[3, 3, 3])).ok);
        let mt = check_task_structure(&scenario_with_labels(ScenarioKind::Mt, &[1, 2, 1]));
        assert!(!mt.ok);
        assert!(mt.violation.unwrap().contains("batches 1 and 3"));
        assert!(check_task_structure(&scenario_with_labels(ScenarioKind::Mit, &[1, 2, 1])).ok);
        assert!(!check_task_structure(&scenario_with_labels(ScenarioKind::Mit, &[1, 1, 1])).ok);
    }

    #[test]
    fn memory_audit_passes_empty_memory() {
        let mut trace = ResourceTrace::default();
        for step in 1..=10 {
            trace.push(step, 0, step * 100);
        }
        assert!(audit_memory_bound(&trace, 0).ok);
    }

    #[test]
    fn memory_audit_flags_first_violation() {
        let mut trace = ResourceTrace::default();
        for step in 1..=10 {
            let cumulative = step * 10;
            let stored = if step == 5 { cumulative } else { 1 };
            trace.push(step, stored, cumulative);
        }
        let v = audit_memory_bound(&trace, 1);
        assert!(!v.ok);
        assert_eq!(v.first_violation, Some(5));
        assert!(v.detail.unwrap().starts_with("step 5"));
    }

    #[test]
    fn memory_audit_accepts_constant_bounded_buffer() {
        let mut trace = ResourceTrace::default();
        for step in 1..=20 {
            trace.push(step, 1500, step * 1000);
        }
        assert!(audit_memory_bound(&trace, 1).ok);
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_loader_reads_rows() {
        let f = write_csv("a,b,label\n1.0,2.0,0\n3.5,-1.0,1\n0.25,0.5,1\n");
        let d = load_csv_dataset(f.path(), 2).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].x, vec![1.0, 2.0]);
        assert_eq!(d[0].y, 0);
        assert_eq!(d[1].y, 1);
    }

    #[test]
    fn csv_loader_rejects_header_only_file() {
        let f = write_csv("a,b,label\n");
        let err = load_csv_dataset(f.path(), 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("no data rows"));
    }

    #[test]
    fn csv_loader_names_line_of_bad_feature() {
        let f = write_csv("a,b,label\n1.0,2.0,0\nx,2.0,1\n");
        let err = load_csv_dataset(f.path(), 2).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("'x'"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn csv_loader_rejects_non_integer_label() {
        let f = write_csv("a,label\n1.0,zero\n");
        assert!(matches!(
            load_csv_dataset(f.path(), 1),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_lists_batch_shapes() {
        let d = toy_dataset(4, 10);
        let s = build_scenario(&d, ScenarioKind::Sit, ContentKind::Nc, 2, 1, 0.2).unwrap();
        let m = s.manifest();
        assert_eq!(m.batches.len(), 2);
        assert_eq!(m.batches[0].index, 1);
        assert_eq!(m.batches[0].class_set, vec![0, 1]);
        assert!(m.batches[0].n_examples > 0);
        assert_eq!(m.signature(), "SIT/NC/batches=2/classes=4");
    }
}
