//! Deterministic federation streams: blurry task splitting followed by
//! Dirichlet allocation of each task's samples across clients.
//!
//! All randomness comes from one ChaCha8 stream seeded by the plan's seed,
//! consumed in a fixed order (class shuffle, blurry reassignment, then one
//! Dirichlet draw per class per task, task by task).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::ClassId;

/// Identifier of the generator recorded in every plan.
pub const RNG_ALGORITHM: &str = "chacha8-rand_chacha-0.9";
pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid partition parameter: {0}")]
    InvalidParameter(String),
}

/// Sample indices grouped by class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabeledPool {
    per_class: BTreeMap<ClassId, Vec<usize>>,
}

impl LabeledPool {
    /// Sample `i` gets label `labels[i]`.
    pub fn from_labels(labels: &[ClassId]) -> Self {
        let mut per_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            per_class.entry(c).or_default().push(i);
        }
        Self { per_class }
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.per_class.keys().copied()
    }

    pub fn samples_of(&self, class: ClassId) -> &[usize] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every `(class, sample)` pair, sorted.
    pub fn pairs(&self) -> Vec<(ClassId, usize)> {
        self.per_class
            .iter()
            .flat_map(|(&c, idx)| idx.iter().map(move |&i| (c, i)))
            .collect()
    }
}

/// Per-task sample allocation produced by [`si_blurry_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskAllocation {
    pub tasks: Vec<Vec<(ClassId, usize)>>,
    pub disjoint: BTreeSet<ClassId>,
    pub blurry: BTreeSet<ClassId>,
}

/// Splits the pool into `tasks` tasks.
///
/// A random `r_disjoint` fraction of classes is disjoint: each lives wholly
/// in one task, dealt round-robin. The other classes are blurry: each gets a
/// home task (also round-robin) and an `r_blurry` fraction of its samples is
/// moved to uniformly chosen other tasks.
pub fn si_blurry_split(
    pool: &LabeledPool,
    tasks: usize,
    r_disjoint: f64,
    r_blurry: f64,
    rng: &mut impl Rng,
) -> Result<TaskAllocation, PartitionError> {
    if tasks == 0 {
        return Err(PartitionError::InvalidParameter("task count must be at least 1".into()));
    }
    check_fraction("r_disjoint", r_disjoint)?;
    check_fraction("r_blurry", r_blurry)?;

    let mut classes: Vec<ClassId> = pool.classes().collect();
    classes.shuffle(rng);
    let n_disjoint = ((r_disjoint * classes.len() as f64).round() as usize).min(classes.len());
    let (disjoint, blurry) = classes.split_at(n_disjoint);

    let mut out = vec![Vec::new(); tasks];
    for (i, &c) in disjoint.iter().enumerate() {
        out[i % tasks].extend(pool.samples_of(c).iter().map(|&s| (c, s)));
    }
    for (i, &c) in blurry.iter().enumerate() {
        let home = i % tasks;
        let mut samples = pool.samples_of(c).to_vec();
        samples.shuffle(rng);
        let moved = if tasks > 1 { (r_blurry * samples.len() as f64).round() as usize } else { 0 };
        for (j, &s) in samples.iter().enumerate() {
            let task = if j < moved {
                let other = rng.random_range(0..tasks - 1);
                if other >= home {
                    other + 1
                } else {
                    other
                }
            } else {
                home
            };
            out[task].push((c, s));
        }
    }
    for t in &mut out {
        t.sort_unstable();
    }
    Ok(TaskAllocation {
        tasks: out,
        disjoint: disjoint.iter().copied().collect(),
        blurry: blurry.iter().copied().collect(),
    })
}

/// Dirichlet(α) proportions over `clients`, drawn as normalized Gamma(α, 1)
/// variates. If every variate underflows to zero (tiny α), the whole mass
/// goes to one uniformly chosen client.
pub fn dirichlet_proportions(clients: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    let mut p: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..clients)] = 1.0;
    }
    p
}

/// Integer counts summing to `n` from proportions `p`: floors first, then
/// the leftover units go to the largest fractional parts (lower index wins
/// ties).
pub fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dirichlet allocation of one task's samples, before any
/// size balancing.
pub fn dirichlet_counts(
    task: &[(ClassId, usize)],
    clients: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<(ClassId, usize)>>, PartitionError> {
    if clients == 0 {
        return Err(PartitionError::InvalidParameter("client count must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PartitionError::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for &(c, s) in task {
        by_class.entry(c).or_default().push(s);
    }
    let mut out = vec![Vec::new(); clients];
    for (class, mut samples) in by_class {
        samples.shuffle(rng);
        let p = dirichlet_proportions(clients, alpha, rng);
        let counts = largest_remainder(&p, samples.len());
        let mut rest = samples.as_slice();
        for (client, &k) in counts.iter().enumerate() {
            let (take, tail) = rest.split_at(k);
            out[client].extend(take.iter().map(|&s| (class, s)));
            rest = tail;
        }
    }
    Ok(out)
}

/// Dirichlet allocation followed, when `equalize` is set, by a greedy
/// rebalance that leaves every client with `⌊n/clients⌋` or `⌈n/clients⌉`
/// samples. Samples move from the most over-quota client to the most
/// under-quota one, taken from the donor's most represented class.
pub fn dirichlet_allocate(
    task: &[(ClassId, usize)],
    clients: usize,
    alpha: f64,
    equalize: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<(ClassId, usize)>>, PartitionError> {
    let mut out = dirichlet_counts(task, clients, alpha, rng)?;
    if equalize {
        rebalance(&mut out);
    }
    for c in &mut out {
        c.sort_unstable_by_key(|&(_, s)| s);
    }
    Ok(out)
}

fn rebalance(alloc: &mut [Vec<(ClassId, usize)>]) {
    let clients = alloc.len();
    let n: usize = alloc.iter().map(Vec::len).sum();
    let (base, extra) = (n / clients, n % clients);

    // The `extra` largest clients get the ceiling quota; this minimizes moves.
    let mut by_size: Vec<usize> = (0..clients).collect();
    by_size.sort_by(|&a, &b| alloc[b].len().cmp(&alloc[a].len()).then(a.cmp(&b)));
    let mut quota = vec![base; clients];
    for &i in by_size.iter().take(extra) {
        quota[i] += 1;
    }

    loop {
        let excess = |i: usize| alloc[i].len() as isize - quota[i] as isize;
        let donor = (0..clients).max_by(|&a, &b| excess(a).cmp(&excess(b)).then(b.cmp(&a))).unwrap();
        let receiver = (0..clients).min_by(|&a, &b| excess(a).cmp(&excess(b)).then(a.cmp(&b))).unwrap();
        if excess(donor) <= 0 || excess(receiver) >= 0 {
            break;
        }
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        for &(c, _) in &alloc[donor] {
            *counts.entry(c).or_default() += 1;
        }
        let (&class, &available) =
            counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
        let mut to_move = (excess(donor).min(-excess(receiver)) as usize).min(available);
        let mut i = alloc[donor].len();
        while to_move > 0 {
            i -= 1;
            if alloc[donor][i].0 == class {
                let item = alloc[donor].remove(i);
                alloc[receiver].push(item);
                to_move -= 1;
            }
        }
    }
}

/// Inputs of [`build_stream`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub tasks: usize,
    pub clients_per_task: usize,
    pub alpha: f64,
    pub r_disjoint: f64,
    pub r_blurry: f64,
    pub seed: u64,
    /// Balance client sizes after the Dirichlet draw.
    pub equalize: bool,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            tasks: 5,
            clients_per_task: 5,
            alpha: 0.1,
            r_disjoint: 0.5,
            r_blurry: 0.1,
            seed: 0,
            equalize: true,
        }
    }
}

impl PlanParams {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.tasks == 0 {
            return Err(PartitionError::InvalidParameter("tasks must be at least 1".into()));
        }
        if self.clients_per_task == 0 {
            return Err(PartitionError::InvalidParameter("clients must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PartitionError::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        check_fraction("r_disjoint", self.r_disjoint)?;
        check_fraction("r_blurry", self.r_blurry)
    }
}

/// One simulated client in the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualClient {
    pub task: usize,
    pub client: usize,
    /// `(class, sample index)` pairs, ascending by sample index.
    pub samples: Vec<(ClassId, usize)>,
}

impl VirtualClient {
    pub fn tag(&self) -> String {
        format!("t{}-c{}", self.task, self.client)
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.samples.iter().map(|&(c, _)| c).collect()
    }
}

/// The whole simulated federation, task-major then client index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub schema_version: u32,
    pub rng: String,
    pub params: PlanParams,
    pub disjoint_classes: BTreeSet<ClassId>,
    pub clients: Vec<VirtualClient>,
}

impl StreamPlan {
    /// Classes that occur in each task, task by task.
    pub fn task_classes(&self) -> Vec<BTreeSet<ClassId>> {
        let mut out = vec![BTreeSet::new(); self.params.tasks];
        for vc in &self.clients {
            out[vc.task].extend(vc.samples.iter().map(|&(c, _)| c));
        }
        out
    }

    /// Per-client class histogram.
    pub fn histograms(&self) -> Vec<BTreeMap<ClassId, usize>> {
        self.clients
            .iter()
            .map(|vc| {
                let mut h = BTreeMap::new();
                for &(c, _) in &vc.samples {
                    *h.entry(c).or_default() += 1;
                }
                h
            })
            .collect()
    }

    /// Mean Shannon entropy (nats) of the non-empty clients' label
    /// distributions. Lower means more skewed clients.
    pub fn mean_label_entropy(&self) -> f64 {
        let hs: Vec<f64> = self
            .histograms()
            .iter()
            .filter(|h| !h.is_empty())
            .map(|h| {
                let n: usize = h.values().sum();
                -h.values()
                    .map(|&k| {
                        let p = k as f64 / n as f64;
                        p * p.ln()
                    })
                    .sum::<f64>()
            })
            .collect();
        if hs.is_empty() {
            0.0
        } else {
            hs.iter().sum::<f64>() / hs.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Blurry task split, then Dirichlet allocation within each task.
pub fn build_stream(pool: &LabeledPool, params: &PlanParams) -> Result<StreamPlan, PartitionError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let alloc = si_blurry_split(pool, params.tasks, params.r_disjoint, params.r_blurry, &mut rng)?;
    let mut clients = Vec::with_capacity(params.tasks * params.clients_per_task);
    for (task, samples) in alloc.tasks.iter().enumerate() {
        let per_client =
            dirichlet_allocate(samples, params.clients_per_task, params.alpha, params.equalize, &mut rng)?;
        for (client, samples) in per_client.into_iter().enumerate() {
            clients.push(VirtualClient { task, client, samples });
        }
    }
    Ok(StreamPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        rng: RNG_ALGORITHM.to_string(),
        params: params.clone(),
        disjoint_classes: alloc.disjoint,
        clients,
    })
}

fn check_fraction(name: &str, v: f64) -> Result<(), PartitionError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(PartitionError::InvalidParameter(format!("{name} must be in [0, 1], got {v}")))
    }
}
