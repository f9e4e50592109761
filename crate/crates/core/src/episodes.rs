//! Episode sampling and the episodic evaluation protocol.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{compute_map, AttentionMap, FeatureTensor, PriorHead};
use crate::classify::{argmax, CosineHead, TAU_INIT};
use crate::data_io::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, mean_ci95, MeanCi};
use crate::train::{
    adapt_novel, base_train, init_head, support_prototypes, Adapter, SupportExample, TrainConfig,
};

/// Number of examples kept per base class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ShotsRepr", into = "ShotsRepr")]
pub enum BaseShots {
    Count(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotsRepr {
    Count(usize),
    Word(String),
}

impl From<BaseShots> for ShotsRepr {
    fn from(k: BaseShots) -> Self {
        match k {
            BaseShots::Count(n) => ShotsRepr::Count(n),
            BaseShots::All => ShotsRepr::Word("all".into()),
        }
    }
}

impl TryFrom<ShotsRepr> for BaseShots {
    type Error = Error;

    fn try_from(r: ShotsRepr) -> Result<Self> {
        match r {
            ShotsRepr::Count(n) => Ok(BaseShots::Count(n)),
            ShotsRepr::Word(w) => w.parse(),
        }
    }
}

impl fmt::Display for BaseShots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseShots::Count(n) => write!(f, "{n}"),
            BaseShots::All => f.write_str("all"),
        }
    }
}

impl FromStr for BaseShots {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(BaseShots::All);
        }
        s.parse()
            .map(BaseShots::Count)
            .map_err(|_| Error::InvalidParameter(format!("k must be a count or \"all\", got {s:?}")))
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer), so task
/// seeds do not depend on evaluation order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reference to one stored example and its label within the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExampleRef {
    pub class: usize,
    pub example: usize,
    pub label: usize,
}

/// Keeps `k` random examples of every base class, labelled `0..c` in
/// manifest order.
pub fn sample_base_subset(dataset: &Dataset, k: BaseShots, seed: u64) -> Result<Vec<ExampleRef>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (label, &ci) in dataset.split_classes(Split::Base).iter().enumerate() {
        let class = &dataset.classes[ci];
        let n = class.examples.len();
        let picks: Vec<usize> = match k {
            BaseShots::All => (0..n).collect(),
            BaseShots::Count(k) if k > n => {
                return Err(Error::InsufficientData(format!(
                    "base class {:?} has {n} examples, {k} requested",
                    class.name
                )))
            }
            BaseShots::Count(k) => sample(&mut rng, n, k).into_vec(),
        };
        out.extend(picks.into_iter().map(|example| ExampleRef {
            class: ci,
            example,
            label,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub support: Vec<ExampleRef>,
    pub query: Vec<ExampleRef>,
}

/// Samples `ways` classes of `split`, then `shots + queries` distinct
/// examples of each; the first `shots` form the support set.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    ways: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(Error::InvalidParameter("ways and shots must be at least 1".into()));
    }
    let pool = dataset.split_classes(split);
    if pool.len() < ways {
        return Err(Error::InsufficientData(format!(
            "{split} split has {} classes, {ways}-way tasks requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode = Episode {
        ways,
        shots,
        queries,
        support: Vec::with_capacity(ways * shots),
        query: Vec::with_capacity(ways * queries),
    };
    for (label, pick) in sample(&mut rng, pool.len(), ways).into_iter().enumerate() {
        let class = pool[pick];
        let n = dataset.classes[class].examples.len();
        if n < shots + queries {
            return Err(Error::InsufficientData(format!(
                "class {:?} has {n} examples, {} needed",
                dataset.classes[class].name,
                shots + queries
            )));
        }
        let picks = sample(&mut rng, n, shots + queries).into_vec();
        let refs = picks.into_iter().map(|example| ExampleRef {
            class,
            example,
            label,
        });
        let (s, q): (Vec<_>, Vec<_>) = refs.enumerate().partition(|(i, _)| *i < shots);
        episode.support.extend(s.into_iter().map(|(_, r)| r));
        episode.query.extend(q.into_iter().map(|(_, r)| r));
    }
    Ok(episode)
}

/// Precomputed attention maps for every example of a dataset, indexed
/// `[class][example]`.
#[derive(Debug, Clone)]
pub struct AttentionStore {
    maps: Vec<Vec<AttentionMap>>,
}

impl AttentionStore {
    pub fn compute(dataset: &Dataset, head: &PriorHead, temp: f64) -> Result<Self> {
        let maps = dataset
            .classes
            .iter()
            .map(|c| {
                c.examples
                    .par_iter()
                    .map(|t| compute_map(t, head, temp))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionStore { maps })
    }

    /// Wraps maps indexed `[class][example]`; each must be normalized.
    pub fn from_maps(maps: Vec<Vec<AttentionMap>>) -> Result<Self> {
        if maps.iter().flatten().any(|m| !m.is_normalized()) {
            return Err(Error::InvalidInput("attention maps must be normalized".into()));
        }
        Ok(AttentionStore { maps })
    }

    pub fn get(&self, class: usize, example: usize) -> &AttentionMap {
        &self.maps[class][example]
    }

    pub fn classes(&self) -> &[Vec<AttentionMap>] {
        &self.maps
    }
}

/// One cell of the evaluation grid.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub use_attention: bool,
    pub use_adaptation: bool,
    pub adapter: Adapter,
    /// Cosine scale used for adaptation and inference (frozen).
    pub tau: f64,
    pub adapt: TrainConfig,
    pub split: Split,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl PipelineConfig {
    pub fn new(d: usize) -> Self {
        PipelineConfig {
            use_attention: true,
            use_adaptation: false,
            adapter: Adapter::identity(d),
            tau: TAU_INIT,
            adapt: TrainConfig::novel(),
            split: Split::Novel,
            ways: 5,
            shots: 1,
            queries: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean accuracy and 95% half-width, in percent.
    pub accuracy: MeanCi,
    pub tasks: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub use_attention: bool,
    pub use_adaptation: bool,
    pub seed: u64,
    /// Per-task accuracies in `[0, 1]`, in task order.
    pub per_task: Vec<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.accuracy.fmt(f)
    }
}

/// Runs `body` on a pool with `threads` workers (0 = rayon's default).
pub fn with_threads<T: Send>(threads: usize, body: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(body))
}

/// Accuracy on one episode.
pub fn run_task(
    dataset: &Dataset,
    maps: Option<&AttentionStore>,
    config: &PipelineConfig,
    episode: &Episode,
) -> Result<f64> {
    let uniform = AttentionMap::uniform(dataset.w, dataset.h)?;
    let map_of = |r: &ExampleRef| -> &AttentionMap {
        match (config.use_attention, maps) {
            (true, Some(store)) => store.get(r.class, r.example),
            _ => &uniform,
        }
    };
    let tensor_of = |r: &ExampleRef| -> &FeatureTensor { &dataset.classes[r.class].examples[r.example] };

    let support: Vec<SupportExample> = episode
        .support
        .iter()
        .map(|r| SupportExample {
            features: tensor_of(r),
            label: r.label,
            map: map_of(r),
        })
        .collect();
    let (adapter, protos) = if config.use_adaptation {
        let out = adapt_novel(&support, config.adapter.clone(), config.tau, &config.adapt)?;
        (out.adapter, out.prototypes)
    } else {
        let protos = support_prototypes(&support, &config.adapter)?;
        (config.adapter.clone(), protos)
    };
    let head = protos.to_head(config.tau)?;

    let mut correct = 0usize;
    for r in &episode.query {
        let pooled = crate::attention::gwap(tensor_of(r), map_of(r))?;
        let e = adapter.apply(&pooled);
        if predict_nearest(&e, &head)? == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len().max(1) as f64)
}

fn predict_nearest(e: &[f64], head: &CosineHead) -> Result<usize> {
    let sims = (0..head.classes())
        .map(|j| cosine_sim(e, head.class_weights(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&sims))
}

/// Mean accuracy over `tasks` episodes, each seeded from `(seed, index)`.
/// Tasks run on `threads` workers; results are reduced in task order.
pub fn evaluate(
    dataset: &Dataset,
    maps: Option<&AttentionStore>,
    config: &PipelineConfig,
    tasks: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if config.use_attention && maps.is_none() {
        return Err(Error::InvalidParameter(
            "attention requested but no attention maps supplied".into(),
        ));
    }
    if tasks < 2 {
        return Err(Error::InvalidParameter(format!(
            "at least 2 tasks are needed for a confidence interval, got {tasks}"
        )));
    }
    if config.adapter.channels() != dataset.d {
        return Err(Error::Shape(format!(
            "adapter is {0}x{0}, dataset has {1} channels",
            config.adapter.channels(),
            dataset.d
        )));
    }
    let per_task = with_threads(threads, || {
        (0..tasks)
            .into_par_iter()
            .map(|t| {
                let wrap = |e: Error| Error::Task {
                    index: t,
                    source: Box::new(e),
                };
                let ep = sample_episode(
                    dataset,
                    config.split,
                    config.ways,
                    config.shots,
                    config.queries,
                    derive_seed(seed, t as u64),
                )
                .map_err(wrap)?;
                check_disjoint(&ep).map_err(wrap)?;
                run_task(dataset, maps, config, &ep).map_err(wrap)
            })
            .collect::<Result<Vec<f64>>>()
    })??;
    let pct: Vec<f64> = per_task.iter().map(|a| 100.0 * a).collect();
    Ok(EvalReport {
        accuracy: mean_ci95(&pct)?,
        tasks,
        ways: config.ways,
        shots: config.shots,
        queries: config.queries,
        use_attention: config.use_attention,
        use_adaptation: config.use_adaptation,
        seed,
        per_task,
    })
}

fn check_disjoint(ep: &Episode) -> Result<()> {
    let support: std::collections::HashSet<(usize, usize)> =
        ep.support.iter().map(|r| (r.class, r.example)).collect();
    if ep.query.iter().any(|r| support.contains(&(r.class, r.example))) {
        return Err(Error::InvalidInput("query overlaps the support set".into()));
    }
    Ok(())
}

/// Axes and settings of an evaluation grid.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub ks: Vec<BaseShots>,
    pub shots: Vec<usize>,
    pub attention: Vec<bool>,
    pub adaptation: Vec<bool>,
    pub ways: usize,
    pub queries: usize,
    pub tasks: usize,
    pub split: Split,
    /// Initial cosine scale.
    pub tau: f64,
    pub base: TrainConfig,
    pub adapt: TrainConfig,
    pub seed: u64,
    pub threads: usize,
}

/// One cell of a grid, as emitted in the line-delimited output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub k: BaseShots,
    pub kprime: usize,
    pub attention: bool,
    pub adaptation: bool,
    pub mean: f64,
    pub ci: f64,
    pub n_tasks: usize,
    pub seed: u64,
}

impl GridRow {
    fn from_report(k: BaseShots, report: &EvalReport) -> Self {
        GridRow {
            k,
            kprime: report.shots,
            attention: report.use_attention,
            adaptation: report.use_adaptation,
            mean: report.accuracy.mean,
            ci: report.accuracy.halfwidth,
            n_tasks: report.tasks,
            seed: report.seed,
        }
    }

    pub fn accuracy(&self) -> MeanCi {
        MeanCi {
            mean: self.mean,
            halfwidth: self.ci,
        }
    }
}

/// Trains on a `k`-per-class base subset, starting the cosine scale at
/// `tau`. `k = 0` yields the identity adapter and leaves `tau` unchanged.
pub fn train_base(
    dataset: &Dataset,
    k: BaseShots,
    tau: f64,
    config: &TrainConfig,
) -> Result<(Adapter, CosineHead, Vec<f64>)> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let refs = sample_base_subset(dataset, k, derive_seed(config.seed, 0xba5e))?;
    let classes = dataset.split_classes(Split::Base).len().max(1);
    let mut head = init_head(dataset.d, classes, derive_seed(config.seed, 0x4ead))?;
    head.set_tau(tau);
    let batch: Vec<(FeatureTensor, usize)> = refs
        .iter()
        .map(|r| (dataset.classes[r.class].examples[r.example].clone(), r.label))
        .collect();
    let out = base_train(&batch, Adapter::identity(dataset.d), head, config)?;
    Ok((out.adapter, out.head, out.losses))
}

/// Seed of the base-training stage for a run seeded with `seed`.
pub fn base_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x7ea1)
}

/// Base-trains once per `k`, then evaluates every `(k', attention,
/// adaptation)` cell with the same task seeds.
/// `maps` is required when any cell uses attention.
pub fn run_grid(dataset: &Dataset, maps: Option<&AttentionStore>, spec: &GridSpec) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &k in &spec.ks {
        let base = TrainConfig {
            seed: base_seed(spec.seed),
            ..spec.base.clone()
        };
        let (adapter, trained, _) = with_threads(spec.threads, || train_base(dataset, k, spec.tau, &base))??;
        rows.extend(evaluate_cells(dataset, maps, k, &adapter, trained.tau(), spec)?);
    }
    Ok(rows)
}

/// Attention maps for a grid, computed only when some cell uses them.
pub fn attention_for(
    dataset: &Dataset,
    head: &PriorHead,
    temp: f64,
    spec: &GridSpec,
) -> Result<Option<AttentionStore>> {
    if !spec.attention.contains(&true) {
        return Ok(None);
    }
    Ok(Some(with_threads(spec.threads, || AttentionStore::compute(dataset, head, temp))??))
}

/// Evaluates every `(k', attention, adaptation)` cell for one trained
/// adapter.
pub fn evaluate_cells(
    dataset: &Dataset,
    maps: Option<&AttentionStore>,
    k: BaseShots,
    adapter: &Adapter,
    tau: f64,
    spec: &GridSpec,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &shots in &spec.shots {
        for &use_attention in &spec.attention {
            for &use_adaptation in &spec.adaptation {
                let config = PipelineConfig {
                    use_attention,
                    use_adaptation,
                    adapter: adapter.clone(),
                    tau,
                    adapt: spec.adapt.clone(),
                    split: spec.split,
                    ways: spec.ways,
                    shots,
                    queries: spec.queries,
                };
                let report = evaluate(dataset, maps, &config, spec.tasks, spec.seed, spec.threads)?;
                rows.push(GridRow::from_report(k, &report));
            }
        }
    }
    Ok(rows)
}

/// Human-readable grid, one line per cell.
pub fn format_grid(rows: &[GridRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut out = format!(
        "{:>5} {:>3} {:>9} {:>10} {:>15} {:>7}\n",
        "k", "k'", "attention", "adaptation", "accuracy", "tasks"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>5} {:>3} {:>9} {:>10} {:>15} {:>7}\n",
            r.k.to_string(),
            r.kprime,
            mark(r.attention),
            mark(r.adaptation),
            r.accuracy().to_string(),
            r.n_tasks
        ));
    }
    out
}
