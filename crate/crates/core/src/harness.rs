//! The round-by-round experiment loop.
//!
//! One replicate: split the data, buy free labels for the initial and
//! validation sets, train, then for each round select/allocate, annotate,
//! charge the ledger, re-estimate the transition matrix, retrain from a fresh
//! initialization and evaluate. Replicates over seeds run in parallel; their
//! results are collected in seed-list order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    score_candidates, select_badge, select_entropy, select_random, AllocationPlan, Allocator, GreedyAllocator,
    ScoredCandidate,
};
use crate::annotators::{
    calibrated_transition, coarse_centroids, human_annotate, AnnotationRecord, CostSchedule, ExternalCommand,
    Granularity, SimulatedVlm, VlmSimConfig, WeakAnnotator,
};
use crate::classifier::{evaluate, train, ClassifierModel, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::label::{
    load_features, read_feature_rows, split_initial, synth_generate, Dataset, InstanceId, LabelSpace, LearnerView,
    PoolPartition, SynthConfig,
};
use crate::noise::{estimate_transition, TransitionMatrix, TrustedPair};
use crate::rational::{self, Cost};

/// Environment variable capping the number of replicates run at once.
pub const THREADS_ENV: &str = "WEAKAL_MAX_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RandomFull,
    EntropyFull,
    BadgeFull,
    MixedAllocated,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::RandomFull => "random-full",
            Method::EntropyFull => "entropy-full",
            Method::BadgeFull => "badge-full",
            Method::MixedAllocated => "mixed-allocated",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSources {
    pub label_space: PathBuf,
    pub train_features: PathBuf,
    pub test_features: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed of the synthetic generator. The dataset is shared by all
    /// replicates; replicate seeds vary the split, annotators and training.
    pub seed: u64,
    pub synthetic: SynthConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<FileSources>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            seed: 0,
            synthetic: SynthConfig::default(),
            files: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    Simulated,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    pub kind: AnnotatorKind,
    /// Diagonal mass of the generated transition matrix.
    pub accuracy: f64,
    pub abstain_prob: f64,
    /// Number of nearest coarse classes that share the error mass.
    pub neighbours: usize,
    /// Explicit generating matrix; overrides `accuracy` and `neighbours`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition_csv: Option<PathBuf>,
    /// Program and leading arguments for the external annotator.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    /// Directory for external request/response files.
    pub workdir: PathBuf,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            kind: AnnotatorKind::Simulated,
            accuracy: 0.85,
            abstain_prob: 0.0,
            neighbours: 3,
            transition_csv: None,
            command: Vec::new(),
            workdir: PathBuf::from("external-annotator"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub init_per_class: usize,
    pub val_per_class: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            init_per_class: 3,
            val_per_class: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub rounds: usize,
    #[serde(with = "rational::serde_str")]
    pub budget_per_round: Cost,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Forward correction in the weak phase; off means `T = I`.
    pub correction_enabled: bool,
    /// Re-estimate `T` every round from all trusted pairs so far, instead of
    /// only once from the initial labeled set.
    pub reestimate_transition: bool,
    /// Additive smoothing of the transition estimate.
    pub smoothing: f64,
    /// Weakly labeled instances stay eligible for a full label.
    pub allow_upgrade: bool,
    /// Start each round's training from the previous round's parameters.
    pub warm_start: bool,
    pub costs: CostSchedule,
    pub split: SplitConfig,
    pub data: DataConfig,
    pub vlm: VlmConfig,
    pub train: TrainConfig,
    /// Directory that relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rounds: 5,
            budget_per_round: Cost::from_integer(20),
            methods: vec![Method::MixedAllocated, Method::EntropyFull],
            seeds: vec![0, 1, 2],
            correction_enabled: true,
            reestimate_transition: true,
            smoothing: 1.0,
            allow_upgrade: true,
            warm_start: false,
            costs: CostSchedule::default(),
            split: SplitConfig::default(),
            data: DataConfig::default(),
            vlm: VlmConfig::default(),
            train: TrainConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds: must be at least 1".into()));
        }
        if self.budget_per_round <= Cost::from_integer(0) {
            return Err(Error::Config("budget_per_round: must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods: at least one method is required".into()));
        }
        let unique: BTreeSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::Config("methods: duplicate entries".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::Config("smoothing: must be finite and >= 0".into()));
        }
        CostSchedule::new(self.costs.c_full, self.costs.c_weak).map_err(|e| prefix("costs", e))?;
        self.train.validate().map_err(|e| prefix("train", e))?;
        if !(0.0..=1.0).contains(&self.vlm.accuracy) || !(0.0..=1.0).contains(&self.vlm.abstain_prob) {
            return Err(Error::Config("vlm: accuracy and abstain_prob must lie in [0, 1]".into()));
        }
        if self.vlm.kind == AnnotatorKind::External && self.vlm.command.is_empty() {
            return Err(Error::Config("vlm.command: required for the external annotator".into()));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate().map_err(|e| prefix("data.synthetic", e))?,
            DataSource::Files if self.data.files.is_none() => {
                return Err(Error::Config("data.files: required when data.source = \"files\"".into()))
            }
            DataSource::Files => {}
        }
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Full labels a baseline buys per round: `floor(B / c_full)`.
    pub fn baseline_batch(&self) -> usize {
        rational::floor_div(&self.budget_per_round, &self.costs.c_full).max(0) as usize
    }
}

fn prefix(section: &str, err: Error) -> Error {
    match err {
        Error::Config(msg) => Error::Config(format!("{section}: {msg}")),
        other => other,
    }
}

/// Deterministic child seed for a named random stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SPLIT: u64 = 1;
const STREAM_VLM: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_SELECT: u64 = 5;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => Ok(synth_generate(&cfg.data.synthetic, cfg.data.seed)?.dataset),
        DataSource::Files => {
            let files = cfg.data.files.as_ref().expect("validated");
            let space = LabelSpace::load_json(&cfg.resolve(&files.label_space))?;
            let train = load_features(&cfg.resolve(&files.train_features), &space)?;
            let test = read_feature_rows(&cfg.resolve(&files.test_features), &space)?;
            Dataset::new(space, train.instances().to_vec(), test)
        }
    }
}

/// The generating matrix of the simulated weak annotator.
pub fn true_transition(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TransitionMatrix> {
    let k = ds.space().num_coarse();
    let t = match &cfg.vlm.transition_csv {
        Some(path) => TransitionMatrix::load_csv(&cfg.resolve(path))?,
        None => calibrated_transition(k, cfg.vlm.accuracy, Some(&coarse_centroids(ds)), cfg.vlm.neighbours)?,
    };
    if t.dim() != k {
        return Err(Error::Config(format!("vlm.transition_csv: {0}x{0} matrix for {k} coarse classes", t.dim())));
    }
    Ok(t)
}

/// Exact record of every charge, grouped by round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BudgetLedger {
    pub rounds: Vec<Vec<Cost>>,
    pub total_full: Cost,
    pub total_weak: Cost,
}

impl BudgetLedger {
    fn open_round(&mut self) {
        self.rounds.push(Vec::new());
    }

    fn charge(&mut self, record: &AnnotationRecord) {
        self.rounds.last_mut().expect("round opened").push(record.cost_charged);
        match record.granularity {
            Granularity::Full => self.total_full += record.cost_charged,
            Granularity::Weak => self.total_weak += record.cost_charged,
        }
    }

    pub fn round_total(&self, round: usize) -> Cost {
        self.rounds.get(round).map_or(Cost::from_integer(0), |r| r.iter().sum())
    }

    pub fn total(&self) -> Cost {
        self.total_full + self.total_weak
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub accuracy: f64,
    /// Fully labeled training instances so far, initial set included.
    pub full_count: usize,
    /// Non-abstained weak labels bought so far.
    pub weak_count: usize,
    /// Current training-set composition (upgrades move an instance from
    /// the weak side to the full side).
    pub train_full: usize,
    pub train_weak: usize,
    pub bought_full: usize,
    pub bought_weak: usize,
    pub abstained: usize,
    pub cost_spent: Cost,
    pub transition: TransitionMatrix,
    pub plan: AllocationPlan,
    pub warnings: Vec<String>,
}

/// Everything one (method, seed) replicate produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub initial_accuracy: f64,
    pub initial_full: usize,
    pub reports: Vec<RoundReport>,
    /// Budgeted purchases, in order.
    pub records: Vec<AnnotationRecord>,
    pub ledger: BudgetLedger,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: Method,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub methods: Vec<MethodResult>,
}

impl ExperimentResult {
    pub fn method(&self, method: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Sample mean and sample standard deviation (zero for one sample).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(runs: &[SeedRun], rounds: usize) -> Vec<AggregateRow> {
    (0..rounds)
        .map(|r| {
            let accs: Vec<f64> = runs.iter().map(|run| run.reports[r].accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            AggregateRow {
                round: r + 1,
                mean_acc,
                std_acc,
            }
        })
        .collect()
}

/// Per-round (full fraction, weak fraction) of the labeled training set.
pub fn label_ratio_series(reports: &[RoundReport]) -> Vec<(f64, f64)> {
    reports
        .iter()
        .map(|r| {
            let total = (r.train_full + r.train_weak) as f64;
            if total == 0.0 {
                (0.0, 0.0)
            } else {
                (r.train_full as f64 / total, r.train_weak as f64 / total)
            }
        })
        .collect()
}

/// Chooses this round's purchases using nothing but features.
#[allow(clippy::too_many_arguments)]
pub fn plan_acquisition(
    method: Method,
    model: &ClassifierModel,
    t: &TransitionMatrix,
    view: &LearnerView<'_>,
    pool: &[InstanceId],
    upgradable: &[InstanceId],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<AllocationPlan> {
    let k = cfg.baseline_batch().min(pool.len());
    let sched = &cfg.costs;
    Ok(match method {
        Method::RandomFull => AllocationPlan::full_only(&select_random(pool, k, seed)?, sched),
        Method::EntropyFull => AllocationPlan::full_only(&select_entropy(model, view, pool, k)?, sched),
        Method::BadgeFull => AllocationPlan::full_only(&select_badge(model, view, pool, k, seed)?, sched),
        Method::MixedAllocated => {
            let mut scored = score_candidates(model, t, view, pool)?;
            let upgrades: Vec<ScoredCandidate> = score_candidates(model, t, view, upgradable)?
                .into_iter()
                .map(|c| ScoredCandidate {
                    v_weak: 0.0,
                    weak_eligible: false,
                    ..c
                })
                .collect();
            scored.extend(upgrades);
            GreedyAllocator::default().allocate(&scored, sched, cfg.budget_per_round)
        }
    })
}

/// Mutable state of one replicate between rounds.
pub struct Replicate<'a> {
    ds: &'a Dataset,
    method: Method,
    seed: u64,
    partition: PoolPartition,
    /// Fine labels from the human, initial set included.
    full_labels: BTreeMap<InstanceId, usize>,
    /// Coarse labels currently used for weak training.
    weak_labels: BTreeMap<InstanceId, usize>,
    /// Latest weak-annotator answer for every instance ever sent to it.
    weak_answers: BTreeMap<InstanceId, Option<usize>>,
    initial_pairs: Vec<TrustedPair>,
    validation: Vec<(InstanceId, usize)>,
    annotator: Box<dyn WeakAnnotator + 'a>,
    transition: TransitionMatrix,
    model: ClassifierModel,
    round: usize,
    weak_bought: usize,
    pub records: Vec<AnnotationRecord>,
    pub ledger: BudgetLedger,
}

impl<'a> Replicate<'a> {
    /// Splits the data, labels the initial and validation sets for free,
    /// queries the weak annotator on the initial set to seed the transition
    /// estimate, and trains the round-0 model.
    pub fn start(
        ds: &'a Dataset,
        method: Method,
        seed: u64,
        mut annotator: Box<dyn WeakAnnotator + 'a>,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let space = ds.space();
        let partition = split_initial(
            ds,
            cfg.split.init_per_class,
            cfg.split.val_per_class,
            derive_seed(seed, STREAM_SPLIT),
        )?;
        let human = |id: InstanceId| human_annotate(ds.instance(id), &cfg.costs);
        let full_labels: BTreeMap<InstanceId, usize> = partition
            .initial
            .iter()
            .map(|&id| (id, human(id).label.expect("human labels never abstain")))
            .collect();
        let validation = partition
            .validation
            .iter()
            .map(|&id| (id, human(id).label.expect("human labels never abstain")))
            .collect();

        let mut weak_answers = BTreeMap::new();
        let mut initial_pairs = Vec::new();
        let k = space.num_coarse();
        let transition = if method == Method::MixedAllocated {
            let batch: Vec<_> = partition.initial.iter().map(|&id| ds.instance(id)).collect();
            for rec in annotator.annotate_batch(&batch, space, &cfg.costs)? {
                weak_answers.insert(rec.instance_id, rec.label);
                initial_pairs.push(TrustedPair {
                    true_coarse: space.coarsen(full_labels[&rec.instance_id])?,
                    vlm_pred: rec.label,
                });
            }
            estimate_transition(&initial_pairs, k, cfg.smoothing)?
        } else {
            TransitionMatrix::identity(k)
        };

        let mut rep = Replicate {
            ds,
            method,
            seed,
            partition,
            full_labels,
            weak_labels: BTreeMap::new(),
            weak_answers,
            initial_pairs,
            validation,
            annotator,
            transition,
            model: ClassifierModel::zeros(ds.dim(), cfg.train.hidden, space.num_fine(), k),
            round: 0,
            weak_bought: 0,
            records: Vec::new(),
            ledger: BudgetLedger::default(),
        };
        rep.retrain(cfg)?;
        Ok(rep)
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn partition(&self) -> &PoolPartition {
        &self.partition
    }

    pub fn full_labels(&self) -> &BTreeMap<InstanceId, usize> {
        &self.full_labels
    }

    pub fn weak_labels(&self) -> &BTreeMap<InstanceId, usize> {
        &self.weak_labels
    }

    pub fn accuracy(&self) -> Result<f64> {
        let test: Vec<_> = self.partition.test.iter().map(|&id| self.ds.instance(id)).collect();
        evaluate(&self.model, &test)
    }

    fn trusted_pairs(&self, cfg: &ExperimentConfig) -> Result<Vec<TrustedPair>> {
        if !cfg.reestimate_transition {
            return Ok(self.initial_pairs.clone());
        }
        let space = self.ds.space();
        self.full_labels
            .iter()
            .filter_map(|(id, &fine)| self.weak_answers.get(id).map(|&ans| (fine, ans)))
            .map(|(fine, ans)| {
                Ok(TrustedPair {
                    true_coarse: space.coarsen(fine)?,
                    vlm_pred: ans,
                })
            })
            .collect()
    }

    fn retrain(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        let space = self.ds.space();
        let start = if cfg.warm_start && self.round > 0 {
            self.model.clone()
        } else {
            ClassifierModel::new(
                self.ds.dim(),
                cfg.train.hidden,
                space.num_fine(),
                space.num_coarse(),
                derive_seed(self.seed, STREAM_INIT),
            )
        };
        let examples = |labels: &BTreeMap<InstanceId, usize>| -> Vec<Example<'a>> {
            labels.iter().map(|(&id, &y)| (self.ds.instance(id).features(), y)).collect()
        };
        let full = examples(&self.full_labels);
        let weak = examples(&self.weak_labels);
        let val: Vec<Example<'a>> = self
            .validation
            .iter()
            .map(|&(id, y)| (self.ds.instance(id).features(), y))
            .collect();
        let identity;
        let t = if cfg.correction_enabled {
            &self.transition
        } else {
            identity = TransitionMatrix::identity(space.num_coarse());
            &identity
        };
        let train_cfg = TrainConfig {
            seed: derive_seed(self.seed, STREAM_TRAIN),
            ..cfg.train.clone()
        };
        let (model, _) = train(start, &full, &weak, t, &val, &train_cfg)?;
        self.model = model;
        Ok(())
    }

    /// Select/allocate, annotate, update the pools and ledger, re-estimate
    /// the transition matrix, retrain and evaluate.
    pub fn run_round(&mut self, cfg: &ExperimentConfig) -> Result<RoundReport> {
        self.round += 1;
        let space = self.ds.space();
        let pool: Vec<InstanceId> = self.partition.unlabeled.iter().copied().collect();
        let upgradable: Vec<InstanceId> = if cfg.allow_upgrade {
            self.weak_labels.keys().copied().collect()
        } else {
            Vec::new()
        };
        let plan = plan_acquisition(
            self.method,
            &self.model,
            &self.transition,
            &self.ds.learner_view(),
            &pool,
            &upgradable,
            cfg,
            derive_seed(derive_seed(self.seed, STREAM_SELECT), self.round as u64),
        )?;
        debug_assert!(plan.planned_cost <= cfg.budget_per_round);

        let mut warnings = Vec::new();
        if plan.is_empty() {
            warnings.push(format!(
                "round {}: no affordable action (budget {}, pool {})",
                self.round,
                rational::format_rational(&cfg.budget_per_round),
                pool.len()
            ));
        }

        self.ledger.open_round();
        let mut bought_full = 0;
        let mut bought_weak = 0;
        let mut abstained = 0;
        for &id in &plan.full_ids {
            let rec = human_annotate(self.ds.instance(id), &cfg.costs);
            self.ledger.charge(&rec);
            self.partition.unlabeled.remove(&id);
            self.weak_labels.remove(&id);
            self.full_labels.insert(id, rec.label.expect("human labels never abstain"));
            self.records.push(rec);
            bought_full += 1;
        }
        let weak_batch: Vec<_> = plan.weak_ids.iter().map(|&id| self.ds.instance(id)).collect();
        let weak_records = self.annotator.annotate_batch(&weak_batch, space, &cfg.costs)?;
        for rec in weak_records {
            self.ledger.charge(&rec);
            self.weak_answers.insert(rec.instance_id, rec.label);
            match rec.label {
                Some(coarse) => {
                    self.partition.unlabeled.remove(&rec.instance_id);
                    self.weak_labels.insert(rec.instance_id, coarse);
                    bought_weak += 1;
                }
                // Abstained instances stay in the pool.
                None => abstained += 1,
            }
            self.records.push(rec);
        }
        self.weak_bought += bought_weak;

        if self.method == Method::MixedAllocated && cfg.reestimate_transition {
            let pairs = self.trusted_pairs(cfg)?;
            self.transition = estimate_transition(&pairs, space.num_coarse(), cfg.smoothing)?;
        }
        self.retrain(cfg)?;

        Ok(RoundReport {
            round: self.round,
            accuracy: self.accuracy()?,
            full_count: self.full_labels.len(),
            weak_count: self.weak_bought,
            train_full: self.full_labels.len(),
            train_weak: self.weak_labels.len(),
            bought_full,
            bought_weak,
            abstained,
            cost_spent: self.ledger.round_total(self.round - 1),
            transition: self.transition.clone(),
            plan,
            warnings,
        })
    }
}

fn make_annotator<'a>(
    cfg: &ExperimentConfig,
    t: &TransitionMatrix,
    method: Method,
    seed: u64,
) -> Result<Box<dyn WeakAnnotator + 'a>> {
    Ok(match cfg.vlm.kind {
        AnnotatorKind::Simulated => Box::new(SimulatedVlm::new(VlmSimConfig {
            true_transition: t.clone(),
            abstain_prob: cfg.vlm.abstain_prob,
            seed: derive_seed(seed, STREAM_VLM),
        })?),
        AnnotatorKind::External => {
            let (program, args) = cfg.vlm.command.split_first().expect("validated");
            let dir = cfg.resolve(&cfg.vlm.workdir).join(format!("{method}-seed{seed}"));
            Box::new(ExternalCommand::new(program.clone(), args.to_vec(), dir))
        }
    })
}

/// Runs one replicate of one method through every round.
pub fn run_replicate(ds: &Dataset, t: &TransitionMatrix, method: Method, seed: u64, cfg: &ExperimentConfig) -> Result<SeedRun> {
    let annotator = make_annotator(cfg, t, method, seed)?;
    let mut rep = Replicate::start(ds, method, seed, annotator, cfg)?;
    let initial_accuracy = rep.accuracy()?;
    let initial_full = rep.full_labels.len();
    let reports = (0..cfg.rounds).map(|_| rep.run_round(cfg)).collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        initial_accuracy,
        initial_full,
        reports,
        records: rep.records,
        ledger: rep.ledger,
    })
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Every configured method over every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    run_experiment_on(&ds, cfg)
}

/// As [`run_experiment`], on an already loaded dataset.
pub fn run_experiment_on(ds: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let t = true_transition(cfg, ds)?;
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run_all = || -> Vec<Result<SeedRun>> {
        jobs.par_iter()
            .map(|&(method, seed)| {
                run_replicate(ds, &t, method, seed, cfg).map_err(|e| Error::Replicate {
                    seed,
                    source: Box::new(e),
                })
            })
            .collect()
    };
    let results = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("{THREADS_ENV}: {e}")))?
            .install(run_all),
        None => run_all(),
    };

    let mut results = results.into_iter();
    let methods = cfg
        .methods
        .iter()
        .map(|&method| {
            let runs = results.by_ref().take(cfg.seeds.len()).collect::<Result<Vec<_>>>()?;
            Ok(MethodResult {
                method,
                aggregate: aggregate(&runs, cfg.rounds),
                runs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { methods })
}

/// One experiment per weak cost, everything else fixed.
pub fn sweep_weak_cost(cfg: &ExperimentConfig, values: &[Cost]) -> Result<Vec<(Cost, ExperimentResult)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one weak cost".into()));
    }
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    values
        .iter()
        .map(|&c_weak| {
            let mut run_cfg = cfg.clone();
            run_cfg.costs = CostSchedule::new(cfg.costs.c_full, c_weak)?;
            Ok((c_weak, run_experiment_on(&ds, &run_cfg)?))
        })
        .collect()
}
