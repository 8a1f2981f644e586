//! The two supervision sources: an exact human oracle for fine labels and a
//! noisy weak annotator for coarse labels. The weak side is either a seeded
//! simulator driven by a transition matrix, or an external process speaking
//! the JSONL request/response protocol.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Dataset, Instance, InstanceId, LabelSpace};
use crate::noise::TransitionMatrix;
use crate::rational::{self, Cost};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSchedule {
    #[serde(with = "rational::serde_str")]
    pub c_full: Cost,
    #[serde(with = "rational::serde_str")]
    pub c_weak: Cost,
}

impl CostSchedule {
    pub fn new(c_full: Cost, c_weak: Cost) -> Result<Self> {
        let zero = Cost::from_integer(0);
        if c_full <= zero || c_weak <= zero {
            return Err(Error::Config("annotation costs must be positive".into()));
        }
        if c_weak > c_full {
            return Err(Error::Config(format!(
                "weak cost {} exceeds full cost {}",
                rational::format_rational(&c_weak),
                rational::format_rational(&c_full)
            )));
        }
        Ok(CostSchedule { c_full, c_weak })
    }

    pub fn cost_of(&self, granularity: Granularity) -> Cost {
        match granularity {
            Granularity::Full => self.c_full,
            Granularity::Weak => self.c_weak,
        }
    }
}

impl Default for CostSchedule {
    fn default() -> Self {
        CostSchedule {
            c_full: Cost::from_integer(1),
            c_weak: Cost::new(1, 50),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Vlm,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Full,
    Weak,
}

/// One purchased label. `label` is a fine index for full records and a
/// coarse index for weak ones; `None` means the annotator abstained, which
/// is still charged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub instance_id: InstanceId,
    pub source: Source,
    pub granularity: Granularity,
    pub label: Option<usize>,
    pub cost_charged: Cost,
}

impl AnnotationRecord {
    pub fn abstained(&self) -> bool {
        self.label.is_none()
    }
}

pub fn human_annotate(inst: &Instance, sched: &CostSchedule) -> AnnotationRecord {
    AnnotationRecord {
        instance_id: inst.id(),
        source: Source::Human,
        granularity: Granularity::Full,
        label: Some(inst.reveal_fine()),
        cost_charged: sched.c_full,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VlmSimConfig {
    pub true_transition: TransitionMatrix,
    pub abstain_prob: f64,
    pub seed: u64,
}

impl VlmSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abstain_prob) {
            return Err(Error::Config(format!("abstain_prob {} outside [0, 1]", self.abstain_prob)));
        }
        // TransitionMatrix enforces row-stochasticity at construction.
        Ok(())
    }
}

/// Seeded stand-in for a vision-language model answering coarse queries.
/// Errors are class-conditional: the answer depends only on the true coarse
/// class, through the matching row of the generating matrix.
#[derive(Clone, Debug)]
pub struct SimulatedVlm {
    cfg: VlmSimConfig,
    rng: ChaCha8Rng,
}

impl SimulatedVlm {
    pub fn new(cfg: VlmSimConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(SimulatedVlm { cfg, rng })
    }

    pub fn config(&self) -> &VlmSimConfig {
        &self.cfg
    }

    pub fn annotate(&mut self, inst: &Instance, space: &LabelSpace, sched: &CostSchedule) -> Result<AnnotationRecord> {
        let t = &self.cfg.true_transition;
        if t.dim() != space.num_coarse() {
            return Err(Error::Config(format!(
                "weak annotator has {} coarse classes, label space has {}",
                t.dim(),
                space.num_coarse()
            )));
        }
        let true_coarse = space.coarsen(inst.reveal_fine())?;
        // Both draws happen on every call so the stream position depends only
        // on the call count.
        let abstain_draw: f64 = self.rng.random();
        let label_draw: f64 = self.rng.random();
        let label = if abstain_draw < self.cfg.abstain_prob {
            None
        } else {
            Some(sample_row(t.row(true_coarse), label_draw))
        };
        Ok(AnnotationRecord {
            instance_id: inst.id(),
            source: Source::Vlm,
            granularity: Granularity::Weak,
            label,
            cost_charged: sched.c_weak,
        })
    }
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}

/// Per-coarse-class mean of the training features.
pub fn coarse_centroids(ds: &Dataset) -> Vec<Vec<f64>> {
    let space = ds.space();
    let mut sums = vec![vec![0.0; ds.dim()]; space.num_coarse()];
    let mut counts = vec![0usize; space.num_coarse()];
    for inst in ds.train() {
        let c = space.parent()[inst.reveal_fine()];
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(inst.features()) {
            *s += v;
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

/// Generating matrix with diagonal mass `accuracy`. The remaining mass goes
/// in equal parts to the `neighbours` coarse classes whose centers are
/// closest (ties to the lower index), or uniformly to all other classes when
/// no geometry is given.
pub fn calibrated_transition(
    k: usize,
    accuracy: f64,
    centers: Option<&[Vec<f64>]>,
    neighbours: usize,
) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(Error::Config("need at least two coarse classes".into()));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::Config(format!("weak accuracy {accuracy} outside [0, 1]")));
    }
    if let Some(c) = centers {
        if c.len() != k {
            return Err(Error::Config(format!("{} centers for {k} coarse classes", c.len())));
        }
    }
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        if let Some(centers) = centers {
            let dist = |j: usize| -> f64 {
                centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            others.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            others.truncate(neighbours.max(1));
        }
        let share = (1.0 - accuracy) / others.len() as f64;
        let mut row = vec![0.0; k];
        row[i] = accuracy;
        for j in others {
            row[j] = share;
        }
        rows.push(row);
    }
    TransitionMatrix::from_weights(rows)
}

/// One line of an external-annotator request file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub id: InstanceId,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
}

/// One line of an external-annotator response file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalResponse {
    pub id: InstanceId,
    pub label: String,
}

pub fn write_request(path: &Path, ids: &[InstanceId], space: &LabelSpace) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for &id in ids {
        let req = ExternalRequest {
            id,
            candidates: space.coarse_names().to_vec(),
            hint: None,
        };
        let line = serde_json::to_string(&req).expect("request serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Matches responses to requests by id. Labels outside the coarse class
/// names become charged abstentions.
pub fn external_annotate_batch(
    request_path: &Path,
    response_path: &Path,
    space: &LabelSpace,
    sched: &CostSchedule,
) -> Result<Vec<AnnotationRecord>> {
    let requests: Vec<ExternalRequest> = read_jsonl(request_path)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let responses: Vec<ExternalResponse> = read_jsonl(response_path)?;
    let mut answers: HashMap<InstanceId, String> = HashMap::with_capacity(responses.len());
    for r in responses {
        if answers.insert(r.id, r.label).is_some() {
            return Err(Error::Protocol(format!("duplicate response for id {}", r.id)));
        }
    }
    let missing: Vec<String> = requests
        .iter()
        .filter(|r| !answers.contains_key(&r.id))
        .map(|r| r.id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("no response for ids [{}]", missing.join(", "))));
    }
    Ok(requests
        .iter()
        .map(|r| AnnotationRecord {
            instance_id: r.id,
            source: Source::External,
            granularity: Granularity::Weak,
            label: space.coarse_index(&answers[&r.id]),
            cost_charged: sched.c_weak,
        })
        .collect())
}

/// Anything that can return coarse labels for a batch of instances.
pub trait WeakAnnotator: Send {
    fn annotate_batch(
        &mut self,
        batch: &[&Instance],
        space: &LabelSpace,
        sched: &CostSchedule,
    ) -> Result<Vec<AnnotationRecord>>;
}

impl WeakAnnotator for SimulatedVlm {
    fn annotate_batch(
        &mut self,
        batch: &[&Instance],
        space: &LabelSpace,
        sched: &CostSchedule,
    ) -> Result<Vec<AnnotationRecord>> {
        batch.iter().map(|inst| self.annotate(inst, space, sched)).collect()
    }
}

/// Runs an external program once per batch. The program receives the
/// request path and the response path it must write as its last two
/// arguments.
#[derive(Clone, Debug)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
    pub workdir: PathBuf,
    calls: usize,
}

impl ExternalCommand {
    pub fn new(program: impl Into<String>, args: Vec<String>, workdir: impl Into<PathBuf>) -> Self {
        ExternalCommand {
            program: program.into(),
            args,
            workdir: workdir.into(),
            calls: 0,
        }
    }
}

impl WeakAnnotator for ExternalCommand {
    fn annotate_batch(
        &mut self,
        batch: &[&Instance],
        space: &LabelSpace,
        sched: &CostSchedule,
    ) -> Result<Vec<AnnotationRecord>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        let request = self.workdir.join(format!("request-{:04}.jsonl", self.calls));
        let response = self.workdir.join(format!("response-{:04}.jsonl", self.calls));
        self.calls += 1;
        let ids: Vec<InstanceId> = batch.iter().map(|i| i.id()).collect();
        write_request(&request, &ids, space)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&request)
            .arg(&response)
            .status()
            .map_err(|e| Error::Protocol(format!("failed to launch `{}`: {e}", self.program)))?;
        if !status.success() {
            return Err(Error::Protocol(format!("`{}` exited with {status}", self.program)));
        }
        let records = external_annotate_batch(&request, &response, space, sched)?;
        let expected: HashSet<InstanceId> = ids.into_iter().collect();
        debug_assert!(records.iter().all(|r| expected.contains(&r.instance_id)));
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    fn space() -> LabelSpace {
        LabelSpace::new(
            vec!["sparrow".into(), "finch".into(), "gull".into()],
            vec!["Passerine".into(), "Seabird".into()],
            vec![0, 0, 1],
        )
        .unwrap()
    }

    #[test]
    fn human_labels_are_exact_and_charged() {
        let inst = Instance::new(4, vec![0.0], 17);
        let rec = human_annotate(&inst, &CostSchedule::default());
        assert_eq!(rec.label, Some(17));
        assert_eq!(rec.cost_charged, Rational64::from_integer(1));
        assert_eq!(rec.granularity, Granularity::Full);

        let sched = CostSchedule::new(Rational64::from_integer(2), Rational64::new(1, 50)).unwrap();
        assert_eq!(human_annotate(&inst, &sched).cost_charged, Rational64::from_integer(2));
    }

    #[test]
    fn schedule_invariants() {
        let one = Rational64::from_integer(1);
        assert!(CostSchedule::new(one, Rational64::from_integer(2)).is_err());
        assert!(CostSchedule::new(one, Rational64::from_integer(0)).is_err());
    }

    #[test]
    fn identity_annotator_is_exact() {
        let space = space();
        let mut vlm = SimulatedVlm::new(VlmSimConfig {
            true_transition: TransitionMatrix::identity(2),
            abstain_prob: 0.0,
            seed: 1,
        })
        .unwrap();
        for f in 0..3 {
            let rec = vlm.annotate(&Instance::new(f as u64, vec![0.0], f), &space, &CostSchedule::default()).unwrap();
            assert_eq!(rec.label, Some(space.coarsen(f).unwrap()));
        }
    }

    #[test]
    fn full_abstention_still_charges() {
        let space = space();
        let sched = CostSchedule::default();
        let mut vlm = SimulatedVlm::new(VlmSimConfig {
            true_transition: TransitionMatrix::uniform(2),
            abstain_prob: 1.0,
            seed: 1,
        })
        .unwrap();
        let inst = Instance::new(0, vec![0.0], 0);
        let records: Vec<_> = (0..100).map(|_| vlm.annotate(&inst, &space, &sched).unwrap()).collect();
        assert!(records.iter().all(|r| r.abstained()));
        let total: Cost = records.iter().map(|r| r.cost_charged).sum();
        assert_eq!(total, Rational64::from_integer(2));
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let mut vlm = SimulatedVlm::new(VlmSimConfig {
            true_transition: TransitionMatrix::identity(3),
            abstain_prob: 0.0,
            seed: 0,
        })
        .unwrap();
        let err = vlm.annotate(&Instance::new(0, vec![0.0], 0), &space(), &CostSchedule::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn calibration_uses_nearest_neighbours() {
        let centers = vec![vec![0.0], vec![1.0], vec![5.0], vec![2.0], vec![100.0]];
        let t = calibrated_transition(5, 0.7, Some(&centers), 2).unwrap();
        assert!((t.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.15).abs() < 1e-12);
        assert!((t.get(0, 3) - 0.15).abs() < 1e-12);
        assert_eq!(t.get(0, 2), 0.0);
        assert_eq!(t.get(0, 4), 0.0);
        let uniform = calibrated_transition(5, 0.6, None, 3).unwrap();
        assert!((uniform.get(2, 4) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sampling_skips_zero_mass() {
        assert_eq!(sample_row(&[0.0, 1.0, 0.0], 0.999_999), 1);
        assert_eq!(sample_row(&[0.5, 0.5, 0.0], 0.25), 0);
        assert_eq!(sample_row(&[0.5, 0.5, 0.0], 0.75), 1);
    }
}
