//! Hierarchical label space, the dataset container and its partitioning.
//!
//! Every [`Instance`] carries its ground-truth fine label, but acquisition
//! code only ever sees a [`LearnerView`], which exposes features and nothing
//! else. The ground truth is read by the annotators and the evaluator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type InstanceId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    #[serde(rename = "fine")]
    fine_names: Vec<String>,
    #[serde(rename = "coarse")]
    coarse_names: Vec<String>,
    parent: Vec<usize>,
}

impl LabelSpace {
    pub fn new(fine_names: Vec<String>, coarse_names: Vec<String>, parent: Vec<usize>) -> Result<Self> {
        if fine_names.is_empty() || coarse_names.is_empty() {
            return Err(Error::Config("label space needs at least one fine and one coarse class".into()));
        }
        if parent.len() != fine_names.len() {
            return Err(Error::Config(format!(
                "parent map has {} entries for {} fine classes",
                parent.len(),
                fine_names.len()
            )));
        }
        if coarse_names.len() > fine_names.len() {
            return Err(Error::Config("more coarse classes than fine classes".into()));
        }
        for (kind, names) in [("fine", &fine_names), ("coarse", &coarse_names)] {
            let mut seen = HashSet::new();
            for name in names {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Config(format!("duplicate {kind} class name `{name}`")));
                }
            }
        }
        let mut covered = vec![false; coarse_names.len()];
        for (f, &c) in parent.iter().enumerate() {
            if c >= coarse_names.len() {
                return Err(Error::Config(format!(
                    "fine class `{}` maps to coarse index {c}, only {} coarse classes",
                    fine_names[f],
                    coarse_names.len()
                )));
            }
            covered[c] = true;
        }
        if let Some(c) = covered.iter().position(|&hit| !hit) {
            return Err(Error::Config(format!("coarse class `{}` has no fine children", coarse_names[c])));
        }
        Ok(LabelSpace {
            fine_names,
            coarse_names,
            parent,
        })
    }

    /// Flat hierarchy: every fine class is its own coarse class.
    pub fn identity(k: usize) -> Self {
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        LabelSpace::new(names.clone(), names, (0..k).collect()).expect("identity hierarchy is valid")
    }

    pub fn num_fine(&self) -> usize {
        self.fine_names.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn fine_names(&self) -> &[String] {
        &self.fine_names
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse_names
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn coarsen(&self, fine: usize) -> Result<usize> {
        self.parent.get(fine).copied().ok_or_else(|| {
            Error::Domain(format!("fine index {fine} out of range [0, {})", self.fine_names.len()))
        })
    }

    /// Exact, case-sensitive lookup.
    pub fn fine_index(&self, name: &str) -> Option<usize> {
        self.fine_names.iter().position(|n| n == name)
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse_names.iter().position(|n| n == name)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: LabelSpace = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        LabelSpace::new(raw.fine_names, raw.coarse_names, raw.parent)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("label space serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    id: InstanceId,
    features: Vec<f64>,
    true_fine: usize,
}

impl Instance {
    pub fn new(id: InstanceId, features: Vec<f64>, true_fine: usize) -> Self {
        Instance { id, features, true_fine }
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Ground truth. Only annotators and the evaluator should call this.
    pub fn reveal_fine(&self) -> usize {
        self.true_fine
    }
}

/// Instances with a fixed feature dimension, split into a training part
/// (the first `n_train` entries) and a held-out test part.
#[derive(Clone, Debug)]
pub struct Dataset {
    space: LabelSpace,
    dim: usize,
    instances: Vec<Instance>,
    n_train: usize,
    index: HashMap<InstanceId, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space
            && self.dim == other.dim
            && self.n_train == other.n_train
            && self.instances == other.instances
    }
}

impl Dataset {
    pub fn new(space: LabelSpace, train: Vec<Instance>, test: Vec<Instance>) -> Result<Self> {
        let dim = train
            .first()
            .or(test.first())
            .map(|i| i.features.len())
            .ok_or_else(|| Error::Domain("dataset has no instances".into()))?;
        if dim == 0 {
            return Err(Error::Domain("feature dimension must be positive".into()));
        }
        let n_train = train.len();
        let instances: Vec<Instance> = train.into_iter().chain(test).collect();
        let mut index = HashMap::with_capacity(instances.len());
        for (pos, inst) in instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(Error::Domain(format!(
                    "instance {} has {} features, expected {dim}",
                    inst.id,
                    inst.features.len()
                )));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("instance {} has a non-finite feature", inst.id)));
            }
            if inst.true_fine >= space.num_fine() {
                return Err(Error::Domain(format!(
                    "instance {} has fine label {} outside [0, {})",
                    inst.id,
                    inst.true_fine,
                    space.num_fine()
                )));
            }
            if index.insert(inst.id, pos).is_some() {
                return Err(Error::Domain(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Dataset {
            space,
            dim,
            instances,
            n_train,
            index,
        })
    }

    pub fn space(&self) -> &LabelSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn train(&self) -> &[Instance] {
        &self.instances[..self.n_train]
    }

    pub fn test(&self) -> &[Instance] {
        &self.instances[self.n_train..]
    }

    pub fn get(&self, id: InstanceId) -> Option<&Instance> {
        self.index.get(&id).map(|&pos| &self.instances[pos])
    }

    /// Lookup that treats a missing id as a caller bug.
    pub fn instance(&self, id: InstanceId) -> &Instance {
        self.get(id).unwrap_or_else(|| panic!("unknown instance id {id}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.instances.iter().map(|i| i.id)
    }

    /// The label-free view handed to acquisition code.
    pub fn learner_view(&self) -> LearnerView<'_> {
        LearnerView { dataset: self }
    }

    /// Writes one split in the feature CSV format.
    pub fn write_features(instances: &[Instance], space: &LabelSpace, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let dim = instances.first().map_or(0, |i| i.features.len());
        let mut header = String::from("id,label");
        for j in 0..dim {
            header.push_str(&format!(",f{j}"));
        }
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "{header}")?;
            for inst in instances {
                write!(out, "{},{}", inst.id, space.fine_names[inst.true_fine])?;
                for v in &inst.features {
                    // `Display` for f64 is the shortest exact round-trip form.
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Feature-only access to a dataset.
#[derive(Clone, Copy)]
pub struct LearnerView<'a> {
    dataset: &'a Dataset,
}

impl<'a> LearnerView<'a> {
    pub fn features(&self, id: InstanceId) -> &'a [f64] {
        self.dataset.instance(id).features()
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim
    }

    pub fn space(&self) -> &'a LabelSpace {
        &self.dataset.space
    }
}

/// Parses a feature CSV (`id,label,<f0>,...`) against a known label space.
/// Every instance lands in the training split.
pub fn load_features(path: &Path, space: &LabelSpace) -> Result<Dataset> {
    let instances = read_feature_rows(path, space)?;
    Dataset::new(space.clone(), instances, Vec::new())
}

/// Reads a feature CSV into instances without building a dataset.
pub fn read_feature_rows(path: &Path, space: &LabelSpace) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        None => return Err(parse_err(1, "empty file, expected a header".into())),
    };
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(parse_err(1, "header must be `id,label,<f0>,...`".into()));
    }
    let dim = header.len() - 2;

    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 2, record.len())));
        }
        let id: InstanceId = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid id `{}`", &record[0])))?;
        if !seen.insert(id) {
            return Err(parse_err(line, format!("duplicate id {id}")));
        }
        let label = &record[1];
        let fine = space
            .fine_index(label)
            .ok_or_else(|| parse_err(line, format!("unknown fine label `{label}`")))?;
        let mut features = Vec::with_capacity(dim);
        for field in record.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            features.push(v);
        }
        instances.push(Instance::new(id, features, fine));
    }
    Ok(instances)
}

/// The four disjoint id sets of one experiment replicate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PoolPartition {
    pub initial: BTreeSet<InstanceId>,
    pub unlabeled: BTreeSet<InstanceId>,
    pub validation: BTreeSet<InstanceId>,
    pub test: BTreeSet<InstanceId>,
}

impl PoolPartition {
    /// Checks pairwise disjointness and coverage of `ds`.
    pub fn is_partition_of(&self, ds: &Dataset) -> bool {
        let total = self.initial.len() + self.unlabeled.len() + self.validation.len() + self.test.len();
        let union: HashSet<InstanceId> = self
            .initial
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.validation)
            .chain(&self.test)
            .copied()
            .collect();
        total == union.len() && union.len() == ds.len() && ds.ids().all(|id| union.contains(&id))
    }
}

/// Samples `init_per_class` initially labeled and `val_per_class` validation
/// instances from every fine class of the training split; everything else in
/// the training split becomes the unlabeled pool.
pub fn split_initial(ds: &Dataset, init_per_class: usize, val_per_class: usize, seed: u64) -> Result<PoolPartition> {
    let space = ds.space();
    let mut by_class: Vec<Vec<InstanceId>> = vec![Vec::new(); space.num_fine()];
    for inst in ds.train() {
        by_class[inst.true_fine].push(inst.id);
    }
    let required = init_per_class + val_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part = PoolPartition {
        test: ds.test().iter().map(|i| i.id).collect(),
        ..Default::default()
    };
    for (class, ids) in by_class.iter_mut().enumerate() {
        if ids.len() < required {
            return Err(Error::Split {
                class: space.fine_names()[class].clone(),
                available: ids.len(),
                required,
            });
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        part.initial.extend(&ids[..init_per_class]);
        part.validation.extend(&ids[init_per_class..required]);
        part.unlabeled.extend(&ids[required..]);
    }
    Ok(part)
}

/// Parameters of the synthetic hierarchical Gaussian generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_fine: usize,
    pub num_coarse: usize,
    pub children_per_coarse: usize,
    pub dim: usize,
    /// Training instances per fine class.
    pub per_class: usize,
    /// Held-out test instances per fine class.
    pub test_per_class: usize,
    pub inter_spread: f64,
    pub intra_spread: f64,
    pub noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_fine: 40,
            num_coarse: 10,
            children_per_coarse: 4,
            dim: 32,
            per_class: 60,
            test_per_class: 250,
            // Coarse centers spread five times wider than their children.
            // At this scale a few labels per class leave the coarse level
            // visibly under-learned, which is where weak labels pay off.
            inter_spread: 0.4,
            intra_spread: 0.08,
            noise_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_coarse == 0 || self.children_per_coarse == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic counts must be positive".into()));
        }
        if self.num_coarse * self.children_per_coarse != self.num_fine {
            return Err(Error::Config(format!(
                "num_coarse ({}) x children_per_coarse ({}) must equal num_fine ({})",
                self.num_coarse, self.children_per_coarse, self.num_fine
            )));
        }
        if self.per_class + self.test_per_class == 0 {
            return Err(Error::Config("synthetic dataset would be empty".into()));
        }
        if !(self.inter_spread > 0.0 && self.intra_spread > 0.0) {
            return Err(Error::Config("spreads must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Output of [`synth_generate`], with the generating centers kept for tests
/// and geometry-aware annotator calibration.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub dataset: Dataset,
    pub coarse_centers: Vec<Vec<f64>>,
    pub fine_centers: Vec<Vec<f64>>,
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |scale: f64, center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        center
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + scale * z
            })
            .collect()
    };

    let origin = vec![0.0; cfg.dim];
    let coarse_centers: Vec<Vec<f64>> =
        (0..cfg.num_coarse).map(|_| gaussian(cfg.inter_spread, &origin, &mut rng)).collect();
    let mut fine_centers = Vec::with_capacity(cfg.num_fine);
    let mut fine_names = Vec::with_capacity(cfg.num_fine);
    let mut parent = Vec::with_capacity(cfg.num_fine);
    for (c, center) in coarse_centers.iter().enumerate() {
        for child in 0..cfg.children_per_coarse {
            fine_centers.push(gaussian(cfg.intra_spread, center, &mut rng));
            fine_names.push(format!("c{c:02}_f{child}"));
            parent.push(c);
        }
    }
    let coarse_names = (0..cfg.num_coarse).map(|c| format!("c{c:02}")).collect();
    let space = LabelSpace::new(fine_names, coarse_names, parent)?;

    // Ids interleave classes so that id order carries no class information.
    let mut next_id = 0;
    let mut draw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Instance> {
        let mut out = Vec::with_capacity(count * cfg.num_fine);
        for _ in 0..count {
            for (fine, center) in fine_centers.iter().enumerate() {
                out.push(Instance::new(next_id, gaussian(cfg.noise_scale, center, rng), fine));
                next_id += 1;
            }
        }
        out
    };
    let train = draw(cfg.per_class, &mut rng);
    let test = draw(cfg.test_per_class, &mut rng);
    let dataset = Dataset::new(space, train, test)?;
    Ok(SynthData {
        dataset,
        coarse_centers,
        fine_centers,
    })
}
