#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use weakal::classifier::{ClassifierModel, Example, LossSpec};
use weakal::acquisition::{select_badge, select_entropy, GradientEmbedding, ScoredCandidate};
use weakal::annotators::{calibrated_transition, CostSchedule, SimulatedVlm, VlmSimConfig};
use weakal::label::Dataset;
use weakal::math::entropy;
use weakal::rational::Cost;
use weakal::label::{Instance, LabelSpace};
use weakal::noise::{estimate_transition, TransitionMatrix, TrustedPair};

/// Rows drawn uniformly from the probability simplex (normalized
/// exponentials, i.e. Dirichlet(1, ..., 1)).
pub fn random_transition(k: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let rows = (0..k).map(|_| (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect()).collect();
    TransitionMatrix::from_weights(rows).unwrap()
}

pub fn random_probs(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Random annotator confusion matrix: diagonal mass uniform in
/// [0.5, 0.95], the remainder spread over the other classes by a
/// Dirichlet(1, ..., 1) draw.
pub fn random_confusion(k: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let rows = (0..k)
        .map(|i| {
            let diag = rng.random_range(0.5..0.95);
            let mut off: Vec<f64> = (0..k).map(|j| if j == i { 0.0 } else { rng.sample::<f64, _>(Exp1) }).collect();
            let total: f64 = off.iter().sum();
            off.iter_mut().for_each(|v| *v *= (1.0 - diag) / total);
            off[i] = diag;
            off
        })
        .collect();
    TransitionMatrix::from_weights(rows).unwrap()
}

/// For each seed: draw a random confusion matrix over 10 classes, simulate
/// 5000 annotator answers per true class, re-estimate with add-one
/// smoothing and return the largest row-wise L1 error.
pub fn estimator_max_l1(seeds: std::ops::Range<u64>) -> Vec<f64> {
    let k = 10;
    let space = LabelSpace::identity(k);
    let sched = CostSchedule::default();
    seeds
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let truth = random_confusion(k, &mut rng);
            let mut vlm = SimulatedVlm::new(VlmSimConfig {
                true_transition: truth.clone(),
                abstain_prob: 0.0,
                seed,
            })
            .unwrap();
            let mut pairs = Vec::new();
            for class in 0..k {
                let inst = Instance::new(class as u64, vec![0.0], class);
                for _ in 0..5000 {
                    let rec = vlm.annotate(&inst, &space, &sched).unwrap();
                    pairs.push(TrustedPair {
                        true_coarse: class,
                        vlm_pred: rec.label,
                    });
                }
            }
            let est = estimate_transition(&pairs, k, 1.0).unwrap();
            (0..k)
                .map(|i| est.row(i).iter().zip(truth.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Hidden pre-activations, recomputed from the raw parameters.
fn pre_activations(model: &ClassifierModel, x: &[f64]) -> Vec<f64> {
    let h = model.shape().hidden;
    let w = model.w_shared();
    let mut pre = model.b_shared().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..h {
            pre[j] += xi * w[i * h + j];
        }
    }
    pre
}

/// Largest relative error between analytic and central-difference
/// gradients of both losses, over every parameter of a random
/// d=5, h=4, K_f=6, K_w=3 model. Inputs near a ReLU kink are redrawn.
pub fn max_gradient_error(seed: u64) -> f64 {
    let (d, h, kf, kw) = (5, 4, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ClassifierModel::new(d, h, kf, kw, seed);
    let t = random_transition(kw, &mut rng);
    let mut xs: Vec<Vec<f64>> = Vec::new();
    while xs.len() < 6 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        if pre_activations(&model, &x).iter().all(|p| p.abs() > 1e-3) {
            xs.push(x);
        }
    }
    let fine: Vec<Example> = xs.iter().map(|x| (x.as_slice(), rng.random_range(0..kf))).collect();
    let weak: Vec<Example> = xs.iter().map(|x| (x.as_slice(), rng.random_range(0..kw))).collect();

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (batch, spec) in [(&fine, LossSpec::FineCrossEntropy), (&weak, LossSpec::WeakCorrected(&t))] {
        let (_, grads) = model.gradients(batch, spec).unwrap();
        for i in 0..model.params().len() {
            let mut plus = model.clone();
            plus.params_mut()[i] += step;
            let mut minus = model.clone();
            minus.params_mut()[i] -= step;
            let numeric = (plus.loss(batch, spec).unwrap() - minus.loss(batch, spec).unwrap()) / (2.0 * step);
            let analytic = grads.as_slice()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Best total utility over every assignment of {nothing, full, weak} to
/// each candidate that fits the budget.
pub fn brute_force_best(scored: &[ScoredCandidate], sched: &CostSchedule, budget: Cost) -> f64 {
    let n = scored.len();
    let mut best: f64 = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let (mut c, mut cost, mut utility) = (code, Cost::from_integer(0), 0.0);
        let mut feasible = true;
        for cand in scored {
            match c % 3 {
                1 => {
                    cost += sched.c_full;
                    utility += cand.v_full;
                }
                2 if cand.weak_eligible => {
                    cost += sched.c_weak;
                    utility += cand.v_weak;
                }
                2 => feasible = false,
                _ => {}
            }
            c /= 3;
        }
        if feasible && cost <= budget {
            best = best.max(utility);
        }
    }
    best
}

/// Fraction of correct answers from a simulated annotator calibrated to
/// `target` diagonal mass over 10 classes.
pub fn empirical_accuracy(target: f64, draws: usize, seed: u64) -> f64 {
    let k = 10;
    let space = LabelSpace::identity(k);
    let t = calibrated_transition(k, target, None, 3).unwrap();
    let mut vlm = SimulatedVlm::new(VlmSimConfig {
        true_transition: t,
        abstain_prob: 0.0,
        seed,
    })
    .unwrap();
    let sched = CostSchedule::default();
    let instances: Vec<Instance> = (0..k).map(|c| Instance::new(c as u64, vec![0.0], c)).collect();
    let correct = (0..draws)
        .filter(|i| {
            let inst = &instances[i % k];
            vlm.annotate(inst, &space, &sched).unwrap().label == Some(inst.reveal_fine())
        })
        .count();
    correct as f64 / draws as f64
}

pub fn random_dataset(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = LabelSpace::identity(classes);
    let train = (0..n as u64)
        .map(|id| {
            let x = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            Instance::new(id, x, rng.random_range(0..classes))
        })
        .collect();
    Dataset::new(space, train, Vec::new()).unwrap()
}

/// Pools (out of `pools`) of 200 random instances where entropy selection
/// disagrees with a full sort by descending entropy, ties to the lower id.
pub fn entropy_oracle_mismatches(pools: u64) -> usize {
    (0..pools)
        .filter(|&seed| {
            let ds = random_dataset(seed, 200, 6, 7);
            let model = ClassifierModel::new(6, 10, 7, 7, seed);
            let pool: Vec<u64> = ds.ids().collect();
            let k = (seed as usize * 7) % 60;
            let mut oracle: Vec<(f64, u64)> = pool
                .iter()
                .map(|&id| (entropy(&model.forward_fine(ds.instance(id).features()).unwrap()), id))
                .collect();
            oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let expected: Vec<u64> = oracle.into_iter().take(k).map(|(_, id)| id).collect();
            select_entropy(&model, &ds.learner_view(), &pool, k).unwrap() != expected
        })
        .count()
}

/// Seeds whose single BADGE pick is not a largest-norm embedding.
pub fn badge_first_pick_failures(seeds: u64) -> usize {
    (0..seeds)
        .filter(|&seed| {
            let ds = random_dataset(seed, 80, 5, 6);
            let model = ClassifierModel::new(5, 8, 6, 6, seed + 1);
            let pool: Vec<u64> = ds.ids().collect();
            let norms: Vec<f64> = pool
                .iter()
                .map(|&id| GradientEmbedding::new(&model, ds.instance(id).features()).unwrap().norm_sq())
                .collect();
            let best = norms.iter().cloned().fold(f64::MIN, f64::max);
            let picked = select_badge(&model, &ds.learner_view(), &pool, 1, seed).unwrap();
            norms[picked[0] as usize] != best
        })
        .count()
}

/// Seeds where BADGE takes both copies of a duplicated instance. The pool
/// is 30 feature vectors, each present twice (ids 2i and 2i+1).
pub fn badge_twin_violations(seeds: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut train = Vec::new();
    for id in 0..30u64 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        train.push(Instance::new(2 * id, x.clone(), 0));
        train.push(Instance::new(2 * id + 1, x, 1));
    }
    let ds = Dataset::new(LabelSpace::identity(3), train, Vec::new()).unwrap();
    let model = ClassifierModel::new(4, 6, 3, 3, 2);
    let pool: Vec<u64> = ds.ids().collect();
    (0..seeds)
        .filter(|&seed| {
            let picked = select_badge(&model, &ds.learner_view(), &pool, 30, seed).unwrap();
            let mut twins: Vec<u64> = picked.iter().map(|id| id / 2).collect();
            twins.sort_unstable();
            twins.dedup();
            twins.len() != picked.len()
        })
        .count()
}
