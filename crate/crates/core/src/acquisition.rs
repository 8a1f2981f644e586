//! Which instances to annotate next, and with which kind of label.
//!
//! Baseline selectors (random, entropy, BADGE) pick instances for full
//! labels only. The mixed strategy scores each candidate for both label
//! kinds and hands the scores to an [`Allocator`] that spends the round
//! budget.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotators::{CostSchedule, Granularity};
use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::label::{InstanceId, LearnerView};
use crate::math::{argmax, dot, entropy};
use crate::noise::TransitionMatrix;
use crate::rational::{self, Cost};

fn check_k(k: usize, pool: &[InstanceId]) -> Result<()> {
    if k > pool.len() {
        return Err(Error::Domain(format!("asked for {k} instances from a pool of {}", pool.len())));
    }
    Ok(())
}

/// `k` ids drawn uniformly without replacement, returned in ascending order.
pub fn select_random(pool: &[InstanceId], k: usize, seed: u64) -> Result<Vec<InstanceId>> {
    check_k(k, pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<InstanceId> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// The `k` instances whose fine prediction has the highest entropy, in
/// descending entropy order with ties to the lower id.
pub fn select_entropy(
    model: &ClassifierModel,
    view: &LearnerView<'_>,
    pool: &[InstanceId],
    k: usize,
) -> Result<Vec<InstanceId>> {
    check_k(k, pool)?;
    let mut scored = pool
        .iter()
        .map(|&id| Ok((id, entropy(&model.forward_fine(view.features(id))?))))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(id, _)| id).collect())
}

/// Last-layer gradient embedding under the hypothesized label, kept in
/// factored form: the embedding is the outer product `delta ⊗ hidden`.
#[derive(Clone, Debug)]
pub struct GradientEmbedding {
    /// `p - onehot(argmax p)`.
    pub delta: Vec<f64>,
    pub hidden: Vec<f64>,
    delta_sq: f64,
    hidden_sq: f64,
}

impl GradientEmbedding {
    pub fn new(model: &ClassifierModel, x: &[f64]) -> Result<Self> {
        let hidden = model.hidden(x)?;
        let mut delta = model.forward_fine(x)?;
        let top = argmax(&delta);
        delta[top] -= 1.0;
        Ok(GradientEmbedding {
            delta_sq: dot(&delta, &delta),
            hidden_sq: dot(&hidden, &hidden),
            delta,
            hidden,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.delta_sq * self.hidden_sq
    }

    /// Flattened `delta ⊗ hidden`, row per class.
    pub fn materialize(&self) -> Vec<f64> {
        self.delta
            .iter()
            .flat_map(|d| self.hidden.iter().map(move |h| d * h))
            .collect()
    }

    /// Squared distance via `|a|^2 + |b|^2 - 2 (da·db)(ha·hb)`; exactly zero
    /// for bitwise-identical embeddings.
    pub fn dist_sq(&self, other: &GradientEmbedding) -> f64 {
        let cross = dot(&self.delta, &other.delta) * dot(&self.hidden, &other.hidden);
        (self.norm_sq() + other.norm_sq() - 2.0 * cross).max(0.0)
    }
}

/// BADGE: k-means++ seeding over gradient embeddings. The first center is
/// the largest-norm embedding (lower id on ties); each later one is drawn
/// with probability proportional to its squared distance from the nearest
/// chosen center. Returned in selection order.
pub fn select_badge(
    model: &ClassifierModel,
    view: &LearnerView<'_>,
    pool: &[InstanceId],
    k: usize,
    seed: u64,
) -> Result<Vec<InstanceId>> {
    check_k(k, pool)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let embeddings = pool
        .iter()
        .map(|&id| GradientEmbedding::new(model, view.features(id)))
        .collect::<Result<Vec<_>>>()?;

    let first = (0..pool.len())
        .max_by(|&a, &b| {
            embeddings[a]
                .norm_sq()
                .total_cmp(&embeddings[b].norm_sq())
                .then(pool[b].cmp(&pool[a]))
        })
        .expect("pool is non-empty");
    let mut chosen = vec![false; pool.len()];
    let mut order = vec![first];
    chosen[first] = true;
    let mut nearest: Vec<f64> = embeddings.iter().map(|e| e.dist_sq(&embeddings[first])).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while order.len() < k {
        let total: f64 = (0..pool.len()).filter(|&i| !chosen[i]).map(|i| nearest[i]).sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in (0..pool.len()).filter(|&i| !chosen[i] && nearest[i] > 0.0) {
                acc += nearest[i];
                pick = Some(i);
                if target < acc {
                    break;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // Everything left coincides with a chosen center.
            (0..pool.len())
                .filter(|&i| !chosen[i])
                .min_by_key(|&i| pool[i])
                .expect("k <= pool size")
        };
        chosen[next] = true;
        order.push(next);
        for (i, e) in embeddings.iter().enumerate() {
            let d = e.dist_sq(&embeddings[next]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Ok(order.into_iter().map(|i| pool[i]).collect())
}

/// Utility of buying each kind of label for one instance, in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub instance_id: InstanceId,
    pub v_full: f64,
    pub v_weak: f64,
    /// False for instances that already hold a weak label and may only be
    /// upgraded to a full one.
    pub weak_eligible: bool,
}

/// `v_full` is the fine-prediction entropy. `v_weak` is the entropy of the
/// fine prediction pushed onto coarse classes, discounted by the mean
/// diagonal of `t` (the expected weak-label correctness).
pub fn score_candidates(
    model: &ClassifierModel,
    t: &TransitionMatrix,
    view: &LearnerView<'_>,
    pool: &[InstanceId],
) -> Result<Vec<ScoredCandidate>> {
    let space = view.space();
    if t.dim() != space.num_coarse() {
        return Err(Error::Domain("transition matrix does not match the coarse classes".into()));
    }
    let rho = t.mean_diagonal();
    let mut coarse = vec![0.0; space.num_coarse()];
    pool.iter()
        .map(|&id| {
            let p = model.forward_fine(view.features(id))?;
            coarse.iter_mut().for_each(|c| *c = 0.0);
            for (f, &pf) in p.iter().enumerate() {
                coarse[space.parent()[f]] += pf;
            }
            let v_full = entropy(&p);
            // Grouping never raises entropy; the clamp absorbs rounding.
            let v_weak = (rho * entropy(&coarse)).min(v_full).max(0.0);
            Ok(ScoredCandidate {
                instance_id: id,
                v_full,
                v_weak,
                weak_eligible: true,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PlannedAction {
    pub id: InstanceId,
    pub action: Granularity,
    /// Utility per unit cost, when the plan came from scores.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationPlan {
    pub full_ids: BTreeSet<InstanceId>,
    pub weak_ids: BTreeSet<InstanceId>,
    pub planned_cost: Cost,
    /// Actions in the order they were taken.
    pub actions: Vec<PlannedAction>,
}

impl AllocationPlan {
    pub fn empty() -> Self {
        AllocationPlan {
            full_ids: BTreeSet::new(),
            weak_ids: BTreeSet::new(),
            planned_cost: Cost::from_integer(0),
            actions: Vec::new(),
        }
    }

    /// Plan that sends every id to the human annotator.
    pub fn full_only(ids: &[InstanceId], sched: &CostSchedule) -> Self {
        let mut plan = Self::empty();
        for &id in ids {
            plan.push(id, Granularity::Full, None, sched);
        }
        plan
    }

    fn push(&mut self, id: InstanceId, action: Granularity, ratio: Option<f64>, sched: &CostSchedule) {
        match action {
            Granularity::Full => self.full_ids.insert(id),
            Granularity::Weak => self.weak_ids.insert(id),
        };
        self.planned_cost += sched.cost_of(action);
        self.actions.push(PlannedAction { id, action, ratio });
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Sum of the utilities the plan buys.
    pub fn total_utility(&self, scored: &[ScoredCandidate]) -> f64 {
        scored
            .iter()
            .map(|c| {
                if self.full_ids.contains(&c.instance_id) {
                    c.v_full
                } else if self.weak_ids.contains(&c.instance_id) {
                    c.v_weak
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// One JSON object per action: `{"id":..,"action":"full"|"weak","ratio":..}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for a in &self.actions {
            let line = serde_json::to_string(a).expect("action serializes");
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

/// Turns scored candidates into a plan that fits the budget.
pub trait Allocator: Send + Sync {
    fn allocate(&self, scored: &[ScoredCandidate], sched: &CostSchedule, budget: Cost) -> AllocationPlan;
}

/// Single greedy sweep over all (instance, label kind) actions by utility
/// per unit cost. Ties go full-before-weak, then to the lower id. An action
/// is taken when it fits the remaining budget and its instance is still free.
#[derive(Clone, Copy, Debug, Default)]
pub struct GreedyAllocator {
    /// Ignore weak actions entirely.
    pub full_only: bool,
}

struct Candidate {
    id: InstanceId,
    action: Granularity,
    utility: f64,
    ratio: f64,
}

impl Allocator for GreedyAllocator {
    fn allocate(&self, scored: &[ScoredCandidate], sched: &CostSchedule, budget: Cost) -> AllocationPlan {
        let per_full = 1.0 / rational::to_f64(&sched.c_full);
        let per_weak = 1.0 / rational::to_f64(&sched.c_weak);
        let mut actions = Vec::with_capacity(scored.len() * 2);
        for c in scored {
            actions.push(Candidate {
                id: c.instance_id,
                action: Granularity::Full,
                utility: c.v_full,
                ratio: c.v_full * per_full,
            });
            if c.weak_eligible && !self.full_only {
                actions.push(Candidate {
                    id: c.instance_id,
                    action: Granularity::Weak,
                    utility: c.v_weak,
                    ratio: c.v_weak * per_weak,
                });
            }
        }
        actions.sort_by(|a, b| {
            b.ratio
                .total_cmp(&a.ratio)
                .then_with(|| match (a.action, b.action) {
                    (Granularity::Full, Granularity::Weak) => Ordering::Less,
                    (Granularity::Weak, Granularity::Full) => Ordering::Greater,
                    _ => Ordering::Equal,
                })
                .then(a.id.cmp(&b.id))
        });

        let mut plan = AllocationPlan::empty();
        let mut remaining = budget;
        let mut taken = BTreeSet::new();
        for a in actions {
            let cost = sched.cost_of(a.action);
            if cost <= remaining && !taken.contains(&a.id) {
                debug_assert!(a.utility >= 0.0);
                remaining -= cost;
                taken.insert(a.id);
                plan.push(a.id, a.action, Some(a.ratio), sched);
            }
        }
        plan
    }
}

/// Convenience wrapper around the reference greedy allocator.
pub fn allocate(scored: &[ScoredCandidate], sched: &CostSchedule, budget: Cost) -> AllocationPlan {
    GreedyAllocator::default().allocate(scored, sched, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{Dataset, Instance, LabelSpace};

    fn cand(id: InstanceId, v_full: f64, v_weak: f64) -> ScoredCandidate {
        ScoredCandidate {
            instance_id: id,
            v_full,
            v_weak,
            weak_eligible: true,
        }
    }

    #[test]
    fn random_edge_cases() {
        let pool: Vec<InstanceId> = (10..20).collect();
        assert_eq!(select_random(&pool, 10, 3).unwrap(), pool);
        assert!(select_random(&pool, 0, 3).unwrap().is_empty());
        assert!(select_random(&pool, 11, 3).is_err());
        assert_eq!(select_random(&pool, 4, 8).unwrap(), select_random(&pool, 4, 8).unwrap());
    }

    #[test]
    fn equal_utilities_go_to_lowest_ids() {
        let scored: Vec<_> = (0..8).rev().map(|id| cand(id, 1.0, 0.0)).collect();
        let plan = allocate(&scored, &CostSchedule::default(), Cost::from_integer(3));
        assert_eq!(plan.full_ids, BTreeSet::from([0, 1, 2]));
        assert_eq!(plan.planned_cost, Cost::from_integer(3));
        assert!(plan.weak_ids.is_empty());
    }

    #[test]
    fn budget_below_weak_cost_gives_empty_plan() {
        let scored = vec![cand(0, 2.0, 1.0), cand(1, 1.0, 0.5)];
        let plan = allocate(&scored, &CostSchedule::default(), Cost::new(1, 100));
        assert!(plan.is_empty());
        assert_eq!(plan.planned_cost, Cost::from_integer(0));
    }

    #[test]
    fn weak_labels_win_when_cheap_enough() {
        let sched = CostSchedule::default();
        let scored = vec![cand(0, 2.0, 0.5), cand(1, 2.0, 0.01)];
        // 0.5*50 = 25 > 2 > 0.01*50 = 0.5.
        let plan = allocate(&scored, &sched, Cost::new(51, 50));
        assert_eq!(plan.weak_ids, BTreeSet::from([0]));
        assert_eq!(plan.full_ids, BTreeSet::from([1]));
        assert_eq!(plan.planned_cost, Cost::new(51, 50));
    }

    #[test]
    fn upgrade_candidates_never_get_weak_actions() {
        let mut c = cand(4, 0.1, 0.1);
        c.weak_eligible = false;
        let plan = allocate(&[c], &CostSchedule::default(), Cost::new(1, 2));
        assert!(plan.is_empty());
    }

    #[test]
    fn jsonl_lines() {
        let plan = allocate(&[cand(7, 1.0, 0.5)], &CostSchedule::default(), Cost::from_integer(1));
        assert_eq!(plan.to_jsonl(), "{\"id\":7,\"action\":\"weak\",\"ratio\":25.0}\n");
        let base = AllocationPlan::full_only(&[3], &CostSchedule::default());
        assert_eq!(base.to_jsonl(), "{\"id\":3,\"action\":\"full\",\"ratio\":null}\n");
    }

    fn two_level_view() -> (Dataset, ClassifierModel) {
        let space = LabelSpace::new(
            (0..4).map(|i| format!("f{i}")).collect(),
            vec!["a".into(), "b".into()],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let ds = Dataset::new(space, vec![Instance::new(0, vec![1.0, 2.0], 0)], vec![]).unwrap();
        (ds, ClassifierModel::zeros(2, 3, 4, 2))
    }

    #[test]
    fn uniform_prediction_scores() {
        let (ds, model) = two_level_view();
        let view = ds.learner_view();
        let s = score_candidates(&model, &TransitionMatrix::identity(2), &view, &[0]).unwrap()[0];
        assert!((s.v_full - 4f64.ln()).abs() < 1e-12);
        assert!((s.v_weak - 2f64.ln()).abs() < 1e-12);
        let noisy = score_candidates(&model, &TransitionMatrix::uniform(2), &view, &[0]).unwrap()[0];
        assert!((noisy.v_weak - 0.5 * s.v_weak).abs() < 1e-15);
    }

    #[test]
    fn confident_prediction_scores_zero() {
        let (ds, mut model) = two_level_view();
        model.b_fine_mut()[2] = 1e3;
        let s = score_candidates(&model, &TransitionMatrix::identity(2), &ds.learner_view(), &[0]).unwrap()[0];
        assert_eq!((s.v_full, s.v_weak), (0.0, 0.0));
    }
}
