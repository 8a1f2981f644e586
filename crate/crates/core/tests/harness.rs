use std::collections::BTreeSet;

use weakal::annotators::{Granularity, SimulatedVlm, VlmSimConfig};
use weakal::harness::{
    label_ratio_series, mean_std, plan_acquisition, run_experiment, run_replicate, true_transition, ExperimentConfig,
    Method, Replicate,
};
use weakal::label::{synth_generate, Dataset, Instance, SynthConfig};
use weakal::rational::Cost;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds: 3,
        budget_per_round: Cost::from_integer(4),
        seeds: vec![0],
        ..Default::default()
    };
    cfg.data.synthetic = SynthConfig {
        num_fine: 8,
        num_coarse: 4,
        children_per_coarse: 2,
        dim: 8,
        per_class: 20,
        test_per_class: 10,
        ..SynthConfig::default()
    };
    cfg.train.hidden = 16;
    cfg.train.epochs = 4;
    cfg
}

fn dataset(cfg: &ExperimentConfig) -> Dataset {
    synth_generate(&cfg.data.synthetic, cfg.data.seed).unwrap().dataset
}

#[test]
fn selection_does_not_depend_on_pool_labels() {
    let cfg = small_config();
    let ds = dataset(&cfg);
    let t = true_transition(&cfg, &ds).unwrap();
    let vlm = SimulatedVlm::new(VlmSimConfig {
        true_transition: t.clone(),
        abstain_prob: 0.0,
        seed: 1,
    })
    .unwrap();
    let rep = Replicate::start(&ds, Method::MixedAllocated, 0, Box::new(vlm), &cfg).unwrap();
    let pool: Vec<u64> = rep.partition().unlabeled.iter().copied().collect();

    // Same features, every pool label rotated to another class.
    let k = ds.space().num_fine();
    let poison = |inst: &Instance| {
        let label = if pool.contains(&inst.id()) { (inst.reveal_fine() + 3) % k } else { inst.reveal_fine() };
        Instance::new(inst.id(), inst.features().to_vec(), label)
    };
    let poisoned = Dataset::new(
        ds.space().clone(),
        ds.train().iter().map(poison).collect(),
        ds.test().iter().map(poison).collect(),
    )
    .unwrap();

    for method in [Method::RandomFull, Method::EntropyFull, Method::BadgeFull, Method::MixedAllocated] {
        let plan = |d: &Dataset| {
            plan_acquisition(method, rep.model(), rep.transition(), &d.learner_view(), &pool, &[], &cfg, 9).unwrap()
        };
        let (a, b) = (plan(&ds), plan(&poisoned));
        assert_eq!(a.full_ids, b.full_ids, "{method}");
        assert_eq!(a.weak_ids, b.weak_ids, "{method}");
    }
}

#[test]
fn budget_below_every_cost_is_a_warned_no_op() {
    let mut cfg = small_config();
    cfg.budget_per_round = Cost::new(1, 100);
    let ds = dataset(&cfg);
    let t = true_transition(&cfg, &ds).unwrap();
    for method in [Method::MixedAllocated, Method::EntropyFull] {
        let run = run_replicate(&ds, &t, method, 0, &cfg).unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.ledger.total(), Cost::from_integer(0));
        for r in &run.reports {
            assert!(r.plan.is_empty());
            assert_eq!(r.warnings.len(), 1, "{method}: {:?}", r.warnings);
            assert_eq!(r.accuracy, run.initial_accuracy);
            assert_eq!(r.full_count, run.initial_full);
        }
    }
}

#[test]
fn ledger_and_counts_agree_with_the_records() {
    let mut cfg = small_config();
    cfg.methods = vec![Method::MixedAllocated, Method::EntropyFull, Method::RandomFull, Method::BadgeFull];
    cfg.vlm.abstain_prob = 0.2;
    cfg.seeds = vec![3, 4];
    let result = run_experiment(&cfg).unwrap();
    for m in &result.methods {
        for run in &m.runs {
            let charged: Cost = run.records.iter().map(|r| r.cost_charged).sum();
            assert_eq!(run.ledger.total(), charged);
            let mut full: BTreeSet<u64> = BTreeSet::new();
            let mut weak: BTreeSet<u64> = BTreeSet::new();
            let mut weak_count = 0;
            for (round, report) in run.reports.iter().enumerate() {
                assert!(report.cost_spent <= cfg.budget_per_round);
                assert_eq!(report.cost_spent, run.ledger.round_total(round));
                let spent = cfg.costs.c_full * report.bought_full as i64
                    + cfg.costs.c_weak * (report.bought_weak + report.abstained) as i64;
                assert_eq!(spent, report.cost_spent);
                weak_count += report.bought_weak;
                assert_eq!(report.weak_count, weak_count);
            }
            for rec in &run.records {
                match (rec.granularity, rec.label) {
                    (Granularity::Full, _) => {
                        weak.remove(&rec.instance_id);
                        full.insert(rec.instance_id);
                    }
                    (Granularity::Weak, Some(_)) => {
                        weak.insert(rec.instance_id);
                    }
                    (Granularity::Weak, None) => {}
                }
            }
            let last = run.reports.last().unwrap();
            assert_eq!(last.train_full, run.initial_full + full.len());
            assert_eq!(last.train_weak, weak.len());
            let (f, w) = *label_ratio_series(&run.reports).last().unwrap();
            assert!((f + w - 1.0).abs() < 1e-12);
            if m.method != Method::MixedAllocated {
                assert_eq!(last.weak_count, 0, "{}", m.method);
                assert!(run.records.iter().all(|r| r.granularity == Granularity::Full));
            }
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let mut cfg = small_config();
    cfg.seeds = vec![0, 1];
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.aggregate, y.aggregate);
        for (rx, ry) in x.runs.iter().zip(&y.runs) {
            assert_eq!(rx.records, ry.records);
            assert_eq!(rx.reports, ry.reports);
        }
    }
}

#[test]
fn one_seed_has_zero_spread() {
    let result = run_experiment(&small_config()).unwrap();
    for m in &result.methods {
        assert!(m.aggregate.iter().all(|row| row.std_acc == 0.0));
        assert_eq!(m.aggregate[0].mean_acc, m.runs[0].reports[0].accuracy);
    }
    let (mean, std) = mean_std(&[0.2, 0.4]);
    assert!((mean - 0.3).abs() < 1e-12 && (std - 0.02f64.sqrt()).abs() < 1e-12);
}
