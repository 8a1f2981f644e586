use std::fs;

use weakal::annotators::{
    calibrated_transition, external_annotate_batch, write_request, CostSchedule, ExternalCommand, ExternalRequest,
    Granularity, SimulatedVlm, Source, VlmSimConfig, WeakAnnotator,
};
use weakal::label::{Instance, LabelSpace};
use weakal::rational::Cost;
use weakal::Error;

fn empirical_accuracy(target: f64, draws: usize, seed: u64) -> f64 {
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

#[test]
fn simulated_accuracy_matches_configuration() {
    for (target, seed) in [(0.8524, 1), (0.8211, 2)] {
        let acc = empirical_accuracy(target, 100_000, seed);
        assert!((acc - target).abs() <= 0.01, "target {target}: got {acc}");
    }
}

#[test]
fn abstentions_follow_their_probability() {
    let space = LabelSpace::identity(3);
    let mut vlm = SimulatedVlm::new(VlmSimConfig {
        true_transition: calibrated_transition(3, 0.9, None, 1).unwrap(),
        abstain_prob: 0.25,
        seed: 4,
    })
    .unwrap();
    let sched = CostSchedule::default();
    let inst = Instance::new(0, vec![1.0], 1);
    let recs: Vec<_> = (0..20_000).map(|_| vlm.annotate(&inst, &space, &sched).unwrap()).collect();
    let rate = recs.iter().filter(|r| r.abstained()).count() as f64 / recs.len() as f64;
    assert!((rate - 0.25).abs() < 0.01, "{rate}");
    assert!(recs.iter().all(|r| r.cost_charged == Cost::new(1, 50) && r.granularity == Granularity::Weak));
}

fn space() -> LabelSpace {
    LabelSpace::new(
        vec!["a1".into(), "a2".into(), "b1".into()],
        vec!["A".into(), "B".into()],
        vec![0, 0, 1],
    )
    .unwrap()
}

#[test]
fn file_protocol_matches_by_id() {
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.jsonl");
    let resp = dir.path().join("resp.jsonl");
    write_request(&req, &[5, 2, 9], &space()).unwrap();
    let first: ExternalRequest = serde_json::from_str(fs::read_to_string(&req).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first.id, 5);
    assert_eq!(first.candidates, vec!["A".to_string(), "B".to_string()]);

    fs::write(&resp, "{\"id\":9,\"label\":\"B\"}\n{\"id\":5,\"label\":\"A\"}\n{\"id\":2,\"label\":\"none of these\"}\n").unwrap();
    let recs = external_annotate_batch(&req, &resp, &space(), &CostSchedule::default()).unwrap();
    let got: Vec<_> = recs.iter().map(|r| (r.instance_id, r.label)).collect();
    assert_eq!(got, vec![(5, Some(0)), (2, None), (9, Some(1))]);
    assert!(recs.iter().all(|r| r.source == Source::External));
}

#[test]
fn file_protocol_rejects_missing_and_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.jsonl");
    let resp = dir.path().join("resp.jsonl");
    write_request(&req, &[1, 2, 3], &space()).unwrap();
    fs::write(&resp, "{\"id\":1,\"label\":\"A\"}\n").unwrap();
    match external_annotate_batch(&req, &resp, &space(), &CostSchedule::default()) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("2, 3"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    fs::write(&resp, "{\"id\":1,\"label\":\"A\"}\n{\"id\":1,\"label\":\"B\"}\n").unwrap();
    assert!(matches!(
        external_annotate_batch(&req, &resp, &space(), &CostSchedule::default()),
        Err(Error::Protocol(_))
    ));
    fs::write(&resp, "{\"id\":1,\"label\":\"A\"}\nnot json\n").unwrap();
    assert!(matches!(
        external_annotate_batch(&req, &resp, &space(), &CostSchedule::default()),
        Err(Error::Parse { line: 2, .. })
    ));
}

#[cfg(unix)]
#[test]
fn external_command_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("answer.sh");
    // Answers "B" for every request line.
    fs::write(&script, "sed -E 's/^\\{\"id\":([0-9]+).*/{\"id\":\\1,\"label\":\"B\"}/' \"$1\" > \"$2\"\n").unwrap();
    let mut cmd = ExternalCommand::new("sh", vec![script.display().to_string()], dir.path().join("work"));
    let instances = [Instance::new(4, vec![0.0], 0), Instance::new(8, vec![0.0], 2)];
    let batch: Vec<&Instance> = instances.iter().collect();
    let recs = cmd.annotate_batch(&batch, &space(), &CostSchedule::default()).unwrap();
    assert_eq!(recs.iter().map(|r| (r.instance_id, r.label)).collect::<Vec<_>>(), vec![(4, Some(1)), (8, Some(1))]);
    assert!(dir.path().join("work/request-0000.jsonl").exists());

    let mut failing = ExternalCommand::new("sh", vec!["-c".into(), "exit 3".into(), "sh".into()], dir.path().join("w2"));
    assert!(matches!(
        failing.annotate_batch(&batch, &space(), &CostSchedule::default()),
        Err(Error::Protocol(_))
    ));
}
