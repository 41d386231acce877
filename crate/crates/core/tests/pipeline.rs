use latrack_core::checkpoint;
use latrack_core::config::RunConfig;
use latrack_core::evalkit::{evaluate_sequence, result_boxes};
use latrack_core::io::{read_results, write_results, write_sequence, SequenceDir};
use latrack_core::synthetic::gen_synthetic_sequence;
use latrack_core::tracker::track;
use latrack_core::training::{train, TrainOutputs, Trainer};

fn tiny() -> RunConfig {
    let mut run = RunConfig::toy();
    run.apply_overrides(&["epochs=1", "steps_per_epoch=3", "batch_size=2", "channels=8", "synth.length=6"])
        .unwrap();
    run
}

#[test]
fn training_steps_are_finite_and_advance_the_counter() {
    let mut t = Trainer::new(tiny()).unwrap();
    for k in 0..3 {
        let rec = t.train_step(0).unwrap();
        assert_eq!(rec.step, k);
        assert!(rec.total.is_finite() && rec.cls >= 0.0 && rec.reg >= 0.0 && rec.loc >= 0.0);
    }
    assert_eq!(t.step_count(), 3);
}

#[test]
fn checkpoint_round_trip_preserves_parameters_and_config() {
    let t = Trainer::new(tiny()).unwrap();
    let c = t.checkpoint(0);
    let back = checkpoint::decode(&checkpoint::encode(&c)).unwrap();
    assert_eq!(checkpoint::encode(&back), checkpoint::encode(&c));
    assert_eq!(back.config.to_text(), c.config.to_text());
    assert!(checkpoint::decode(&checkpoint::encode(&c)[..10]).is_err());
}

#[test]
fn train_track_eval_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny();
    let outputs = TrainOutputs {
        checkpoint: dir.path().join("model.ckpt"),
        best: Some(dir.path().join("best.ckpt")),
        metrics: Some(dir.path().join("metrics.jsonl")),
    };
    let summary = train(&run, &outputs, |_| {}).unwrap();
    assert_eq!(summary.steps, 3);
    let model = checkpoint::load(&outputs.checkpoint).unwrap().model().unwrap();

    let seq = gen_synthetic_sequence(&run.synth).unwrap();
    let seq_dir = dir.path().join("seq");
    write_sequence(&seq_dir, &seq).unwrap();
    let opened = SequenceDir::open(&seq_dir).unwrap();
    assert_eq!(opened.frames.len(), 6);
    assert_eq!(opened.gt.len(), 6);

    let out = track(&model, opened.frames(), opened.gt[0], &run.track, false).unwrap();
    assert!(out.error.is_none());
    assert_eq!(out.results.len(), 6);
    let res = dir.path().join("res.jsonl");
    write_results(&res, &out.results).unwrap();
    let back = read_results(&res).unwrap();
    assert_eq!(back.len(), 6);

    let report = evaluate_sequence("seq", &back, &opened.gt).unwrap();
    assert!((0.0..=1.0).contains(&report.auc));
    let boxes = result_boxes(&back).unwrap();
    assert_eq!(boxes[0], opened.gt[0]);
}

#[test]
fn tracking_is_deterministic() {
    let run = tiny();
    let model = Trainer::new(run.clone()).unwrap().into_model();
    let seq = gen_synthetic_sequence(&run.synth).unwrap();
    let a = track(&model, seq.frames.iter().cloned().map(Ok), seq.boxes[0], &run.track, true).unwrap();
    let b = track(&model, seq.frames.iter().cloned().map(Ok), seq.boxes[0], &run.track, true).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(a.maps.len(), 5);
}
