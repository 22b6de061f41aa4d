use std::fs;

use unirestore::adaptation::compute_anchors;
use unirestore::autograd::ParamGroup;
use unirestore::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use unirestore::config::{Profile, RunConfig};
use unirestore::data::{synthesize_split, SamplePair, Split, Task};
use unirestore::model::{Model, Variant};
use unirestore::training::{LrSchedule, Trainer};
use unirestore::{Error, ErrorKind};

fn samples(rc: &RunConfig, per_task: usize) -> Vec<SamplePair> {
    Task::ALL
        .iter()
        .flat_map(|&t| {
            synthesize_split(t, Split::Train, per_task, 32, &rc.data.regimes, 1)
                .unwrap()
                .0
        })
        .collect()
}

#[test]
fn resume_from_file_matches_uninterrupted_run() {
    let mut rc = RunConfig::profile(Profile::Ci);
    rc.train.steps = 12;
    let data = samples(&rc, 4);
    let mut straight = Trainer::new(
        Model::new(rc.model.clone(), 1).unwrap(),
        rc.train.clone(),
        data.clone(),
    )
    .unwrap();
    straight.run(|_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut first = Trainer::new(
        Model::new(rc.model.clone(), 1).unwrap(),
        rc.train.clone(),
        data.clone(),
    )
    .unwrap();
    for _ in 0..5 {
        first.train_step().unwrap();
    }
    let ck = Checkpoint {
        model: first.model.clone(),
        anchors: None,
        train: Some(first.state()),
    };
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let state = loaded.train.unwrap();
    assert_eq!(state.step, 5);
    let mut second = Trainer::resume(loaded.model, data, state).unwrap();
    second.run(|_| Ok(())).unwrap();
    assert_eq!(second.step, 12);
    assert_eq!(
        second.model.store().digest(&ParamGroup::ALL),
        straight.model.store().digest(&ParamGroup::ALL)
    );
    assert_eq!(second.total_usage, straight.total_usage);
}

#[test]
fn damaged_checkpoint_files_are_rejected() {
    let rc = RunConfig::profile(Profile::Ci);
    let model = Model::new(rc.model.clone(), 2).unwrap();
    let anchors = compute_anchors(&model, &samples(&rc, 3), Variant::Full, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(
        &Checkpoint {
            model,
            anchors: Some(anchors.clone()),
            train: None,
        },
        &path,
    )
    .unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().anchors, Some(anchors));

    let bytes = fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().kind(), ErrorKind::Data);
    let missing = load_checkpoint(&dir.path().join("nope.bin")).unwrap_err();
    assert_eq!(missing.kind(), ErrorKind::Io);
}

#[test]
fn snapshot_round_trips_and_json_files_merge() {
    let dir = tempfile::tempdir().unwrap();
    for p in [Profile::Ci, Profile::Paper] {
        let rc = RunConfig::profile(p);
        rc.write_snapshot(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("config.json")).unwrap();
        let back = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, rc);
    }
    let file = dir.path().join("over.json");
    fs::write(
        &file,
        r#"{"seed": 11, "train": {"schedule": "constant", "cscl": {"tau": 0.5}}}"#,
    )
    .unwrap();
    let rc = RunConfig::resolve(Profile::Ci, Some(&file), &["train.beta=0.3".into()]).unwrap();
    assert_eq!(rc.seed, 11);
    assert_eq!(rc.train.seed, 11);
    assert_eq!(rc.train.schedule, LrSchedule::Constant);
    assert_eq!(rc.train.cscl.tau, 0.5);
    assert_eq!(rc.train.beta, 0.3);
    fs::write(&file, r#"{"train": {"shedule": "constant"}}"#).unwrap();
    let err = RunConfig::resolve(Profile::Ci, Some(&file), &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn constant_schedule_keeps_lr() {
    let mut rc = RunConfig::profile(Profile::Ci);
    rc.train.steps = 3;
    rc.train.schedule = LrSchedule::Constant;
    let mut t = Trainer::new(
        Model::new(rc.model.clone(), 0).unwrap(),
        rc.train.clone(),
        samples(&rc, 2),
    )
    .unwrap();
    let lrs: Vec<f64> = (0..3).map(|_| t.train_step().unwrap().lr).collect();
    assert_eq!(lrs, vec![rc.train.lr; 3]);
}
