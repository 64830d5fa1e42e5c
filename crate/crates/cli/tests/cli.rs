use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pdm_cli::{RunConfig, CHECKPOINT_FILE, CMC_FILE, DATASET_FILE, LOSS_FILE, REPORT_FILE};
use pdm_core::evalkit::{Direction, EvalReport};
use pdm_core::gradsuite::registry;
use pdm_core::ndnum::Tensor;
use pdm_core::synthdata::{Dataset, Modality, Sample};
use pdm_core::trainer::{
    embed, lr_at_epoch, save_checkpoint, ModelConfig, ModelState, TrainConfig,
};

fn pdm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdm"))
        .args(args)
        .current_dir(dir)
        .env("PDM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small but complete run: 4 identities, 6 samples per modality, 3 epochs.
fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.data.num_identities = 4;
    cfg.data.samples_per_identity_per_modality = 6;
    cfg.train.epochs = 3;
    cfg.train.ids_per_batch = 2;
    cfg.train.samples_per_modality = 3;
    cfg.paths.out = dir.join("out");
    let path = dir.join("small.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn print_config_round_trips_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdm(&["print-config"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        RunConfig::from_json(&stdout(&o)).unwrap(),
        RunConfig::default()
    );
    assert!(stdout(&o).contains("\"generator\": \"ChaCha8\""));

    let o = pdm(
        &[
            "print-config",
            "--seed",
            "9",
            "--branches",
            "3",
            "--loss-ch-variant",
            "as-written",
        ],
        dir.path(),
    );
    let cfg = RunConfig::from_json(&stdout(&o)).unwrap();
    assert_eq!(
        (cfg.data.seed, cfg.train.seed, cfg.train.branches),
        (9, 9, 3)
    );
    assert!(stdout(&o).contains("\"as-written\""));
}

#[test]
fn unknown_fields_and_bad_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("a.json"),
        r#"{"train": {"epochs": 3, "learning_rate": 1}}"#,
    )
    .unwrap();
    let o = pdm(&["--config", "a.json", "print-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    fs::write(dir.path().join("b.json"), r#"{"generator": "mt19937"}"#).unwrap();
    assert_eq!(
        pdm(&["--config", "b.json", "synth"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        pdm(&["--config", "missing.json", "synth"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(pdm(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(
        pdm(&["--prototypes", "1", "train"], dir.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn synth_writes_deterministic_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdm(&["synth", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    pdm(&["synth", "--out", "b"], dir.path());
    let a = fs::read(dir.path().join("a").join(DATASET_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(DATASET_FILE)).unwrap();
    assert_eq!(&a[..4], b"PDMD");
    assert_eq!(a, b);
    // header: magic, version, then sample count and identities
    let word = |i: usize| u32::from_le_bytes(a[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!(word(1) as usize, 8 * 32 * 2);
    assert_eq!(word(2), 8);
    assert_eq!(word(3), 32);

    pdm(&["synth", "--out", "c", "--seed", "1"], dir.path());
    assert_ne!(
        a,
        fs::read(dir.path().join("c").join(DATASET_FILE)).unwrap()
    );
}

#[test]
fn train_writes_checkpoint_and_replayable_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(pdm(&["--config", &cfg, "synth"], dir.path())
        .status
        .success());
    let o = pdm(&["--config", &cfg, "train"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(&fs::read(out.join(CHECKPOINT_FILE)).unwrap()[..4], b"PDMC");

    let csv = fs::read_to_string(out.join(LOSS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,lr,id,tri,ch,dcs,cpm,plm,total");
    assert_eq!(lines.len(), 4);
    let tc = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    for (e, line) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[0] as usize, e);
        assert_eq!(cols[1], lr_at_epoch(e, &tc).unwrap());
        // plm = tri + ch + dcs, total = id + plm + cpm
        assert!((cols[7] - (cols[3] + cols[4] + cols[5])).abs() < 1e-10);
        assert!((cols[8] - (cols[2] + cols[7] + cols[6])).abs() < 1e-10);
    }

    fs::rename(out.join(LOSS_FILE), dir.path().join("first.csv")).unwrap();
    pdm(&["--config", &cfg, "train"], dir.path());
    assert_eq!(
        fs::read(dir.path().join("first.csv")).unwrap(),
        fs::read(out.join(LOSS_FILE)).unwrap()
    );
}

#[test]
fn eval_writes_report_and_cmc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    pdm(&["--config", &cfg, "synth"], dir.path());
    pdm(&["--config", &cfg, "train"], dir.path());
    for direction in ["ir2vis", "vis2ir"] {
        let o = pdm(
            &["--config", &cfg, "eval", "--direction", direction],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).starts_with(direction));
        let json = fs::read_to_string(dir.path().join("out").join(REPORT_FILE)).unwrap();
        let report = EvalReport::from_json(&json).unwrap();
        assert_eq!(report.direction.as_str(), direction);
        assert!((0.0..=1.0).contains(&report.map));
        let cmc = fs::read_to_string(dir.path().join("out").join(CMC_FILE)).unwrap();
        // header plus one line per gallery rank (4 ids x 6 samples)
        assert_eq!(cmc.lines().count(), 1 + 24);
    }
    let o = pdm(
        &["--config", &cfg, "eval", "--direction", "ir2ir"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

fn write_fixture(
    dir: &Path,
    maps: Vec<(Vec<f64>, usize, Modality)>,
    ids: usize,
    per: usize,
    d: usize,
) -> Dataset {
    let samples = maps
        .into_iter()
        .map(|(v, identity, modality)| Sample {
            map: Tensor::new([d, 1, 1], v).unwrap(),
            identity,
            modality,
        })
        .collect();
    let data = Dataset {
        num_identities: ids,
        per_identity_per_modality: per,
        channels: d,
        height: 1,
        width: 1,
        samples,
    };
    data.save(&dir.join("fixture.pdmd")).unwrap();
    data
}

/// Plain pooling with an identity backbone: descriptors are the raw maps.
fn identity_model(d: usize, classes: usize) -> ModelState {
    let cfg = ModelConfig {
        channels: d,
        branches: 0,
        reduction: 1,
        prototypes: 0,
        classes,
    };
    let mut s = ModelState::zeros(&cfg);
    for i in 0..d {
        s.backbone.data_mut()[(i * d + i) * 9 + 4] = 1.0;
    }
    s
}

#[test]
fn perfect_model_fixture_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut maps = Vec::new();
    for id in 0..3 {
        for m in Modality::BOTH {
            maps.push((vec![id as f64 * 10.0, 1.0], id, m));
        }
    }
    write_fixture(dir.path(), maps, 3, 1, 2);
    save_checkpoint(&identity_model(2, 3), &dir.path().join("m.pdmc")).unwrap();
    let o = pdm(
        &[
            "eval",
            "--out",
            "o",
            "--dataset",
            "fixture.pdmd",
            "--checkpoint",
            "m.pdmc",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report =
        EvalReport::from_json(&fs::read_to_string(dir.path().join("o").join(REPORT_FILE)).unwrap())
            .unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.rank1(), 1.0);
}

#[test]
fn map_matches_brute_force_on_an_eight_item_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // 4 identities, one sample per modality; hand-placed so rankings mix
    let vis = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
    let ir = [[0.9, 0.1], [0.2, 0.0], [0.1, 1.2], [1.0, 0.9]];
    let mut maps = Vec::new();
    for id in 0..4 {
        maps.push((vis[id].to_vec(), id, Modality::Vis));
        maps.push((ir[id].to_vec(), id, Modality::Ir));
    }
    let data = write_fixture(dir.path(), maps, 4, 1, 2);
    let model = identity_model(2, 4);
    save_checkpoint(&model, &dir.path().join("m.pdmc")).unwrap();
    let o = pdm(
        &[
            "eval",
            "--out",
            "o",
            "--dataset",
            "fixture.pdmd",
            "--checkpoint",
            "m.pdmc",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report =
        EvalReport::from_json(&fs::read_to_string(dir.path().join("o").join(REPORT_FILE)).unwrap())
            .unwrap();
    assert_eq!(report.direction, Direction::Ir2Vis);

    // descriptors are the f32-rounded maps; rank each gallery item by the
    // number of strictly closer items (ties to the lower index)
    let desc = embed(&model, &data).unwrap();
    let row = |i: usize| &desc.data()[i * 2..i * 2 + 2];
    let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut ap_sum = 0.0;
    for q in 0..4 {
        let qd = row(2 * q + 1);
        let ds: Vec<f64> = (0..4).map(|g| dist(qd, row(2 * g))).collect();
        let rank = (0..4)
            .filter(|&o| ds[o] < ds[q] || (ds[o] == ds[q] && o < q))
            .count();
        ap_sum += 1.0 / (rank + 1) as f64;
    }
    let oracle = ap_sum / 4.0;
    assert!(oracle < 1.0);
    assert_eq!(report.map, oracle);
}

#[test]
fn divergent_training_exits_with_two_and_names_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.num_identities = 4;
    cfg.data.samples_per_identity_per_modality = 6;
    cfg.train.epochs = 150;
    cfg.train.base_lr = 1e6;
    cfg.train.peak_lr = 1e6;
    cfg.train.grad_clip = 0.0;
    cfg.train.ids_per_batch = 2;
    cfg.train.samples_per_modality = 3;
    fs::write(dir.path().join("c.json"), cfg.to_json()).unwrap();
    pdm(&["--config", "c.json", "synth"], dir.path());
    let o = pdm(&["--config", "c.json", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric failure in"), "{}", stderr(&o));
}

#[test]
fn gradcheck_table_and_fault_injection() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdm(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 1 + registry().len());
    assert!(table.lines().skip(1).all(|l| l.ends_with("pass")));

    let o = pdm(&["gradcheck", "--inject-fault"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).lines().last().unwrap().ends_with("FAIL"));
    assert!(stderr(&o).contains("fault.sign_flip"));
}
