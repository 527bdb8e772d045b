use std::collections::BTreeMap;
use std::path::Path;
use std::time::SystemTime;

use rfosr::experiment::{full_run, parse_config, ExperimentConfig, RunReport, StageStatus, STAGES};
use rfosr::io::read_json;

/// Four classes at 30 slices each and a one-stage model: minutes, not hours.
fn tiny() -> ExperimentConfig {
    parse_config(
        r#"
seed = 5
[synth]
known_ids = [0, 1, 2]
unknown_ids = [3]
slices_per_class = 30
train_fraction = 0.5
[model]
num_classes = 3
stem_channels = 4
stage_channels = [4, 8]
model_dim = 16
pre_hidden = [16]
gamma = 16
ffn_dim = 16
post_hidden = [16]
branch_dim = 16
fusion_hidden = [16]
fused_dim = 16
projection_hidden = [16]
projection_dim = 8
layers = 1
[train]
batch_size = 15
pretrain_epochs = 15
finetune_epochs = 20
finetune_lr = 0.01
[gan]
generator_channels = [8, 4]
critic_channels = [4, 8]
noise_dim = 8
epochs = 1
batch_size = 15
[mining]
per_class = 4
budget_factor = 4
min_total = 1
[calibration]
alpha = 2
tail_size = 5
"#,
        None,
    )
    .unwrap()
}

fn mtimes(dir: &Path) -> BTreeMap<String, SystemTime> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                e.metadata().unwrap().modified().unwrap(),
            )
        })
        .collect()
}

#[test]
fn full_run_completes_resumes_and_guards_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny();
    let m = full_run(&cfg, &out).unwrap();
    assert!(m.is_complete());
    assert_eq!(m.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), STAGES);

    // Every file in the directory is listed, and every listed file exists.
    let listed: std::collections::BTreeSet<String> = m.files().into_iter().collect();
    let present: std::collections::BTreeSet<String> = mtimes(&out).into_keys().collect();
    assert_eq!(listed, present);

    let report: RunReport = read_json(&out.join("report.json")).unwrap();
    let names: Vec<&str> = report.reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["ig-openmax", "openmax", "softmax"]);
    assert_eq!(report.feature_hash_before, report.feature_hash_after);
    assert!(report.simulated_unknowns >= 1);
    for r in &report.reports {
        // 15 known test slices per class, 30 unknown.
        assert_eq!(r.counts.tk + r.counts.fu, 45);
        assert_eq!(r.counts.tu + r.counts.fk, 30);
    }
    let csv = std::fs::read_to_string(out.join("projection.csv")).unwrap();
    assert!(csv.starts_with("x,y,label,split\n"));
    assert!(csv.contains(",-1,simulated"));

    // Same configuration again: nothing is rewritten.
    let before = mtimes(&out);
    std::thread::sleep(std::time::Duration::from_millis(20));
    let again = full_run(&cfg, &out).unwrap();
    assert_eq!(again, m);
    assert_eq!(mtimes(&out), before);

    // Losing an artifact reruns its stage and everything after it.
    std::fs::remove_file(out.join("calibration.json")).unwrap();
    let redo = full_run(&cfg, &out).unwrap();
    assert!(redo.is_complete());
    let after = mtimes(&out);
    assert_eq!(after["gan.ckpt"], before["gan.ckpt"]);
    assert_ne!(after["report.json"], before["report.json"]);
    let report2: RunReport = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report2, report);

    let other = ExperimentConfig { seed: 6, ..cfg.clone() };
    let e = full_run(&other, &out).unwrap_err().to_string();
    assert!(e.contains("holds a run"), "{e}");
}

#[test]
fn a_failing_stage_is_marked_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.mining.min_total = 10_000;
    assert!(full_run(&cfg, dir.path()).is_err());
    let m: rfosr::experiment::RunManifest = read_json(&dir.path().join("manifest.json")).unwrap();
    let status: Vec<StageStatus> = m.stages.iter().map(|s| s.status).collect();
    use StageStatus::*;
    assert_eq!(status, [Done, Done, Done, Done, Failed, Pending, Pending]);
    assert!(m.stage("mine").unwrap().error.as_deref().unwrap().contains("mined"));
}
