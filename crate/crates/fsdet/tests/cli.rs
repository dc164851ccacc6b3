use std::path::Path;
use std::process::{Command, Output};

use fsdet::records::{read_jsonl, Record};

const UNKNOWN_KEY: &str = "log_every = 0\nlearning_rate = 0.1\n";

fn config(dir: &Path) -> std::path::PathBuf {
    let text = r#"
log_every = 0
[model]
max_proposals = 8
head_hidden = 32
[model.backbone]
feature_dim = 16
stage_channels = [8, 8, 16]
[meta_train]
schedule = [[12, 0.005]]
[fine_tune]
schedule = [[6, 0.005]]
"#;
    let p = dir.join("small.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn fsdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsdet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = fsdet(&["eval", "--out", out, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&fsdet(&["fine-tune", "--out", out])), 2);
    assert_eq!(code(&fsdet(&["meta-train", "--out", out, "--k", "4"])), 2);
    assert_eq!(code(&fsdet(&["meta-train", "--out", out, "--split", "3"])), 2);
    assert_eq!(code(&fsdet(&["meta-train", "--out", out, "--baseline-reweight"])), 2);
    assert_eq!(code(&fsdet(&["gradcheck", "--out", out, "--inject-fault", "nonsense"])), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, UNKNOWN_KEY).unwrap();
    assert_eq!(code(&fsdet(&["oracle", "--config", bad.to_str().unwrap(), "--out", out])), 2);
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"FSDETCKP\x01").unwrap();
    assert_eq!(code(&fsdet(&["eval", "--out", out, "--checkpoint", garbage.to_str().unwrap()])), 2);
}

#[test]
fn verification_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fsdet(&["oracle", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("oracle.json").is_file());
    let o = fsdet(&["gradcheck", "--out", out, "--inject-fault", "softmax"]);
    assert_eq!(code(&o), 1);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().any(|l| l.starts_with("softmax") && l.ends_with("FAIL")), "{table}");
}

#[test]
fn train_fine_tune_eval_cycle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let o = fsdet(&["meta-train", "--config", cfg, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("run/meta.ckpt");
    assert!(ckpt.is_file());
    let losses: Vec<serde_json::Value> = read_jsonl(&dir.path().join("run/losses.jsonl")).unwrap();
    assert_eq!(losses.len(), 12);

    let fine_tune = |sub: &str| {
        let o2 = dir.path().join(sub);
        let o = fsdet(&["fine-tune", "--config", cfg, "--out", o2.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--runs", "1", "--k", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let recs: Vec<Record> = read_jsonl(&o2.join("metrics.jsonl")).unwrap();
        recs
    };
    let a = fine_tune("ft_a");
    let b = fine_tune("ft_b");
    let strip = |recs: &[Record]| -> Vec<(f64, f64, Vec<Option<f64>>)> {
        recs.iter()
            .filter_map(|r| match r {
                Record::Run { metrics, .. } => {
                    Some((metrics.mean_novel_ap50, metrics.mean_base_ap50, metrics.per_class_ap50.iter().map(|c| c.ap50).collect()))
                }
                _ => None,
            })
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let agg = a.iter().find_map(|r| match r {
        Record::Aggregate { aggregate, .. } => Some(aggregate.clone()),
        _ => None,
    });
    let agg = agg.expect("aggregate record");
    assert_eq!(agg.runs, 1);
    assert_eq!((agg.std_novel_ap50, agg.std_base_ap50), (0.0, 0.0));

    let run_ckpt = dir.path().join("ft_a/run0.ckpt");
    let eo = dir.path().join("eval");
    let o = fsdet(&["eval", "--config", cfg, "--out", eo.to_str().unwrap(), "--checkpoint", run_ckpt.to_str().unwrap(), "--debug-dump", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e: Vec<Record> = read_jsonl(&eo.join("eval.jsonl")).unwrap();
    let Record::Run { metrics, .. } = &e[0] else { panic!("expected a run record") };
    assert_eq!(strip(&a)[0], (metrics.mean_novel_ap50, metrics.mean_base_ap50, metrics.per_class_ap50.iter().map(|c| c.ap50).collect()));
    let dump: Vec<serde_json::Value> = read_jsonl(&eo.join("debug_dump.jsonl")).unwrap();
    assert_eq!(dump.len(), 2);
}

#[test]
fn export_writes_pam_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fsdet(&["export-data", "--out", out, "--runs", "2", "--k", "1", "--queries", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let test = dir.path().join("split0/test");
    let pam = std::fs::read(test.join("test_0000.pam")).unwrap();
    let img = fsdet::export::decode_pam(&pam).unwrap();
    assert_eq!(img.shape(), &[3, 96, 96]);
    let rows = csv::Reader::from_path(test.join("annotations.csv")).unwrap().records().count();
    assert!(rows >= 200);
    assert!(dir.path().join("split0/run1/support_0011_mask.pam").is_file());
    assert!(dir.path().join("split0/run1/query_0002.pam").is_file());
}
