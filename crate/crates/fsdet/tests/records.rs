use fsdet::config::{Mode, RunConfig};
use fsdet::records::{read_jsonl, Aggregate, JsonlWriter, Record};
use fsdet_core::metrics::{ClassAp, RunMetrics};
use proptest::prelude::*;

fn metrics() -> impl Strategy<Value = RunMetrics> {
    (
        any::<u64>(),
        prop::collection::vec(prop::option::of(0.0f64..=1.0), 12),
        0.0f64..=1.0,
        0.0f64..=1.0,
        0.0f64..1e4,
        prop::collection::vec("[ -~]{0,30}", 0..3),
    )
        .prop_map(|(run_index, aps, novel, base, wall, warnings)| RunMetrics {
            run_index,
            k: 5,
            seed: 7,
            per_class_ap50: aps.into_iter().enumerate().map(|(class_id, ap50)| ClassAp { class_id, ap50 }).collect(),
            mean_novel_ap50: novel,
            mean_base_ap50: base,
            wall_time_s: wall,
            warnings,
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn jsonl_records_roundtrip(runs in prop::collection::vec(metrics(), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let cfg = Box::new(RunConfig::new(Mode::FineTune));
        let mut records: Vec<Record> = runs.iter().map(|m| Record::Run { config: cfg.clone(), metrics: m.clone() }).collect();
        records.push(Record::Aggregate { config: cfg.clone(), aggregate: Aggregate::from_runs(&runs) });
        records.push(Record::Warning { config: cfg, run_index: None, message: "x".into() });
        let mut w = JsonlWriter::create(&path).unwrap();
        for r in &records {
            w.write(r).unwrap();
        }
        drop(w);
        let back: Vec<Record> = read_jsonl(&path).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn aggregate_mean_is_the_arithmetic_mean(runs in prop::collection::vec(metrics(), 1..12)) {
        let a = Aggregate::from_runs(&runs);
        let n = runs.len() as f64;
        let novel = runs.iter().map(|r| r.mean_novel_ap50).sum::<f64>() / n;
        let base = runs.iter().map(|r| r.mean_base_ap50).sum::<f64>() / n;
        prop_assert!((a.mean_novel_ap50 - novel).abs() <= 1e-12);
        prop_assert!((a.mean_base_ap50 - base).abs() <= 1e-12);
        prop_assert_eq!(a.runs, runs.len());
        for c in &a.per_class {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.ap(c.class_id)).collect();
            prop_assert_eq!(c.defined_runs, vals.len());
            if let Some(m) = c.mean_ap50 {
                prop_assert!((m - vals.iter().sum::<f64>() / vals.len() as f64).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn single_run_has_zero_spread() {
    let m = RunMetrics {
        run_index: 0,
        k: 1,
        seed: 7,
        per_class_ap50: vec![ClassAp { class_id: 0, ap50: Some(0.25) }],
        mean_novel_ap50: 0.25,
        mean_base_ap50: 0.5,
        wall_time_s: 1.0,
        warnings: vec![],
    };
    let a = Aggregate::from_runs(&[m]);
    assert_eq!((a.std_novel_ap50, a.std_base_ap50), (0.0, 0.0));
    assert_eq!(a.mean_novel_ap50, 0.25);
}
