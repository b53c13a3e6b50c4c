mod common;

use std::collections::{BTreeMap, BTreeSet};

use fusionbiopsy::config::ExperimentConfig;
use fusionbiopsy::fixture::FixtureSpec;
use fusionbiopsy::harness::{
    robustness_sweep, run_experiment, ChannelBackend, HarnessOptions, RobustnessConfig, Setting,
};
use fusionbiopsy::metrics::ConfusionCounts;
use fusionbiopsy::scorers::ScoreMatrix;
use fusionbiopsy::{AcrCategory, BiopsyLabel, Channel, SeedPath};
use rand::Rng;

use common::{manifest, scores, small_sweep};

fn table_backends(real: &ScoreMatrix, synthetic: Option<&ScoreMatrix>) -> BTreeMap<Channel, ChannelBackend> {
    Channel::ALL
        .into_iter()
        .map(|c| {
            (
                c,
                ChannelBackend::Table {
                    real: real.clone(),
                    synthetic: synthetic.cloned(),
                },
            )
        })
        .collect()
}

fn truth_p(label: BiopsyLabel) -> f64 {
    if label.is_positive() {
        1.0
    } else {
        0.0
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap()
}

#[test]
fn degenerate_percentages_reproduce_the_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        patients: 30,
        ..FixtureSpec::default()
    };
    let config = common::fixture_with_config(dir.path(), &spec, |cfg| {
        cfg.robustness = small_sweep(&[0, 40, 100], 3);
    });
    let (m, opts) = ExperimentConfig::load(&config).unwrap().prepare().unwrap();
    let report = run_experiment(&m, &opts).unwrap();
    let get = |s| json(report.setting(s).unwrap());

    assert_eq!(get(Setting::Cstar(0)), get(Setting::C));
    assert_eq!(get(Setting::FplusCstar(0)), get(Setting::FplusC));
    assert_eq!(get(Setting::Cstar(100)), get(Setting::Chat));
    assert_eq!(get(Setting::FplusCstar(100)), get(Setting::FplusChat));

    let mixed = report.setting(Setting::Cstar(40)).unwrap();
    assert_eq!(mixed.repetitions, 3);
    for fold in &mixed.folds {
        let expected = (40 * fold.test_patients).div_ceil(100);
        for run in &fold.runs {
            assert_eq!(run.synthetic_patients, expected);
            let flagged: BTreeSet<&str> = run
                .predictions
                .iter()
                .filter(|p| p.synthetic_cesm)
                .map(|p| p.record.patient_id.as_str())
                .collect();
            assert_eq!(flagged.len(), expected);
        }
    }
}

#[test]
fn perfect_ffdm_channels_give_unit_mcc() {
    let rows: Vec<(String, BiopsyLabel)> = common::alternating(20);
    let acr_rows: Vec<(&str, BiopsyLabel, AcrCategory)> =
        rows.iter().map(|(p, l)| (p.as_str(), *l, AcrCategory::B)).collect();
    let m = manifest(&acr_rows);
    let table: Vec<(&str, [f64; 4])> = rows
        .iter()
        .map(|(p, l)| (p.as_str(), [truth_p(*l), truth_p(*l), 0.5, 0.5]))
        .collect();
    let opts = HarnessOptions::new(table_backends(&scores(&table), None), vec![Setting::F]);
    let report = run_experiment(&m, &opts).unwrap();
    let f = report.setting(Setting::F).unwrap();
    for fold in &f.folds {
        assert_eq!(fold.runs[0].metrics.mcc, Some(1.0));
    }
    assert_eq!(f.aggregate.mcc.mean, Some(1.0));
    assert_eq!(f.aggregate.mcc.se, Some(0.0));
}

#[test]
fn informative_cesm_beats_uninformative_ffdm() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        patients: 50,
        margin_f: 0.0,
        margin_c: 0.4,
        noise: 0.1,
        ..FixtureSpec::default()
    };
    let config = common::fixture_with_config(dir.path(), &spec, |cfg| {
        cfg.settings = vec![Setting::F, Setting::FplusC];
        cfg.robustness = None;
    });
    let (m, opts) = ExperimentConfig::load(&config).unwrap().prepare().unwrap();
    let report = run_experiment(&m, &opts).unwrap();
    let mcc = |s| report.setting(s).unwrap().aggregate.mcc.mean.unwrap();
    assert!(mcc(Setting::FplusC) > mcc(Setting::F), "{} vs {}", mcc(Setting::FplusC), mcc(Setting::F));
}

fn counts_sum(items: impl IntoIterator<Item = ConfusionCounts>) -> ConfusionCounts {
    items.into_iter().fold(ConfusionCounts::default(), |a, b| a.merge(&b))
}

#[test]
fn density_cells_partition_the_pooled_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        patients: 40,
        bilateral_frac: 0.3,
        ..FixtureSpec::default()
    };
    let config = common::fixture_with_config(dir.path(), &spec, |cfg| {
        cfg.robustness = None;
    });
    let (m, opts) = ExperimentConfig::load(&config).unwrap().prepare().unwrap();
    let report = run_experiment(&m, &opts).unwrap();
    assert_eq!(report.acr.len(), 3);
    for r in &report.acr {
        let cells = counts_sum(r.cells.iter().map(|c| c.counts));
        assert_eq!(cells.merge(&r.not_reported), r.overall);
        assert_eq!(r.overall.total() as usize, report.records);
        for c in &r.cells {
            assert_eq!(c.records as u64, c.counts.total());
            assert_eq!(c.malignant as u64, c.counts.positives());
        }
    }
}

#[test]
fn single_class_density_grade_reports_gmean_only() {
    let mut rows: Vec<(String, BiopsyLabel, AcrCategory)> = Vec::new();
    for i in 0..20 {
        let label = if i % 2 == 0 { BiopsyLabel::Malignant } else { BiopsyLabel::Benign };
        // grade a holds malignant cases only
        let acr = if i % 4 == 0 { AcrCategory::A } else { AcrCategory::B };
        rows.push((format!("p{i:02}"), label, acr));
    }
    let refs: Vec<(&str, BiopsyLabel, AcrCategory)> = rows.iter().map(|(p, l, a)| (p.as_str(), *l, *a)).collect();
    let table: Vec<(&str, [f64; 4])> = rows
        .iter()
        .map(|(p, l, _)| {
            let t = truth_p(*l);
            (p.as_str(), [0.5 * t + 0.3, 0.6 * t + 0.2, t, t])
        })
        .collect();
    let s = scores(&table);
    let opts = HarnessOptions::new(table_backends(&s, Some(&s)), common::unstarred());
    let report = run_experiment(&manifest(&refs), &opts).unwrap();
    for r in &report.acr {
        let a = r.cells.iter().find(|c| c.acr == AcrCategory::A).unwrap();
        assert_eq!((a.records, a.benign), (5, 0));
        let m = a.metrics.unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.mcc, None);
        assert!((0.0..=1.0).contains(&m.gmean));
        for empty in r.cells.iter().filter(|c| matches!(c.acr, AcrCategory::C | AcrCategory::D)) {
            assert_eq!(empty.records, 0);
            assert!(empty.metrics.is_none());
        }
    }
}

#[test]
fn sweep_selects_exactly_the_ceiling_each_repetition() {
    // 100 single-breast patients give 20 test patients per fold.
    let mut rng = fusionbiopsy::derive_rng(&SeedPath::root(3).child("table", 0));
    let rows: Vec<(String, BiopsyLabel)> = common::alternating(100);
    let refs: Vec<(&str, BiopsyLabel, AcrCategory)> =
        rows.iter().map(|(p, l)| (p.as_str(), *l, AcrCategory::C)).collect();
    let real: Vec<(&str, [f64; 4])> = rows
        .iter()
        .map(|(p, _)| (p.as_str(), [0.0; 4].map(|_: f64| rng.random::<f64>())))
        .collect();
    let synth: Vec<(&str, [f64; 4])> = rows
        .iter()
        .map(|(p, _)| (p.as_str(), [0.0; 4].map(|_: f64| rng.random::<f64>())))
        .collect();
    let opts = HarnessOptions::new(table_backends(&scores(&real), Some(&scores(&synth))), vec![Setting::F]);
    let cfg = RobustnessConfig {
        percentages: vec![50],
        repetitions: 10,
    };
    let report = robustness_sweep(&manifest(&refs), &opts, &cfg).unwrap();
    let r = report.setting(Setting::Cstar(50)).unwrap();
    for fold in &r.folds {
        assert_eq!(fold.test_patients, 20);
        let mut subsets = BTreeSet::new();
        for run in &fold.runs {
            assert_eq!(run.synthetic_patients, 10);
            let chosen: Vec<&str> = run
                .predictions
                .iter()
                .filter(|p| p.synthetic_cesm)
                .map(|p| p.record.patient_id.as_str())
                .collect();
            assert_eq!(chosen.len(), 10);
            subsets.insert(chosen);
        }
        assert!(subsets.len() > 1);
    }
    // both starred families share the sampled subsets
    let fc = report.setting(Setting::FplusCstar(50)).unwrap();
    for (a, b) in r.folds.iter().zip(&fc.folds) {
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            let flags = |run: &fusionbiopsy::harness::RunOutcome| -> Vec<bool> {
                run.predictions.iter().map(|p| p.synthetic_cesm).collect()
            };
            assert_eq!(flags(ra), flags(rb));
        }
    }
}

#[test]
fn repeated_runs_are_identical() {
    let rows = common::alternating(30);
    let refs: Vec<(&str, BiopsyLabel, AcrCategory)> =
        rows.iter().map(|(p, l)| (p.as_str(), *l, AcrCategory::D)).collect();
    let table: Vec<(&str, [f64; 4])> = rows
        .iter()
        .enumerate()
        .map(|(i, (p, _))| (p.as_str(), [0.1, 0.2, 0.3, 0.4].map(|v| (v * (i + 1) as f64) % 1.0)))
        .collect();
    let s = scores(&table);
    let mut opts = HarnessOptions::new(table_backends(&s, Some(&s)), vec![Setting::F, Setting::FplusCstar(30)]);
    opts.repetitions = 4;
    let a = run_experiment(&manifest(&refs), &opts).unwrap().to_json();
    opts.threads = Some(3);
    let b = run_experiment(&manifest(&refs), &opts).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn unknown_split_records_are_rejected() {
    let rows = common::alternating(10);
    let refs: Vec<(&str, BiopsyLabel, AcrCategory)> =
        rows.iter().map(|(p, l)| (p.as_str(), *l, AcrCategory::B)).collect();
    let table: Vec<(&str, [f64; 4])> = rows.iter().map(|(p, _)| (p.as_str(), [0.5; 4])).collect();
    let mut opts = HarnessOptions::new(table_backends(&scores(&table), None), vec![Setting::F]);
    let ghost = fusionbiopsy::RecordKey::new("ghost", fusionbiopsy::Laterality::Left);
    opts.splits = Some(vec![fusionbiopsy::harness::FoldSplit {
        fold_index: 0,
        train: BTreeSet::new(),
        val: BTreeSet::from([ghost]),
        test: BTreeSet::new(),
    }]);
    let err = run_experiment(&manifest(&refs), &opts).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
}
