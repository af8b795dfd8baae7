use feded::data::{gen_synthetic, SyntheticSpec};
use feded::engine::{run_experiment, FedConfig, Method};
use feded::metrics::{read_report_json, write_report, ReportFormat};
use feded::partition::{quantity_shard_partition, PartitionKind, PartitionSpec};
use feded::{Dataset32, Dataset64};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        dim: 6,
        per_class: 30,
        spread: 1.0,
        separation: 3.0,
        seed: 3,
    }
}

fn config(method: Method) -> FedConfig {
    FedConfig {
        rounds: 4,
        clients: 4,
        local_epochs: 2,
        batch_size: 16,
        hidden_widths: vec![8],
        method,
        master_seed: 5,
        ..FedConfig::default()
    }
}

#[test]
fn single_precision_runs_track_double_precision() {
    let (train64, test64): (Dataset64, Dataset64) = gen_synthetic(&spec()).unwrap();
    let (train32, test32): (Dataset32, Dataset32) = gen_synthetic(&spec()).unwrap();
    assert_eq!(train64.labels(), train32.labels());
    let part = PartitionSpec {
        kind: PartitionKind::Dirichlet { beta: 0.3 },
        num_clients: 4,
        seed: 1,
    }
    .apply(train64.labels(), 4)
    .unwrap();
    let cfg = config(Method::FedEd { lambda: 0.1 });
    let r64 = run_experiment(&cfg, &train64, &test64, &part).unwrap();
    let r32 = run_experiment(&cfg, &train32, &test32, &part).unwrap();
    assert_eq!(r64.len(), 4);
    for (a, b) in r64.iter().zip(&r32) {
        assert!(
            (a.global_accuracy - b.global_accuracy).abs() <= 0.05,
            "{a:?} vs {b:?}"
        );
    }
}

#[test]
fn every_method_trains_on_shard_partitions_and_reports_round_trip() {
    let (train, test): (Dataset64, Dataset64) = gen_synthetic(&spec()).unwrap();
    let part = quantity_shard_partition(train.labels(), 4, 4, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in [
        Method::FedAvg,
        Method::FedProx { mu: 0.01 },
        Method::Calibrated,
        Method::FedEd { lambda: 0.1 },
        Method::FedEdNoDis,
        Method::FedEdNoLogit { lambda: 0.1 },
    ] {
        let cfg = FedConfig {
            diagnostics: true,
            ..config(method)
        };
        let reports = run_experiment(&cfg, &train, &test, &part).unwrap();
        for r in &reports {
            assert!(r.mean_train_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.global_accuracy));
            let per_client = r.client_classwise.as_ref().unwrap();
            assert!(per_client.iter().all(Option::is_some));
        }
        let path = dir.path().join(format!("{}.json", method.label()));
        write_report(&reports, &path, ReportFormat::Json).unwrap();
        assert_eq!(read_report_json(&path).unwrap(), reports);
    }
}
