use lidog::bev::BevProjectionConfig;
use lidog::eval::{evaluate, run_experiment_on, target_split, Domain, ExperimentSpec, Variant, SOURCE_SPLIT};
use lidog::net::{ModelConfig, ModelParams};
use lidog::synth::{DomainSpec, SensorSpec};
use lidog::train::TrainConfig;
use lidog::{ClassId, Point, PointCloud};

fn all_road_model() -> ModelParams {
    let mut p = ModelParams::zeros(&ModelConfig::default()).unwrap();
    p.params.get_mut("head3d.bias").unwrap().data[2] = 1.0;
    p
}

#[test]
fn constant_model_scores_by_hand() {
    // 4 road, 3 sidewalk, 2 vehicle, 1 ignored; everything predicted road.
    let labels = [2, 2, 2, 2, 3, 3, 3, 0, 0, u16::MAX].map(ClassId).to_vec();
    let points = (0..10).map(|i| Point::new(i as f64, -1.7, 0.0)).collect();
    let scan = PointCloud::labeled(points, labels).unwrap();
    let bev = BevProjectionConfig::square(20.0).unwrap();
    let cm = evaluate(&all_road_model(), &[scan], 0.5, &bev, 1).unwrap();

    assert_eq!(cm.total(), 9);
    assert_eq!(cm.get(2, 2), 4);
    assert_eq!(cm.get(3, 2), 3);
    assert_eq!(cm.get(0, 2), 2);
    let road = 100.0 * 4.0 / 9.0;
    assert!((cm.iou(2).unwrap() - road).abs() < 1e-12);
    assert_eq!(cm.iou(3), Some(0.0));
    assert_eq!(cm.iou(0), Some(0.0));
    assert_eq!(cm.iou(1), None);
    assert!((cm.miou().unwrap() - road / 3.0).abs() < 1e-12);
}

fn tiny_domain(name: &str, sensor: SensorSpec, n: usize) -> Domain {
    let spec = DomainSpec {
        name: name.into(),
        n_scans: n,
        scene_seed_base: 3,
        noise_seed: 4,
        sensor: SensorSpec {
            azimuth_step_deg: 4.0,
            max_range: 15.0,
            ..sensor
        },
        ..DomainSpec::default()
    };
    Domain::new(name, (0..n).map(|i| spec.scan(i).unwrap()).collect())
}

fn quick_spec(variants: Vec<Variant>) -> ExperimentSpec {
    ExperimentSpec {
        train: TrainConfig {
            epochs: 1,
            batch_size: 2,
            voxel_size: 0.5,
            transform: false,
            ..TrainConfig::default()
        },
        variants,
        bev_area: Some(15.0),
        bev_resolution: 0.5,
        val_fraction: 0.5,
        ..ExperimentSpec::default()
    }
}

#[test]
fn report_has_one_row_per_variant_and_split() {
    let a = tiny_domain("a", SensorSpec::domain_a(), 2);
    let b = tiny_domain("b", SensorSpec::domain_b(), 2);
    let c = tiny_domain("c", SensorSpec::domain_b(), 1);
    let variants = vec![Variant::Lidog, Variant::NoBev, Variant::Double];
    let out = run_experiment_on(&quick_spec(variants.clone()), &[a], &[b, c]).unwrap();
    assert_eq!(out.report.summary.len(), variants.len() * (1 + 2));
    assert_eq!(out.report.classes.len(), variants.len() * (1 + 2) * 7);
    assert_eq!(out.runs.len(), 3);
    for v in variants {
        for split in [SOURCE_SPLIT.to_string(), target_split("b"), target_split("c")] {
            assert!(out.report.summary.iter().any(|r| r.variant == v.name() && r.split == split));
        }
    }
}

#[test]
fn swapping_symmetric_domains_swaps_the_report() {
    // Identical data under two names: the harness must not care which is which.
    let scans = tiny_domain("x", SensorSpec::domain_a(), 2).scans;
    let a = Domain::new("a", scans.clone());
    let b = Domain::new("b", scans);
    let spec = quick_spec(vec![Variant::Lidog, Variant::NoBev]);
    let ab = run_experiment_on(&spec, &[a.clone()], &[b.clone()]).unwrap().report;
    let ba = run_experiment_on(&spec, &[b], &[a]).unwrap().report;
    for v in [Variant::Lidog, Variant::NoBev] {
        assert_eq!(ab.miou(v, SOURCE_SPLIT), ba.miou(v, SOURCE_SPLIT));
        assert_eq!(ab.miou(v, &target_split("b")), ba.miou(v, &target_split("a")));
    }
    let rename = |csv: String| csv.replace("target:a", "target:b");
    assert_eq!(rename(ba.to_csv()), ab.to_csv());
}

#[test]
fn experiments_are_reproducible() {
    let a = tiny_domain("a", SensorSpec::domain_a(), 2);
    let b = tiny_domain("b", SensorSpec::domain_b(), 1);
    let spec = quick_spec(vec![Variant::Lidog]);
    let one = run_experiment_on(&spec, &[a.clone()], &[b.clone()]).unwrap();
    let two = run_experiment_on(&spec, &[a], &[b]).unwrap();
    assert_eq!(one.report, two.report);
    assert_eq!(one.runs[0].params, two.runs[0].params);
}
