//! Tau-sweep behavior on degenerate and single-point grids.

use mvbev::evalmetrics::{sweep_tau, EvalProtocol};
use mvbev::geometry::{BevGrid, CameraCalibration};
use mvbev::rng::derive_rng;
use mvbev::selftrain::dataset_tables;
use mvbev::synthworld::{sample_frame, Dataset, DatasetManifest, DomainStyle, RigConfig, SceneConfig};
use mvbev::tinynet::{NetConfig, ParameterSet};

fn tiny_dataset() -> Dataset {
    let scene = SceneConfig {
        area_w: 2.0,
        area_h: 2.0,
        ped_count_min: 1,
        ped_count_max: 2,
        ped_radius: 0.3,
        ped_height: 1.8,
        min_separation: 0.5,
    };
    let style = DomainStyle {
        bg_mean: 0.8,
        bg_noise_std: 0.02,
        ped_intensity_min: 0.1,
        ped_intensity_max: 0.3,
        gain: 1.0,
        bias: 0.0,
        texture_seed: 1,
    };
    let rig = RigConfig {
        cameras: vec![
            CameraCalibration::look_at(26.0, 26.0, 16.0, 12.0, 32, 24, [-0.5, -0.5, 1.8], [1.0, 1.0, 0.5]).unwrap(),
        ],
        image_w: 32,
        image_h: 24,
    };
    let grid = BevGrid::new(-0.2, -0.2, 0.1, 24, 24).unwrap();
    let frames = (0..4u64)
        .map(|id| {
            let mut rng = derive_rng(40, id);
            let mut f = sample_frame(&mut rng, &scene, &rig, &style, &grid).unwrap();
            f.frame_id = id;
            f
        })
        .collect::<Vec<_>>();
    Dataset {
        manifest: DatasetManifest {
            seed: 40,
            n_frames: 4,
            n_views: 1,
            image_h: 24,
            image_w: 32,
            train_frames: vec![0, 1],
            test_frames: vec![2, 3],
            rig_file: "r".into(),
            grid_file: "g".into(),
            labels_file: "l".into(),
        },
        rig,
        grid,
        frames,
    }
}

/// A model whose output sits below every tau produces no detections at any
/// threshold: FP = 0, FN = GT, so MODA is exactly 0 everywhere.
#[test]
fn constant_low_output_gives_zero_moda_for_every_tau() {
    let net = NetConfig { c_feat: 4 };
    let ds = tiny_dataset();
    let tables = dataset_tables(&ds, &net).unwrap();
    let mut params = ParameterSet::init(&net, 1);
    for (_, t) in params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    params.get_mut("bev3.bias").data_mut()[0] = -10.0;
    let protocol = EvalProtocol::standard(0.1);
    let sweep = sweep_tau(&params, &net, &ds.test_frames(), &tables, &protocol).unwrap();
    for (tau, report) in &sweep.per_tau {
        assert_eq!(report.moda, 0.0, "tau {tau}");
        assert_eq!(report.recall, 0.0);
        assert_eq!(report.precision, 100.0);
    }
    // Ties resolve to the smallest tau.
    assert_eq!(sweep.best_tau, 0.05);
}

#[test]
fn single_tau_set_returns_that_tau() {
    let net = NetConfig { c_feat: 4 };
    let ds = tiny_dataset();
    let tables = dataset_tables(&ds, &net).unwrap();
    let params = ParameterSet::init(&net, 1);
    let protocol = EvalProtocol {
        tau_set: vec![0.35],
        ..EvalProtocol::standard(0.1)
    };
    let sweep = sweep_tau(&params, &net, &ds.test_frames(), &tables, &protocol).unwrap();
    assert_eq!(sweep.best_tau, 0.35);
    assert_eq!(sweep.per_tau.len(), 1);
}

#[test]
fn unlabeled_frames_are_rejected() {
    let net = NetConfig { c_feat: 4 };
    let mut ds = tiny_dataset();
    for f in &mut ds.frames {
        f.gt_positions = None;
    }
    let tables = dataset_tables(&ds, &net).unwrap();
    let params = ParameterSet::init(&net, 1);
    let protocol = EvalProtocol::standard(0.1);
    assert!(sweep_tau(&params, &net, &ds.test_frames(), &tables, &protocol).is_err());
}

/// Raising tau never increases the number of detections fed to matching,
/// so recall is monotonically non-increasing in tau.
#[test]
fn recall_is_monotone_in_tau() {
    let net = NetConfig { c_feat: 4 };
    let ds = tiny_dataset();
    let tables = dataset_tables(&ds, &net).unwrap();
    let params = ParameterSet::init(&net, 2);
    let protocol = EvalProtocol::standard(0.1);
    let sweep = sweep_tau(&params, &net, &ds.test_frames(), &tables, &protocol).unwrap();
    let mut prev = f64::INFINITY;
    for (_, report) in &sweep.per_tau {
        assert!(report.recall <= prev + 1e-12);
        prev = report.recall;
    }
}
