use ckm_core::data::{synth_generate, CkmGrid, SynthParams};
use ckm_core::eval::*;
use ckm_core::net::{ArchConfig, ScoreNet};
use ckm_core::ops::{ForwardOperator, OperatorSpec};
use ckm_core::sde::ScheduleSpec;
use ckm_core::{Shape, Tensor};

fn flat(h: usize, w: usize, gain: f32, aoa: f32) -> CkmGrid {
    CkmGrid::new(
        h,
        w,
        vec![gain; h * w],
        vec![aoa; h * w],
        vec![false; h * w],
        None,
    )
    .unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-5
}

#[test]
fn gain_rmse_scales_pixels_by_200() {
    let t = flat(4, 4, 0.5, 0.6);
    assert_eq!(rmse_gain_db(&t, &t, true).unwrap(), 0.0);
    assert!(close(
        rmse_gain_db(&flat(4, 4, 0.6, 0.6), &t, true).unwrap(),
        20.0
    ));
    assert!(close(
        rmse_gain_db(&flat(4, 4, 0.45, 0.6), &t, true).unwrap(),
        10.0
    ));
}

#[test]
fn aoa_rmse_scales_pixels_by_20_over_7() {
    let t = flat(4, 4, 0.5, 0.3);
    assert_eq!(rmse_aoa_sine(&t, &t, true).unwrap(), 0.0);
    assert!(close(
        rmse_aoa_sine(&flat(4, 4, 0.5, 0.37), &t, true).unwrap(),
        0.2
    ));
    assert!(close(
        rmse_aoa_sine(&flat(4, 4, 0.5, 1.0), &t, true).unwrap(),
        2.0
    ));
}

#[test]
fn building_cells_can_be_excluded() {
    let mut b = vec![false; 4];
    b[0] = true;
    let truth = CkmGrid::new(
        2,
        2,
        vec![0.0, 0.5, 0.5, 0.5],
        vec![0.0, 0.6, 0.6, 0.6],
        b,
        None,
    )
    .unwrap();
    let est = flat(2, 2, 0.5, 0.6);
    // Only the building cell differs: 0.5 on one of four cells.
    assert!(close(rmse_gain_db(&est, &truth, true).unwrap(), 50.0));
    assert_eq!(rmse_gain_db(&est, &truth, false).unwrap(), 0.0);
    let all = CkmGrid::new(1, 1, vec![0.0], vec![0.0], vec![true], None).unwrap();
    assert!(rmse_gain_db(&all, &all, false).is_err());
    assert!(rmse_gain_db(&flat(2, 2, 0.0, 0.5), &flat(2, 3, 0.0, 0.5), true).is_err());
}

#[test]
fn nearest_fill_copies_the_closest_observed_cell() {
    // 1×5 row observed at both ends: interior cells take the nearer end, the
    // middle tie goes to the lower index.
    let y = Tensor::from_vec(
        Shape::new(2, 1, 5),
        vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.3, 0.0, 0.0, 0.0, 0.9],
    )
    .unwrap();
    let mask = [true, false, false, false, true];
    let out = nearest_fill(&y, &mask);
    assert_eq!(out.channel(0), &[1.0, 1.0, 1.0, 5.0, 5.0]);
    assert_eq!(out.channel(1), &[0.3, 0.3, 0.3, 0.9, 0.9]);
    assert_eq!(nearest_fill(&y, &[false; 5]), Tensor::zeros(y.shape()));
}

#[test]
fn naive_estimate_matches_operator_kind() {
    let g = synth_generate(&SynthParams::with_size(16, 3)).unwrap();
    let x = g.to_tensor();
    let sr = ForwardOperator::new(OperatorSpec::Downsample { factor: 2 }, x.shape(), None).unwrap();
    let y = sr.apply(&x).unwrap();
    let up = naive_estimate(&y, &sr);
    assert_eq!(up.shape(), x.shape());
    assert_eq!(up.get(1, 5, 7), y.get(1, 2, 3));
    let id = ForwardOperator::new(OperatorSpec::Identity, x.shape(), None).unwrap();
    assert_eq!(naive_estimate(&x, &id), x);
}

#[test]
fn draws_are_deterministic_paired_and_in_range() {
    let cfg = TaskConfig {
        seed: 4,
        ..TaskConfig::new(TaskKind::Ipbox)
    };
    for i in 0..200 {
        let (spec, n1, s1) = cfg.draw(i, 32, 32);
        let OperatorSpec::MaskBox {
            top,
            left,
            height,
            width,
        } = spec
        else {
            panic!()
        };
        assert!((5..=16).contains(&height) && (5..=16).contains(&width));
        assert!(top + height <= 32 && left + width <= 32);
        let other = TaskConfig {
            zeta: 99.0,
            correctors: 3,
            snr_r: 0.4,
            ..cfg.clone()
        };
        assert_eq!(other.draw(i, 32, 32), (spec, n1, s1));
    }
    assert_ne!(cfg.draw(0, 32, 32), cfg.draw(1, 32, 32));
    let r = TaskConfig::new(TaskKind::Iprandom);
    for i in 0..50 {
        let OperatorSpec::MaskRandom { ratio, .. } = r.draw(i, 32, 32).0 else {
            panic!()
        };
        assert!((DEFAULT_MASK_RATIO.0..=DEFAULT_MASK_RATIO.1).contains(&ratio));
    }
    assert_eq!(
        TaskConfig::new(TaskKind::Jtqr).draw(0, 32, 32).0,
        OperatorSpec::Jtqr {
            a: 0.2,
            b: 0.7,
            k: 24
        }
    );
}

#[test]
fn task_names_parse() {
    for k in TaskKind::ALL {
        assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
    }
    assert!("IPbox".parse::<TaskKind>().is_ok());
    assert!("inpaint".parse::<TaskKind>().is_err());
    assert_eq!(TaskKind::Jtqr.default_zeta(), 10.0);
    assert_eq!(TaskKind::Sr.default_zeta(), 13.0);
}

fn tiny() -> ScoreNet {
    let arch = ArchConfig {
        base_width: 4,
        channel_mults: vec![1, 2, 2],
        groups: 2,
        temb_dim: 8,
        channels: 2,
    };
    ScoreNet::init(arch, ScheduleSpec::vp(30), 1).unwrap()
}

fn test_grids() -> Vec<CkmGrid> {
    (0..3)
        .map(|s| synth_generate(&SynthParams::with_size(16, 50 + s)).unwrap())
        .collect()
}

#[test]
fn reports_are_reproducible_and_aggregates_recompute() {
    let net = tiny();
    let grids = test_grids();
    let cfg = TaskConfig {
        zeta: 1.0,
        timing: false,
        ..TaskConfig::new(TaskKind::Ipbox)
    };
    let a = run_task(&cfg, &net, &grids, None).unwrap();
    let b = run_task(&cfg, &net, &grids, None).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.per_grid.len(), 3);
    let mean = a.per_grid.iter().map(|g| g.gain_rmse_db).sum::<f64>() / 3.0;
    assert!((a.aggregate.gain_rmse_db - mean).abs() < 1e-9);
    assert!(a
        .per_grid
        .iter()
        .all(|g| g.runtime_ms == 0 && g.gain_rmse_db.is_finite()));
    let back: MetricsReport = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(back, a);
    let par = run_task_parallel(&cfg, &net, &grids, None, 2).unwrap();
    assert_eq!(par.to_json(), a.to_json());
    assert!(run_task_parallel(&cfg, &net, &grids, None, 0).is_err());
}

#[test]
fn sweep_is_keyed_by_zeta() {
    let net = tiny();
    let grids = &test_grids()[..1];
    let cfg = TaskConfig {
        timing: false,
        ..TaskConfig::new(TaskKind::Iprandom)
    };
    let a = zeta_sweep(&cfg, &net, grids, &[0.0, 2.0, 1.0]).unwrap();
    let b = zeta_sweep(&cfg, &net, grids, &[2.0, 1.0, 0.0]).unwrap();
    assert_eq!(a, b);
    let zetas: Vec<f64> = a.points.iter().map(|p| p.zeta).collect();
    assert_eq!(zetas, [0.0, 1.0, 2.0]);
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("zeta,gain_rmse_db,aoa_sine_rmse\n0,"));
    assert!(zeta_sweep(&cfg, &net, grids, &[0.0, 1.0]).is_err());
    assert!(zeta_sweep(&cfg, &net, grids, &[0.0, 1.0, 1.0]).is_err());
}

#[test]
fn interior_minimum_detection() {
    let net = tiny();
    let grids = &test_grids()[..1];
    let cfg = TaskConfig {
        timing: false,
        ..TaskConfig::new(TaskKind::Identity)
    };
    let mut s = zeta_sweep(&cfg, &net, grids, &[0.0, 1.0, 2.0]).unwrap();
    for (p, v) in s.points.iter_mut().zip([3.0, 1.0, 2.0]) {
        p.gain_rmse_db = v;
    }
    assert!(s.has_interior_minimum());
    assert_eq!(s.argmin(), Some(1));
    s.points[0].gain_rmse_db = 0.5;
    assert!(!s.has_interior_minimum());
}

#[test]
fn pgm_dumps() {
    let bytes = pgm_bytes(2, 1, &[0.0, 1.5]).unwrap();
    assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    assert!(pgm_bytes(2, 2, &[0.0]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let net = tiny();
    let grids = &test_grids()[..1];
    let cfg = TaskConfig {
        zeta: 0.0,
        correctors: 0,
        timing: false,
        ..TaskConfig::new(TaskKind::Sr)
    };
    run_task(&cfg, &net, grids, Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    assert_eq!(names[0], "sr_000_obs_aoa.pgm");
    let obs = std::fs::read(dir.path().join("sr_000_obs_gain.pgm")).unwrap();
    assert!(obs.starts_with(b"P5\n8 8\n255\n"));
}
