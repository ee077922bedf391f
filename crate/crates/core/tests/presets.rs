use std::fs;
use std::path::PathBuf;

use deeplcc::central::{Formulation, Weights};
use deeplcc::experiments::{LayoutSpec, ScenarioConfig};
use deeplcc::sim::{AccelSegment, HeadProfile};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.toml"))
}

/// Set `UPDATE_GOLDEN=1` to rewrite the files after an intended preset change.
#[test]
fn presets_match_golden_files() {
    for name in ScenarioConfig::PRESETS {
        let text = ScenarioConfig::preset(name).unwrap().to_toml().unwrap();
        let path = golden(name);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, &text).unwrap();
        }
        let expected = fs::read_to_string(&path).unwrap();
        assert_eq!(text, expected, "preset {name} differs from {}", path.display());
        assert_eq!(ScenarioConfig::from_toml(&expected).unwrap(), ScenarioConfig::preset(name).unwrap());
    }
}

fn load(name: &str) -> ScenarioConfig {
    ScenarioConfig::from_toml(&fs::read_to_string(golden(name)).unwrap()).unwrap()
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

#[test]
fn moderate_values() {
    let c = load("moderate");
    let layout = c.layout().unwrap();
    assert_eq!(layout.vehicle_count(), 15);
    assert_eq!(layout.cav_positions(), vec![1, 4, 7, 10, 13]);
    assert_eq!(c.data.centralized, Some(1200));
    assert_eq!(c.data.local, 300);
    assert_eq!(c.regularization.central, Formulation::Regularized { lambda_g: 10.0, lambda_y: 1e4 });
    assert_eq!(c.regularization.distributed, Formulation::Regularized { lambda_g: 2.0, lambda_y: 1e4 });
    assert_eq!(c.weights, Weights { w_v: 1.0, w_s: 0.5, w_u: 0.1 });
    assert_eq!((c.horizons.t_ini, c.horizons.horizon), (20, 50));
    assert_eq!((c.bounds.a_min, c.bounds.a_max), (-5.0, 2.0));
    // spacing 5..40 m around s* = 20 m
    assert_eq!((c.bounds.s_err_min, c.bounds.s_err_max), (-15.0, 20.0));
    assert_eq!((c.equilibrium.v_star, c.equilibrium.s_star_cav), (15.0, 20.0));
    assert_eq!(c.admm.rho, 1.0);
    assert_eq!(c.admm.policy.max_iterations, 300);
    assert_eq!((c.admm.policy.delta_abs, c.admm.policy.delta_rel), (0.1, 1e-3));
    assert!(matches!(c.head, HeadProfile::Sinusoid { mean, .. } if mean == 15.0));
}

#[test]
fn large_scale_values() {
    let table = [
        ("large_5", 5, vec![16, 17, 19, 20, 23], 800, Weights { w_v: 2.0, w_s: 1.0, w_u: 0.2 }),
        ("large_10", 10, vec![7, 8, 9, 10, 11], 600, Weights { w_v: 1.0, w_s: 0.5, w_u: 0.1 }),
        ("large_20", 20, vec![3, 4, 5, 6, 7], 600, Weights { w_v: 1.0, w_s: 0.5, w_u: 0.1 }),
    ];
    for (name, n, choices, t_i, w) in table {
        let c = load(name);
        assert!(matches!(c.layout, LayoutSpec::Preset { .. }));
        let layout = c.layout().unwrap();
        assert_eq!(layout.n(), n, "{name}");
        assert_eq!(layout.vehicle_count(), 100, "{name}");
        assert_eq!(sorted_unique(layout.hdv_counts().to_vec()), choices, "{name}");
        assert_eq!(layout.cav_positions()[0], 1);
        assert_eq!(c.data.local, t_i, "{name}");
        assert_eq!(c.data.centralized, None);
        assert_eq!(c.weights, w, "{name}");
        assert_eq!(c.regularization.distributed, Formulation::Regularized { lambda_g: 2.0, lambda_y: 1e4 });
        let HeadProfile::Piecewise { v0, segments } = &c.head else { panic!("{name}: brake profile expected") };
        assert_eq!(*v0, 15.0);
        let seg = |duration, accel| AccelSegment { duration, accel };
        assert_eq!(segments, &vec![seg(1.0, 0.0), seg(1.0, -5.0), seg(3.0, 0.0), seg(5.0, 1.0), seg(141.0, 0.0)]);
        assert_eq!(c.head.duration(), 151.0);
    }
}
