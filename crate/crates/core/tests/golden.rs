//! Golden-file regressions. Run with `PREFROBUST_BLESS=1` to rewrite the
//! files after an intended change.

use std::fs;
use std::path::PathBuf;

use prefrobust::bench::{self, BenchConfig};
use prefrobust::noise::NoiseSpec;
use prefrobust::rmab::{self, parse_reward, simulate, RmabInstance};
use prefrobust::trainer::Method;

fn desk() -> RmabInstance {
    RmabInstance::desk(rmab::DESK_ARMS, rmab::DESK_BUDGET, rmab::DESK_HORIZON, rmab::DEFAULT_DISCOUNT, rmab::DESK_ENV_SEED)
        .unwrap()
}

fn check(name: &str, actual: &[u8]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("PREFROBUST_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from the recorded golden file");
}

#[test]
fn desk_trajectory_seed_7() {
    let env = desk();
    let program = parse_reward("s", &env.known_features()).unwrap();
    let sim = simulate(&env, &program, 7).unwrap();
    let traj = &sim.trajectories[0];
    assert_eq!(traj.horizon(), 20);
    assert!(traj.actions.iter().all(|a| a.iter().map(|&x| usize::from(x)).sum::<usize>() == 5));
    let mut csv = Vec::new();
    traj.write_csv(&mut csv).unwrap();
    check("desk_trajectory_seed7.csv", &csv);
}

#[test]
fn desk_report_dpo_pro_under_flip_noise() {
    let config = BenchConfig::default();
    let prepared = bench::prepare(&config, &desk(), 0).unwrap();
    let report = bench::run_cell(&config, &prepared, Method::DpoPro, &NoiseSpec::flip(0.3).unwrap()).unwrap();
    assert_eq!(report.per_task.len(), 8);
    assert_eq!(report.failures, 0);
    let mut json = Vec::new();
    report.write_json(&mut json).unwrap();
    check("desk_report_dpo_pro_flip0.3_seed0.json", &json);
}
