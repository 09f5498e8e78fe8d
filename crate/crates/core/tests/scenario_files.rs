use std::path::PathBuf;

use hetnet::handover::Direction;
use hetnet::model::SimTime;
use hetnet::reproduce::range_exit_testbed;
use hetnet::scenario::{parse_scenario, Scenario};
use hetnet::sim::{run_scenario, SimOptions};

fn bundled() -> Vec<(String, Scenario)> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios"].iter().collect();
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    assert!(!paths.is_empty());
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let s = parse_scenario(&text).unwrap_or_else(|d| panic!("{}: {d}", p.display()));
            (p.file_name().unwrap().to_string_lossy().into_owned(), s)
        })
        .collect()
}

#[test]
fn bundled_scenarios_round_trip() {
    for (name, s) in bundled() {
        let again = parse_scenario(&s.to_toml()).unwrap_or_else(|d| panic!("{name}: {d}"));
        assert_eq!(again, s, "{name}");
    }
}

#[test]
fn bundled_scenarios_run_clean() {
    for (name, s) in bundled() {
        let r = run_scenario(&s, SimOptions::default()).unwrap();
        assert!(r.violations.is_empty(), "{name}: {:?}", r.violations);
        assert!(r.flows.iter().all(|f| f.metrics.loss.sent > 0), "{name}");
    }
}

#[test]
fn range_exit_gives_one_fast_handover() {
    let r = run_scenario(&range_exit_testbed(1), SimOptions::default()).unwrap();
    let mine: Vec<_> = r.handovers.iter().filter(|h| h.device == "client1").collect();
    assert_eq!(mine.len(), 1);
    let t = &mine[0].timings;
    assert_eq!(t.direction, Direction::BluetoothToWiFi);
    assert!(!t.aborted());
    assert!(t.delay() < SimTime::from_millis(150));
}

#[test]
fn voice_walkout_moves_the_call_to_wifi() {
    let (_, s) = bundled().into_iter().find(|(n, _)| n == "voice_walkout.toml").unwrap();
    let r = run_scenario(&s, SimOptions::default()).unwrap();
    for dev in ["client1", "client2"] {
        let h: Vec<_> = r.handovers.iter().filter(|h| h.device == dev && !h.timings.aborted()).collect();
        assert!(h.iter().any(|h| h.timings.direction == Direction::BluetoothToWiFi), "{dev}");
    }
    assert_eq!(r.handovers.iter().map(|h| h.timings.lost_packets).sum::<u64>(), 0);
}
