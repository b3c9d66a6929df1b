use std::fs;
use std::path::{Path, PathBuf};

use aqlog_core::firmware::first_illegal;
use aqlog_core::fixtures::{self, FixtureManifest};
use aqlog_core::scenario::{self, ConfigError, Scenario};

fn campus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/campus15d")
}

/// Copies the shipped scenario so tests can edit it.
fn campus_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(
        campus_dir().join("scenario.toml"),
        dir.path().join("scenario.toml"),
    )
    .unwrap();
    fs::create_dir(dir.path().join("fixtures")).unwrap();
    for e in fs::read_dir(campus_dir().join("fixtures")).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, dir.path().join("fixtures").join(p.file_name().unwrap())).unwrap();
    }
    dir
}

fn edited(dir: &Path, from: &str, to: &str) -> Result<Scenario, ConfigError> {
    let path = dir.join("scenario.toml");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains(from), "`{from}` not in scenario");
    fs::write(&path, text.replacen(from, to, 1)).unwrap();
    Scenario::load(&path)
}

#[test]
fn committed_fixtures_regenerate_byte_identical() {
    let manifest = FixtureManifest::load(&campus_dir().join("fixtures.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let files = fixtures::generate_all(&manifest, out.path()).unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let rel = f.strip_prefix(out.path()).unwrap();
        let committed = fs::read(campus_dir().join(rel)).unwrap();
        assert!(
            fs::read(&f).unwrap() == committed,
            "{} differs from the committed copy",
            rel.display()
        );
    }
}

#[test]
fn loss_schedules_match_uptime_targets() {
    for (name, drops) in [("central_workshop", 25), ("karakoram", 2)] {
        let slots =
            scenario::read_slot_list(&campus_dir().join(format!("fixtures/{name}_loss.csv")))
                .unwrap();
        assert_eq!(slots.len(), drops, "{name}");
        assert!(slots.iter().all(|s| *s < 1440));
    }
}

#[test]
fn shipped_scenario_validates() {
    let sc = Scenario::load(&campus_dir().join("scenario.toml")).unwrap();
    assert_eq!(sc.devices.len(), 2);
    assert_eq!(sc.gateways.len(), 1);
    assert_eq!(sc.duration_ms, 15 * 24 * 3_600_000);
    assert!(sc.devices.iter().all(|d| d.profile.cycle_ms() == 900_000));
}

#[test]
fn out_of_range_sf_cites_the_range_and_line() {
    let dir = campus_copy();
    let err = edited(dir.path(), "sf = 9", "sf = 13").unwrap_err();
    let d = &err.diagnostics()[0];
    assert_eq!(d.field, "devices.lorawan.sf");
    assert!(d.message.contains("7-12"), "{}", d.message);
    let text = fs::read_to_string(dir.path().join("scenario.toml")).unwrap();
    let line = text.lines().position(|l| l == "sf = 13").unwrap() + 1;
    assert_eq!(d.line, line);
    assert!(err.to_string().starts_with(&format!(
        "{}:{line}: devices.lorawan.sf:",
        dir.path().join("scenario.toml").display()
    )));
}

#[test]
fn duplicate_device_name_is_reported() {
    let dir = campus_copy();
    let err = edited(
        dir.path(),
        "name = \"karakoram\"",
        "name = \"central_workshop\"",
    )
    .unwrap_err();
    assert!(err
        .diagnostics()
        .iter()
        .any(|d| d.field == "devices.name" && d.message.contains("duplicate")));
}

#[test]
fn missing_trace_file_is_a_config_error() {
    let dir = campus_copy();
    fs::remove_file(dir.path().join("fixtures/karakoram_pm25.csv")).unwrap();
    let err = Scenario::load(&dir.path().join("scenario.toml")).unwrap_err();
    assert!(err
        .diagnostics()
        .iter()
        .any(|d| d.message.contains("file not found")));
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let dir = campus_copy();
    let err = edited(dir.path(), "seed = ", "sed = ").unwrap_err();
    assert_eq!(err.diagnostics()[0].line, 4);
}

#[test]
fn config_hash_tracks_every_byte() {
    let dir = campus_copy();
    let path = dir.path().join("scenario.toml");
    let a = Scenario::load(&path).unwrap().config_sha256;
    let b = Scenario::load(&path).unwrap().config_sha256;
    assert_eq!(a, b);
    let c = edited(dir.path(), "# Two", "#  Two").unwrap().config_sha256;
    assert_ne!(a, c);
}

#[test]
fn zero_duration_gives_empty_reports() {
    let mut sc = Scenario::load(&campus_dir().join("scenario.toml")).unwrap();
    sc.duration_ms = 0;
    let out = tempfile::tempdir().unwrap();
    let run = scenario::run_scenario(&sc, out.path()).unwrap();
    assert_eq!(run.reports.len(), 2);
    for r in &run.reports {
        assert_eq!((r.uptime_pct, r.min, r.avg_current_ma), (None, None, None));
        assert_eq!(r.expected_frames, 0);
    }
}

#[test]
fn report_from_dir_matches_the_run() {
    let sc = Scenario::load(&campus_dir().join("scenario.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = scenario::run_scenario(&sc, out.path()).unwrap();
    assert_eq!(scenario::report_from_dir(out.path()).unwrap(), run.reports);
    for dev in &run.world.devices {
        assert_eq!(first_illegal(dev.transitions()), None, "{}", dev.name());
    }
    let cw = &run.reports[0];
    assert_eq!((cw.expected_frames, cw.received_frames), (1440, 1415));
    assert_eq!(
        cw.gaps
            .iter()
            .map(|g| (g.end_ms - g.start_ms) / 900_000)
            .sum::<u64>(),
        25
    );
}

#[test]
fn seeds_change_noise_but_not_the_pipeline() {
    let mut sc = Scenario::load(&campus_dir().join("scenario.toml")).unwrap();
    sc.duration_ms = 2 * 86_400_000;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    scenario::run_scenario(&sc, a.path()).unwrap();
    sc.seed += 1;
    scenario::run_scenario(&sc, b.path()).unwrap();
    let rows = |d: &Path| fs::read_to_string(d.join("server_records.csv")).unwrap();
    assert_ne!(rows(a.path()), rows(b.path()));
    let count = |d: &Path| rows(d).lines().count();
    assert_eq!(count(a.path()), count(b.path()));
}
