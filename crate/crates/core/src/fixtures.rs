//! Seeded generation of golden fixtures: PM2.5 traces, per-slot loss
//! schedules and solar charge profiles.
//!
//! Every generated fixture is re-checked against its target with the
//! analysis functions before any file is written.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, percent2, round2};
use crate::power::SolarProfile;
use crate::simcore::{RandomStream, SimTime};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
    #[error("fixture {name}: infeasible target: {reason}")]
    Infeasible { name: String, reason: String },
    #[error("fixture {name}: {field} is {got}, target {want} (tolerance {tolerance})")]
    Verification {
        name: String,
        field: &'static str,
        got: f64,
        want: f64,
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Deployment,
    Solar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureParams {
    pub slots: u64,
    pub slot_ms: u64,
    /// How long each slot's value is held before the next ramp starts.
    pub plateau_ms: u64,
    /// Slot that carries the target maximum; random when absent.
    pub max_slot: Option<u64>,
    /// Geometric spread of fill values around the target mean.
    pub spread: f64,
    pub trace_file: Option<String>,
    pub loss_file: Option<String>,
    pub days: u64,
    pub step_ms: u64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
    pub solar_file: Option<String>,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            slots: 1440,
            slot_ms: 900_000,
            plateau_ms: 120_000,
            max_slot: None,
            spread: 0.45,
            trace_file: None,
            loss_file: None,
            days: 15,
            step_ms: 3_600_000,
            sunrise_h: 6.0,
            sunset_h: 18.0,
            solar_file: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureTarget {
    pub uptime_pct: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub avg: Option<f64>,
    pub daily_charge_mah: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub name: String,
    pub kind: FixtureKind,
    #[serde(default)]
    pub params: FixtureParams,
    #[serde(default)]
    pub target: FixtureTarget,
    #[serde(default)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fixtures: Vec<FixtureSpec>,
}

impl FixtureManifest {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |message: String| FixtureError::Manifest {
            path: path.display().to_string(),
            message,
        };
        let m: FixtureManifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if m.schema_version != 1 {
            return Err(bad(format!(
                "unsupported schema_version {}",
                m.schema_version
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &m.fixtures {
            if !names.insert(&f.name) {
                return Err(bad(format!("duplicate fixture name `{}`", f.name)));
            }
        }
        Ok(m)
    }
}

/// Generated deployment fixture, before serialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentFixture {
    /// One integer value per slot, including dropped slots.
    pub values: Vec<u32>,
    /// Sorted slot indices whose uplink is lost.
    pub dropped: Vec<u64>,
}

impl DeploymentFixture {
    pub fn received_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.dropped.binary_search(&(*i as u64)).is_err())
            .map(|(_, v)| *v as f64)
            .collect()
    }

    /// `time_ms,value` rows: each value is held for the plateau, then ramps
    /// linearly to the next slot's value.
    pub fn trace_csv(&self, p: &FixtureParams) -> String {
        let mut s = String::from("time_ms,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let t = i as u64 * p.slot_ms;
            s.push_str(&format!("{t},{v}\n{},{v}\n", t + p.plateau_ms));
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("slot\n");
        for d in &self.dropped {
            s.push_str(&format!("{d}\n"));
        }
        s
    }
}

fn infeasible(name: &str, reason: impl Into<String>) -> FixtureError {
    FixtureError::Infeasible {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn check(
    name: &str,
    field: &'static str,
    got: f64,
    want: Option<f64>,
    tol: f64,
) -> Result<(), FixtureError> {
    match want {
        Some(w) if (got - w).abs() > tol + 1e-9 => Err(FixtureError::Verification {
            name: name.to_string(),
            field,
            got,
            want: w,
            tolerance: tol,
        }),
        _ => Ok(()),
    }
}

/// Smallest received count whose 2-decimal uptime equals the target.
pub fn received_for_uptime(slots: u64, uptime_pct: f64) -> Option<u64> {
    (0..=slots).find(|r| (percent2(*r, slots) - uptime_pct).abs() < 1e-9)
}

pub fn generate_deployment(
    spec: &FixtureSpec,
    seed: u64,
) -> Result<DeploymentFixture, FixtureError> {
    let name = spec.name.as_str();
    let p = &spec.params;
    let t = &spec.target;
    if p.slots == 0 || p.slot_ms == 0 {
        return Err(infeasible(name, "slots and slot_ms must be > 0"));
    }
    if p.plateau_ms >= p.slot_ms {
        return Err(infeasible(name, "plateau_ms must be shorter than slot_ms"));
    }
    let uptime = t.uptime_pct.unwrap_or(100.0);
    if !(0.0..=100.0).contains(&uptime) {
        return Err(infeasible(name, format!("uptime {uptime}% outside 0-100")));
    }
    let received = received_for_uptime(p.slots, uptime).ok_or_else(|| {
        infeasible(
            name,
            format!("no count of {} slots rounds to {uptime}%", p.slots),
        )
    })?;
    let lo = t.min.unwrap_or(0.0);
    let hi = t.max.unwrap_or(1000.0);
    let avg = t.avg.unwrap_or((lo + hi) / 2.0);
    if lo < 0.0 || lo.fract() != 0.0 || hi.fract() != 0.0 || hi > 6553.0 {
        return Err(infeasible(name, "min and max must be integers in 0-6553"));
    }
    if lo > hi || avg < lo || avg > hi {
        return Err(infeasible(
            name,
            format!("needs min <= avg <= max, got {lo} / {avg} / {hi}"),
        ));
    }
    if received < 2 && lo != hi {
        return Err(infeasible(
            name,
            "distinct min and max need at least two received slots",
        ));
    }
    let (lo, hi) = (lo as i64, hi as i64);
    let r = received as i64;
    let sum_range = if received >= 2 {
        (lo + hi + (r - 2) * lo, lo + hi + (r - 2) * hi)
    } else {
        (lo * r, lo * r)
    };
    let centre = (avg * r as f64).round() as i64;
    let sum = [0, -1, 1, -2, 2]
        .into_iter()
        .map(|d| centre + d)
        .filter(|s| (sum_range.0..=sum_range.1).contains(s))
        .find(|s| r > 0 && round2(*s as f64 / r as f64) == round2(avg))
        .or(if r == 0 { Some(0) } else { None })
        .ok_or_else(|| {
            infeasible(
                name,
                format!("no integer sum over {r} values averages {avg}"),
            )
        })?;

    let mut rng = RandomStream::labelled(seed, &format!("fixture/{name}"));
    let max_slot = match p.max_slot {
        Some(s) if s < p.slots => s,
        Some(s) => {
            return Err(infeasible(
                name,
                format!("max_slot {s} beyond {} slots", p.slots),
            ))
        }
        None => rng.range_inclusive(0, p.slots as i64 - 1) as u64,
    };
    let min_slot = loop {
        let s = rng.range_inclusive(0, p.slots as i64 - 1) as u64;
        if s != max_slot || p.slots == 1 {
            break s;
        }
    };

    let mut dropped = Vec::new();
    let mut pool: Vec<u64> = (0..p.slots)
        .filter(|s| *s != max_slot && *s != min_slot)
        .collect();
    for _ in 0..(p.slots - received) {
        if pool.is_empty() {
            return Err(infeasible(name, "not enough slots to drop"));
        }
        let k = rng.range_inclusive(0, pool.len() as i64 - 1) as usize;
        dropped.push(pool.swap_remove(k));
    }
    dropped.sort_unstable();

    let mut values: Vec<i64> = (0..p.slots)
        .map(|_| {
            let v = avg * rng.gaussian(0.0, p.spread).exp();
            (v.round() as i64).clamp(lo, hi)
        })
        .collect();
    values[max_slot as usize] = hi;
    values[min_slot as usize] = lo;
    let free: Vec<usize> = (0..p.slots as usize)
        .filter(|i| *i as u64 != max_slot && *i as u64 != min_slot)
        .filter(|i| dropped.binary_search(&(*i as u64)).is_err())
        .collect();
    let kept = |vals: &[i64]| -> i64 {
        (0..vals.len())
            .filter(|i| dropped.binary_search(&(*i as u64)).is_err())
            .map(|i| vals[i])
            .sum()
    };
    let mut diff = sum - kept(&values);
    while diff != 0 {
        let i = free[rng.range_inclusive(0, free.len() as i64 - 1) as usize];
        let step = diff.signum();
        let next = values[i] + step;
        if (lo..=hi).contains(&next) {
            values[i] = next;
            diff -= step;
        }
    }
    let fixture = DeploymentFixture {
        values: values.into_iter().map(|v| v as u32).collect(),
        dropped,
    };
    verify_deployment(spec, &fixture)?;
    Ok(fixture)
}

/// Runs the analysis functions over the fixture as the pipeline would see it.
pub fn verify_deployment(spec: &FixtureSpec, f: &DeploymentFixture) -> Result<(), FixtureError> {
    let p = &spec.params;
    let times: Vec<u64> = (0..p.slots)
        .filter(|s| f.dropped.binary_search(s).is_err())
        .map(|s| s * p.slot_ms)
        .collect();
    let up = analysis::uptime(p.slot_ms, (0, p.slots * p.slot_ms), &times)
        .map_err(|e| infeasible(&spec.name, e.to_string()))?;
    let tol = spec.tolerance;
    check(
        &spec.name,
        "uptime_pct",
        up.uptime_pct,
        spec.target.uptime_pct,
        tol,
    )?;
    if let Ok(s) = analysis::channel_stats(&f.received_values()) {
        check(&spec.name, "min", s.min, spec.target.min, tol)?;
        check(&spec.name, "max", s.max, spec.target.max, tol)?;
        check(&spec.name, "avg", s.avg, spec.target.avg, tol)?;
    }
    Ok(())
}

/// Half-sine daylight profile with a seeded per-day cloud factor, scaled so
/// the mean daily charge hits the target.
pub fn generate_solar(spec: &FixtureSpec, seed: u64) -> Result<SolarProfile, FixtureError> {
    let name = spec.name.as_str();
    let p = &spec.params;
    let daily = spec.target.daily_charge_mah.unwrap_or(0.0);
    if !(daily >= 0.0) || p.days == 0 || p.step_ms == 0 || 86_400_000 % p.step_ms != 0 {
        return Err(infeasible(
            name,
            "needs days > 0, a step dividing one day and a daily charge >= 0",
        ));
    }
    if !(0.0 <= p.sunrise_h && p.sunrise_h < p.sunset_h && p.sunset_h <= 24.0) {
        return Err(infeasible(name, "needs 0 <= sunrise_h < sunset_h <= 24"));
    }
    let mut rng = RandomStream::labelled(seed, &format!("fixture/{name}"));
    let steps = 86_400_000 / p.step_ms;
    let step_h = p.step_ms as f64 / 3_600_000.0;
    let mut shape = Vec::new();
    for _ in 0..p.days {
        let cloud = 0.6 + 0.4 * rng.uniform();
        for k in 0..steps {
            let mid_h = (k as f64 + 0.5) * step_h;
            let x = (mid_h - p.sunrise_h) / (p.sunset_h - p.sunrise_h);
            shape.push(if (0.0..=1.0).contains(&x) {
                cloud * (PI * x).sin()
            } else {
                0.0
            });
        }
    }
    let shape_daily: f64 = shape.iter().sum::<f64>() * step_h / p.days as f64;
    if shape_daily <= 0.0 && daily > 0.0 {
        return Err(infeasible(name, "daylight window holds no step midpoints"));
    }
    let scale = if daily > 0.0 {
        daily / shape_daily
    } else {
        0.0
    };
    let samples: Vec<(SimTime, f64)> = shape
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                SimTime(i as u64 * p.step_ms),
                (s * scale * 100.0).round() / 100.0,
            )
        })
        .collect();
    let got = samples.iter().map(|s| s.1).sum::<f64>() * step_h / p.days as f64;
    check(
        name,
        "daily_charge_mah",
        got,
        spec.target.daily_charge_mah,
        spec.tolerance,
    )?;
    SolarProfile::new(samples).map_err(|e| infeasible(name, e.to_string()))
}

pub fn solar_csv(profile: &SolarProfile) -> String {
    let mut s = String::from("time_ms,current_ma\n");
    for (t, c) in profile.samples() {
        s.push_str(&format!("{},{c}\n", t.0));
    }
    s
}

fn write_file(path: &Path, body: &str) -> Result<(), FixtureError> {
    let io = |source| FixtureError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(body.as_bytes()).map_err(io)
}

fn output(spec: &FixtureSpec, base: &Path, file: &Option<String>, suffix: &str) -> PathBuf {
    base.join(
        file.clone()
            .unwrap_or_else(|| format!("fixtures/{}_{suffix}.csv", spec.name)),
    )
}

/// Generates every fixture of the manifest, writing files relative to
/// `base`. Nothing is written unless all fixtures verify.
pub fn generate_all(manifest: &FixtureManifest, base: &Path) -> Result<Vec<PathBuf>, FixtureError> {
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    for spec in &manifest.fixtures {
        match spec.kind {
            FixtureKind::Deployment => {
                let f = generate_deployment(spec, manifest.seed)?;
                files.push((
                    output(spec, base, &spec.params.trace_file, "trace"),
                    f.trace_csv(&spec.params),
                ));
                files.push((
                    output(spec, base, &spec.params.loss_file, "loss"),
                    f.loss_csv(),
                ));
            }
            FixtureKind::Solar => {
                let s = generate_solar(spec, manifest.seed)?;
                files.push((
                    output(spec, base, &spec.params.solar_file, "solar"),
                    solar_csv(&s),
                ));
            }
        }
    }
    for (path, body) in &files {
        write_file(path, body)?;
    }
    Ok(files.into_iter().map(|f| f.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deployment(uptime: f64, min: f64, max: f64, avg: f64) -> FixtureSpec {
        FixtureSpec {
            name: "probe".into(),
            kind: FixtureKind::Deployment,
            params: FixtureParams::default(),
            target: FixtureTarget {
                uptime_pct: Some(uptime),
                min: Some(min),
                max: Some(max),
                avg: Some(avg),
                daily_charge_mah: None,
            },
            tolerance: 0.0,
        }
    }

    #[test]
    fn received_counts_for_table_rows() {
        assert_eq!(received_for_uptime(1440, 99.86), Some(1438));
        assert_eq!(received_for_uptime(1440, 98.26), Some(1415));
        assert_eq!(received_for_uptime(1440, 100.0), Some(1440));
    }

    #[test]
    fn workshop_row_hits_every_target() {
        let f = generate_deployment(&deployment(98.26, 2.0, 297.0, 72.92), 7).unwrap();
        assert_eq!(f.dropped.len(), 25);
        let v = f.received_values();
        assert_eq!(v.len(), 1415);
        assert_eq!(v.iter().sum::<f64>(), 103_182.0);
        let s = analysis::channel_stats(&v).unwrap();
        assert_eq!((s.min, s.max, s.avg), (2.0, 297.0, 72.92));
    }

    #[test]
    fn uptime_above_hundred_is_infeasible() {
        let err = generate_deployment(&deployment(100.5, 2.0, 10.0, 5.0), 1).unwrap_err();
        assert!(matches!(err, FixtureError::Infeasible { .. }), "{err}");
    }

    #[test]
    fn mean_outside_bounds_is_infeasible() {
        let err = generate_deployment(&deployment(99.0, 2.0, 10.0, 50.0), 1).unwrap_err();
        assert!(matches!(err, FixtureError::Infeasible { .. }));
    }

    #[test]
    fn same_seed_same_fixture() {
        let spec = deployment(99.86, 2.0, 1036.0, 81.25);
        assert_eq!(
            generate_deployment(&spec, 3).unwrap(),
            generate_deployment(&spec, 3).unwrap()
        );
        assert_ne!(
            generate_deployment(&spec, 3).unwrap(),
            generate_deployment(&spec, 4).unwrap()
        );
    }

    #[test]
    fn pinned_max_slot_carries_spike() {
        let mut spec = deployment(99.86, 2.0, 1036.0, 81.25);
        spec.params.max_slot = Some(656);
        let f = generate_deployment(&spec, 11).unwrap();
        assert_eq!(f.values[656], 1036);
        assert!(!f.dropped.contains(&656));
    }

    #[test]
    fn solar_profile_meets_daily_charge() {
        let spec = FixtureSpec {
            name: "sun".into(),
            kind: FixtureKind::Solar,
            params: FixtureParams::default(),
            target: FixtureTarget {
                daily_charge_mah: Some(600.0),
                ..Default::default()
            },
            tolerance: 0.5,
        };
        let s = generate_solar(&spec, 5).unwrap();
        assert_eq!(s.samples().len(), 15 * 24);
        assert_eq!(s.available_at(0.0), 0.0);
    }

    #[test]
    fn empty_manifest_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let m = FixtureManifest {
            schema_version: 1,
            seed: 0,
            fixtures: vec![],
        };
        assert!(generate_all(&m, dir.path()).unwrap().is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
