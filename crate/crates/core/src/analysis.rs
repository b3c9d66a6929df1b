//! Deployment metrics: uptime against the expected cadence, channel
//! statistics, gap lists and the energy report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::power::DrawLog;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("span is empty")]
    EmptySpan,
    #[error("cadence must be > 0")]
    ZeroCadence,
    #[error("no values")]
    NoValues,
    #[error("draw log is empty")]
    EmptyLog,
    #[error("draw intervals are not contiguous at {at_ms} ms")]
    NotContiguous { at_ms: f64 },
}

/// Rounds half-up to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uptime {
    pub expected: u64,
    pub received: u64,
    pub uptime_pct: f64,
}

/// Integer half-up percentage with two decimals.
pub fn percent2(num: u64, den: u64) -> f64 {
    let hundredths = (20_000 * num as u128 + den as u128) / (2 * den as u128);
    hundredths as f64 / 100.0
}

fn slots_hit(cadence_ms: u64, start_ms: u64, expected: u64, received: &[u64]) -> Vec<bool> {
    let mut hit = vec![false; expected as usize];
    for &t in received {
        if t < start_ms {
            continue;
        }
        let slot = (t - start_ms) / cadence_ms;
        if slot < expected {
            hit[slot as usize] = true;
        }
    }
    hit
}

/// Counts distinct cadence slots of `[start, end)` that saw a frame.
pub fn uptime(
    cadence_ms: u64,
    span: (u64, u64),
    received: &[u64],
) -> Result<Uptime, AnalysisError> {
    if cadence_ms == 0 {
        return Err(AnalysisError::ZeroCadence);
    }
    let (start, end) = span;
    if end <= start {
        return Err(AnalysisError::EmptySpan);
    }
    let expected = (end - start) / cadence_ms;
    if expected == 0 {
        return Err(AnalysisError::EmptySpan);
    }
    let got = slots_hit(cadence_ms, start, expected, received)
        .into_iter()
        .filter(|h| *h)
        .count() as u64;
    Ok(Uptime {
        expected,
        received: got,
        uptime_pct: percent2(got, expected),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start_ms: u64,
    pub end_ms: u64,
}

/// Runs of consecutive empty slots, as half-open time ranges.
pub fn gaps(cadence_ms: u64, span: (u64, u64), received: &[u64]) -> Vec<Gap> {
    if cadence_ms == 0 || span.1 <= span.0 {
        return Vec::new();
    }
    let expected = (span.1 - span.0) / cadence_ms;
    let hit = slots_hit(cadence_ms, span.0, expected, received);
    let mut out = Vec::new();
    let mut run: Option<u64> = None;
    for (i, h) in hit.iter().enumerate() {
        match (h, run) {
            (false, None) => run = Some(i as u64),
            (true, Some(s)) => {
                out.push(Gap {
                    start_ms: span.0 + s * cadence_ms,
                    end_ms: span.0 + i as u64 * cadence_ms,
                });
                run = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run {
        out.push(Gap {
            start_ms: span.0 + s * cadence_ms,
            end_ms: span.0 + expected * cadence_ms,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

pub fn channel_stats(values: &[f64]) -> Result<ChannelStats, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::NoValues);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ChannelStats {
        min,
        max,
        avg: round2(mean),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub avg_current_ma: f64,
    pub projected_life_h: Option<f64>,
    pub span_ms: f64,
    pub charge_mah: f64,
}

/// Time-weighted average cell current over the log, including pulses.
pub fn energy_report(log: &DrawLog, capacity_mah: f64) -> Result<EnergyReport, AnalysisError> {
    let (Some(first), Some(last)) = (log.intervals.first(), log.intervals.last()) else {
        return Err(AnalysisError::EmptyLog);
    };
    for w in log.intervals.windows(2) {
        if (w[1].start_ms - w[0].end_ms).abs() > 1e-6 {
            return Err(AnalysisError::NotContiguous { at_ms: w[0].end_ms });
        }
    }
    let span_ms = last.end_ms - first.start_ms;
    if span_ms <= 0.0 {
        return Err(AnalysisError::EmptyLog);
    }
    let charge_mah: f64 = log.intervals.iter().map(|i| i.charge_mah()).sum::<f64>()
        + log.pulses.iter().map(|p| p.charge_mah).sum::<f64>();
    let avg_current_ma = charge_mah * 3_600_000.0 / span_ms;
    let projected_life_h = (avg_current_ma > 0.0).then(|| capacity_mah / avg_current_ma);
    Ok(EnergyReport {
        avg_current_ma,
        projected_life_h,
        span_ms,
        charge_mah,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentReport {
    pub device: String,
    pub location: String,
    pub channel: Option<String>,
    pub uptime_pct: Option<f64>,
    pub expected_frames: u64,
    pub received_frames: u64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub avg: Option<f64>,
    pub gaps: Vec<Gap>,
    pub avg_current_ma: Option<f64>,
    pub projected_life_h: Option<f64>,
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}"))
        .unwrap_or_else(|| "-".into())
}

/// Aligned text table in the column order of the deployment summary.
pub fn render_table(rows: &[DeploymentReport]) -> String {
    let header = [
        "S. No.",
        "Location",
        "Uptime (%)",
        "Min",
        "Max",
        "Avg",
        "Avg current (mA)",
        "Life (h)",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                (i + 1).to_string(),
                r.location.clone(),
                cell(r.uptime_pct, 2),
                cell(r.min, 2),
                cell(r.max, 2),
                cell(r.avg, 2),
                cell(r.avg_current_ma, 3),
                cell(r.projected_life_h, 1),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i == 1 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("{c:>w$}"));
            }
            if i + 1 < cells.len() {
                s.push_str("  ");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line(rule.iter().map(String::as_str).collect()));
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::{ChargePulse, DrawInterval};

    const DAY: u64 = 86_400_000;

    #[test]
    fn table_uptimes() {
        let cad = 900_000;
        let all: Vec<u64> = (0..1440).map(|i| i * cad + 10_000).collect();
        let up = uptime(cad, (0, 15 * DAY), &all).unwrap();
        assert_eq!(
            (up.expected, up.received, up.uptime_pct),
            (1440, 1440, 100.0)
        );
        assert_eq!(
            uptime(cad, (0, 15 * DAY), &all[..1438]).unwrap().uptime_pct,
            99.86
        );
        assert_eq!(
            uptime(cad, (0, 15 * DAY), &all[..1415]).unwrap().uptime_pct,
            98.26
        );
        assert_eq!(uptime(cad, (0, 0), &all), Err(AnalysisError::EmptySpan));
    }

    #[test]
    fn duplicate_slot_counts_once() {
        let up = uptime(1000, (0, 10_000), &[10, 20, 30, 1500]).unwrap();
        assert_eq!(up.received, 2);
        assert_eq!(up.uptime_pct, 20.0);
    }

    #[test]
    fn stats_examples() {
        let s = channel_stats(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((s.min, s.max, s.avg), (5.0, 5.0, 5.0));
        assert_eq!(channel_stats(&[]), Err(AnalysisError::NoValues));
        assert_eq!(round2(72.925), 72.93);
        assert_eq!(round2(1.0 / 3.0), 0.33);
    }

    #[test]
    fn gap_runs() {
        let g = gaps(10, (0, 100), &[0, 10, 40, 50, 90]);
        assert_eq!(
            g,
            vec![
                Gap {
                    start_ms: 20,
                    end_ms: 40
                },
                Gap {
                    start_ms: 60,
                    end_ms: 90
                }
            ]
        );
        assert_eq!(
            gaps(10, (0, 30), &[]),
            vec![Gap {
                start_ms: 0,
                end_ms: 30
            }]
        );
    }

    fn log(parts: &[(f64, f64)]) -> DrawLog {
        let mut l = DrawLog::default();
        let mut t = 0.0;
        for (dur, ma) in parts {
            l.intervals.push(DrawInterval {
                start_ms: t,
                end_ms: t + dur,
                current_ma: *ma,
            });
            t += dur;
        }
        l
    }

    #[test]
    fn duty_cycle_average() {
        let r = energy_report(&log(&[(25_000.0, 60.0), (240_000.0, 7.0)]), 3300.0).unwrap();
        assert!((r.avg_current_ma - 12.0).abs() < 1e-9);
        assert!((r.projected_life_h.unwrap() - 275.0).abs() < 1e-6);
        let single = energy_report(&log(&[(5000.0, 10.0)]), 100.0).unwrap();
        assert!((single.avg_current_ma - 10.0).abs() < 1e-12);
        assert_eq!(
            energy_report(&DrawLog::default(), 1.0),
            Err(AnalysisError::EmptyLog)
        );
    }

    #[test]
    fn pulses_count_toward_average() {
        let mut l = log(&[(3_600_000.0, 1.0)]);
        l.pulses.push(ChargePulse {
            at_ms: 10,
            consumer: "radio".into(),
            charge_mah: 1.0,
        });
        let r = energy_report(&l, 10.0).unwrap();
        assert!((r.avg_current_ma - 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let row = DeploymentReport {
            device: "cw".into(),
            location: "Central Workshop".into(),
            channel: Some("pm25_ugm3".into()),
            uptime_pct: Some(98.26),
            expected_frames: 1440,
            received_frames: 1415,
            min: Some(2.0),
            max: Some(297.0),
            avg: Some(72.92),
            gaps: vec![],
            avg_current_ma: None,
            projected_life_h: None,
        };
        let t = render_table(&[row]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("S. No.  Location"));
        assert!(lines[2].contains("Central Workshop       98.26"));
        assert!(lines[2].contains("297.00"));
        assert_eq!(lines[0].len(), lines[2].len());
    }
}
