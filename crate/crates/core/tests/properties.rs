use aqlog_core::analysis::{channel_stats, energy_report, uptime};
use aqlog_core::lorawan::{adr_step, airtime_ms, codec, AdrState, RadioParams, RequiredSnr};
use aqlog_core::power::{divider_code, DrawInterval, DrawLog, PowerConfig, PowerSystem, Rail};
use aqlog_core::sensors::Channel;
use aqlog_core::simcore::{EntityId, Event, RandomStream, Scheduler, SimTime};
use proptest::prelude::*;

fn converged(sf: u8, p: i8, snr: f64) -> (u8, i8) {
    let radio = RadioParams::new(sf, p).unwrap();
    let mut st = AdrState::default();
    for _ in 0..20 {
        st.push(snr);
    }
    adr_step(&mut st, &radio, &RequiredSnr::default())
        .map_or((sf, p), |c| (c.spreading_factor, c.tx_power_dbm))
}

proptest! {
    #[test]
    fn adr_data_rate_monotone_in_margin(
        sf in 7u8..=12,
        p in prop::sample::select(vec![2i8, 4, 6, 8, 10, 12, 14]),
        a in -30.0f64..30.0,
        b in -30.0f64..30.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (sf_lo, _) = converged(sf, p, lo);
        let (sf_hi, _) = converged(sf, p, hi);
        prop_assert!(sf_hi <= sf_lo);
    }

    #[test]
    fn adr_never_leaves_valid_range(sf in 7u8..=12, p in 2i8..=14, snr in -40.0f64..40.0) {
        let (sf2, p2) = converged(sf, p, snr);
        prop_assert!((7..=12).contains(&sf2));
        prop_assert!((2..=14).contains(&p2));
        prop_assert!(sf2 <= sf);
    }

    #[test]
    fn airtime_grows_with_sf_and_length(sf in 7u8..12, len in 1usize..51) {
        let here = RadioParams::new(sf, 14).unwrap();
        let up = RadioParams::new(sf + 1, 14).unwrap();
        prop_assert!(airtime_ms(&up, len) > airtime_ms(&here, len));
        prop_assert!(airtime_ms(&here, len + 1) >= airtime_ms(&here, len));
    }

    #[test]
    fn stats_ignore_order(mut values in prop::collection::vec(0u32..5000, 1..200), seed in any::<u64>()) {
        let as_f: Vec<f64> = values.iter().map(|v| *v as f64).collect();
        let before = channel_stats(&as_f).unwrap();
        let mut rng = RandomStream::new(seed, 0);
        for i in (1..values.len()).rev() {
            let j = rng.range_inclusive(0, i as i64) as usize;
            values.swap(i, j);
        }
        let shuffled: Vec<f64> = values.iter().map(|v| *v as f64).collect();
        let after = channel_stats(&shuffled).unwrap();
        prop_assert_eq!(before, after);
        prop_assert!(before.min <= before.avg && before.avg <= before.max);
    }

    #[test]
    fn energy_report_invariant_to_splits(
        segs in prop::collection::vec((1u32..100_000, 0.0f64..100.0), 1..20),
        cut in 0.01f64..0.99,
        which in any::<prop::sample::Index>(),
    ) {
        let mut t = 0.0;
        let mut log = DrawLog::default();
        for (d, ma) in &segs {
            log.intervals.push(DrawInterval { start_ms: t, end_ms: t + *d as f64, current_ma: *ma });
            t += *d as f64;
        }
        let whole = energy_report(&log, 3300.0).unwrap();
        let k = which.index(log.intervals.len());
        let iv = log.intervals[k];
        let mid = iv.start_ms + (iv.end_ms - iv.start_ms) * cut;
        log.intervals.splice(k..=k, [
            DrawInterval { end_ms: mid, ..iv },
            DrawInterval { start_ms: mid, ..iv },
        ]);
        let split = energy_report(&log, 3300.0).unwrap();
        prop_assert!((whole.avg_current_ma - split.avg_current_ma).abs() <= 1e-9 * whole.avg_current_ma.max(1.0));
    }

    #[test]
    fn divider_code_monotone(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(divider_code(lo, 0.5, 12, 3.3) <= divider_code(hi, 0.5, 12, 3.3));
        prop_assert!(divider_code(hi, 0.5, 12, 3.3) <= 4095);
    }

    #[test]
    fn codec_round_trips_centi_units(
        pm in 0u32..6553, co2 in 0u32..40000, temp in -4000i32..12500, rh in 0u32..10000,
        missing in prop::array::uniform4(any::<bool>()),
    ) {
        let channels = Channel::ALL.to_vec();
        let vals = [pm as f64 / 10.0, co2 as f64, temp as f64 / 100.0, rh as f64 / 100.0];
        let readings: Vec<(Channel, Option<f64>)> = channels
            .iter()
            .zip(vals)
            .zip(missing)
            .map(|((c, v), m)| (*c, (!m).then_some(v)))
            .collect();
        let bytes = codec::encode(&channels, &readings);
        prop_assert_eq!(bytes.len(), codec::payload_len(&channels));
        let back = codec::decode(&channels, &bytes).unwrap();
        for ((c, want), (c2, got)) in readings.iter().zip(&back) {
            prop_assert_eq!(c, c2);
            match (want, got) {
                (None, None) => {}
                (Some(w), Some(g)) => prop_assert!((w - g).abs() < 1e-9, "{} vs {}", w, g),
                other => prop_assert!(false, "missing flag lost: {:?}", other),
            }
        }
    }

    #[test]
    fn charge_is_conserved(
        steps in prop::collection::vec((1u64..600_000, 0.0f64..150.0, 0usize..3, prop::option::of((1.0f64..120.0, 1.0f64..2000.0))), 1..40),
        soc in 0.05f64..1.0,
    ) {
        let cfg = PowerConfig { initial_soc: soc, ..PowerConfig::default() };
        let mut ps = PowerSystem::new(cfg).unwrap();
        let rails = [Rail::Battery, Rail::Rail5v, Rail::Rail3v3];
        let mut t = 0;
        for (dt, ma, rail, pulse) in steps {
            ps.set_draw(SimTime(t), "load", rails[rail], ma).unwrap();
            if let Some((pma, dur)) = pulse {
                ps.consume_pulse(SimTime(t), "pulse", rails[rail], pma, dur).unwrap();
            }
            t += dt;
            ps.integrate(SimTime(t)).unwrap();
            prop_assert!(ps.conservation_error_mah().abs() <= 1e-9);
            prop_assert!(ps.charge_mah() >= 0.0);
        }
    }

    #[test]
    fn uptime_bounded_and_dedup_safe(
        slots in prop::collection::vec(0u64..96, 0..200),
    ) {
        let cadence = 900_000;
        let times: Vec<u64> = slots.iter().map(|s| s * cadence + 1000).collect();
        let once = uptime(cadence, (0, 96 * cadence), &times).unwrap();
        let mut doubled = times.clone();
        doubled.extend(times.iter().map(|t| t + 5000));
        let twice = uptime(cadence, (0, 96 * cadence), &doubled).unwrap();
        prop_assert!((0.0..=100.0).contains(&once.uptime_pct));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn scheduler_fires_in_time_then_insertion_order(times in prop::collection::vec(0u64..1000, 0..100)) {
        let mut s: Scheduler<usize> = Scheduler::new();
        for (i, t) in times.iter().enumerate() {
            s.schedule(Event::new(SimTime(*t), EntityId(0), i)).unwrap();
        }
        let mut fired = Vec::new();
        s.run_until(SimTime(1000), |_, e| fired.push((e.fire_at, e.kind)));
        let mut want: Vec<(SimTime, usize)> = times.iter().enumerate().map(|(i, t)| (SimTime(*t), i)).collect();
        want.sort();
        prop_assert_eq!(fired, want);
    }

    #[test]
    fn labelled_streams_replay(seed in any::<u64>(), label in "[a-z/]{1,12}") {
        let mut a = RandomStream::labelled(seed, &label);
        let mut b = RandomStream::labelled(seed, &label);
        for _ in 0..8 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
