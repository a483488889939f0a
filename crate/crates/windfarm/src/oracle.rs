//! Engine-side reference computation of the turbine ranking.

use crate::curve::PowerCurve;
use crate::data::{TurbineTable, WeatherTable};
use planfirst_core::schema::{Field, FieldType, SchemaDescriptor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub excellent_min: f64,
    pub good_min: f64,
}

impl Thresholds {
    pub const STANDARD: Thresholds = Thresholds { excellent_min: 0.85, good_min: 0.75 };

    pub fn check(&self) -> Result<(), String> {
        if 0.0 < self.good_min && self.good_min < self.excellent_min && self.excellent_min <= 1.0 {
            Ok(())
        } else {
            Err(format!(
                "thresholds need 0 < good_min < excellent_min <= 1, got good_min={} excellent_min={}",
                self.good_min, self.excellent_min
            ))
        }
    }

    /// Lower bounds are closed.
    pub fn band(&self, efficiency: f64) -> Band {
        if efficiency >= self.excellent_min {
            Band::Excellent
        } else if efficiency >= self.good_min {
            Band::Good
        } else {
            Band::Maintenance
        }
    }

    pub fn schema() -> SchemaDescriptor {
        SchemaDescriptor::new(vec![
            Field::new("excellent_min", FieldType::Real),
            Field::new("good_min", FieldType::Real),
            Field::new("units", FieldType::Text),
        ])
    }

    pub fn to_payload(&self) -> Value {
        json!({"excellent_min": self.excellent_min, "good_min": self.good_min, "units": "fraction of expected output"})
    }

    pub fn from_payload(v: &Value) -> Option<Self> {
        Some(Thresholds { excellent_min: v["excellent_min"].as_f64()?, good_min: v["good_min"].as_f64()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Excellent,
    Good,
    Maintenance,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Excellent => "excellent",
            Band::Good => "good",
            Band::Maintenance => "maintenance",
        }
    }

    pub fn parse(s: &str) -> Option<Band> {
        match s {
            "excellent" => Some(Band::Excellent),
            "good" => Some(Band::Good),
            "maintenance" => Some(Band::Maintenance),
            _ => None,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub rank: u32,
    pub turbine_id: String,
    pub efficiency: f64,
    pub band: Band,
    pub mean_power_kw: f64,
    pub expected_power_kw: f64,
    pub readings: u32,
}

pub fn ranking_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("rank", FieldType::series(FieldType::Integer)),
        Field::new("turbine_id", FieldType::series(FieldType::Text)),
        Field::new("efficiency", FieldType::series(FieldType::Real)),
        Field::new("band", FieldType::series(FieldType::Text)),
        Field::new("mean_power_kw", FieldType::series(FieldType::Real)).with_unit("kW"),
        Field::new("expected_power_kw", FieldType::series(FieldType::Real)).with_unit("kW"),
        Field::new("readings", FieldType::series(FieldType::Integer)),
    ])
}

pub fn ranking_to_payload(entries: &[RankingEntry]) -> Value {
    json!({
        "rank": entries.iter().map(|e| e.rank).collect::<Vec<_>>(),
        "turbine_id": entries.iter().map(|e| e.turbine_id.clone()).collect::<Vec<_>>(),
        "efficiency": entries.iter().map(|e| e.efficiency).collect::<Vec<_>>(),
        "band": entries.iter().map(|e| e.band.as_str()).collect::<Vec<_>>(),
        "mean_power_kw": entries.iter().map(|e| e.mean_power_kw).collect::<Vec<_>>(),
        "expected_power_kw": entries.iter().map(|e| e.expected_power_kw).collect::<Vec<_>>(),
        "readings": entries.iter().map(|e| e.readings).collect::<Vec<_>>(),
    })
}

pub fn ranking_from_payload(v: &Value) -> Result<Vec<RankingEntry>, String> {
    let col = |name: &str| v[name].as_array().cloned().ok_or_else(|| format!("column {name} missing"));
    let ids = col("turbine_id")?;
    let n = ids.len();
    let (rank, eff, band, mean, expected, readings) =
        (col("rank")?, col("efficiency")?, col("band")?, col("mean_power_kw")?, col("expected_power_kw")?, col("readings")?);
    if [rank.len(), eff.len(), band.len(), mean.len(), expected.len(), readings.len()].iter().any(|l| *l != n) {
        return Err("ranking columns differ in length".into());
    }
    (0..n)
        .map(|i| {
            let num = |c: &[Value], what: &str| c[i].as_f64().ok_or_else(|| format!("{what}[{i}] is not a number"));
            Ok(RankingEntry {
                rank: rank[i].as_u64().ok_or_else(|| format!("rank[{i}] is not an integer"))? as u32,
                turbine_id: ids[i].as_str().ok_or_else(|| format!("turbine_id[{i}] is not text"))?.to_string(),
                efficiency: num(&eff, "efficiency")?,
                band: band[i].as_str().and_then(Band::parse).ok_or_else(|| format!("band[{i}] is not a band"))?,
                mean_power_kw: num(&mean, "mean_power_kw")?,
                expected_power_kw: num(&expected, "expected_power_kw")?,
                readings: readings[i].as_u64().ok_or_else(|| format!("readings[{i}] is not an integer"))? as u32,
            })
        })
        .collect()
}

/// Efficiency is mean delivered power over mean curve-expected power, over
/// hours with a wind reading. Ordered by efficiency descending, then id.
pub fn rank(turbine: &TurbineTable, weather: &WeatherTable, curve: &PowerCurve, thresholds: &Thresholds) -> Vec<RankingEntry> {
    let wind: HashMap<&str, f64> =
        weather.timestamp.iter().map(String::as_str).zip(weather.wind_speed.iter().copied()).collect();
    // (actual sum, expected sum, count), summed in row order.
    let mut acc: BTreeMap<&str, (f64, f64, u32)> = BTreeMap::new();
    for i in 0..turbine.len() {
        let Some(&v) = wind.get(turbine.timestamp[i].as_str()) else { continue };
        let e = acc.entry(turbine.turbine_id[i].as_str()).or_insert((0.0, 0.0, 0));
        e.0 += turbine.power_output[i];
        e.1 += curve.expected_kw(v);
        e.2 += 1;
    }
    let mut entries: Vec<RankingEntry> = acc
        .into_iter()
        .map(|(id, (actual, expected, n))| {
            let mean_power = actual / n as f64;
            let mean_expected = expected / n as f64;
            let efficiency = if mean_expected > 0.0 { mean_power / mean_expected } else { 0.0 };
            RankingEntry {
                rank: 0,
                turbine_id: id.to_string(),
                efficiency,
                band: thresholds.band(efficiency),
                mean_power_kw: mean_power,
                expected_power_kw: mean_expected,
                readings: n,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.efficiency.total_cmp(&a.efficiency).then_with(|| a.turbine_id.cmp(&b.turbine_id)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i as u32 + 1;
    }
    entries
}

/// Ids, order and bands must match exactly; numbers within `rel_tol`.
pub fn compare(actual: &[RankingEntry], oracle: &[RankingEntry], rel_tol: f64) -> Result<(), String> {
    if actual.len() != oracle.len() {
        return Err(format!("{} entries, oracle has {}", actual.len(), oracle.len()));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    for (a, o) in actual.iter().zip(oracle) {
        if a.turbine_id != o.turbine_id || a.rank != o.rank || a.band != o.band || a.readings != o.readings {
            return Err(format!(
                "rank {}: got {} ({}), oracle {} ({})",
                o.rank, a.turbine_id, a.band, o.turbine_id, o.band
            ));
        }
        for (what, x, y) in [
            ("efficiency", a.efficiency, o.efficiency),
            ("mean_power_kw", a.mean_power_kw, o.mean_power_kw),
            ("expected_power_kw", a.expected_power_kw, o.expected_power_kw),
        ] {
            if !close(x, y) {
                return Err(format!("{}: {what} {x} differs from oracle {y}", a.turbine_id));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{turbine_readings, weather_readings, DEFAULT_SEED};
    use crate::timerange::parse;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    #[test]
    fn boundaries_are_closed_below() {
        let t = Thresholds::STANDARD;
        assert_eq!(t.band(0.85), Band::Excellent);
        assert_eq!(t.band(0.80), Band::Good);
        assert_eq!(t.band(0.75), Band::Good);
        assert_eq!(t.band(0.7499999), Band::Maintenance);
        assert_eq!(t.band(1.0), Band::Excellent);
    }

    #[test]
    fn threshold_invariant() {
        assert!(Thresholds::STANDARD.check().is_ok());
        assert!(Thresholds { excellent_min: 0.75, good_min: 0.85 }.check().is_err());
        assert!(Thresholds { excellent_min: 1.2, good_min: 0.5 }.check().is_err());
    }

    #[test]
    fn seeded_data_flags_t04() {
        let r = parse("past two weeks", Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()).unwrap();
        let curve = PowerCurve::default();
        let ranking = rank(
            &turbine_readings(DEFAULT_SEED, &r, &curve),
            &weather_readings(DEFAULT_SEED, &r),
            &curve,
            &Thresholds::STANDARD,
        );
        assert_eq!(ranking.len(), 5);
        let last = ranking.last().unwrap();
        assert_eq!((last.turbine_id.as_str(), last.band), ("T-04", Band::Maintenance));
        assert!(ranking.windows(2).all(|w| w[0].efficiency >= w[1].efficiency));
        assert!(ranking.iter().all(|e| e.readings == 336));
    }

    #[test]
    fn exact_expected_power_is_excellent() {
        let curve = PowerCurve::default();
        let weather = WeatherTable { timestamp: vec!["a".into(), "b".into()], wind_speed: vec![7.0, 13.0] };
        let turbine = TurbineTable {
            turbine_id: vec!["T-01".into(), "T-01".into()],
            timestamp: vec!["a".into(), "b".into()],
            power_output: vec![curve.expected_kw(7.0), curve.expected_kw(13.0)],
            availability: vec![1.0, 1.0],
        };
        let r = rank(&turbine, &weather, &curve, &Thresholds::STANDARD);
        assert_eq!(r[0].efficiency, 1.0);
        assert_eq!(r[0].band, Band::Excellent);
    }

    #[test]
    fn payload_round_trip() {
        let r = parse("past day", Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()).unwrap();
        let curve = PowerCurve::default();
        let ranking = rank(&turbine_readings(7, &r, &curve), &weather_readings(7, &r), &curve, &Thresholds::STANDARD);
        let payload = ranking_to_payload(&ranking);
        ranking_schema().validate(&payload).unwrap();
        assert_eq!(ranking_from_payload(&payload).unwrap(), ranking);
        assert!(compare(&ranking, &ranking, 0.0).is_ok());
    }

    proptest! {
        #[test]
        fn bands_partition_the_unit_interval(e in 0.0f64..=1.0) {
            let t = Thresholds::STANDARD;
            let b = t.band(e);
            let expected = [e >= 0.85, (0.75..0.85).contains(&e), e < 0.75];
            let got = [b == Band::Excellent, b == Band::Good, b == Band::Maintenance];
            prop_assert_eq!(got, expected);
        }
    }
}
