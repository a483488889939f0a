//! Seeded mock turbine and weather sources.
//!
//! Each hour draws from its own generator keyed by (seed, hour), so any
//! sub-range of a series equals the same slice of a longer series.

use crate::curve::PowerCurve;
use crate::timerange::TimeRange;
use chrono::{DateTime, SecondsFormat, Utc};
use planfirst_core::schema::{Field, FieldType, SchemaDescriptor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const DEFAULT_SEED: u64 = 0x5eed_2025_0809;

/// Turbine ids with their mean fraction of expected output. T-04 is the
/// seeded underperformer.
pub const TURBINES: [(&str, f64); 5] = [("T-01", 0.97), ("T-02", 0.91), ("T-03", 0.80), ("T-04", 0.64), ("T-05", 0.88)];

#[derive(Debug, Clone, PartialEq)]
pub struct TurbineTable {
    pub turbine_id: Vec<String>,
    pub timestamp: Vec<String>,
    pub power_output: Vec<f64>,
    pub availability: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherTable {
    pub timestamp: Vec<String>,
    pub wind_speed: Vec<f64>,
}

pub fn turbine_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("turbine_id", FieldType::series(FieldType::Text)),
        Field::new("timestamp", FieldType::series(FieldType::Timestamp)),
        Field::new("power_output", FieldType::series(FieldType::Real)).with_unit("kW"),
        Field::new("availability", FieldType::series(FieldType::Real)),
    ])
}

pub fn weather_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("timestamp", FieldType::series(FieldType::Timestamp)),
        Field::new("wind_speed", FieldType::series(FieldType::Real)).with_unit("m/s"),
    ])
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn hour_rng(seed: u64, stream: u64, t: DateTime<Utc>) -> ChaCha8Rng {
    let hour = t.timestamp().div_euclid(3600) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hour.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Hourly mean wind speed at the met mast.
pub fn wind_speed(seed: u64, t: DateTime<Utc>) -> f64 {
    let mut rng = hour_rng(seed, 0, t);
    let hour_of_day = (t.timestamp().div_euclid(3600) % 24) as f64;
    let diurnal = 2.5 * (std::f64::consts::TAU * (hour_of_day - 9.0) / 24.0).sin();
    // Sum of uniforms: roughly normal, bounded.
    let noise: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 1.6;
    round2((8.0 + diurnal + noise).max(0.0))
}

pub fn weather_readings(seed: u64, range: &TimeRange) -> WeatherTable {
    let mut table = WeatherTable { timestamp: Vec::new(), wind_speed: Vec::new() };
    for t in range.hour_starts() {
        table.timestamp.push(stamp(t));
        table.wind_speed.push(wind_speed(seed, t));
    }
    table
}

/// Readings ordered by hour, then turbine.
pub fn turbine_readings(seed: u64, range: &TimeRange, curve: &PowerCurve) -> TurbineTable {
    let mut table =
        TurbineTable { turbine_id: Vec::new(), timestamp: Vec::new(), power_output: Vec::new(), availability: Vec::new() };
    for t in range.hour_starts() {
        let expected = curve.expected_kw(wind_speed(seed, t));
        let mut rng = hour_rng(seed, 1, t);
        for (id, factor) in TURBINES {
            let jitter: f64 = rng.random_range(0.94..1.06);
            let availability = round2(rng.random_range(if id == "T-04" { 0.80..0.97 } else { 0.95..1.0 }));
            table.turbine_id.push(id.to_string());
            table.timestamp.push(stamp(t));
            table.power_output.push(round2((expected * factor * jitter).max(0.0)));
            table.availability.push(availability);
        }
    }
    table
}

impl TurbineTable {
    pub fn len(&self) -> usize {
        self.turbine_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turbine_id.is_empty()
    }

    pub fn to_payload(&self) -> Value {
        json!({
            "turbine_id": self.turbine_id,
            "timestamp": self.timestamp,
            "power_output": self.power_output,
            "availability": self.availability,
        })
    }

    pub fn from_payload(v: &Value) -> Option<Self> {
        Some(TurbineTable {
            turbine_id: strings(&v["turbine_id"])?,
            timestamp: strings(&v["timestamp"])?,
            power_output: reals(&v["power_output"])?,
            availability: reals(&v["availability"])?,
        })
    }
}

impl WeatherTable {
    pub fn len(&self) -> usize {
        self.timestamp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamp.is_empty()
    }

    pub fn to_payload(&self) -> Value {
        json!({"timestamp": self.timestamp, "wind_speed": self.wind_speed})
    }

    pub fn from_payload(v: &Value) -> Option<Self> {
        Some(WeatherTable { timestamp: strings(&v["timestamp"])?, wind_speed: reals(&v["wind_speed"])? })
    }
}

fn strings(v: &Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect()
}

fn reals(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timerange::parse;
    use chrono::TimeZone;

    fn golden_range() -> TimeRange {
        parse("past two weeks", Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()).unwrap()
    }

    #[test]
    fn golden_volumes() {
        let r = golden_range();
        assert_eq!(turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default()).len(), 1680);
        assert_eq!(weather_readings(DEFAULT_SEED, &r).len(), 336);
    }

    #[test]
    fn one_hour_range() {
        let r = parse("past hour", Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()).unwrap();
        assert_eq!(turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default()).len(), 5);
        assert_eq!(weather_readings(DEFAULT_SEED, &r).len(), 1);
    }

    #[test]
    fn reproducible_and_sliceable() {
        let r = golden_range();
        let a = turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default());
        let b = turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default());
        assert_eq!(
            serde_json::to_vec(&a.to_payload()).unwrap(),
            serde_json::to_vec(&b.to_payload()).unwrap()
        );
        let day = parse("past day", Utc.with_ymd_and_hms(2025, 8, 9, 0, 0, 0).unwrap()).unwrap();
        let w = weather_readings(DEFAULT_SEED, &day);
        let full = weather_readings(DEFAULT_SEED, &r);
        assert_eq!(w.wind_speed[..], full.wind_speed[312..]);
        assert_ne!(weather_readings(DEFAULT_SEED + 1, &r), full);
    }

    #[test]
    fn readings_are_physical() {
        let r = golden_range();
        let t = turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default());
        assert!(t.power_output.iter().all(|p| *p >= 0.0));
        assert!(t.availability.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(weather_readings(DEFAULT_SEED, &r).wind_speed.iter().all(|v| *v >= 0.0));
        assert!(t.timestamp.iter().all(|s| s.ends_with(":00:00Z")));
    }

    #[test]
    fn payload_round_trip() {
        let r = golden_range();
        let t = turbine_readings(DEFAULT_SEED, &r, &PowerCurve::default());
        assert_eq!(TurbineTable::from_payload(&t.to_payload()), Some(t.clone()));
        turbine_schema().validate(&t.to_payload()).unwrap();
        weather_schema().validate(&weather_readings(DEFAULT_SEED, &r).to_payload()).unwrap();
    }
}
