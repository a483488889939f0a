//! Relative time expressions resolved against a reference instant.

use chrono::{DateTime, Duration, DurationRound, NaiveDate, TimeDelta, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::LazyLock;

/// Hour-aligned half-open interval `[start, end)` with the closed date
/// interval it is reported as.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub expression: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

impl TimeRange {
    pub fn hours(&self) -> i64 {
        (self.end - self.start).num_hours()
    }

    /// Every hour start in the interval, in order.
    pub fn hour_starts(&self) -> impl Iterator<Item = DateTime<Utc>> + '_ {
        (0..self.hours().max(0)).map(move |h| self.start + Duration::hours(h))
    }

    pub fn label(&self) -> String {
        format!("{} to {}", self.start_date, self.end_date)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TimeRangeError {
    #[error("unparseable time expression {0:?}")]
    UnparseableExpression(String),
    #[error("time range {0} is empty")]
    EmptyRange(String),
}

static RELATIVE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:past|last|previous)\s+(?:(\d+|a|an|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)\s+)?(hour|day|week)s?\b",
    )
    .expect("static pattern")
});

static DAY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(today|yesterday)\b").expect("static pattern"));

fn number(word: Option<&str>) -> Option<i64> {
    let Some(w) = word else { return Some(1) };
    let n = match w.to_ascii_lowercase().as_str() {
        "a" | "an" | "one" => 1,
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        "eleven" => 11,
        "twelve" => 12,
        digits => digits.parse().ok()?,
    };
    Some(n)
}

fn floor_hour(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(TimeDelta::hours(1)).expect("hour truncation is in range")
}

/// Finds the first supported expression in `text` and resolves it.
///
/// `past N hours|days|weeks` ends at the reference instant (floored to the
/// hour); `today` and `yesterday` cover whole UTC calendar days.
pub fn parse(text: &str, reference: DateTime<Utc>) -> Result<TimeRange, TimeRangeError> {
    let relative = RELATIVE.captures(text);
    let day = DAY.captures(text);
    let use_relative = match (&relative, &day) {
        (Some(r), Some(d)) => r.get(0).expect("group 0").start() < d.get(0).expect("group 0").start(),
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => return Err(TimeRangeError::UnparseableExpression(text.to_string())),
    };
    if use_relative {
        let caps = relative.expect("checked");
        let expression = caps[0].to_string();
        let n = number(caps.get(1).map(|m| m.as_str()))
            .filter(|n| *n > 0 && *n <= 24 * 366)
            .ok_or_else(|| TimeRangeError::UnparseableExpression(expression.clone()))?;
        let span = match caps[2].to_ascii_lowercase().as_str() {
            "hour" => Duration::hours(n),
            "day" => Duration::days(n),
            _ => Duration::weeks(n),
        };
        let end = floor_hour(reference);
        let start = end - span;
        return Ok(TimeRange { expression, start, end, start_date: start.date_naive(), end_date: end.date_naive() });
    }
    let caps = day.expect("checked");
    let expression = caps[0].to_string();
    let mut date = reference.date_naive();
    if expression.eq_ignore_ascii_case("yesterday") {
        date = date.pred_opt().expect("date in range");
    }
    let start = date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    Ok(TimeRange { expression, start, end: start + Duration::days(1), start_date: date, end_date: date })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, m: u32, d: u32, h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, 0, 0).unwrap()
    }

    #[test]
    fn past_two_weeks() {
        let r = parse("Resolve the past two weeks into dates", at(2025, 8, 9, 0)).unwrap();
        assert_eq!(r.label(), "2025-07-26 to 2025-08-09");
        assert_eq!(r.hours(), 336);
        assert_eq!(r.expression, "past two weeks");
        assert_eq!(parse("over the past 2 weeks", at(2025, 8, 9, 0)).unwrap().hours(), 336);
    }

    #[test]
    fn today_is_one_calendar_day() {
        let r = parse("today", at(2025, 8, 9, 0)).unwrap();
        assert_eq!((r.start_date.to_string(), r.end_date.to_string()), ("2025-08-09".into(), "2025-08-09".into()));
        assert_eq!(r.hours(), 24);
        let y = parse("what happened yesterday?", at(2025, 8, 9, 15)).unwrap();
        assert_eq!(y.start, at(2025, 8, 8, 0));
    }

    #[test]
    fn past_48_hours() {
        let r = parse("past 48 hours", at(2025, 8, 9, 12)).unwrap();
        assert_eq!((r.start, r.end), (at(2025, 8, 7, 12), at(2025, 8, 9, 12)));
    }

    #[test]
    fn unit_without_count_and_errors() {
        assert_eq!(parse("the last hour", at(2025, 8, 9, 0)).unwrap().hours(), 1);
        assert!(matches!(parse("sometime soon", at(2025, 8, 9, 0)), Err(TimeRangeError::UnparseableExpression(_))));
        assert!(matches!(parse("past 0 days", at(2025, 8, 9, 0)), Err(TimeRangeError::UnparseableExpression(_))));
    }

    #[test]
    fn reference_is_floored_to_the_hour() {
        let r = parse("past day", Utc.with_ymd_and_hms(2025, 8, 9, 10, 42, 7).unwrap()).unwrap();
        assert_eq!(r.end, at(2025, 8, 9, 10));
        assert_eq!(r.hours(), 24);
    }
}
