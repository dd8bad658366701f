//! Five-field cron schedules evaluated in UTC at minute resolution.
//!
//! Supported syntax per field: `*`, single values, ranges `a-b`, lists
//! `a,b,c`, and steps `*/n` or `a-b/n`. Day-of-week uses `0..=6` with
//! `0 = Sunday`. When both day-of-month and day-of-week are restricted the
//! day clause is their OR (Vixie cron); otherwise whichever is restricted
//! must match.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveTime, Timelike, Utc};
use thiserror::Error;

/// Search horizon for [`CronSchedule::next_after`], in days (five years).
pub const SEARCH_HORIZON_DAYS: i64 = 5 * 366;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CronError {
    #[error("expected 5 fields, found {0}")]
    FieldCount(usize),
    #[error("{field} field out of range: {value} not in {min}-{max}")]
    OutOfRange {
        field: &'static str,
        value: u32,
        min: u32,
        max: u32,
    },
    #[error("{field} field has a zero step")]
    ZeroStep { field: &'static str },
    #[error("{field} field has a reversed range {start}-{end}")]
    ReversedRange {
        field: &'static str,
        start: u32,
        end: u32,
    },
    #[error("{field} field is malformed: {text:?}")]
    Malformed { field: &'static str, text: String },
    #[error("schedule never fires within {SEARCH_HORIZON_DAYS} days of {after}")]
    Unreachable { after: DateTime<Utc> },
}

/// A set of small integers in `0..64`, stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldSet(u64);

impl FieldSet {
    pub fn contains(self, v: u32) -> bool {
        v < 64 && self.0 & (1u64 << v) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn values(self) -> impl Iterator<Item = u32> {
        (0..64).filter(move |v| self.contains(*v))
    }

    fn insert(&mut self, v: u32) {
        self.0 |= 1u64 << v;
    }

    fn range(min: u32, max: u32) -> Self {
        let mut s = FieldSet(0);
        for v in min..=max {
            s.insert(v);
        }
        s
    }
}

impl fmt::Debug for FieldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.values()).finish()
    }
}

#[derive(Clone, Copy)]
struct FieldSpec {
    name: &'static str,
    min: u32,
    max: u32,
}

const MINUTE: FieldSpec = FieldSpec { name: "minute", min: 0, max: 59 };
const HOUR: FieldSpec = FieldSpec { name: "hour", min: 0, max: 23 };
const DAY_OF_MONTH: FieldSpec = FieldSpec { name: "day-of-month", min: 1, max: 31 };
const MONTH: FieldSpec = FieldSpec { name: "month", min: 1, max: 12 };
const DAY_OF_WEEK: FieldSpec = FieldSpec { name: "day-of-week", min: 0, max: 6 };

/// A parsed cron schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CronSchedule {
    pub minute: FieldSet,
    pub hour: FieldSet,
    pub day_of_month: FieldSet,
    pub day_of_month_restricted: bool,
    pub month: FieldSet,
    pub day_of_week: FieldSet,
    pub day_of_week_restricted: bool,
}

/// Parses a five-field cron expression.
pub fn parse_cron(expr: &str) -> Result<CronSchedule, CronError> {
    let fields: Vec<&str> = expr.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(CronError::FieldCount(fields.len()));
    }
    Ok(CronSchedule {
        minute: parse_field(fields[0], MINUTE)?,
        hour: parse_field(fields[1], HOUR)?,
        day_of_month: parse_field(fields[2], DAY_OF_MONTH)?,
        day_of_month_restricted: fields[2] != "*",
        month: parse_field(fields[3], MONTH)?,
        day_of_week: parse_field(fields[4], DAY_OF_WEEK)?,
        day_of_week_restricted: fields[4] != "*",
    })
}

fn parse_number(text: &str, spec: FieldSpec) -> Result<u32, CronError> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(CronError::Malformed { field: spec.name, text: text.to_string() });
    }
    // Long digit strings are out of range rather than malformed.
    let value = text.parse::<u32>().unwrap_or(u32::MAX);
    if value < spec.min || value > spec.max {
        return Err(CronError::OutOfRange {
            field: spec.name,
            value,
            min: spec.min,
            max: spec.max,
        });
    }
    Ok(value)
}

fn parse_field(text: &str, spec: FieldSpec) -> Result<FieldSet, CronError> {
    let mut set = FieldSet(0);
    for item in text.split(',') {
        let (base, step) = match item.split_once('/') {
            Some((base, step)) => {
                if step.is_empty() || !step.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(CronError::Malformed { field: spec.name, text: item.to_string() });
                }
                let step = step.parse::<u32>().unwrap_or(u32::MAX);
                if step == 0 {
                    return Err(CronError::ZeroStep { field: spec.name });
                }
                (base, step)
            }
            None => (item, 1),
        };
        let (start, end) = if base == "*" {
            (spec.min, spec.max)
        } else if let Some((a, b)) = base.split_once('-') {
            let a = parse_number(a, spec)?;
            let b = parse_number(b, spec)?;
            if a > b {
                return Err(CronError::ReversedRange { field: spec.name, start: a, end: b });
            }
            (a, b)
        } else {
            let v = parse_number(base, spec)?;
            if item.contains('/') {
                // `a/n` means `a-max/n`.
                (v, spec.max)
            } else {
                (v, v)
            }
        };
        let mut v = start;
        while v <= end {
            set.insert(v);
            v = match v.checked_add(step) {
                Some(n) => n,
                None => break,
            };
        }
    }
    Ok(set)
}

fn minute_floor(t: DateTime<Utc>) -> DateTime<Utc> {
    t.with_second(0).and_then(|t| t.with_nanosecond(0)).unwrap_or(t)
}

impl CronSchedule {
    fn day_matches(&self, date: NaiveDate) -> bool {
        if !self.month.contains(date.month()) {
            return false;
        }
        let dom = self.day_of_month.contains(date.day());
        let dow = self.day_of_week.contains(date.weekday().num_days_from_sunday());
        match (self.day_of_month_restricted, self.day_of_week_restricted) {
            (true, true) => dom || dow,
            (true, false) => dom,
            (false, true) => dow,
            (false, false) => true,
        }
    }

    /// True iff the schedule fires at the minute containing `t`.
    pub fn matches(&self, t: DateTime<Utc>) -> bool {
        self.minute.contains(t.minute()) && self.hour.contains(t.hour()) && self.day_matches(t.date_naive())
    }

    /// The first firing minute strictly after `t`.
    pub fn next_after(&self, t: DateTime<Utc>) -> Result<DateTime<Utc>, CronError> {
        let start = minute_floor(t) + Duration::minutes(1);
        let first_day = start.date_naive();
        let start_time = (start.hour(), start.minute());
        for offset in 0..=SEARCH_HORIZON_DAYS {
            let date = first_day + Duration::days(offset);
            if !self.day_matches(date) {
                continue;
            }
            let floor = if offset == 0 { start_time } else { (0, 0) };
            for hour in self.hour.values().filter(|h| *h >= floor.0) {
                let min_minute = if hour == floor.0 { floor.1 } else { 0 };
                if let Some(minute) = self.minute.values().find(|m| *m >= min_minute) {
                    let time = NaiveTime::from_hms_opt(hour, minute, 0).expect("validated field ranges");
                    return Ok(date.and_time(time).and_utc());
                }
            }
        }
        Err(CronError::Unreachable { after: t })
    }
}

impl FromStr for CronSchedule {
    type Err = CronError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_cron(s)
    }
}

fn render_field(set: FieldSet, restricted: bool, spec: FieldSpec) -> String {
    if !restricted && set == FieldSet::range(spec.min, spec.max) {
        return "*".to_string();
    }
    let values: Vec<u32> = set.values().collect();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j + 1 < values.len() && values[j + 1] == values[j] + 1 {
            j += 1;
        }
        if j == i {
            parts.push(values[i].to_string());
        } else {
            parts.push(format!("{}-{}", values[i], values[j]));
        }
        i = j + 1;
    }
    parts.join(",")
}

/// Canonical rendering; parsing it yields an equal schedule.
impl fmt::Display for CronSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            render_field(self.minute, false, MINUTE),
            render_field(self.hour, false, HOUR),
            render_field(self.day_of_month, self.day_of_month_restricted, DAY_OF_MONTH),
            render_field(self.month, false, MONTH),
            render_field(self.day_of_week, self.day_of_week_restricted, DAY_OF_WEEK),
        )
    }
}
