use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical calendar features of one timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalCode {
    pub season: u8,
    pub month: u8,
    pub date: u8,
    /// Monday = 0 .. Sunday = 6
    pub day: u8,
    pub weekday: u8,
    pub holiday: u8,
    pub part_of_day: u8,
    pub rush_hour: u8,
}

/// Length of [`TemporalCode::one_hot`].
pub const ONE_HOT_WIDTH: usize = 4 + 12 + 31 + 7 + 2 + 2 + 4 + 3;

impl TemporalCode {
    /// Value of a temporal schema column, or `None` for other names.
    pub fn feature(&self, name: &str) -> Option<f64> {
        let v = match name {
            "date" => self.date,
            "day" => self.day,
            "month" => self.month,
            "rush_hour" => self.rush_hour,
            "season" => self.season,
            "part_of_day" => self.part_of_day,
            "us_holiday" => self.holiday,
            _ => return None,
        };
        Some(v as f64)
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; ONE_HOT_WIDTH];
        let slots = [
            (0, self.season as usize),
            (4, self.month as usize - 1),
            (16, self.date as usize - 1),
            (47, self.day as usize),
            (54, self.weekday as usize),
            (56, self.holiday as usize),
            (58, self.part_of_day as usize),
            (62, self.rush_hour as usize),
        ];
        for (off, i) in slots {
            out[off + i] = 1.0;
        }
        out
    }

    pub fn in_range(&self) -> bool {
        self.season <= 3
            && (1..=12).contains(&self.month)
            && (1..=31).contains(&self.date)
            && self.day <= 6
            && self.weekday <= 1
            && self.holiday <= 1
            && self.part_of_day <= 3
            && self.rush_hour <= 2
            && ((self.weekday == 1) == (self.day <= 4))
    }
}

/// Holidays as recurring `(month, day)` pairs plus explicit dates (e.g. observed days).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HolidayCalendar {
    pub fixed: Vec<(u32, u32)>,
    pub dates: BTreeSet<NaiveDate>,
}

impl Default for HolidayCalendar {
    fn default() -> Self {
        Self::us_fixed()
    }
}

impl HolidayCalendar {
    /// U.S. federal holidays that fall on a fixed calendar date.
    pub fn us_fixed() -> Self {
        Self { fixed: vec![(1, 1), (6, 19), (7, 4), (11, 11), (12, 25)], dates: BTreeSet::new() }
    }

    pub fn empty() -> Self {
        Self { fixed: Vec::new(), dates: BTreeSet::new() }
    }

    pub fn with_date(mut self, d: NaiveDate) -> Self {
        self.dates.insert(d);
        self
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.fixed.contains(&(d.month(), d.day())) || self.dates.contains(&d)
    }
}

pub fn encode_temporal(ts: i64, calendar: &HolidayCalendar) -> Result<TemporalCode> {
    let dt: DateTime<Utc> =
        DateTime::from_timestamp(ts, 0).ok_or_else(|| Error::Range(format!("timestamp {ts} out of range")))?;
    let month = dt.month();
    let hour = dt.hour();
    let day = dt.weekday().num_days_from_monday();
    Ok(TemporalCode {
        season: match month {
            12 | 1 | 2 => 0,
            3..=5 => 1,
            6..=8 => 2,
            _ => 3,
        },
        month: month as u8,
        date: dt.day() as u8,
        day: day as u8,
        weekday: u8::from(day <= 4),
        holiday: u8::from(calendar.contains(dt.date_naive())),
        part_of_day: match hour {
            6..=11 => 0,
            12..=17 => 1,
            18..=23 => 2,
            _ => 3,
        },
        rush_hour: match hour {
            6..=8 => 0,
            15..=17 => 1,
            _ => 2,
        },
    })
}
