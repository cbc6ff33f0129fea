//! Local-time conversion with precomputed UTC-offset segments.
//!
//! Hour-of-day and weekday tests run per ping (millions of lookups), so the
//! timezone's offset transitions inside the study window are resolved once
//! into a sorted segment list; a lookup is then a binary search plus integer
//! arithmetic. Timestamps outside the precomputed range fall back to a
//! direct timezone query.

use chrono::{Datelike, Offset, TimeZone};
use chrono_tz::Tz;

use crate::{Error, Result};

/// Slack added around the window so schedule generation and late-arriving
/// visits stay on the fast path.
const RANGE_PAD_S: i64 = 14 * 86_400;

pub struct LocalClock {
    tz: Tz,
    /// (segment start ts, utc offset seconds); segment k ends where k+1 starts.
    segments: Vec<(i64, i64)>,
    range: (i64, i64),
}

impl LocalClock {
    pub fn new(tz_name: &str, window_start: i64, window_end: i64) -> Result<Self> {
        let tz: Tz = tz_name.parse().map_err(|_| Error::Timezone(tz_name.to_string()))?;
        let lo = window_start - RANGE_PAD_S;
        let hi = window_end + RANGE_PAD_S;
        let mut segments = vec![(lo, offset_at(&tz, lo))];
        // Scan day boundaries; bisect to the exact second when the offset flips.
        let mut t = lo;
        while t < hi {
            let next = (t + 86_400).min(hi);
            let (cur_off, next_off) = (segments.last().unwrap().1, offset_at(&tz, next));
            if next_off != cur_off {
                let (mut a, mut b) = (t, next);
                while b - a > 1 {
                    let mid = a + (b - a) / 2;
                    if offset_at(&tz, mid) == cur_off {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                segments.push((b, offset_at(&tz, b)));
            }
            t = next;
        }
        Ok(LocalClock { tz, segments, range: (lo, hi) })
    }

    pub fn offset_secs(&self, ts: i64) -> i64 {
        if ts < self.range.0 || ts >= self.range.1 {
            return offset_at(&self.tz, ts);
        }
        let k = self.segments.partition_point(|&(start, _)| start <= ts);
        self.segments[k - 1].1
    }

    fn local_secs(&self, ts: i64) -> i64 {
        ts + self.offset_secs(ts)
    }

    pub fn local_hour(&self, ts: i64) -> u32 {
        (self.local_secs(ts).rem_euclid(86_400) / 3_600) as u32
    }

    /// Days since 1970-01-01 in local time.
    pub fn local_day(&self, ts: i64) -> i64 {
        self.local_secs(ts).div_euclid(86_400)
    }

    /// Monday = 0 .. Sunday = 6.
    pub fn weekday_index(&self, ts: i64) -> u32 {
        weekday_of_day(self.local_day(ts))
    }

    pub fn is_weekend(&self, ts: i64) -> bool {
        self.weekday_index(ts) >= 5
    }

    pub fn local_date_string(&self, ts: i64) -> String {
        date_string(self.local_day(ts))
    }

    /// UTC timestamp of local midnight on the given local day.
    pub fn day_start_utc(&self, local_day: i64) -> i64 {
        let local_midnight = local_day * 86_400;
        // The offset depends on the answer; one refinement step settles it
        // away from transitions, which never land at local midnight here.
        let mut ts = local_midnight - self.offset_secs(local_midnight);
        ts = local_midnight - self.offset_secs(ts);
        ts
    }
}

fn offset_at(tz: &Tz, ts: i64) -> i64 {
    tz.timestamp_opt(ts, 0).unwrap().offset().fix().local_minus_utc() as i64
}

/// Monday = 0 .. Sunday = 6 for a local day number (1970-01-01 was a
/// Thursday, index 3).
pub fn weekday_of_day(local_day: i64) -> u32 {
    (local_day + 3).rem_euclid(7) as u32
}

/// YYYY-MM-DD for days since 1970-01-01 (proleptic Gregorian).
pub fn date_string(days: i64) -> String {
    let date = chrono::NaiveDate::from_num_days_from_ce_opt((days + 719_162 + 1) as i32)
        .expect("date in range");
    date.format("%Y-%m-%d").to_string()
}

/// Days since 1970-01-01 for a YYYY-MM-DD string.
pub fn parse_date_days(s: &str) -> Result<i64> {
    let date = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| Error::Config(format!("bad date `{s}`: {e}")))?;
    Ok(i64::from(date.num_days_from_ce()) - 719_163)
}
