//! Synthetic prosumer profiles, community aggregation and train/test splits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{TimeSeries, INTERVALS_PER_DAY, STEP_MINUTES};
use crate::rng::{derive_seed, seeded, standard_normal};

pub mod calendar {
    //! Fixed 365-day reference year; minute 0 is January 1st, 00:00.

    use core::fmt;
    use core::str::FromStr;

    use serde::{Deserialize, Serialize};

    use crate::model::{INTERVALS_PER_DAY, STEP_MINUTES};

    pub const DAYS_IN_YEAR: u32 = 365;
    pub const MINUTES_PER_DAY: i64 = INTERVALS_PER_DAY as i64 * STEP_MINUTES;
    const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    const NAMES: [&str; 12] = [
        "january", "february", "march", "april", "may", "june", "july", "august", "september",
        "october", "november", "december",
    ];

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    pub enum Month {
        January = 1,
        February,
        March,
        April,
        May,
        June,
        July,
        August,
        September,
        October,
        November,
        December,
    }

    impl Month {
        pub const ALL: [Month; 12] = [
            Month::January,
            Month::February,
            Month::March,
            Month::April,
            Month::May,
            Month::June,
            Month::July,
            Month::August,
            Month::September,
            Month::October,
            Month::November,
            Month::December,
        ];

        pub fn number(self) -> u32 {
            self as u32
        }

        pub fn from_number(n: u32) -> Option<Month> {
            Month::ALL.get((n as usize).wrapping_sub(1)).copied()
        }

        pub fn days(self) -> u32 {
            DAYS_IN_MONTH[self as usize - 1]
        }

        /// Zero-based day of year of the 1st.
        pub fn first_day(self) -> u32 {
            DAYS_IN_MONTH[..self as usize - 1].iter().sum()
        }

        pub fn start_minute(self) -> i64 {
            self.first_day() as i64 * MINUTES_PER_DAY
        }

        pub fn end_minute(self) -> i64 {
            (self.first_day() + self.days()) as i64 * MINUTES_PER_DAY
        }

        /// Zero-based day of year of the month's last day.
        pub fn last_day(self) -> u32 {
            self.first_day() + self.days() - 1
        }

        pub fn name(self) -> &'static str {
            NAMES[self as usize - 1]
        }
    }

    impl fmt::Display for Month {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str(self.name())
        }
    }

    impl FromStr for Month {
        type Err = ();
        fn from_str(s: &str) -> Result<Self, ()> {
            let lower = s.trim().to_ascii_lowercase();
            if let Ok(n) = lower.parse::<u32>() {
                return Month::from_number(n).ok_or(());
            }
            NAMES
                .iter()
                .position(|n| *n == lower || n[..3] == lower)
                .and_then(|i| Month::from_number(i as u32 + 1))
                .ok_or(())
        }
    }

    pub fn day_start_minute(day_of_year: u32) -> i64 {
        day_of_year as i64 * MINUTES_PER_DAY
    }

    /// Month containing a zero-based day of the reference year.
    pub fn month_of_day(day_of_year: u32) -> Month {
        let d = day_of_year % DAYS_IN_YEAR;
        Month::ALL
            .iter()
            .copied()
            .find(|m| d <= m.last_day())
            .unwrap_or(Month::December)
    }
}

pub use calendar::Month;
use calendar::MINUTES_PER_DAY;

/// Parameters of one synthetic prosumer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildingProfileParams {
    /// Always-on demand, kW.
    pub base_load: f64,
    /// Amplitude of the daily sinusoidal demand peak, kW.
    pub daily_peak_amp: f64,
    /// Hour of the demand peak, `[0, 24)`.
    pub peak_hour: f64,
    pub noise_sigma: f64,
    /// Peak PV output on a clear summer day, kW.
    pub pv_capacity: f64,
    /// Fraction of PV output a fully cloudy day removes, `[0, 1]`.
    pub cloudiness: f64,
    pub seed: u64,
}

impl BuildingProfileParams {
    pub fn validate(&self) -> Result<()> {
        let mags = [
            ("base_load", self.base_load),
            ("daily_peak_amp", self.daily_peak_amp),
            ("noise_sigma", self.noise_sigma),
            ("pv_capacity", self.pv_capacity),
        ];
        for (name, v) in mags {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..24.0).contains(&self.peak_hour) {
            return Err(Error::invalid("peak_hour must lie in [0, 24)"));
        }
        if !(0.0..=1.0).contains(&self.cloudiness) {
            return Err(Error::invalid("cloudiness must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Heterogeneous residential prosumer drawn from fixed ranges.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            base_load: rng.gen_range(0.3..1.2),
            daily_peak_amp: rng.gen_range(0.6..2.5),
            peak_hour: rng.gen_range(17.0..21.0),
            noise_sigma: rng.gen_range(0.03..0.15),
            pv_capacity: rng.gen_range(1.5..5.0),
            cloudiness: rng.gen_range(0.1..0.6),
            seed: rng.gen(),
        }
    }
}

/// Earliest sunrise and latest sunset hour of the year; PV is zero outside.
pub const DAYLIGHT_HOURS: (f64, f64) = (5.0, 19.0);

fn seasonal(day_of_year: u32, peak_day: f64) -> f64 {
    math::cos(TAU * (day_of_year as f64 - peak_day) / calendar::DAYS_IN_YEAR as f64)
}

/// Relative PV output at `hour`: a sine bell between a seasonal sunrise and
/// sunset (longest day at the June solstice), zero at night.
pub fn solar_shape(day_of_year: u32, hour: f64) -> f64 {
    let half = 6.0 + 1.0 * seasonal(day_of_year, 172.0);
    let (rise, set) = (12.0 - half, 12.0 + half);
    if hour <= rise || hour >= set {
        0.0
    } else {
        math::sin(PI * (hour - rise) / (set - rise))
    }
}

/// `days` of 15-minute demand and PV generation starting on January 1st.
pub fn gen_building(params: &BuildingProfileParams, days: usize) -> Result<(TimeSeries, TimeSeries)> {
    gen_building_from(params, 0, days)
}

/// Same as [`gen_building`] but starting at zero-based day `first_day`.
/// Output depends only on the parameters (including the seed) and the day.
pub fn gen_building_from(
    params: &BuildingProfileParams,
    first_day: u32,
    days: usize,
) -> Result<(TimeSeries, TimeSeries)> {
    params.validate()?;
    if days == 0 {
        return Err(Error::invalid("days must be >= 1"));
    }
    let n = days * INTERVALS_PER_DAY;
    let mut demand = Vec::with_capacity(n);
    let mut generation = Vec::with_capacity(n);
    for d in 0..days as u32 {
        let doy = first_day + d;
        // Per-day streams so that any window of days is reproducible.
        let mut noise = seeded(derive_seed(params.seed, &[0, doy as u64]));
        let mut sky = seeded(derive_seed(params.seed, &[1, doy as u64]));
        let cloud = sky.gen::<f64>();
        let amp = params.daily_peak_amp * (1.0 + 0.3 * seasonal(doy % 365, 210.0));
        let pv_season = 0.85 + 0.15 * seasonal(doy % 365, 172.0);
        for k in 0..INTERVALS_PER_DAY {
            let hour = k as f64 * STEP_MINUTES as f64 / 60.0;
            let peak = 0.5 * (1.0 + math::cos(TAU * (hour - params.peak_hour) / 24.0));
            let eps = if params.noise_sigma > 0.0 {
                params.noise_sigma * standard_normal(&mut noise)
            } else {
                0.0
            };
            demand.push((params.base_load + amp * peak + eps).max(0.0));
            let pv = params.pv_capacity
                * solar_shape(doy % 365, hour)
                * pv_season
                * (1.0 - params.cloudiness * cloud);
            generation.push(pv.max(0.0));
        }
    }
    let start = calendar::day_start_minute(first_day);
    Ok((TimeSeries::new(start, demand), TimeSeries::new(start, generation)))
}

/// One synthetic building's series.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingData {
    pub id: String,
    pub params: BuildingProfileParams,
    pub demand: TimeSeries,
    pub generation: TimeSeries,
}

impl BuildingData {
    pub fn net(&self) -> Result<TimeSeries> {
        net_demand(&self.demand, &self.generation)
    }
}

/// `n` heterogeneous buildings named `{prefix}{index:03}`, each with its own
/// parameter draw derived from `seed`.
pub fn gen_community(prefix: &str, n: usize, seed: u64, days: usize) -> Result<Vec<BuildingData>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| {
            let params = BuildingProfileParams::random(&mut rng);
            let (demand, generation) = gen_building(&params, days)?;
            Ok(BuildingData {
                id: format!("{prefix}{i:03}"),
                params,
                demand,
                generation,
            })
        })
        .collect()
}

/// Pointwise demand minus generation (negative means export).
pub fn net_demand(demand: &TimeSeries, generation: &TimeSeries) -> Result<TimeSeries> {
    if !demand.is_aligned_with(generation) {
        return Err(Error::Misaligned);
    }
    let values = demand
        .values()
        .iter()
        .zip(generation.values())
        .map(|(d, g)| d - g)
        .collect();
    Ok(TimeSeries::new(demand.start_minute(), values))
}

/// Pointwise sum of aligned building series.
pub fn aggregate_community(buildings: &[TimeSeries]) -> Result<TimeSeries> {
    let first = buildings
        .first()
        .ok_or_else(|| Error::invalid("no buildings to aggregate"))?;
    let mut sum = first.values().to_vec();
    for b in &buildings[1..] {
        if !b.is_aligned_with(first) {
            return Err(Error::Misaligned);
        }
        for (s, v) in sum.iter_mut().zip(b.values()) {
            *s += v;
        }
    }
    Ok(TimeSeries::new(first.start_minute(), sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Train on everything before the test month, test on the whole month.
    FullHistory,
    /// Train on the first 28 days of the test month, test on the rest.
    #[serde(rename = "scarce")]
    Scarce28Day,
}

/// Days of the test month a scarce-data building trains on.
pub const SCARCE_TRAIN_DAYS: u32 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_month: Month,
    pub mode: SplitMode,
}

impl SplitSpec {
    /// `[train_from, boundary, test_to)` in minutes, with `train_from`
    /// clipped to the start of `series`.
    pub fn boundaries(&self, series_start: i64) -> (i64, i64, i64) {
        let m0 = self.test_month.start_minute();
        let m1 = self.test_month.end_minute();
        match self.mode {
            SplitMode::FullHistory => (series_start, m0, m1),
            SplitMode::Scarce28Day => (m0, m0 + SCARCE_TRAIN_DAYS as i64 * MINUTES_PER_DAY, m1),
        }
    }
}

pub fn split(series: &TimeSeries, spec: &SplitSpec) -> Result<(TimeSeries, TimeSeries)> {
    let (from, boundary, to) = spec.boundaries(series.start_minute());
    if series.start_minute() > from || series.end_minute() < to {
        return Err(Error::SpanTooShort(format!(
            "{} split of {} needs minutes [{from}, {to}), series covers [{}, {})",
            match spec.mode {
                SplitMode::FullHistory => "full-history",
                SplitMode::Scarce28Day => "scarce",
            },
            spec.test_month,
            series.start_minute(),
            series.end_minute()
        )));
    }
    if boundary <= from {
        return Err(Error::SpanTooShort(format!(
            "no training data before {}",
            spec.test_month
        )));
    }
    Ok((series.between(from, boundary)?, series.between(boundary, to)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BuildingProfileParams {
        BuildingProfileParams {
            base_load: 0.8,
            daily_peak_amp: 1.5,
            peak_hour: 19.0,
            noise_sigma: 0.1,
            pv_capacity: 3.0,
            cloudiness: 0.4,
            seed: 11,
        }
    }

    #[test]
    fn calendar_months() {
        assert_eq!(Month::January.first_day(), 0);
        assert_eq!(Month::April.first_day(), 90);
        assert_eq!(Month::December.last_day(), 364);
        assert_eq!(calendar::month_of_day(119), Month::April);
        assert_eq!(calendar::month_of_day(120), Month::May);
        assert_eq!("Dec".parse::<Month>(), Ok(Month::December));
        assert_eq!("8".parse::<Month>(), Ok(Month::August));
        assert_eq!("april".parse::<Month>(), Ok(Month::April));
        assert!("13".parse::<Month>().is_err());
    }

    #[test]
    fn zero_pv_means_zero_generation() {
        let p = BuildingProfileParams {
            pv_capacity: 0.0,
            ..params()
        };
        let (_, g) = gen_building(&p, 3).unwrap();
        assert_eq!(g.len(), 3 * 96);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_demand_without_peak_or_noise() {
        let p = BuildingProfileParams {
            noise_sigma: 0.0,
            daily_peak_amp: 0.0,
            ..params()
        };
        let (d, _) = gen_building(&p, 2).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.8));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = gen_building(&params(), 5).unwrap();
        let b = gen_building(&params(), 5).unwrap();
        assert_eq!(a, b);
        let other = gen_building(&BuildingProfileParams { seed: 12, ..params() }, 5).unwrap();
        assert_ne!(a.0, other.0);
        // a window regenerated from its first day matches the long run
        let tail = gen_building_from(&params(), 3, 2).unwrap();
        assert_eq!(tail.0, a.0.slice(3 * 96..5 * 96));
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(gen_building(&params(), 0).is_err());
        assert!(gen_building(&BuildingProfileParams { peak_hour: 24.0, ..params() }, 1).is_err());
        assert!(gen_building(&BuildingProfileParams { cloudiness: 1.5, ..params() }, 1).is_err());
        assert!(gen_building(&BuildingProfileParams { base_load: -1.0, ..params() }, 1).is_err());
    }

    #[test]
    fn net_and_aggregate() {
        let d = TimeSeries::new(0, vec![5.0, 1.0]);
        let g = TimeSeries::new(0, vec![2.0, 4.0]);
        assert_eq!(net_demand(&d, &g).unwrap().values(), &[3.0, -3.0]);
        assert_eq!(
            net_demand(&d, &TimeSeries::new(0, vec![1.0])),
            Err(Error::Misaligned)
        );
        assert_eq!(
            net_demand(&d, &TimeSeries::new(15, vec![1.0, 1.0])),
            Err(Error::Misaligned)
        );

        let a = TimeSeries::new(0, vec![3.0, -1.0]);
        let b = TimeSeries::new(0, vec![-1.0, 2.0]);
        assert_eq!(aggregate_community(&[a.clone(), b]).unwrap().values(), &[2.0, 1.0]);
        assert_eq!(aggregate_community(&[a.clone()]).unwrap(), a);
        let zeros = vec![TimeSeries::new(0, vec![0.0; 4]); 100];
        assert_eq!(aggregate_community(&zeros).unwrap().values(), &[0.0; 4]);
        assert!(aggregate_community(&[]).is_err());
    }

    #[test]
    fn full_history_april_split() {
        let s = TimeSeries::new(0, vec![1.0; 150 * 96]);
        let spec = SplitSpec {
            test_month: Month::April,
            mode: SplitMode::FullHistory,
        };
        let (train, test) = split(&s, &spec).unwrap();
        assert_eq!(train.start_minute(), 0);
        assert_eq!(train.len(), 90 * 96); // Jan 1 .. Mar 31
        assert_eq!(test.start_minute(), Month::April.start_minute());
        assert_eq!(test.len(), 30 * 96);
    }

    #[test]
    fn scarce_december_split() {
        let s = TimeSeries::new(0, vec![1.0; 365 * 96]);
        let spec = SplitSpec {
            test_month: Month::December,
            mode: SplitMode::Scarce28Day,
        };
        let (train, test) = split(&s, &spec).unwrap();
        assert_eq!(train.start_minute(), Month::December.start_minute());
        assert_eq!(train.len(), 28 * 96);
        assert_eq!(test.len(), 3 * 96); // Dec 29..31
        assert_eq!(test.start_minute(), train.end_minute());
    }

    #[test]
    fn split_requires_coverage() {
        let may = TimeSeries::new(Month::May.start_minute(), vec![1.0; 60 * 96]);
        let spec = SplitSpec {
            test_month: Month::April,
            mode: SplitMode::FullHistory,
        };
        assert!(matches!(split(&may, &spec), Err(Error::SpanTooShort(_))));
        // starts exactly at the test month: no history to train on
        let april = TimeSeries::new(Month::April.start_minute(), vec![1.0; 30 * 96]);
        assert!(split(&april, &spec).is_err());
        let scarce = SplitSpec {
            mode: SplitMode::Scarce28Day,
            ..spec
        };
        assert!(split(&april, &scarce).is_ok());
    }
}
