//! Online appliance models and the appliance database.
//!
//! Each appliance carries four Gaussian summaries: ON power, OFF (standby)
//! power, ON duration and OFF duration. Powers are in watts, durations in
//! minutes. The standby summary is kept for completeness but nothing in the
//! tracker reads it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest standard deviation used when scoring a power observation.
pub const POWER_SIGMA_FLOOR: f64 = 5.0;
/// Smallest standard deviation used when scoring a duration, in minutes.
pub const DURATION_SIGMA_FLOOR: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("statistic has no observations")]
    EmptyStat,
    #[error("appliance {0} is already on")]
    AlreadyOn(ApplianceId),
    #[error("appliance {0} is already off")]
    AlreadyOff(ApplianceId),
    #[error("no appliance with id {0}")]
    UnknownAppliance(ApplianceId),
    #[error("database line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Running mean and variance (Welford), with a floor on the standard
/// deviation applied whenever the distribution is read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStat {
    pub count: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    pub sigma_floor: f64,
}

impl GaussianStat {
    pub fn new(sigma_floor: f64) -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            sigma_floor,
        }
    }

    pub fn power() -> Self {
        Self::new(POWER_SIGMA_FLOOR)
    }

    pub fn duration() -> Self {
        Self::new(DURATION_SIGMA_FLOOR)
    }

    pub fn from_values(sigma_floor: f64, values: impl IntoIterator<Item = f64>) -> Self {
        let mut s = Self::new(sigma_floor);
        values.into_iter().for_each(|v| s.update(v));
        s
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard deviation with the floor applied.
    pub fn sigma(&self) -> f64 {
        self.std_dev().max(self.sigma_floor)
    }

    pub fn pdf(&self, x: f64) -> Result<f64, ModelError> {
        self.log_pdf(x).map(f64::exp)
    }

    pub fn log_pdf(&self, x: f64) -> Result<f64, ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyStat);
        }
        let sigma = self.sigma();
        let z = (x - self.mean) / sigma;
        Ok(-0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln())
    }

    /// Distance of `x` from the mean in (floored) standard deviations.
    pub fn mahalanobis(&self, x: f64) -> Result<f64, ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyStat);
        }
        Ok((x - self.mean).abs() / self.sigma())
    }

    /// Pool two summaries as if all observations had been seen by one.
    pub fn combine(&self, other: &GaussianStat) -> GaussianStat {
        if other.count == 0 {
            return *self;
        }
        if self.count == 0 {
            return GaussianStat {
                sigma_floor: self.sigma_floor,
                ..*other
            };
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        GaussianStat {
            count: self.count + other.count,
            mean: (n_a * self.mean + n_b * other.mean) / n,
            m2: self.m2 + other.m2 + delta * delta * n_a * n_b / n,
            sigma_floor: self.sigma_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ApplianceId(pub u32);

impl fmt::Display for ApplianceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplianceState {
    On,
    Off,
}

impl fmt::Display for ApplianceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApplianceState::On => "ON",
            ApplianceState::Off => "OFF",
        })
    }
}

impl FromStr for ApplianceState {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "ON" => Ok(ApplianceState::On),
            "OFF" => Ok(ApplianceState::Off),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplianceModel {
    pub id: ApplianceId,
    pub state: ApplianceState,
    /// ON step magnitude, watts.
    pub p_on: GaussianStat,
    /// Standby power, watts. Not used for tracking.
    pub p_off: GaussianStat,
    /// ON duration, minutes.
    pub d_on: GaussianStat,
    /// OFF duration, minutes.
    pub d_off: GaussianStat,
    /// Power attributed to this appliance at every processed sample.
    pub trace: Vec<f64>,
    pub last_transition_index: Option<usize>,
    /// Power drawn during the current activation; zero while OFF.
    pub current_power: f64,
}

impl ApplianceModel {
    pub fn new(id: ApplianceId) -> Self {
        Self {
            id,
            state: ApplianceState::Off,
            p_on: GaussianStat::power(),
            p_off: GaussianStat::power(),
            d_on: GaussianStat::duration(),
            d_off: GaussianStat::duration(),
            trace: Vec::new(),
            last_transition_index: None,
            current_power: 0.0,
        }
    }

    pub fn is_on(&self) -> bool {
        self.state == ApplianceState::On
    }

    /// Integer watt values within three standard deviations of the ON power
    /// mean, never below 1 W.
    pub fn candidate_powers(&self) -> Vec<u32> {
        if self.p_on.is_empty() {
            return Vec::new();
        }
        let sigma = self.p_on.sigma();
        let lo = (self.p_on.mean - 3.0 * sigma).round().max(1.0);
        let hi = (self.p_on.mean + 3.0 * sigma).round();
        if hi < lo {
            return Vec::new();
        }
        (lo as u32..=hi as u32).collect()
    }

    pub fn mahalanobis(&self, delta: f64) -> Result<f64, ModelError> {
        self.p_on.mahalanobis(delta)
    }

    pub fn turn_on(&mut self, index: usize, delta: f64, sample_period: f64) -> Result<(), ModelError> {
        if self.is_on() {
            return Err(ModelError::AlreadyOn(self.id));
        }
        if let Some(last) = self.last_transition_index {
            self.d_off.update(minutes_between(last, index, sample_period));
        }
        self.state = ApplianceState::On;
        self.current_power = delta;
        self.last_transition_index = Some(index);
        Ok(())
    }

    pub fn turn_off(&mut self, index: usize, sample_period: f64) -> Result<(), ModelError> {
        if !self.is_on() {
            return Err(ModelError::AlreadyOff(self.id));
        }
        self.p_on.update(self.current_power);
        if let Some(last) = self.last_transition_index {
            self.d_on.update(minutes_between(last, index, sample_period));
        }
        self.state = ApplianceState::Off;
        self.current_power = 0.0;
        self.last_transition_index = Some(index);
        Ok(())
    }

    /// Sum of the appliance trace in watt-samples.
    pub fn trace_sum(&self) -> f64 {
        self.trace.iter().sum()
    }
}

fn minutes_between(from: usize, to: usize, sample_period: f64) -> f64 {
    to.saturating_sub(from) as f64 * sample_period / 60.0
}

/// The set of appliances discovered so far, plus the running minimum of the
/// aggregate (the always-on baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct ApplianceDb {
    pub appliances: Vec<ApplianceModel>,
    pub min_on_power: Option<f64>,
    pub sample_period: f64,
}

impl ApplianceDb {
    pub fn new(sample_period: f64) -> Self {
        Self {
            appliances: Vec::new(),
            min_on_power: None,
            sample_period,
        }
    }

    pub fn len(&self) -> usize {
        self.appliances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.appliances.is_empty()
    }

    pub fn get(&self, id: ApplianceId) -> Option<&ApplianceModel> {
        self.appliances.iter().find(|a| a.id == id)
    }

    pub fn get_mut(&mut self, id: ApplianceId) -> Result<&mut ApplianceModel, ModelError> {
        self.appliances
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or(ModelError::UnknownAppliance(id))
    }

    fn next_id(&self) -> ApplianceId {
        ApplianceId(self.appliances.iter().map(|a| a.id.0).max().unwrap_or(0) + 1)
    }

    /// Register a newly discovered appliance, already ON at `index` with
    /// power `delta`. `processed` is the number of samples seen so far; the
    /// new trace is zero-filled up to it.
    pub fn add_new(&mut self, delta: f64, index: usize, processed: usize) -> ApplianceId {
        let id = self.next_id();
        let mut model = ApplianceModel::new(id);
        model.p_on.update(delta);
        model.state = ApplianceState::On;
        model.current_power = delta;
        model.last_transition_index = Some(index);
        model.trace = vec![0.0; processed];
        self.appliances.push(model);
        id
    }

    pub fn update_min_power(&mut self, y: f64) {
        self.min_on_power = Some(match self.min_on_power {
            Some(m) if m <= y => m,
            _ => y,
        });
    }

    pub fn baseline(&self) -> f64 {
        self.min_on_power.unwrap_or(0.0)
    }

    /// Text dump: `#` metadata lines, a header, then one CSV record per
    /// appliance. See [`DB_HEADER`] for the column order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# sample_period={}\n", self.sample_period));
        match self.min_on_power {
            Some(m) => out.push_str(&format!("# min_on_power={m}\n")),
            None => out.push_str("# min_on_power=none\n"),
        }
        out.push_str(DB_HEADER);
        out.push('\n');
        for a in &self.appliances {
            let last = a.last_transition_index.map(|i| i.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}", a.id, a.state, a.current_power, last));
            for s in [&a.p_on, &a.p_off, &a.d_on, &a.d_off] {
                out.push_str(&format!(",{},{},{},{}", s.count, s.mean, s.m2, s.sigma_floor));
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`ApplianceDb::dump`]. Appliance traces are not part of
    /// the dump and come back empty.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut db = ApplianceDb::new(1.0);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let bad = |reason: &str| ModelError::Malformed {
                line,
                reason: reason.to_string(),
            };
            let row = raw.trim();
            if row.is_empty() || row == DB_HEADER {
                continue;
            }
            if let Some(meta) = row.strip_prefix('#') {
                if let Some((key, value)) = meta.trim().split_once('=') {
                    match key.trim() {
                        "sample_period" => {
                            db.sample_period = value.trim().parse().map_err(|_| bad("bad sample_period"))?
                        }
                        "min_on_power" => {
                            db.min_on_power = match value.trim() {
                                "none" => None,
                                v => Some(v.parse().map_err(|_| bad("bad min_on_power"))?),
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            if fields.len() != 20 {
                return Err(bad("expected 20 fields"));
            }
            let num = |k: usize| fields[k].parse::<f64>().map_err(|_| bad("bad number"));
            let id = ApplianceId(fields[0].parse().map_err(|_| bad("bad id"))?);
            let mut model = ApplianceModel::new(id);
            model.state = fields[1].parse().map_err(|_| bad("bad state"))?;
            model.current_power = num(2)?;
            model.last_transition_index = match fields[3] {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("bad index"))?),
            };
            let stat = |k: usize| -> Result<GaussianStat, ModelError> {
                Ok(GaussianStat {
                    count: fields[k].parse().map_err(|_| bad("bad count"))?,
                    mean: num(k + 1)?,
                    m2: num(k + 2)?,
                    sigma_floor: num(k + 3)?,
                })
            };
            model.p_on = stat(4)?;
            model.p_off = stat(8)?;
            model.d_on = stat(12)?;
            model.d_off = stat(16)?;
            db.appliances.push(model);
        }
        Ok(db)
    }
}

pub const DB_HEADER: &str = "id,state,current_power,last_transition_index,\
p_on_count,p_on_mean,p_on_m2,p_on_floor,\
p_off_count,p_off_mean,p_off_m2,p_off_floor,\
d_on_count,d_on_mean,d_on_m2,d_on_floor,\
d_off_count,d_off_mean,d_off_m2,d_off_floor";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn first_observation() {
        let mut s = GaussianStat::power();
        s.update(100.0);
        assert_eq!(s.count, 1);
        assert_eq!(s.mean, 100.0);
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.sigma(), POWER_SIGMA_FLOOR);
    }

    #[test]
    fn two_point_variance() {
        let s = GaussianStat::from_values(5.0, [90.0, 110.0]);
        assert_eq!(s.mean, 100.0);
        assert_eq!(s.variance(), 200.0);
    }

    #[test]
    fn matches_two_pass_on_random_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let values: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..5000.0)).collect();
        let s = GaussianStat::from_values(5.0, values.iter().copied());
        let (mean, var) = two_pass(&values);
        assert!(rel_close(s.mean, mean, 1e-9));
        assert!(rel_close(s.variance(), var, 1e-9));
    }

    #[test]
    fn pdf_shape() {
        let s = GaussianStat {
            count: 10,
            mean: 100.0,
            m2: 900.0, // variance 100
            sigma_floor: 5.0,
        };
        let peak = s.pdf(100.0).unwrap();
        assert!((peak - 0.039_894_228).abs() < 1e-8);
        assert!((s.pdf(110.0).unwrap() - peak * (-0.5f64).exp()).abs() < 1e-12);
        assert!((s.pdf(90.0).unwrap() - peak * (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(GaussianStat::power().pdf(1.0), Err(ModelError::EmptyStat));
    }

    #[test]
    fn pdf_single_observation_uses_floor() {
        let s = GaussianStat::from_values(POWER_SIGMA_FLOOR, [500.0]);
        let expected = 1.0 / (5.0 * (2.0 * PI).sqrt());
        assert!((s.pdf(500.0).unwrap() - expected).abs() < 1e-12);
    }

    fn with_power(mean: f64, sigma: f64) -> ApplianceModel {
        let mut a = ApplianceModel::new(ApplianceId(1));
        a.p_on = GaussianStat {
            count: 2,
            mean,
            m2: sigma * sigma,
            sigma_floor: POWER_SIGMA_FLOOR,
        };
        a
    }

    #[test]
    fn candidate_power_ranges() {
        let c = with_power(500.0, 5.0).candidate_powers();
        assert_eq!(c.len(), 31);
        assert_eq!((c[0], c[30]), (485, 515));
        let c = with_power(100.0, 50.0).candidate_powers();
        assert_eq!((c[0], *c.last().unwrap()), (1, 250));
        let c = with_power(1500.0, 10.0).candidate_powers();
        assert_eq!((c[0], *c.last().unwrap()), (1470, 1530));
        // a floored sigma behaves like sigma 5
        let c = with_power(500.0, 1.0).candidate_powers();
        assert_eq!(c.len(), 31);
    }

    #[test]
    fn mahalanobis_distances() {
        assert_eq!(with_power(500.0, 10.0).mahalanobis(500.0).unwrap(), 0.0);
        assert_eq!(with_power(500.0, 10.0).mahalanobis(600.0).unwrap(), 10.0);
        assert_eq!(with_power(500.0, 5.0).mahalanobis(610.0).unwrap(), 22.0);
        assert_eq!(ApplianceModel::new(ApplianceId(1)).mahalanobis(1.0), Err(ModelError::EmptyStat));
    }

    #[test]
    fn state_machine() {
        let mut a = ApplianceModel::new(ApplianceId(7));
        a.turn_on(100, 500.0, 1.0).unwrap();
        assert!(a.is_on());
        assert_eq!(a.current_power, 500.0);
        assert!(a.d_off.is_empty());
        assert_eq!(a.turn_on(101, 500.0, 1.0), Err(ModelError::AlreadyOn(ApplianceId(7))));

        a.turn_off(1900, 1.0).unwrap();
        assert_eq!(a.p_on.count, 1);
        assert_eq!(a.p_on.mean, 500.0);
        assert_eq!(a.d_on.mean, 30.0);
        assert_eq!(a.current_power, 0.0);
        assert_eq!(a.turn_off(1901, 1.0), Err(ModelError::AlreadyOff(ApplianceId(7))));

        a.turn_on(2500, 510.0, 1.0).unwrap();
        assert_eq!(a.d_off.count, 1);
        assert_eq!(a.d_off.mean, 10.0);
    }

    #[test]
    fn add_new_seeds_and_counts() {
        let mut db = ApplianceDb::new(1.0);
        let id = db.add_new(1500.0, 10, 10);
        assert_eq!(id, ApplianceId(1));
        let a = db.get(id).unwrap();
        assert!(a.is_on());
        assert_eq!(a.p_on.mean, 1500.0);
        assert_eq!(a.trace.len(), 10);
        assert!(a.d_on.is_empty() && a.d_off.is_empty());

        db.add_new(60.0, 11, 11);
        assert_eq!(db.add_new(200.0, 12, 12), ApplianceId(3));
        assert_eq!(db.len(), 3);

        // first full cycle: one observation from discovery, one at close
        let a = db.get_mut(ApplianceId(1)).unwrap();
        a.turn_off(20, 1.0).unwrap();
        assert_eq!(a.p_on.count, 2);
    }

    #[test]
    fn minimum_power() {
        let mut db = ApplianceDb::new(1.0);
        db.update_min_power(120.0);
        assert_eq!(db.min_on_power, Some(120.0));
        db.min_on_power = Some(50.0);
        db.update_min_power(44.0);
        assert_eq!(db.min_on_power, Some(44.0));
        db.update_min_power(700.0);
        assert_eq!(db.min_on_power, Some(44.0));
    }

    #[test]
    fn dump_parse_round_trip() {
        let mut db = ApplianceDb::new(1.0);
        db.add_new(1500.0, 3, 3);
        db.add_new(130.5, 9, 9);
        db.get_mut(ApplianceId(1)).unwrap().turn_off(60, 1.0).unwrap();
        db.update_min_power(44.25);
        let mut back = ApplianceDb::parse(&db.dump()).unwrap();
        for a in &mut db.appliances {
            a.trace.clear();
        }
        back.sample_period = db.sample_period;
        assert_eq!(back, db);
        assert!(ApplianceDb::parse("1,ON,5\n").is_err());
    }

    proptest! {
        #[test]
        fn order_independent_mean(mut values in prop::collection::vec(0.0f64..10_000.0, 1..300), seed in any::<u64>()) {
            let forward = GaussianStat::from_values(5.0, values.iter().copied());
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            values.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = GaussianStat::from_values(5.0, values.iter().copied());
            prop_assert!(rel_close(forward.mean, shuffled.mean, 1e-9));
        }

        #[test]
        fn combine_equals_sequential(
            a in prop::collection::vec(0.0f64..5000.0, 0..50),
            b in prop::collection::vec(0.0f64..5000.0, 0..50),
        ) {
            let all = GaussianStat::from_values(5.0, a.iter().chain(&b).copied());
            let pooled = GaussianStat::from_values(5.0, a.iter().copied())
                .combine(&GaussianStat::from_values(5.0, b.iter().copied()));
            prop_assert_eq!(pooled.count, all.count);
            prop_assert!((pooled.mean - all.mean).abs() <= 1e-9 * all.mean.abs().max(1.0));
            prop_assert!((pooled.m2 - all.m2).abs() <= 1e-7 * all.m2.abs().max(1.0));
        }

        #[test]
        fn mahalanobis_zero_at_mean(values in prop::collection::vec(1.0f64..5000.0, 1..20)) {
            let mut a = ApplianceModel::new(ApplianceId(1));
            a.p_on = GaussianStat::from_values(POWER_SIGMA_FLOOR, values);
            prop_assert_eq!(a.mahalanobis(a.p_on.mean).unwrap(), 0.0);
        }
    }
}
