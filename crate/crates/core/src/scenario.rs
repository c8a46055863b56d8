//! Physical constants, time grids, consumer demand profiles and scenario
//! configuration.
//!
//! Demand follows G_i(t) = c_i · s_m(t, T_d) / 86400 where s_m is a 24 h
//! periodic cubic spline through hourly shape factors of class m. The factors
//! are synthetic: a warm-water part with sharp morning and evening peaks and a
//! space-heating part with broad peaks whose weight grows with the heating
//! degree of the day. The daily mean of s_m equals one at a daily mean
//! temperature of 0 °C.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

pub const SECONDS_PER_DAY: f64 = 86400.0;
pub const CELSIUS_OFFSET: f64 = 273.15;
pub const PASCAL_PER_BAR: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants<T> {
    /// Density, kg/m³.
    pub rho: T,
    /// Specific heat capacity, J/(kg·K).
    pub cp: T,
    /// Gravitational acceleration, m/s².
    pub g: T,
}

impl<T: Scalar> Default for PhysicalConstants<T> {
    fn default() -> Self {
        Self {
            rho: lit(1000.0),
            cp: lit(4160.0),
            g: lit(9.81),
        }
    }
}

impl<T: Scalar> PhysicalConstants<T> {
    /// Volumetric heat capacity ρ·c_p in J/(m³·K).
    pub fn heat_capacity(&self) -> T {
        self.rho * self.cp
    }

    /// e = ρ·c_p·(T + 273.15).
    pub fn energy_from_celsius(&self, celsius: T) -> T {
        self.heat_capacity() * (celsius + lit(CELSIUS_OFFSET))
    }

    pub fn celsius_from_energy(&self, e: T) -> T {
        e / self.heat_capacity() - lit(CELSIUS_OFFSET)
    }
}

/// Uniform time grid {t0, t0 + dt, …, te}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    pub t0: T,
    pub dt: T,
    pub n_steps: usize,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn new(t0: T, te: T, dt: T) -> Result<Self> {
        if !(dt > T::zero()) || !(te > t0) {
            return Err(Error::InvalidConfig("time grid needs dt > 0 and te > t0".into()));
        }
        let ratio = to_f64((te - t0) / dt);
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} s is not an integral multiple of dt = {} s",
                to_f64(te - t0),
                to_f64(dt)
            )));
        }
        Ok(Self {
            t0,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn te(&self) -> T {
        self.time(self.n_steps)
    }

    pub fn time(&self, k: usize) -> T {
        self.t0 + self.dt * lit(k as f64)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }
}

/// Periodic cubic spline through equidistant knots.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSpline<T: Scalar> {
    offset: T,
    spacing: T,
    values: Vec<T>,
    curvature: Vec<T>,
}

impl<T: Scalar> PeriodicSpline<T> {
    /// Knot k sits at `offset + k·spacing`; the period is `values.len()·spacing`.
    pub fn new(offset: T, spacing: T, values: Vec<T>) -> Result<Self> {
        let n = values.len();
        if n < 3 || !(spacing > T::zero()) {
            return Err(Error::InvalidConfig(
                "periodic spline needs at least three knots and positive spacing".into(),
            ));
        }
        let mut m = DMatrix::<T>::zeros(n, n);
        let mut rhs = DVector::<T>::zeros(n);
        let h2 = spacing * spacing;
        for k in 0..n {
            let prev = (k + n - 1) % n;
            let next = (k + 1) % n;
            m[(k, prev)] += T::one();
            m[(k, k)] += lit(4.0);
            m[(k, next)] += T::one();
            rhs[k] = lit::<T>(6.0) * (values[next] - lit::<T>(2.0) * values[k] + values[prev]) / h2;
        }
        let curvature = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("periodic spline system".into()))?;
        Ok(Self {
            offset,
            spacing,
            values,
            curvature: curvature.iter().copied().collect(),
        })
    }

    pub fn period(&self) -> T {
        self.spacing * lit(self.values.len() as f64)
    }

    pub fn knots(&self) -> &[T] {
        &self.values
    }

    pub fn eval(&self, t: T) -> T {
        let n = self.values.len();
        let period = self.period();
        let mut s = (t - self.offset) % period;
        if s < T::zero() {
            s += period;
        }
        let pos = s / self.spacing;
        let k = (to_f64(pos).floor() as usize).min(n - 1);
        let a = pos - lit(k as f64);
        let b = T::one() - a;
        let next = (k + 1) % n;
        let h2 = self.spacing * self.spacing / lit(6.0);
        b * self.values[k]
            + a * self.values[next]
            + h2 * ((b * b * b - b) * self.curvature[k] + (a * a * a - a) * self.curvature[next])
    }
}

/// Synthetic demand class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemandClass {
    /// Morning and evening peaks.
    Residential,
    /// Plateau during business hours.
    Commercial,
    /// Constant consumption.
    Flat,
}

impl DemandClass {
    pub fn parse(id: &str) -> Result<Self> {
        match id.to_ascii_lowercase().as_str() {
            "residential" | "household" | "0" => Ok(Self::Residential),
            "commercial" | "business" | "1" => Ok(Self::Commercial),
            "flat" | "constant" | "2" => Ok(Self::Flat),
            other => Err(Error::InvalidConfig(format!("unknown demand class {other}"))),
        }
    }
}

/// Hourly shape factors of a demand class, tabulated every 0.5 °C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandProfile {
    pub class: DemandClass,
}

/// Heating limit temperature above which only warm water is consumed.
const HEATING_LIMIT_C: f64 = 15.0;
const WARM_WATER_SHARE: f64 = 0.2;

fn circular_gauss(hour: f64, center: f64, width: f64) -> f64 {
    let mut d = (hour - center).rem_euclid(24.0);
    if d > 12.0 {
        d -= 24.0;
    }
    (-0.5 * (d / width).powi(2)).exp()
}

fn normalized(raw: [f64; 24]) -> [f64; 24] {
    let mean = raw.iter().sum::<f64>() / 24.0;
    raw.map(|x| x / mean)
}

impl DemandProfile {
    pub fn new(class: DemandClass) -> Self {
        Self { class }
    }

    /// Daily mean temperature of the table used for `t_d` (nearest 0.5 °C).
    pub fn table_temperature(t_d: f64) -> f64 {
        (t_d * 2.0).round() / 2.0
    }

    /// Relative heating demand, zero above the heating limit.
    pub fn heating_degree(t_d: f64) -> f64 {
        (HEATING_LIMIT_C - Self::table_temperature(t_d)).max(0.0) / HEATING_LIMIT_C
    }

    fn shapes(&self) -> ([f64; 24], [f64; 24]) {
        let hours: [f64; 24] = std::array::from_fn(|k| k as f64 + 0.5);
        match self.class {
            DemandClass::Residential => (
                normalized(hours.map(|h| {
                    0.3 + circular_gauss(h, 6.0, 1.0) + 0.8 * circular_gauss(h, 18.0, 1.3)
                })),
                normalized(hours.map(|h| {
                    1.0 + 0.45 * circular_gauss(h, 6.0, 2.0) + 0.3 * circular_gauss(h, 18.0, 2.5)
                        - 0.25 * circular_gauss(h, 2.0, 2.5)
                })),
            ),
            DemandClass::Commercial => (
                normalized(hours.map(|h| 0.2 + circular_gauss(h, 12.0, 3.5))),
                normalized(hours.map(|h| 0.6 + 0.6 * circular_gauss(h, 12.0, 4.5))),
            ),
            DemandClass::Flat => ([1.0; 24], [1.0; 24]),
        }
    }

    /// Shape factors of the 24 hours of a day at daily mean temperature `t_d`.
    pub fn hourly_factors(&self, t_d: f64) -> [f64; 24] {
        let (water, heating) = self.shapes();
        let weight = (1.0 - WARM_WATER_SHARE) * Self::heating_degree(t_d);
        std::array::from_fn(|k| WARM_WATER_SHARE * water[k] + weight * heating[k])
    }

    /// Daily mean of the shape factors.
    pub fn daily_level(t_d: f64) -> f64 {
        WARM_WATER_SHARE + (1.0 - WARM_WATER_SHARE) * Self::heating_degree(t_d)
    }

    /// Spline interpolant s_m(·, T_d) with knots at the hour centers.
    pub fn spline<T: Scalar>(&self, t_d: f64) -> PeriodicSpline<T> {
        let f = self.hourly_factors(t_d);
        PeriodicSpline::new(lit(1800.0), lit(3600.0), f.iter().map(|&x| lit(x)).collect())
            .expect("24 knots with positive spacing")
    }
}

/// G_i(t) = c_i · s(t) / 86400 on the grid points.
pub fn demand_signal<T: Scalar>(profile: &DemandProfile, c_i: T, t_d: f64, times: &[T]) -> Vec<T> {
    let spline = profile.spline::<T>(t_d);
    let day = lit::<T>(SECONDS_PER_DAY);
    times
        .iter()
        .map(|&t| (c_i * spline.eval(t) / day).max(T::zero()))
        .collect()
}

/// Demand of every consumer of a network as a function of time.
#[derive(Debug, Clone)]
pub struct ConsumerDemand<T: Scalar> {
    splines: Vec<PeriodicSpline<T>>,
    class_of: Vec<usize>,
    scale: Vec<T>,
}

impl<T: Scalar> ConsumerDemand<T> {
    /// Builds the demand from consumer class ids and daily energies.
    pub fn from_consumers<'a>(
        consumers: impl IntoIterator<Item = (&'a str, T)>,
        t_d: f64,
    ) -> Result<Self> {
        let mut classes: Vec<DemandClass> = Vec::new();
        let mut splines = Vec::new();
        let mut class_of = Vec::new();
        let mut scale = Vec::new();
        let day = lit::<T>(SECONDS_PER_DAY);
        for (class_id, c) in consumers {
            let class = DemandClass::parse(class_id)?;
            let idx = match classes.iter().position(|&k| k == class) {
                Some(i) => i,
                None => {
                    classes.push(class);
                    splines.push(DemandProfile::new(class).spline(t_d));
                    classes.len() - 1
                }
            };
            class_of.push(idx);
            scale.push(c / day);
        }
        Ok(Self {
            splines,
            class_of,
            scale,
        })
    }

    /// Demand that does not change over time, in W per consumer.
    pub fn constant(power: &[T]) -> Self {
        let flat = PeriodicSpline::new(T::zero(), lit(3600.0), vec![T::one(); 24]).expect("flat spline");
        Self {
            splines: vec![flat],
            class_of: vec![0; power.len()],
            scale: power.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    /// Demand of every consumer at time t, W.
    pub fn at(&self, t: T) -> DVector<T> {
        let values: Vec<T> = self.splines.iter().map(|s| s.eval(t)).collect();
        DVector::from_iterator(
            self.scale.len(),
            self.class_of
                .iter()
                .zip(&self.scale)
                .map(|(&k, &c)| (c * values[k]).max(T::zero())),
        )
    }

    /// Σ_i G_i(t).
    pub fn total(&self, t: T) -> T {
        self.at(t).sum()
    }
}

/// Statistics of the aggregated demand used for the feed-in cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandStats<T> {
    /// Daily mean G₀ of ΣG, W.
    pub mean: T,
    /// Daily maximum Ḡ of ΣG, W.
    pub max: T,
    /// Feed-in cap P̄ = G₀ + factor·(Ḡ - G₀), W.
    pub cap: T,
}

/// Mean and maximum of ΣG over the second 24 h period of the grid (the
/// first one if the horizon is shorter than two days).
pub fn aggregate_stats<T: Scalar>(total: &[T], grid: &TimeGrid<T>, factor: T) -> DemandStats<T> {
    let day = lit::<T>(SECONDS_PER_DAY);
    let start = if grid.te() - grid.t0 >= day + day { grid.t0 + day } else { grid.t0 };
    let end = start + day;
    let eps = grid.dt * lit(1e-9);
    let window: Vec<T> = (0..grid.len())
        .filter(|&k| {
            let t = grid.time(k);
            t >= start - eps && t < end - eps
        })
        .map(|k| total[k])
        .collect();
    let window = if window.is_empty() { total.to_vec() } else { window };
    let mean = window.iter().copied().fold(T::zero(), |a, b| a + b) / lit(window.len() as f64);
    let max = window.iter().copied().fold(window[0], T::max);
    DemandStats {
        mean,
        max,
        cap: mean + factor * (max - mean),
    }
}

fn d_t_d() -> f64 {
    3.0
}
fn d_t_min() -> f64 {
    75.0
}
fn d_t_max() -> f64 {
    110.0
}
fn d_p_min() -> f64 {
    3.5
}
fn d_p_max() -> f64 {
    9.1
}
fn d_spread() -> f64 {
    2.5
}
fn d_factor() -> f64 {
    0.5
}
fn d_relax() -> f64 {
    24.0
}
fn d_t0() -> f64 {
    0.0
}
fn d_te() -> f64 {
    72.0
}
fn d_dt() -> f64 {
    300.0
}
fn d_return() -> f64 {
    45.0
}
fn d_eta1() -> f64 {
    5e7
}
fn d_eta2() -> f64 {
    90.0
}
fn d_harmonics() -> usize {
    12
}
fn d_initial() -> f64 {
    90.0
}
fn d_reynolds() -> f64 {
    1e5
}
fn d_floor() -> f64 {
    1.0
}

/// Scenario file contents. Temperatures in °C, pressures in bar, times in
/// hours except the step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(rename = "T_d_C", default = "d_t_d")]
    pub t_d_c: f64,
    #[serde(rename = "T_min_cons_C", default = "d_t_min")]
    pub t_min_cons_c: f64,
    #[serde(rename = "T_net_max_C", default = "d_t_max")]
    pub t_net_max_c: f64,
    #[serde(default = "d_p_min")]
    pub p_min_bar: f64,
    #[serde(default = "d_p_max")]
    pub p_max_bar: f64,
    #[serde(default = "d_spread")]
    pub dp_spread_bar: f64,
    /// P̄ = G₀ + feedin_factor·(Ḡ - G₀).
    #[serde(default = "d_factor")]
    pub feedin_factor: f64,
    /// Window at the start of the horizon in which the cap is relaxed to Ḡ.
    #[serde(default = "d_relax")]
    pub feedin_relax_h: f64,
    #[serde(default = "d_t0")]
    pub t0_h: f64,
    #[serde(default = "d_te")]
    pub te_h: f64,
    #[serde(default = "d_dt")]
    pub dt_s: f64,
    #[serde(rename = "T_return_C", default = "d_return")]
    pub t_return_c: f64,
    #[serde(default = "d_eta1")]
    pub eta1_s2: f64,
    #[serde(rename = "eta2_C", default = "d_eta2")]
    pub eta2_c: f64,
    #[serde(default = "d_harmonics")]
    pub harmonics: usize,
    #[serde(rename = "initial_control_C", default = "d_initial")]
    pub initial_control_c: f64,
    #[serde(default = "d_reynolds")]
    pub reference_reynolds: f64,
    /// Lower bound on consumer supply minus return temperature.
    #[serde(rename = "energy_floor_K", default = "d_floor")]
    pub energy_floor_k: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all scenario keys have defaults")
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt_s > 0.0) {
            return bad("dt_s must be positive".into());
        }
        let _ = self.grid::<f64>()?;
        if self.p_max_bar < self.p_min_bar {
            return bad("p_max_bar is below p_min_bar".into());
        }
        if self.dp_spread_bar > self.p_max_bar - self.p_min_bar + 1e-12 || self.dp_spread_bar < 0.0 {
            return bad(format!(
                "pressure spread limit {} bar must lie in [0, p_max - p_min = {} bar]",
                self.dp_spread_bar,
                self.p_max_bar - self.p_min_bar
            ));
        }
        if self.t_min_cons_c <= self.t_return_c {
            return bad("minimum consumer temperature must exceed the return temperature".into());
        }
        if self.initial_control_c <= self.t_return_c + self.energy_floor_k {
            return bad("initial control temperature is too close to the return temperature".into());
        }
        if self.eta1_s2 < 0.0 {
            return bad("eta1_s2 must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.feedin_factor) {
            return bad("feedin_factor must lie in [0, 1]".into());
        }
        if !(self.energy_floor_k > 0.0) {
            return bad("energy_floor_K must be positive".into());
        }
        Ok(())
    }

    pub fn grid<T: Scalar>(&self) -> Result<TimeGrid<T>> {
        TimeGrid::new(lit(self.t0_h * 3600.0), lit(self.te_h * 3600.0), lit(self.dt_s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_conversion() {
        let c = PhysicalConstants::<f64>::default();
        let e = c.energy_from_celsius(90.0);
        assert!((e - 1.5107e9).abs() < 1e5);
        assert!((c.celsius_from_energy(e) - 90.0).abs() < 1e-10);
        assert!((c.energy_from_celsius(75.0) - 1000.0 * 4160.0 * 348.15).abs() < 1e-3);
    }

    #[test]
    fn spline_interpolates_and_is_periodic() {
        let vals: Vec<f64> = (0..24).map(|k| 1.0 + (k as f64 * 0.7).sin()).collect();
        let s = PeriodicSpline::new(1800.0, 3600.0, vals.clone()).unwrap();
        for (k, v) in vals.iter().enumerate() {
            let t = 1800.0 + 3600.0 * k as f64;
            assert!((s.eval(t) - v).abs() < 1e-12);
            assert!((s.eval(t + 86400.0) - v).abs() < 1e-12);
        }
        assert!((s.eval(100.0) - s.eval(100.0 - 86400.0)).abs() < 1e-12);
    }

    #[test]
    fn flat_profile_gives_constant_demand() {
        let p = DemandProfile::new(DemandClass::Flat);
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 977.0).collect();
        let g = demand_signal(&p, 8.64e9, 0.0, &times);
        assert!(g.iter().all(|&x| (x - 1e5).abs() < 1e-6));
    }

    #[test]
    fn daily_energy_normalization() {
        let p = DemandProfile::new(DemandClass::Residential);
        let grid = TimeGrid::new(0.0, 86400.0, 60.0).unwrap();
        let times = grid.times();
        let c = 5e9;
        for &t_d in &[0.0, -3.0, 7.5] {
            let g = demand_signal(&p, c, t_d, &times);
            let energy: f64 = g[..grid.n_steps].iter().sum::<f64>() * 60.0;
            let expected = c * DemandProfile::daily_level(t_d);
            assert!((energy - expected).abs() < 1e-6 * expected, "{energy} {expected}");
        }
    }

    #[test]
    fn colder_days_demand_more_everywhere() {
        let p = DemandProfile::new(DemandClass::Residential);
        let times: Vec<f64> = (0..288).map(|k| k as f64 * 300.0).collect();
        let cold = demand_signal(&p, 1e9, -3.0, &times);
        let warm = demand_signal(&p, 1e9, 7.5, &times);
        assert!(cold.iter().zip(&warm).all(|(c, w)| c > w));
        assert!(cold.iter().all(|&x| x > 0.0));
        let morning = cold[6 * 12];
        let night = cold[3 * 12];
        assert!(morning > night);
    }

    #[test]
    fn aggregate_stats_examples() {
        let grid = TimeGrid::new(0.0, 3.0 * 86400.0, 300.0).unwrap();
        let constant = vec![5.0; grid.len()];
        let s = aggregate_stats(&constant, &grid, 0.5);
        assert_eq!((s.mean, s.max, s.cap), (5.0, 5.0, 5.0));
        let w = 2.0 * std::f64::consts::PI / 86400.0;
        let sine: Vec<f64> = grid.times().iter().map(|t| 1.0 + (w * t).sin()).collect();
        let s = aggregate_stats(&sine, &grid, 0.5);
        assert!((s.mean - 1.0).abs() < 1e-12 && (s.max - 2.0).abs() < 1e-12 && (s.cap - 1.5).abs() < 1e-12);
        let tc1: Vec<f64> = grid.times().iter().map(|t| 1.64e6 + 0.65e6 * (w * t).sin()).collect();
        let s = aggregate_stats(&tc1, &grid, 0.5);
        assert!((s.cap - 1.965e6).abs() < 1e-6);
    }

    #[test]
    fn scenario_defaults_and_validation() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid::<f64>().unwrap().n_steps, 864);
        let bad = ScenarioConfig::from_json(r#"{"dp_spread_bar": 7.0}"#, "x");
        assert!(matches!(bad, Err(Error::InvalidConfig(_))));
        assert!(matches!(ScenarioConfig::from_json(r#"{"bogus": 1}"#, "x"), Err(Error::Parse { .. })));
        assert!(TimeGrid::new(0.0, 1000.0, 300.0).is_err());
    }
}
