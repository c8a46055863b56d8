//! Feed-in control signals u_T(t).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::scenario::SECONDS_PER_DAY;

/// A control signal depending linearly on a parameter vector κ.
pub trait ControlSignal<T: Scalar>: Sync {
    fn value(&self, t: T) -> T;
    /// du/dt.
    fn rate(&self, t: T) -> T;
    fn n_params(&self) -> usize;
    /// ∂u(t)/∂κ.
    fn gradient(&self, t: T) -> DVector<T>;
    /// ∂u̇(t)/∂κ.
    fn rate_gradient(&self, t: T) -> DVector<T>;
    /// Energy density the network is filled with initially.
    fn initial_level(&self) -> T;
    fn initial_gradient(&self) -> DVector<T>;
}

/// u(t) = κ₀.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantControl<T>(pub T);

impl<T: Scalar> ControlSignal<T> for ConstantControl<T> {
    fn value(&self, _t: T) -> T {
        self.0
    }
    fn rate(&self, _t: T) -> T {
        T::zero()
    }
    fn n_params(&self) -> usize {
        1
    }
    fn gradient(&self, _t: T) -> DVector<T> {
        DVector::from_element(1, T::one())
    }
    fn rate_gradient(&self, _t: T) -> DVector<T> {
        DVector::zeros(1)
    }
    fn initial_level(&self) -> T {
        self.0
    }
    fn initial_gradient(&self) -> DVector<T> {
        DVector::from_element(1, T::one())
    }
}

/// u(t) = c₀ + Σ_k c_k cos(kωt) + s_k sin(kωt), ω = 2π/86400 s.
/// Parameters are ordered [c₀, c₁..c_K, s₁..s_K].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierControl<T: Scalar> {
    pub coefficients: DVector<T>,
    pub harmonics: usize,
}

impl<T: Scalar> FourierControl<T> {
    pub fn new(coefficients: DVector<T>) -> Result<Self> {
        if coefficients.len() % 2 != 1 {
            return Err(Error::InvalidConfig(format!(
                "a Fourier control needs 2K+1 coefficients, got {}",
                coefficients.len()
            )));
        }
        let harmonics = coefficients.len() / 2;
        Ok(Self {
            coefficients,
            harmonics,
        })
    }

    pub fn constant(c0: T, harmonics: usize) -> Self {
        let mut coefficients = DVector::zeros(2 * harmonics + 1);
        coefficients[0] = c0;
        Self {
            coefficients,
            harmonics,
        }
    }

    pub fn omega() -> T {
        lit(2.0 * std::f64::consts::PI / SECONDS_PER_DAY)
    }

    /// Basis functions [1, cos(kωt).., sin(kωt)..] at t.
    pub fn basis(&self, t: T) -> DVector<T> {
        let k = self.harmonics;
        let w = Self::omega();
        let mut b = DVector::zeros(2 * k + 1);
        b[0] = T::one();
        for j in 1..=k {
            let (s, c) = (w * lit(j as f64) * t).sin_cos();
            b[j] = c;
            b[k + j] = s;
        }
        b
    }

    pub fn rate_basis(&self, t: T) -> DVector<T> {
        let k = self.harmonics;
        let w = Self::omega();
        let mut b = DVector::zeros(2 * k + 1);
        for j in 1..=k {
            let kw = w * lit(j as f64);
            let (s, c) = (kw * t).sin_cos();
            b[j] = -kw * s;
            b[k + j] = kw * c;
        }
        b
    }
}

impl<T: Scalar> ControlSignal<T> for FourierControl<T> {
    fn value(&self, t: T) -> T {
        self.basis(t).dot(&self.coefficients)
    }
    fn rate(&self, t: T) -> T {
        self.rate_basis(t).dot(&self.coefficients)
    }
    fn n_params(&self) -> usize {
        self.coefficients.len()
    }
    fn gradient(&self, t: T) -> DVector<T> {
        self.basis(t)
    }
    fn rate_gradient(&self, t: T) -> DVector<T> {
        self.rate_basis(t)
    }
    fn initial_level(&self) -> T {
        self.coefficients[0]
    }
    fn initial_gradient(&self) -> DVector<T> {
        let mut g = DVector::zeros(self.coefficients.len());
        g[0] = T::one();
        g
    }
}

/// Piecewise linear interpolation of sampled values; constant outside the
/// sample range. Has no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledControl<T> {
    times: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> SampledControl<T> {
    pub fn new(times: Vec<T>, values: Vec<T>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidConfig("control samples need matching, nonempty columns".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("control sample times must increase".into()));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    fn segment(&self, t: T) -> Option<usize> {
        if t <= self.times[0] || t >= *self.times.last().expect("nonempty") {
            return None;
        }
        Some(self.times.partition_point(|&s| s <= t) - 1)
    }
}

impl<T: Scalar> ControlSignal<T> for SampledControl<T> {
    fn value(&self, t: T) -> T {
        match self.segment(t) {
            Some(k) => {
                let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
                self.values[k] + w * (self.values[k + 1] - self.values[k])
            }
            None if t <= self.times[0] => self.values[0],
            None => *self.values.last().expect("nonempty"),
        }
    }
    fn rate(&self, t: T) -> T {
        match self.segment(t) {
            Some(k) => (self.values[k + 1] - self.values[k]) / (self.times[k + 1] - self.times[k]),
            None => T::zero(),
        }
    }
    fn n_params(&self) -> usize {
        0
    }
    fn gradient(&self, _t: T) -> DVector<T> {
        DVector::zeros(0)
    }
    fn rate_gradient(&self, _t: T) -> DVector<T> {
        DVector::zeros(0)
    }
    fn initial_level(&self) -> T {
        self.values[0]
    }
    fn initial_gradient(&self) -> DVector<T> {
        DVector::zeros(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_value_and_rate() {
        let mut k = DVector::zeros(5);
        k[0] = 2.0;
        k[1] = 0.5;
        k[4] = -0.25;
        let u = FourierControl::new(k).unwrap();
        let w = FourierControl::<f64>::omega();
        let t = 12345.0;
        let expect = 2.0 + 0.5 * (w * t).cos() - 0.25 * (2.0 * w * t).sin();
        assert!((u.value(t) - expect).abs() < 1e-14);
        let h = 1e-2;
        let fd = (u.value(t + h) - u.value(t - h)) / (2.0 * h);
        assert!((u.rate(t) - fd).abs() < 1e-9);
        assert!((u.value(t + SECONDS_PER_DAY) - u.value(t)).abs() < 1e-12);
        assert_eq!(u.initial_level(), 2.0);
    }

    #[test]
    fn even_coefficient_count_is_rejected() {
        assert!(FourierControl::<f64>::new(DVector::zeros(4)).is_err());
    }

    #[test]
    fn sampled_interpolates() {
        let s = SampledControl::new(vec![0.0, 10.0, 20.0], vec![1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.value(5.0), 2.0);
        assert_eq!(s.value(15.0), 2.5);
        assert_eq!(s.value(25.0), 2.0);
        assert_eq!(s.value(10.0), 3.0);
        assert_eq!(s.rate(5.0), 0.2);
    }
}
