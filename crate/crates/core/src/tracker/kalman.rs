//! Constant-velocity Kalman filter over `(cx, cy, aspect, h)` with noise
//! proportional to box height.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::matching::BBox;

pub type Vec8 = SVector<f64, 8>;
pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat48 = SMatrix<f64, 4, 8>;

/// Eigenvalues below this after re-symmetrization are reported.
pub const PSD_TOLERANCE: f64 = -1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanParams {
    pub std_position: f64,
    pub std_velocity: f64,
    pub std_aspect: f64,
    pub std_aspect_velocity: f64,
    pub std_aspect_measurement: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            std_position: 1.0 / 20.0,
            std_velocity: 1.0 / 160.0,
            std_aspect: 1e-2,
            std_aspect_velocity: 1e-5,
            std_aspect_measurement: 1e-1,
        }
    }
}

impl KalmanParams {
    /// All noise switched off.
    pub fn noiseless() -> Self {
        Self {
            std_position: 0.0,
            std_velocity: 0.0,
            std_aspect: 0.0,
            std_aspect_velocity: 0.0,
            std_aspect_measurement: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanState {
    pub mean: Vec8,
    pub covariance: Mat8,
}

/// `(cx, cy, w / h, h)`.
pub fn measurement(b: &BBox) -> Vec4 {
    let aspect = if b.h > 0.0 { b.w / b.h } else { 0.0 };
    Vec4::new(b.cx, b.cy, aspect, b.h)
}

fn transition() -> Mat8 {
    let mut f = Mat8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> Mat48 {
    Mat48::from_fn(|i, j| if i == j { 1.0 } else { 0.0 })
}

impl KalmanState {
    pub fn initiate(b: &BBox, p: &KalmanParams) -> Self {
        let z = measurement(b);
        let mut mean = Vec8::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = z[3];
        let std = [
            2.0 * p.std_position * h,
            2.0 * p.std_position * h,
            p.std_aspect,
            2.0 * p.std_position * h,
            10.0 * p.std_velocity * h,
            10.0 * p.std_velocity * h,
            p.std_aspect_velocity,
            10.0 * p.std_velocity * h,
        ];
        Self {
            mean,
            covariance: Mat8::from_diagonal(&Vec8::from_fn(|i, _| std[i] * std[i])),
        }
    }

    pub fn predict(&self, p: &KalmanParams) -> Self {
        let h = self.mean[3];
        let std = [
            p.std_position * h,
            p.std_position * h,
            p.std_aspect,
            p.std_position * h,
            p.std_velocity * h,
            p.std_velocity * h,
            p.std_aspect_velocity,
            p.std_velocity * h,
        ];
        let q = Mat8::from_diagonal(&Vec8::from_fn(|i, _| std[i] * std[i]));
        let f = transition();
        Self {
            mean: f * self.mean,
            covariance: f * self.covariance * f.transpose() + q,
        }
        .symmetrized()
    }

    /// Standard gain update. A singular innovation covariance (possible
    /// only with all noise switched off) leaves the state unchanged.
    pub fn update(&self, b: &BBox, p: &KalmanParams) -> Self {
        let z = measurement(b);
        let h = self.mean[3];
        let std = [
            p.std_position * h,
            p.std_position * h,
            p.std_aspect_measurement,
            p.std_position * h,
        ];
        let r = Mat4::from_diagonal(&Vec4::from_fn(|i, _| std[i] * std[i]));
        let hm = observation();
        let s = hm * self.covariance * hm.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            return *self;
        };
        let k = self.covariance * hm.transpose() * s_inv;
        let innovation = z - hm * self.mean;
        Self {
            mean: self.mean + k * innovation,
            covariance: self.covariance - k * s * k.transpose(),
        }
        .symmetrized()
    }

    fn symmetrized(mut self) -> Self {
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;
        let min = SymmetricEigen::new(self.covariance).eigenvalues.min();
        if min < PSD_TOLERANCE {
            log::warn!("kalman covariance has eigenvalue {min:.3e}");
        }
        self
    }

    /// Box of the current mean with non-negative size.
    pub fn bbox(&self) -> BBox {
        let h = self.mean[3].max(0.0);
        let w = (self.mean[2] * h).max(0.0);
        BBox::new(self.mean[0], self.mean[1], w, h)
    }
}
