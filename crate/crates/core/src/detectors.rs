//! Detector response functions: firing probability as a function of the
//! number of incident photons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response function `Θ(x)` on integer photon counts.
///
/// Every variant is zero below its threshold and non-decreasing above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseFunction {
    /// Never fires below `threshold` photons, always fires at or above it.
    PerfectStep { threshold: u32 },
    /// Fires with probability `eta` at exactly `threshold` photons and always
    /// above it.
    SmoothStep { threshold: u32, eta: f64 },
    /// Tabulated S-shaped response.
    SCurve(SCurve),
}

impl ResponseFunction {
    pub fn perfect_step(threshold: u32) -> Result<Self> {
        check_threshold(threshold)?;
        Ok(Self::PerfectStep { threshold })
    }

    pub fn smooth_step(threshold: u32, eta: f64) -> Result<Self> {
        check_threshold(threshold)?;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidResponse(format!(
                "eta must lie in (0, 1], got {eta}"
            )));
        }
        Ok(Self::SmoothStep { threshold, eta })
    }

    pub fn evaluate(&self, photons: u32) -> f64 {
        match self {
            Self::PerfectStep { threshold } => {
                if photons >= *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Self::SmoothStep { threshold, eta } => {
                if photons < *threshold {
                    0.0
                } else if photons == *threshold {
                    *eta
                } else {
                    1.0
                }
            }
            Self::SCurve(curve) => curve.evaluate(photons),
        }
    }

    /// Smallest photon count detected with strictly positive probability.
    pub fn threshold(&self) -> u32 {
        match self {
            Self::PerfectStep { threshold } | Self::SmoothStep { threshold, .. } => *threshold,
            Self::SCurve(curve) => curve.threshold,
        }
    }

    /// True when `Θ` only takes the values 0 and 1.
    pub fn is_perfect_step(&self) -> bool {
        match self {
            Self::PerfectStep { .. } => true,
            Self::SmoothStep { eta, .. } => *eta == 1.0,
            Self::SCurve(curve) => curve.table.iter().all(|&v| v == 0.0 || v == 1.0),
        }
    }

    /// `Θ(0), ..., Θ(max_photons)`.
    pub fn table(&self, max_photons: u32) -> Vec<f64> {
        (0..=max_photons).map(|x| self.evaluate(x)).collect()
    }
}

fn check_threshold(threshold: u32) -> Result<()> {
    if threshold == 0 {
        return Err(Error::InvalidResponse("threshold must be at least 1".into()));
    }
    Ok(())
}

/// Monotone response tabulated on `0..table.len()`; counts beyond the table
/// take the last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SCurve {
    threshold: u32,
    table: Vec<f64>,
}

impl SCurve {
    /// Builds a curve from `(photons, probability)` calibration points.
    ///
    /// Counts below the first point respond with 0, counts between points are
    /// interpolated linearly and counts beyond the last point keep its value.
    pub fn from_points(points: &[(u32, f64)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidResponse("empty S-curve table".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidResponse(format!(
                    "photon counts must be strictly ascending ({} then {})",
                    w[0].0, w[1].0
                )));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::InvalidResponse(format!(
                    "response decreases between x = {} and x = {}",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(x, v)) = points.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidResponse(format!(
                "response {v} at x = {x} is outside [0, 1]"
            )));
        }
        let last = points[points.len() - 1].0;
        let mut table = vec![0.0; last as usize + 1];
        for w in points.windows(2) {
            let (x0, v0) = w[0];
            let (x1, v1) = w[1];
            for x in x0..=x1 {
                let t = (x - x0) as f64 / (x1 - x0) as f64;
                table[x as usize] = v0 + t * (v1 - v0);
            }
        }
        let (x0, v0) = points[0];
        table[x0 as usize] = v0;
        Self::from_table(table)
    }

    /// Tabulated values `Θ(0), Θ(1), ...`.
    pub fn from_table(table: Vec<f64>) -> Result<Self> {
        if table.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidResponse("values must lie in [0, 1]".into()));
        }
        if table.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidResponse("values must be non-decreasing".into()));
        }
        let threshold = table
            .iter()
            .position(|&v| v > 0.0)
            .ok_or_else(|| Error::InvalidResponse("curve never fires".into()))?;
        if threshold == 0 {
            return Err(Error::InvalidResponse(
                "curve fires with no incident photons".into(),
            ));
        }
        Ok(Self {
            threshold: threshold as u32,
            table,
        })
    }

    /// Logistic `1 / (1 + exp(-k (x - x0)))` cut to zero below `threshold`.
    /// The table extends until the response is within 1e-15 of one.
    pub fn logistic(threshold: u32, midpoint: f64, steepness: f64) -> Result<Self> {
        check_threshold(threshold)?;
        if !(steepness > 0.0) || !midpoint.is_finite() {
            return Err(Error::InvalidResponse(format!(
                "logistic needs positive steepness and finite midpoint, got k = {steepness}, x0 = {midpoint}"
            )));
        }
        let mut table = vec![0.0; threshold as usize];
        let mut x = threshold;
        loop {
            let v = 1.0 / (1.0 + (-steepness * (x as f64 - midpoint)).exp());
            table.push(v);
            if 1.0 - v < 1e-15 || x > threshold + 100_000 {
                break;
            }
            x += 1;
        }
        Self::from_table(table)
    }

    /// Logistic passing through `(photons, response)`, e.g. 20% at 60 photons.
    pub fn logistic_calibrated(
        threshold: u32,
        steepness: f64,
        photons: u32,
        response: f64,
    ) -> Result<Self> {
        if !(response > 0.0 && response < 1.0) || photons < threshold {
            return Err(Error::InvalidResponse(format!(
                "calibration point ({photons}, {response}) is unusable"
            )));
        }
        let midpoint = photons as f64 + (1.0 / response - 1.0).ln() / steepness;
        Self::logistic(threshold, midpoint, steepness)
    }

    pub fn evaluate(&self, photons: u32) -> f64 {
        match self.table.get(photons as usize) {
            Some(v) => *v,
            None => *self.table.last().unwrap_or(&0.0),
        }
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }
}
