//! Binary threshold sensors and the sliding measurement window.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Reading of a binary sensor: `High` (+1) when the sensed output is at or
/// above the threshold, `Low` (-1) otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn sign(self) -> f64 {
        match self {
            Level::Low => -1.0,
            Level::High => 1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Level::Low => -1,
            Level::High => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Level::Low => Level::High,
            Level::High => Level::Low,
        }
    }
}

impl TryFrom<i64> for Level {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        match value {
            -1 => Ok(Level::Low),
            1 => Ok(Level::High),
            _ => Err(Error::InvalidMeasurement { value }),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

/// Threshold rule: `High` iff `z >= tau`. The boundary `z == tau` reads
/// `High`; under continuous noise it has probability zero.
pub fn binarize(z: f64, tau: f64) -> Level {
    if z >= tau {
        Level::High
    } else {
        Level::Low
    }
}

/// True when an expected output `z_hat` lies strictly on the wrong side of
/// the threshold for reading `y`, i.e. `(z_hat - tau) * y < 0`.
///
/// This indicator gates the per-instant penalty of the piecewise-quadratic
/// cost. At `z_hat == tau` it is false.
pub fn mismatch(z_hat: f64, tau: f64, y: Level) -> bool {
    (z_hat - tau) * y.sign() < 0.0
}

/// Absolute indices `k` in `start..start+len-1` where the reading changes
/// between `k` and `k + 1`, ascending.
pub fn switching_set(levels: &[Level], start: usize) -> Vec<usize> {
    levels
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(k, _)| start + k)
        .collect()
}

/// Same as [`switching_set`] for raw `±1` integers.
pub fn switching_set_from_signs(signs: &[i64], start: usize) -> Result<Vec<usize>> {
    let levels = signs
        .iter()
        .map(|&s| Level::try_from(s))
        .collect::<Result<Vec<_>>>()?;
    Ok(switching_set(&levels, start))
}

/// A bank of `p` binary sensors with thresholds and noise amplitude bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySensorBank {
    thresholds: Vec<f64>,
    noise_bounds: Vec<f64>,
}

impl BinarySensorBank {
    pub fn new(thresholds: Vec<f64>, noise_bounds: Vec<f64>) -> Result<Self> {
        check_dim("sensor noise bounds", thresholds.len(), noise_bounds.len())?;
        if thresholds.is_empty() {
            return Err(Error::InvalidInput("sensor bank is empty".into()));
        }
        if thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("thresholds must be finite".into()));
        }
        if noise_bounds.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInput("noise bounds must be finite and nonnegative".into()));
        }
        Ok(Self {
            thresholds,
            noise_bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold(&self, i: usize) -> f64 {
        self.thresholds[i]
    }

    pub fn noise_bounds(&self) -> &[f64] {
        &self.noise_bounds
    }

    pub fn noise_bound(&self, i: usize) -> f64 {
        self.noise_bounds[i]
    }

    /// Sensor bank with every threshold replaced by `tau`.
    pub fn with_thresholds(&self, thresholds: Vec<f64>) -> Result<Self> {
        Self::new(thresholds, self.noise_bounds.clone())
    }

    /// Binarizes one output vector `z_t`.
    pub fn measure(&self, z: &DVector<f64>) -> Vec<Level> {
        debug_assert_eq!(z.len(), self.len());
        z.iter()
            .zip(&self.thresholds)
            .map(|(&zi, &tau)| binarize(zi, tau))
            .collect()
    }
}

/// Inputs and binary readings over `start..=start + N`, with the per-sensor
/// switching instants stored as absolute times.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    start: usize,
    inputs: Vec<DVector<f64>>,
    outputs: Vec<Vec<Level>>,
    switching: Vec<Vec<usize>>,
}

impl MeasurementWindow {
    /// `outputs[k]` holds the `p` readings at time `start + k`; `inputs`
    /// holds `u_start .. u_{start+N-1}`.
    pub fn new(start: usize, inputs: Vec<DVector<f64>>, outputs: Vec<Vec<Level>>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::InvalidInput("window needs at least one instant".into()));
        }
        check_dim("window inputs", outputs.len() - 1, inputs.len())?;
        let p = outputs[0].len();
        if p == 0 {
            return Err(Error::InvalidInput("window needs at least one sensor".into()));
        }
        for y in &outputs {
            check_dim("readings per instant", p, y.len())?;
        }
        if let Some(m) = inputs.first().map(|u| u.len()) {
            for u in &inputs {
                check_dim("window input", m, u.len())?;
            }
        }
        let switching = compute_switching(start, &outputs);
        Ok(Self {
            start,
            inputs,
            outputs,
            switching,
        })
    }

    /// Builds the window from raw `±1` integers, `signs[k][i]`.
    pub fn from_signs(start: usize, inputs: Vec<DVector<f64>>, signs: &[Vec<i64>]) -> Result<Self> {
        let outputs = signs
            .iter()
            .map(|row| row.iter().map(|&s| Level::try_from(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(start, inputs, outputs)
    }

    /// First instant `t - N`.
    pub fn start(&self) -> usize {
        self.start
    }

    /// Last instant `t`.
    pub fn end(&self) -> usize {
        self.start + self.horizon()
    }

    /// Horizon `N`; the window covers `N + 1` instants.
    pub fn horizon(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn sensors(&self) -> usize {
        self.outputs[0].len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Input applied at window offset `k` (absolute time `start + k`).
    pub fn input(&self, k: usize) -> &DVector<f64> {
        &self.inputs[k]
    }

    /// Readings at window offset `k`.
    pub fn readings(&self, k: usize) -> &[Level] {
        &self.outputs[k]
    }

    pub fn reading(&self, k: usize, sensor: usize) -> Level {
        self.outputs[k][sensor]
    }

    /// Switching instants of every sensor, absolute times, ascending.
    pub fn switching_sets(&self) -> &[Vec<usize>] {
        &self.switching
    }

    pub fn switching_count(&self) -> usize {
        self.switching.iter().map(Vec::len).sum()
    }

    /// True when `k` (absolute) is a switching instant of `sensor`.
    pub fn is_switching(&self, sensor: usize, k: usize) -> bool {
        self.switching[sensor].binary_search(&k).is_ok()
    }

    /// Drops the oldest instant and appends `new_readings` at `end() + 1`,
    /// with `new_input` the input applied at `end()`.
    pub fn slide(&self, new_input: DVector<f64>, new_readings: Vec<Level>) -> Result<Self> {
        check_dim("new readings", self.sensors(), new_readings.len())?;
        if let Some(u) = self.inputs.first() {
            check_dim("new input", u.len(), new_input.len())?;
        }
        let new_start = self.start + 1;
        let last = self.end();
        let switching = self
            .switching
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let mut kept: Vec<usize> = set.iter().copied().filter(|&k| k >= new_start).collect();
                if last >= new_start && self.outputs[self.horizon()][i] != new_readings[i] {
                    kept.push(last);
                }
                kept
            })
            .collect();
        let mut inputs = self.inputs.clone();
        let mut outputs = self.outputs.clone();
        if !inputs.is_empty() {
            inputs.remove(0);
        }
        inputs.push(new_input);
        outputs.remove(0);
        outputs.push(new_readings);
        if self.horizon() == 0 {
            // A single-instant window keeps no inputs.
            inputs.clear();
        }
        Ok(Self {
            start: new_start,
            inputs,
            outputs,
            switching,
        })
    }

    /// Same as [`slide`](Self::slide) for raw `±1` integers.
    pub fn slide_signs(&self, new_input: DVector<f64>, signs: &[i64]) -> Result<Self> {
        let levels = signs.iter().map(|&s| Level::try_from(s)).collect::<Result<Vec<_>>>()?;
        self.slide(new_input, levels)
    }

    /// Switching sets recomputed from the stored readings.
    pub fn recompute_switching(&self) -> Vec<Vec<usize>> {
        compute_switching(self.start, &self.outputs)
    }
}

fn compute_switching(start: usize, outputs: &[Vec<Level>]) -> Vec<Vec<usize>> {
    let p = outputs[0].len();
    (0..p)
        .map(|i| {
            let column: Vec<Level> = outputs.iter().map(|y| y[i]).collect();
            switching_set(&column, start)
        })
        .collect()
}
