//! Temporal encoding of follow-up intervals.
//!
//! Intervals in days are bucketed into 30-day months (capped at 20) and
//! embedded with interleaved sin/cos features whose wavelengths run from
//! `2π` to `100·2π`. The embedding is added channel-wise to the bottleneck
//! feature map of a network.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DAYS_PER_STEP: i64 = 30;
pub const MAX_INTERVAL: u32 = 20;
const BASE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalCode {
    pub t_day: i64,
    pub t_itv: u32,
}

impl IntervalCode {
    pub fn from_days(t_day: i64) -> Result<Self> {
        Ok(IntervalCode { t_day, t_itv: discretize_interval(t_day)? })
    }
}

/// `min(⌈t_day / 30⌉, 20)`.
pub fn discretize_interval(t_day: i64) -> Result<u32> {
    if t_day < 0 {
        return Err(Error::invalid(format!("negative interval {t_day} days")));
    }
    let steps = (t_day + DAYS_PER_STEP - 1) / DAYS_PER_STEP;
    Ok(steps.min(MAX_INTERVAL as i64) as u32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoding {
    values: Vec<f64>,
}

impl TemporalEncoding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn d_fm(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.values.len()], self.values.clone()).expect("non-empty encoding")
    }
}

/// Slot `2i` holds `sin(t / 100^(2i/d))`, slot `2i+1` the matching cosine.
/// With odd `d` the trailing slot is a sine.
pub fn encode(t_itv: u32, d_fm: usize) -> Result<TemporalEncoding> {
    if d_fm < 2 {
        return Err(Error::invalid(format!("encoding width must be >= 2, got {d_fm}")));
    }
    if t_itv > MAX_INTERVAL {
        return Err(Error::invalid(format!("t_itv {t_itv} above cut-off {MAX_INTERVAL}")));
    }
    let t = t_itv as f64;
    let values = (0..d_fm)
        .map(|k| {
            let pair = (k / 2 * 2) as f64;
            let arg = t / BASE.powf(pair / d_fm as f64);
            if k % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect();
    Ok(TemporalEncoding { values })
}

/// Broadcast-adds `enc[c]` over channel `c` of a `[d_fm, D, H, W]` map.
pub fn inject(g: &Graph, feature_map: Var, enc: &TemporalEncoding) -> Result<Var> {
    let channels = g.shape(feature_map).first().copied().unwrap_or(0);
    if channels != enc.d_fm() {
        return Err(Error::Shape { op: "tem::inject", expected: vec![channels], got: vec![enc.d_fm()] });
    }
    let v = g.constant(enc.to_tensor());
    g.add_channel(feature_map, v)
}
