//! Span masks over speech frames for masked speech prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPolicy {
    /// Each frame starts a span independently with probability `start_prob`.
    Bernoulli,
    /// Exactly `round(start_prob·T)` distinct start frames (at least one).
    ExactCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMaskConfig {
    pub start_prob: f64,
    pub span_len: usize,
    pub policy: StartPolicy,
    /// Guarantee at least one masked frame. Disabled only in tests.
    pub force_nonempty: bool,
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        Self { start_prob: 0.07, span_len: 10, policy: StartPolicy::Bernoulli, force_nonempty: true }
    }
}

impl SpanMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_prob > 0.0 && self.start_prob <= 1.0) {
            return Err(Error::Config(format!("start_prob {} outside (0, 1]", self.start_prob)));
        }
        if self.span_len == 0 {
            return Err(Error::Config("span_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Probability that a frame far from the sequence start is masked under
    /// the Bernoulli policy: `1 - (1 - p)^span_len`.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_prob).powi(self.span_len as i32)
    }
}

fn draw(t: usize, cfg: &SpanMaskConfig, r: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; t];
    let mut mark = |start: usize| {
        for m in mask.iter_mut().skip(start).take(cfg.span_len) {
            *m = true;
        }
    };
    match cfg.policy {
        StartPolicy::Bernoulli => {
            for start in 0..t {
                if r.random_bool(cfg.start_prob) {
                    mark(start);
                }
            }
        }
        StartPolicy::ExactCount if t > 0 => {
            let n = ((cfg.start_prob * t as f64).round() as usize).clamp(1, t);
            for start in rand::seq::index::sample(r, t, n) {
                mark(start);
            }
        }
        StartPolicy::ExactCount => {}
    }
    mask
}

/// Spans cover `[start, min(start + span_len, T))`; overlaps union. With
/// `force_nonempty`, an empty draw is retried once and then position 0 is masked.
pub fn sample_span_mask(t: usize, cfg: &SpanMaskConfig, r: &mut impl Rng) -> Vec<bool> {
    let mut mask = draw(t, cfg, r);
    if cfg.force_nonempty && t > 0 && !mask.contains(&true) {
        mask = draw(t, cfg, r);
        if !mask.contains(&true) {
            mask[0] = true;
        }
    }
    mask
}

/// Maps a frame-level mask through stacked 1-D convolutions given as
/// `(kernel, stride, pad)`: an output step is masked iff any input frame in
/// its receptive field is masked.
pub fn downsample_mask(mask: &[bool], convs: &[(usize, usize, usize)]) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for &(kernel, stride, pad) in convs {
        let t = cur.len();
        let out_len = autograd::conv_out_len(t, kernel, stride, pad);
        cur = (0..out_len)
            .map(|o| {
                (0..kernel).any(|j| {
                    let src = (o * stride + j) as isize - pad as isize;
                    src >= 0 && (src as usize) < t && cur[src as usize]
                })
            })
            .collect();
    }
    cur
}
