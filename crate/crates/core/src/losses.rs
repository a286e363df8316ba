//! The five training objectives and their weighted total. Every loss takes
//! log-probabilities and returns the scalar together with its gradient with
//! respect to those log-probabilities, so the model can splice it into the
//! tape as an external node.

use std::fmt;

use autograd::{log_sum_exp, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Msp,
    Pp,
    S2c,
    P2t,
    S2t,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Msp, Task::Pp, Task::S2c, Task::P2t, Task::S2t];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Msp => "msp",
            Task::Pp => "pp",
            Task::S2c => "s2c",
            Task::P2t => "p2t",
            Task::S2t => "s2t",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar loss and its gradient with respect to the input log-probs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

/// Teacher-forced negative log-likelihood: row `l` of `logp` scores target
/// token `l` (the target includes eos).
pub fn sequence_nll(logp: &Matrix, target: &[usize]) -> Result<LossGrad> {
    if logp.rows() != target.len() {
        return Err(Error::Length { expected: target.len(), got: logp.rows() });
    }
    let mut grad = Matrix::zeros(logp.rows(), logp.cols());
    let mut value = 0.0;
    for (l, &y) in target.iter().enumerate() {
        if y >= logp.cols() {
            return Err(Error::UnknownToken { token: y, position: l });
        }
        value -= logp.get(l, y);
        grad.set(l, y, -1.0);
    }
    Ok(LossGrad { value, grad })
}

pub fn loss_p2t(logp: &Matrix, target: &[usize]) -> Result<LossGrad> {
    sequence_nll(logp, target)
}

pub fn loss_s2c(logp: &Matrix, target: &[usize]) -> Result<LossGrad> {
    sequence_nll(logp, target)
}

pub fn loss_s2t(logp: &Matrix, target: &[usize]) -> Result<LossGrad> {
    sequence_nll(logp, target)
}

/// Row-wise softmax of `H·Eᵀ`, the per-position distribution over phonemes.
pub fn target_phoneme_distribution(h: &Matrix, e: &Matrix) -> Result<Matrix> {
    if h.cols() != e.cols() {
        return Err(Error::Dimension { expected: e.cols(), got: h.cols() });
    }
    Ok(h.matmul_t(e).softmax_rows())
}

/// `Σ_{t masked} KL(p_t ‖ q_t)` with `q` given as log-probs. The gradient is
/// with respect to `pred_logp` only; the target is a constant.
pub fn loss_msp(target: &Matrix, pred_logp: &Matrix, mask: &[bool]) -> Result<LossGrad> {
    if target.shape() != pred_logp.shape() {
        return Err(Error::Dimension { expected: target.cols(), got: pred_logp.cols() });
    }
    if mask.len() != target.rows() {
        return Err(Error::Length { expected: target.rows(), got: mask.len() });
    }
    if !mask.contains(&true) {
        return Err(Error::Empty("span mask"));
    }
    let mut grad = Matrix::zeros(target.rows(), target.cols());
    let mut value = 0.0;
    for t in (0..target.rows()).filter(|&t| mask[t]) {
        for i in 0..target.cols() {
            let p = target.get(t, i);
            if p > 0.0 {
                value += p * (p.ln() - pred_logp.get(t, i));
                grad.set(t, i, -p);
            }
        }
    }
    Ok(LossGrad { value: value.max(0.0), grad })
}

/// Frames needed to emit `target`: one per label plus a blank between
/// repeated neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood over `logp` (T×(I+1), blank at class 0,
/// phoneme `p` at class `p+1`), computed by forward-backward in log space.
pub fn loss_pp(logp: &Matrix, target: &[usize]) -> Result<LossGrad> {
    let (t_len, classes) = logp.shape();
    if let Some(pos) = target.iter().position(|&p| p + 1 >= classes) {
        return Err(Error::UnknownToken { token: target[pos], position: pos });
    }
    let required = ctc_min_frames(target);
    if t_len < required || t_len == 0 {
        return Err(Error::CtcInfeasible { frames: t_len, required: required.max(1) });
    }
    // Extended label sequence: blank, y1, blank, y2, ..., blank.
    let ext: Vec<usize> =
        std::iter::once(0).chain(target.iter().flat_map(|&p| [p + 1, 0])).collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = logp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = logp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[t - 1][s]];
            if s >= 1 {
                terms.push(alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                terms.push(alpha[t - 1][s - 2]);
            }
            alpha[t][s] = log_sum_exp(&terms) + logp.get(t, ext[s]);
        }
    }
    // beta[t][s]: log-prob of emitting the rest after being in state s at t,
    // excluding the emission at t.
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[t + 1][s] + logp.get(t + 1, ext[s])];
            if s + 1 < s_len {
                terms.push(beta[t + 1][s + 1] + logp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms.push(beta[t + 1][s + 2] + logp.get(t + 1, ext[s + 2]));
            }
            beta[t][s] = log_sum_exp(&terms);
        }
    }
    let tail: Vec<f64> = alpha[t_len - 1][s_len.saturating_sub(2)..].to_vec();
    let log_p = log_sum_exp(&tail);
    if !log_p.is_finite() {
        return Err(Error::NonFinite("CTC likelihood"));
    }
    let mut grad = Matrix::zeros(t_len, classes);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > ninf {
                let g = grad.get(t, ext[s]) - occ.exp();
                grad.set(t, ext[s], g);
            }
        }
    }
    Ok(LossGrad { value: (-log_p).max(0.0), grad })
}

/// Greedy CTC readout: best class per frame, collapse repeats, drop blanks.
pub fn ctc_greedy(logp: &Matrix) -> Vec<usize> {
    let best: Vec<usize> = (0..logp.rows())
        .map(|t| {
            let row = logp.row(t);
            (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b })
        })
        .collect();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for c in best {
        if c != prev && c != 0 {
            out.push(c - 1);
        }
        prev = c;
    }
    out
}

/// Mean Shannon entropy (nats) of the rows of a row-stochastic matrix.
pub fn mean_row_entropy(probs: &Matrix) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..probs.rows())
        .map(|t| probs.row(t).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    total / probs.rows() as f64
}

/// Entropy of the average row, which is low when every input yields the
/// same distribution.
pub fn marginal_entropy(rows: &[&[f64]]) -> f64 {
    let Some(first) = rows.first() else { return 0.0 };
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        for (m, &p) in mean.iter_mut().zip(*r) {
            *m += p / rows.len() as f64;
        }
    }
    mean.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// λ₁..λ₅ in task order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub msp: f64,
    pub pp: f64,
    pub s2c: f64,
    pub p2t: f64,
    pub s2t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { msp: 1.0, pp: 1.0, s2c: 1.0, p2t: 1.0, s2t: 1.0 }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Msp => self.msp,
            Task::Pp => self.pp,
            Task::S2c => self.s2c,
            Task::P2t => self.p2t,
            Task::S2t => self.s2t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Task::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight for {t} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub masked_frames: usize,
    /// Mean entropy of the MSP target rows.
    pub target_entropy: Option<f64>,
    /// Entropy of the batch-average predicted phoneme distribution.
    pub prediction_entropy: Option<f64>,
    /// Mean per-position entropy of predicted phoneme distributions; the
    /// collapse alert compares this against its floor.
    pub frame_entropy: Option<f64>,
    pub ctc_skipped: usize,
}

/// Per-task normalized losses; absent tasks are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub msp: Option<f64>,
    pub pp: Option<f64>,
    pub s2c: Option<f64>,
    pub p2t: Option<f64>,
    pub s2t: Option<f64>,
    pub total: f64,
    pub diagnostics: LossDiagnostics,
}

impl LossBreakdown {
    pub fn get(&self, task: Task) -> Option<f64> {
        match task {
            Task::Msp => self.msp,
            Task::Pp => self.pp,
            Task::S2c => self.s2c,
            Task::P2t => self.p2t,
            Task::S2t => self.s2t,
        }
    }

    fn slot(&mut self, task: Task) -> &mut Option<f64> {
        match task {
            Task::Msp => &mut self.msp,
            Task::Pp => &mut self.pp,
            Task::S2c => &mut self.s2c,
            Task::P2t => &mut self.p2t,
            Task::S2t => &mut self.s2t,
        }
    }
}

/// Weighted sum of the components that are present.
pub fn total_loss(components: &[(Task, f64)], weights: &LossWeights) -> LossBreakdown {
    let mut b = LossBreakdown::default();
    for &(task, value) in components {
        *b.slot(task) = Some(value);
    }
    b.total = Task::ALL.iter().filter_map(|&t| b.get(t).map(|v| weights.get(t) * v)).sum();
    b
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: u64,
    pub task: Option<Task>,
    pub losses: LossBreakdown,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
    #[serde(default)]
    pub collapse_alert: bool,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize") + "\n"
    }
}
