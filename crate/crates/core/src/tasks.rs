//! Per-example objectives: each builds the forward graph for one task on a
//! tape and splices in the matching loss from [`crate::losses`].

use autograd::{Matrix, Var};

use crate::error::{Error, Result};
use crate::losses::{self, LossGrad};
use crate::masking::downsample_mask;
use crate::model::{Forward, Model, OutputSpace};

/// Loss node for one example plus what the trainer needs to normalize and
/// monitor it.
#[derive(Debug)]
pub struct ExampleLoss {
    pub loss: Var,
    pub value: f64,
    /// Target tokens, CTC labels or masked positions.
    pub count: usize,
    /// Predicted phoneme distributions at masked positions (MSP only).
    pub predicted: Vec<Vec<f64>>,
    /// Mean entropy of the MSP target rows.
    pub target_entropy: Option<f64>,
}

/// Decoder input and target sequences around the boundary id `vocab`.
pub fn decoder_io(seq: &[usize], vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(seq.len() + 1);
    inputs.push(vocab);
    inputs.extend_from_slice(seq);
    let mut targets = seq.to_vec();
    targets.push(vocab);
    (inputs, targets)
}

fn splice(fwd: &mut Forward<'_, '_>, x: Var, lg: LossGrad, count: usize) -> ExampleLoss {
    let loss = fwd.tape.external_loss(x, lg.value, lg.grad);
    ExampleLoss { loss, value: lg.value, count, predicted: Vec::new(), target_entropy: None }
}

fn seq2seq(fwd: &mut Forward<'_, '_>, h: Var, target: &[usize], space: OutputSpace, vocab: usize) -> Result<ExampleLoss> {
    let (inputs, targets) = decoder_io(target, vocab);
    let lp = fwd.decoder_logp(h, &inputs, space)?;
    let lg = losses::sequence_nll(fwd.tape.value(lp), &targets)?;
    Ok(splice(fwd, lp, lg, targets.len()))
}

/// Noised phonemes in, text out.
pub fn p2t(fwd: &mut Forward<'_, '_>, model: &Model, phonemes: &[usize], text: &[usize]) -> Result<ExampleLoss> {
    let h = fwd.encode_phonemes(phonemes)?;
    seq2seq(fwd, h, text, OutputSpace::Text, model.config.text_vocab)
}

pub fn s2t(fwd: &mut Forward<'_, '_>, model: &Model, features: &Matrix, text: &[usize]) -> Result<ExampleLoss> {
    let h = fwd.encode_speech(features, None)?;
    seq2seq(fwd, h, text, OutputSpace::Text, model.config.text_vocab)
}

pub fn s2c(fwd: &mut Forward<'_, '_>, model: &Model, features: &Matrix, codes: &[usize]) -> Result<ExampleLoss> {
    let h = fwd.encode_speech(features, None)?;
    seq2seq(fwd, h, codes, OutputSpace::Codes, model.config.code_vocab)
}

/// CTC over `[blank, phonemes]`. Infeasible alignments surface as
/// [`Error::CtcInfeasible`] so the caller can skip the example.
pub fn pp(fwd: &mut Forward<'_, '_>, features: &Matrix, phonemes: &[usize]) -> Result<ExampleLoss> {
    if phonemes.is_empty() {
        return Err(Error::CtcInfeasible { frames: features.rows(), required: 0 });
    }
    let h = fwd.encode_speech(features, None)?;
    let lp = fwd.ctc_logp(h);
    let lg = losses::loss_pp(fwd.tape.value(lp), phonemes)?;
    Ok(splice(fwd, lp, lg, phonemes.len()))
}

/// Target distributions from an unmasked, dropout-free pass; no graph is
/// kept, so no gradient can reach the parameters through the target.
pub fn msp_target(model: &Model, features: &Matrix) -> Result<Matrix> {
    let h = model.encode_speech(features, None)?;
    losses::target_phoneme_distribution(&h, model.phoneme_embedding())
}

/// Latent mask from a frame-level span mask.
pub fn latent_mask(model: &Model, frame_mask: &[bool]) -> Vec<bool> {
    downsample_mask(frame_mask, &model.config.conv_specs())
}

/// Masked prediction against a fixed target. The phoneme table enters
/// detached, so this loss never produces a gradient for it.
pub fn msp(fwd: &mut Forward<'_, '_>, features: &Matrix, latent: &[bool], target: &Matrix) -> Result<ExampleLoss> {
    let h = fwd.encode_speech(features, Some(latent))?;
    let logits = fwd.phoneme_logits(h, true);
    let lp = fwd.tape.log_softmax(logits);
    let lpv = fwd.tape.value(lp);
    let lg = losses::loss_msp(target, lpv, latent)?;
    let predicted = (0..lpv.rows()).filter(|&t| latent[t]).map(|t| lpv.row(t).iter().map(|x| x.exp()).collect()).collect();
    let count = latent.iter().filter(|&&m| m).count();
    let mut out = splice(fwd, lp, lg, count);
    out.predicted = predicted;
    out.target_entropy = Some(losses::mean_row_entropy(target));
    Ok(out)
}
