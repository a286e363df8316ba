//! The encoder-decoder network. Speech goes through a two-layer strided
//! convolution, the speech encoder and the shared encoder; phonemes are
//! embedded with the phoneme table and go through the shared encoder only.
//! One decoder trunk serves text and pseudo-codes through separate input
//! embeddings and output heads.

use autograd::{conv_out_len, Matrix, ParamId, ParamStore, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub layers_speech_enc: usize,
    pub layers_shared_enc: usize,
    pub layers_dec: usize,
    pub conv_kernels: [usize; 2],
    pub conv_strides: [usize; 2],
    pub phoneme_vocab: usize,
    pub text_vocab: usize,
    pub code_vocab: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            model_dim: 64,
            ffn_dim: 256,
            heads: 4,
            layers_speech_enc: 2,
            layers_shared_enc: 2,
            layers_dec: 2,
            conv_kernels: [3, 3],
            conv_strides: [2, 2],
            phoneme_vocab: 24,
            text_vocab: 48,
            code_vocab: 128,
            dropout: 0.1,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("phoneme_vocab", self.phoneme_vocab),
            ("text_vocab", self.text_vocab),
            ("code_vocab", self.code_vocab),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.model_dim {} is not divisible by model.heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernels.contains(&0) || self.conv_strides.contains(&0) {
            return Err(Error::Config("conv kernels and strides must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `(kernel, stride, pad)` of each conv layer, padded by `kernel/2`.
    pub fn conv_specs(&self) -> [(usize, usize, usize); 2] {
        [0, 1].map(|i| (self.conv_kernels[i], self.conv_strides[i], self.conv_kernels[i] / 2))
    }

    pub fn downsampled_len(&self, t: usize) -> usize {
        self.conv_specs().iter().fold(t, |t, &(k, s, p)| conv_out_len(t, k, s, p))
    }

    /// Phoneme input ids: `0..I`, then mask, pad, bos, eos.
    pub fn phoneme_input_vocab(&self) -> usize {
        self.phoneme_vocab + 4
    }

    pub fn phoneme_mask_id(&self) -> usize {
        self.phoneme_vocab
    }
}

/// Which vocabulary the decoder reads and predicts. In both spaces the id
/// equal to the vocabulary size is the sequence boundary: bos on input, eos
/// on output.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputSpace {
    Text,
    Codes,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayerIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayerIds {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Ids {
    conv: [(ParamId, ParamId); 2],
    mask_vec: ParamId,
    speech_enc: Vec<EncLayerIds>,
    shared_enc: Vec<EncLayerIds>,
    enc_ln: LnIds,
    phoneme_emb: ParamId,
    phoneme_special: ParamId,
    blank: ParamId,
    text_emb: ParamId,
    code_emb: ParamId,
    dec: Vec<DecLayerIds>,
    dec_ln: LnIds,
    text_head: (ParamId, ParamId),
    code_head: (ParamId, ParamId),
}

#[derive(Copy, Clone)]
enum Init {
    /// Uniform in ±sqrt(6/(fan_in+fan_out)).
    Xavier,
    /// Uniform in ±sqrt(3/cols): unit-norm rows on average.
    Embedding,
    Zeros,
    Ones,
}

/// Every parameter with its shape and initializer, in registration order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.model_dim;
    let mut v: Vec<(String, usize, usize, Init)> = Vec::new();
    let mut add = |name: String, r: usize, c: usize, init: Init| v.push((name, r, c, init));
    let f = cfg.feature_dim;
    add("conv.0.w".into(), cfg.conv_kernels[0] * f, d, Init::Xavier);
    add("conv.0.b".into(), 1, d, Init::Zeros);
    add("conv.1.w".into(), cfg.conv_kernels[1] * d, d, Init::Xavier);
    add("conv.1.b".into(), 1, d, Init::Zeros);
    add("mask_vec".into(), 1, d, Init::Embedding);
    let attn = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            add(format!("{p}.w{m}"), d, d, Init::Xavier);
            add(format!("{p}.b{m}"), 1, d, Init::Zeros);
        }
    };
    let ln = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        add(format!("{p}.g"), 1, d, Init::Ones);
        add(format!("{p}.b"), 1, d, Init::Zeros);
    };
    let ffn = |add: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
        add(format!("{p}.w1"), d, cfg.ffn_dim, Init::Xavier);
        add(format!("{p}.b1"), 1, cfg.ffn_dim, Init::Zeros);
        add(format!("{p}.w2"), cfg.ffn_dim, d, Init::Xavier);
        add(format!("{p}.b2"), 1, d, Init::Zeros);
    };
    for (stack, n) in [("speech_enc", cfg.layers_speech_enc), ("shared_enc", cfg.layers_shared_enc)] {
        for i in 0..n {
            ln(&mut add, &format!("{stack}.{i}.ln1"));
            attn(&mut add, &format!("{stack}.{i}.attn"));
            ln(&mut add, &format!("{stack}.{i}.ln2"));
            ffn(&mut add, &format!("{stack}.{i}.ffn"));
        }
    }
    ln(&mut add, "enc_ln");
    add("phoneme_emb".into(), cfg.phoneme_vocab, d, Init::Embedding);
    add("phoneme_special".into(), 4, d, Init::Embedding);
    add("blank".into(), 1, d, Init::Embedding);
    add("text_emb".into(), cfg.text_vocab + 1, d, Init::Embedding);
    add("code_emb".into(), cfg.code_vocab + 1, d, Init::Embedding);
    for i in 0..cfg.layers_dec {
        ln(&mut add, &format!("dec.{i}.ln1"));
        attn(&mut add, &format!("dec.{i}.self"));
        ln(&mut add, &format!("dec.{i}.ln2"));
        attn(&mut add, &format!("dec.{i}.cross"));
        ln(&mut add, &format!("dec.{i}.ln3"));
        ffn(&mut add, &format!("dec.{i}.ffn"));
    }
    ln(&mut add, "dec_ln");
    add("text_head.w".into(), d, cfg.text_vocab + 1, Init::Xavier);
    add("text_head.b".into(), 1, cfg.text_vocab + 1, Init::Zeros);
    add("code_head.w".into(), d, cfg.code_vocab + 1, Init::Xavier);
    add("code_head.b".into(), 1, cfg.code_vocab + 1, Init::Zeros);
    v
}

/// Number of scalar weights implied by a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, r, c, _)| r * c).sum()
}

/// Name of the phoneme embedding table shared by the phoneme input path,
/// the MSP distributions and the CTC classes.
pub const PHONEME_EMBEDDING: &str = "phoneme_emb";

fn resolve(params: &ParamStore, cfg: &ModelConfig) -> Result<Ids> {
    let id = |name: &str| params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")));
    let attn = |p: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: id(&format!("{p}.wq"))?,
            bq: id(&format!("{p}.bq"))?,
            wk: id(&format!("{p}.wk"))?,
            bk: id(&format!("{p}.bk"))?,
            wv: id(&format!("{p}.wv"))?,
            bv: id(&format!("{p}.bv"))?,
            wo: id(&format!("{p}.wo"))?,
            bo: id(&format!("{p}.bo"))?,
        })
    };
    let ln = |p: &str| -> Result<LnIds> { Ok(LnIds { g: id(&format!("{p}.g"))?, b: id(&format!("{p}.b"))? }) };
    let ffn = |p: &str| -> Result<FfnIds> {
        Ok(FfnIds {
            w1: id(&format!("{p}.w1"))?,
            b1: id(&format!("{p}.b1"))?,
            w2: id(&format!("{p}.w2"))?,
            b2: id(&format!("{p}.b2"))?,
        })
    };
    let enc = |stack: &str, n: usize| -> Result<Vec<EncLayerIds>> {
        (0..n)
            .map(|i| {
                Ok(EncLayerIds {
                    ln1: ln(&format!("{stack}.{i}.ln1"))?,
                    attn: attn(&format!("{stack}.{i}.attn"))?,
                    ln2: ln(&format!("{stack}.{i}.ln2"))?,
                    ffn: ffn(&format!("{stack}.{i}.ffn"))?,
                })
            })
            .collect()
    };
    let dec = (0..cfg.layers_dec)
        .map(|i| {
            Ok(DecLayerIds {
                ln1: ln(&format!("dec.{i}.ln1"))?,
                self_attn: attn(&format!("dec.{i}.self"))?,
                ln2: ln(&format!("dec.{i}.ln2"))?,
                cross: attn(&format!("dec.{i}.cross"))?,
                ln3: ln(&format!("dec.{i}.ln3"))?,
                ffn: ffn(&format!("dec.{i}.ffn"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ids {
        conv: [(id("conv.0.w")?, id("conv.0.b")?), (id("conv.1.w")?, id("conv.1.b")?)],
        mask_vec: id("mask_vec")?,
        speech_enc: enc("speech_enc", cfg.layers_speech_enc)?,
        shared_enc: enc("shared_enc", cfg.layers_shared_enc)?,
        enc_ln: ln("enc_ln")?,
        phoneme_emb: id(PHONEME_EMBEDDING)?,
        phoneme_special: id("phoneme_special")?,
        blank: id("blank")?,
        text_emb: id("text_emb")?,
        code_emb: id("code_emb")?,
        dec,
        dec_ln: ln("dec_ln")?,
        text_head: (id("text_head.w")?, id("text_head.b")?),
        code_head: (id("code_head.w")?, id("code_head.b")?),
    })
}

/// Fixed sinusoidal positions, T×d.
pub fn sinusoid_positions(t: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(t, d);
    for pos in 0..t {
        let row = m.row_mut(pos);
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[tag::MODEL_INIT]);
        let mut params = ParamStore::new();
        for (name, rows, cols, init) in layout(&config) {
            let bound = match init {
                Init::Xavier => (6.0 / (rows + cols) as f64).sqrt(),
                Init::Embedding => (3.0 / cols as f64).sqrt(),
                Init::Zeros | Init::Ones => 0.0,
            };
            let data = match init {
                Init::Zeros => vec![0.0; rows * cols],
                Init::Ones => vec![1.0; rows * cols],
                _ => (0..rows * cols).map(|_| r.random_range(-bound..bound)).collect(),
            };
            params.register(name, Matrix::from_vec(rows, cols, data));
        }
        let ids = resolve(&params, &config)?;
        Ok(Self { config, params, ids })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, rows, cols, _) in &expected {
            let id = params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if params.get(id).shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    params.get(id).shape(),
                    (rows, cols)
                )));
            }
        }
        let ids = resolve(&params, &config)?;
        Ok(Self { config, params, ids })
    }

    pub fn phoneme_embedding_id(&self) -> ParamId {
        self.ids.phoneme_emb
    }

    pub fn phoneme_embedding(&self) -> &Matrix {
        self.params.get(self.ids.phoneme_emb)
    }

    pub fn vocab(&self, space: OutputSpace) -> usize {
        match space {
            OutputSpace::Text => self.config.text_vocab,
            OutputSpace::Codes => self.config.code_vocab,
        }
    }

    /// Whole-matrix inference: H for `features` with an optional latent mask.
    pub fn encode_speech(&self, features: &Matrix, latent_mask: Option<&[bool]>) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let h = Forward::new(self, &mut tape, None).encode_speech(features, latent_mask)?;
        Ok(tape.value(h).clone())
    }

    pub fn encode_phonemes(&self, ids: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let h = Forward::new(self, &mut tape, None).encode_phonemes(ids)?;
        Ok(tape.value(h).clone())
    }

    /// Teacher-forced decoder log-probs for every position of `inputs`
    /// (which starts with the boundary id).
    pub fn decoder_logp(&self, h: &Matrix, inputs: &[usize], space: OutputSpace) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let mut fwd = Forward::new(self, &mut tape, None);
        let hv = fwd.tape.constant(h.clone());
        let lp = fwd.decoder_logp(hv, inputs, space)?;
        Ok(tape.value(lp).clone())
    }

    /// Next-token log-probs after `prefix`.
    pub fn decode_step(&self, prefix: &[usize], h: &Matrix, space: OutputSpace) -> Result<Vec<f64>> {
        let lp = self.decoder_logp(h, prefix, space)?;
        Ok(lp.row(lp.rows() - 1).to_vec())
    }

    /// Per-position log-probs over `[blank, phonemes...]`.
    pub fn ctc_logp(&self, h: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let mut fwd = Forward::new(self, &mut tape, None);
        let hv = fwd.tape.constant(h.clone());
        let lp = fwd.ctc_logp(hv);
        Ok(tape.value(lp).clone())
    }
}

/// Builds graphs for one example on a tape, optionally with dropout.
pub struct Forward<'a, 'p> {
    pub tape: &'a mut Tape<'p>,
    model: &'a Model,
    dropout: Option<ChaCha8Rng>,
}

impl<'a, 'p> Forward<'a, 'p> {
    /// `dropout` supplies the mask stream; `None` (or a zero rate) disables it.
    pub fn new(model: &'a Model, tape: &'a mut Tape<'p>, dropout: Option<ChaCha8Rng>) -> Self {
        let dropout = dropout.filter(|_| model.config.dropout > 0.0);
        Self { tape, model, dropout }
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(id)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: Var, ln: &LnIds) -> Var {
        let (g, b) = (self.p(ln.g), self.p(ln.b));
        self.tape.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        let rate = self.model.config.dropout;
        let Some(r) = self.dropout.as_mut() else { return x };
        let n = self.tape.value(x).len();
        let keep = 1.0 / (1.0 - rate);
        let scale = (0..n).map(|_| if r.random_bool(rate) { 0.0 } else { keep }).collect();
        self.tape.dropout(x, scale)
    }

    fn attention(&mut self, x: Var, kv: Var, a: &AttnIds, causal: bool) -> Var {
        let q = self.linear(x, a.wq, a.bq);
        let k = self.linear(kv, a.wk, a.bk);
        let v = self.linear(kv, a.wv, a.bv);
        let o = self.tape.attention(q, k, v, self.model.config.heads, causal);
        self.linear(o, a.wo, a.bo)
    }

    fn ffn(&mut self, x: Var, f: &FfnIds) -> Var {
        let h = self.linear(x, f.w1, f.b1);
        let h = self.tape.gelu(h);
        self.linear(h, f.w2, f.b2)
    }

    fn residual(&mut self, x: Var, branch: Var) -> Var {
        let branch = self.drop(branch);
        self.tape.add(x, branch)
    }

    fn encoder_layer(&mut self, x: Var, l: &EncLayerIds) -> Var {
        let n = self.layer_norm(x, &l.ln1);
        let a = self.attention(n, n, &l.attn, false);
        let x = self.residual(x, a);
        let n = self.layer_norm(x, &l.ln2);
        let f = self.ffn(n, &l.ffn);
        self.residual(x, f)
    }

    fn add_positions(&mut self, x: Var) -> Var {
        let (t, d) = self.tape.value(x).shape();
        let pe = self.tape.constant(sinusoid_positions(t, d));
        self.tape.add(x, pe)
    }

    fn shared_encoder(&mut self, mut x: Var) -> Var {
        let model = self.model;
        let ids = &model.ids;
        for l in &ids.shared_enc {
            x = self.encoder_layer(x, l);
        }
        self.layer_norm(x, &ids.enc_ln)
    }

    /// Z from the conv extractor, T′×d.
    pub fn conv_features(&mut self, features: &Matrix) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        if features.rows() == 0 {
            return Err(Error::Empty("speech features"));
        }
        if features.cols() != cfg.feature_dim {
            return Err(Error::Dimension { expected: cfg.feature_dim, got: features.cols() });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("speech features"));
        }
        let mut x = self.tape.constant(features.clone());
        for (i, (k, s, p)) in cfg.conv_specs().into_iter().enumerate() {
            let (w, b) = model.ids.conv[i];
            let cols = self.tape.im2col(x, k, s, p);
            let y = self.linear(cols, w, b);
            x = self.tape.gelu(y);
        }
        Ok(x)
    }

    /// H for speech. `latent_mask` has one entry per row of Z; masked rows
    /// are replaced by the learned mask vector.
    pub fn encode_speech(&mut self, features: &Matrix, latent_mask: Option<&[bool]>) -> Result<Var> {
        let mut z = self.conv_features(features)?;
        if let Some(mask) = latent_mask {
            let t = self.tape.value(z).rows();
            if mask.len() != t {
                return Err(Error::Length { expected: t, got: mask.len() });
            }
            if mask.contains(&true) {
                let fill = self.p(self.model.ids.mask_vec);
                z = self.tape.mask_rows(z, fill, mask);
            }
        }
        let mut x = self.add_positions(z);
        let model = self.model;
        let ids = &model.ids;
        for l in &ids.speech_enc {
            x = self.encoder_layer(x, l);
        }
        Ok(self.shared_encoder(x))
    }

    /// H for a phoneme sequence (ids in `0..I+4`).
    pub fn encode_phonemes(&mut self, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        let model = self.model;
        let cfg = &model.config;
        if let Some(pos) = ids.iter().position(|&i| i >= cfg.phoneme_input_vocab()) {
            return Err(Error::UnknownToken { token: ids[pos], position: pos });
        }
        let e = self.p(self.model.ids.phoneme_emb);
        let s = self.p(self.model.ids.phoneme_special);
        let table = self.tape.concat_rows(e, s);
        let x = self.tape.embed(table, ids);
        let x = self.tape.scale(x, (cfg.model_dim as f64).sqrt());
        let x = self.add_positions(x);
        let x = self.drop(x);
        Ok(self.shared_encoder(x))
    }

    /// Phoneme logits `H·Eᵀ`. A detached table keeps gradients off `E`.
    pub fn phoneme_logits(&mut self, h: Var, detach_embedding: bool) -> Var {
        let id = self.model.ids.phoneme_emb;
        let e = if detach_embedding { self.tape.param_detached(id) } else { self.p(id) };
        self.tape.matmul_t(h, e)
    }

    /// Log-probs over `[blank, phonemes...]` from `H·[b; E]ᵀ`.
    pub fn ctc_logp(&mut self, h: Var) -> Var {
        let b = self.p(self.model.ids.blank);
        let e = self.p(self.model.ids.phoneme_emb);
        let table = self.tape.concat_rows(b, e);
        let logits = self.tape.matmul_t(h, table);
        self.tape.log_softmax(logits)
    }

    /// Teacher-forced decoder log-probs, one row per input position.
    pub fn decoder_logp(&mut self, h: Var, inputs: &[usize], space: OutputSpace) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("decoder prefix"));
        }
        let vocab = self.model.vocab(space);
        if let Some(pos) = inputs.iter().position(|&i| i > vocab) {
            return Err(Error::UnknownToken { token: inputs[pos], position: pos });
        }
        let model = self.model;
        let ids = &model.ids;
        let (emb, (hw, hb)) = match space {
            OutputSpace::Text => (ids.text_emb, ids.text_head),
            OutputSpace::Codes => (ids.code_emb, ids.code_head),
        };
        let table = self.p(emb);
        let x = self.tape.embed(table, inputs);
        let x = self.tape.scale(x, (self.model.config.model_dim as f64).sqrt());
        let x = self.add_positions(x);
        let mut x = self.drop(x);
        for l in &ids.dec {
            let n = self.layer_norm(x, &l.ln1);
            let a = self.attention(n, n, &l.self_attn, true);
            x = self.residual(x, a);
            let n = self.layer_norm(x, &l.ln2);
            let c = self.attention(n, h, &l.cross, false);
            x = self.residual(x, c);
            let n = self.layer_norm(x, &l.ln3);
            let f = self.ffn(n, &l.ffn);
            x = self.residual(x, f);
        }
        let x = self.layer_norm(x, &ids.dec_ln);
        let logits = self.linear(x, hw, hb);
        Ok(self.tape.log_softmax(logits))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            layers_speech_enc: 1,
            layers_shared_enc: 1,
            layers_dec: 1,
            phoneme_vocab: 5,
            text_vocab: 6,
            code_vocab: 7,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(t, f, (0..t * f).map(|_| r.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn downsampling_lengths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.downsampled_len(7), 2);
        for t in 1..200 {
            assert_eq!(cfg.downsampled_len(t), t.div_ceil(2).div_ceil(2));
        }
        let m = Model::new(tiny()).unwrap();
        assert_eq!(m.encode_speech(&features(7, 3, 0), None).unwrap().rows(), 2);
    }

    #[test]
    fn parameter_count_matches_store() {
        let m = Model::new(tiny()).unwrap();
        assert_eq!(m.params.num_scalars(), parameter_count(&tiny()));
        let big = ModelConfig::default();
        assert_eq!(Model::new(big.clone()).unwrap().params.num_scalars(), parameter_count(&big));
    }

    #[test]
    fn embedding_rows_are_bounded_and_init_is_seeded() {
        let m = Model::new(tiny()).unwrap();
        let e = m.phoneme_embedding();
        for i in 0..e.rows() {
            let n: f64 = e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= 3f64.sqrt());
        }
        assert_eq!(Model::new(tiny()).unwrap().params, m.params);
        let other = Model::new(ModelConfig { seed: 2, ..tiny() }).unwrap();
        assert_ne!(other.params, m.params);
    }

    #[test]
    fn all_false_mask_is_a_no_op() {
        let m = Model::new(tiny()).unwrap();
        let x = features(13, 3, 1);
        let a = m.encode_speech(&x, None).unwrap();
        let b = m.encode_speech(&x, Some(&[false; 4])).unwrap();
        assert_eq!(a, b);
        let c = m.encode_speech(&x, Some(&[true, false, false, false])).unwrap();
        assert_ne!(a, c);
        assert!(matches!(m.encode_speech(&x, Some(&[false; 3])), Err(Error::Length { .. })));
    }

    #[test]
    fn encoder_rows_are_normalized() {
        let m = Model::new(tiny()).unwrap();
        let h = m.encode_speech(&features(21, 3, 2), None).unwrap();
        assert!(h.is_finite());
        for t in 0..h.rows() {
            let row = h.row(t);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = Model::new(tiny()).unwrap();
        assert!(matches!(m.encode_speech(&Matrix::zeros(0, 3), None), Err(Error::Empty(_))));
        assert!(matches!(m.encode_speech(&Matrix::zeros(4, 2), None), Err(Error::Dimension { .. })));
        let mut x = features(4, 3, 0);
        x.set(1, 1, f64::NAN);
        assert!(matches!(m.encode_speech(&x, None), Err(Error::NonFinite(_))));
        assert!(matches!(m.encode_phonemes(&[0, 9]), Err(Error::UnknownToken { token: 9, position: 1 })));
        let h = m.encode_phonemes(&[1]).unwrap();
        assert_eq!(h.rows(), 1);
        assert!(matches!(m.decode_step(&[], &h, OutputSpace::Text), Err(Error::Empty(_))));
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn relabeling_phonemes_leaves_output_unchanged() {
        let mut m = Model::new(tiny()).unwrap();
        let seq = [0, 3, 1, 5, 4, 2];
        let before = m.encode_phonemes(&seq).unwrap();
        // Swap rows 0 and 3 of E and relabel the ids the same way.
        let id = m.phoneme_embedding_id();
        let e = m.params.get_mut(id);
        let (r0, r3) = (e.row(0).to_vec(), e.row(3).to_vec());
        e.row_mut(0).copy_from_slice(&r3);
        e.row_mut(3).copy_from_slice(&r0);
        let relabeled: Vec<usize> = seq.iter().map(|&i| if i == 0 { 3 } else if i == 3 { 0 } else { i }).collect();
        assert_eq!(m.encode_phonemes(&relabeled).unwrap(), before);
    }

    #[test]
    fn decoder_is_normalized_and_causal() {
        let m = Model::new(tiny()).unwrap();
        let h = m.encode_speech(&features(17, 3, 3), None).unwrap();
        let full = [6, 1, 2, 3, 0, 5, 4, 4];
        let lp = m.decoder_logp(&h, &full, OutputSpace::Text).unwrap();
        for t in 0..lp.rows() {
            let s: f64 = lp.row(t).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for k in 1..=3 {
            let step = m.decode_step(&full[..k], &h, OutputSpace::Text).unwrap();
            let diff = step.iter().zip(lp.row(k - 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "{diff}");
        }
        let codes = m.decode_step(&[7, 0], &h, OutputSpace::Codes).unwrap();
        assert_eq!(codes.len(), 8);
    }

    #[test]
    fn phoneme_embedding_gradient_matches_finite_differences() {
        let m = Model::new(tiny()).unwrap();
        let seq = [0, 2, 4, 1, 5, 2];
        let loss_of = |model: &Model| -> (f64, Option<Matrix>) {
            let mut tape = Tape::new(&model.params);
            let mut fwd = Forward::new(model, &mut tape, None);
            let h = fwd.encode_phonemes(&seq).unwrap();
            let s = fwd.tape.sum_all(h);
            let v = tape.value(s).item();
            let g = tape.backward(s).get(model.phoneme_embedding_id()).cloned();
            (v, g)
        };
        // sum(H) is zero after a plain layer norm, so tilt the final gain.
        let mut m = m;
        let g_id = m.params.id("enc_ln.g").unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for x in m.params.get_mut(g_id).data_mut() {
            *x = r.random_range(0.5..1.5);
        }
        let grad = loss_of(&m).1.unwrap();
        let id = m.phoneme_embedding_id();
        let h = 1e-6;
        for idx in 0..m.params.get(id).len() {
            let mut a = m.clone();
            a.params.get_mut(id).data_mut()[idx] += h;
            let mut b = m.clone();
            b.params.get_mut(id).data_mut()[idx] -= h;
            let fd = (loss_of(&a).0 - loss_of(&b).0) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{idx}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn from_params_checks_layout() {
        let m = Model::new(tiny()).unwrap();
        assert!(Model::from_params(tiny(), m.params.clone()).is_ok());
        assert!(Model::from_params(ModelConfig { text_vocab: 9, ..tiny() }, m.params.clone()).is_err());
    }
}
