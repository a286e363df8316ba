//! Synthetic corpus generation. Text comes from a fixed sparse Markov chain
//! over text tokens; every token goes through the lexicon to a phoneme, and
//! every phoneme emits a few frames drawn around a per-phoneme mean vector.
//! Speech is therefore a known noisy function of phonemes, and ground truth
//! exists for every paired utterance.

use autograd::Matrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub seed: u64,
    pub n_text_utts: usize,
    pub n_unlabeled_speech_utts: usize,
    pub n_paired_utts: usize,
    pub text_vocab_size: usize,
    /// When absent, `text_vocab_size - ⌈homophone_rate·text_vocab_size⌉`.
    pub phoneme_vocab_size: Option<usize>,
    pub homophone_rate: f64,
    pub feature_dim: usize,
    /// Inclusive range of frames emitted per phoneme.
    pub frames_per_phoneme: [usize; 2],
    pub noise_std: f64,
    /// Inclusive range of utterance lengths in text tokens.
    pub text_len: [usize; 2],
    /// Likely successors per token in the Markov chain.
    pub markov_branching: usize,
    /// Probability mass spread uniformly over all successors.
    pub markov_smoothing: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_text_utts: 50_000,
            n_unlabeled_speech_utts: 10_000,
            n_paired_utts: 2_000,
            text_vocab_size: 48,
            phoneme_vocab_size: None,
            homophone_rate: 0.5,
            feature_dim: 16,
            frames_per_phoneme: [4, 8],
            noise_std: 0.8,
            text_len: [3, 8],
            markov_branching: 3,
            markov_smoothing: 0.05,
            dev_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn phoneme_vocab(&self) -> usize {
        self.phoneme_vocab_size.unwrap_or_else(|| {
            let extra = (self.homophone_rate * self.text_vocab_size as f64).ceil() as usize;
            self.text_vocab_size.saturating_sub(extra).max(1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_text_utts == 0 || self.n_unlabeled_speech_utts == 0 || self.n_paired_utts == 0 {
            return bad("all utterance counts must be at least 1".into());
        }
        if self.text_vocab_size == 0 || self.feature_dim == 0 {
            return bad("text_vocab_size and feature_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.homophone_rate) {
            return bad(format!("homophone_rate {} outside [0, 1]", self.homophone_rate));
        }
        let i = self.phoneme_vocab();
        if i == 0 || i > self.text_vocab_size {
            return bad(format!("phoneme vocabulary {i} must be in 1..={}", self.text_vocab_size));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        let [flo, fhi] = self.frames_per_phoneme;
        if flo == 0 || flo > fhi {
            return bad(format!("frames_per_phoneme [{flo}, {fhi}] is not a valid range"));
        }
        let [tlo, thi] = self.text_len;
        if tlo == 0 || tlo > thi {
            return bad(format!("text_len [{tlo}, {thi}] is not a valid range"));
        }
        if self.markov_branching == 0 || self.markov_branching > self.text_vocab_size {
            return bad(format!("markov_branching {} must be in 1..={}", self.markov_branching, self.text_vocab_size));
        }
        if !(0.0..=1.0).contains(&self.markov_smoothing) {
            return bad(format!("markov_smoothing {} outside [0, 1]", self.markov_smoothing));
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction >= 1.0 {
            return bad("dev_fraction + test_fraction must be in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UttKind {
    Speech,
    Text,
    Paired,
}

impl UttKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UttKind::Speech => "speech",
            UttKind::Text => "text",
            UttKind::Paired => "paired",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speech" => Some(UttKind::Speech),
            "text" => Some(UttKind::Text),
            "paired" => Some(UttKind::Paired),
            _ => None,
        }
    }

    fn tag(self) -> u64 {
        match self {
            UttKind::Speech => 0,
            UttKind::Text => 1,
            UttKind::Paired => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// T×F frames.
    pub features: Option<Matrix>,
    pub text: Option<Vec<usize>>,
    pub split: Split,
}

impl Utterance {
    pub fn kind(&self) -> UttKind {
        match (&self.features, &self.text) {
            (Some(_), Some(_)) => UttKind::Paired,
            (Some(_), None) => UttKind::Speech,
            _ => UttKind::Text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.features, &self.text) {
            (None, None) => Err(Error::Config(format!("utterance {} has neither features nor text", self.id))),
            (Some(_), Some(t)) if t.is_empty() => {
                Err(Error::Config(format!("paired utterance {} has empty text", self.id)))
            }
            _ => Ok(()),
        }
    }
}

/// Sparse first-order Markov chain over text tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextLanguage {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl TextLanguage {
    fn generate(vocab: usize, branching: usize, smoothing: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::LANGUAGE]);
        let sparse_row = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut row = vec![smoothing / vocab as f64; vocab];
            let picks = sample(r, vocab, branching);
            let weights: Vec<f64> = picks.iter().map(|_| r.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            for (i, w) in picks.iter().zip(weights) {
                row[i] += (1.0 - smoothing) * w / total;
            }
            row
        };
        let initial = sparse_row(&mut r);
        let transitions = (0..vocab).map(|_| sparse_row(&mut r)).collect();
        Self { initial, transitions }
    }

    fn draw(dist: &[f64], r: &mut impl Rng) -> usize {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.len() - 1
    }

    pub fn sample(&self, len: usize, r: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = Self::draw(&self.initial, r);
        out.push(cur);
        while out.len() < len {
            cur = Self::draw(&self.transitions[cur], r);
            out.push(cur);
        }
        out
    }
}

/// A generated corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SyntheticCorpusConfig,
    pub lexicon: Lexicon,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn select(&self, kind: UttKind, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.kind() == kind && u.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

/// Everything the generator draws once per corpus.
pub struct Generator {
    pub lexicon: Lexicon,
    pub language: TextLanguage,
    /// I×F per-phoneme mean vectors.
    pub phoneme_means: Matrix,
    cfg: SyntheticCorpusConfig,
}

impl Generator {
    pub fn new(cfg: &SyntheticCorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let lexicon = Lexicon::synthetic(cfg.text_vocab_size, cfg.phoneme_vocab(), cfg.seed)?;
        let language =
            TextLanguage::generate(cfg.text_vocab_size, cfg.markov_branching, cfg.markov_smoothing, cfg.seed);
        let mut r = rng::stream(cfg.seed, &[tag::PHONEME_MEANS]);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let i = lexicon.phoneme_vocab_size();
        let means = (0..i * cfg.feature_dim).map(|_| round_f32(normal.sample(&mut r))).collect();
        Ok(Self { lexicon, language, phoneme_means: Matrix::from_vec(i, cfg.feature_dim, means), cfg: cfg.clone() })
    }

    /// Frames for a phoneme sequence; values are rounded to `f32` so that
    /// stored features reload bit-exactly.
    pub fn render(&self, phonemes: &[usize], r: &mut impl Rng) -> Matrix {
        let [lo, hi] = self.cfg.frames_per_phoneme;
        let f = self.cfg.feature_dim;
        let mut data = Vec::new();
        let noise = (self.cfg.noise_std > 0.0).then(|| Normal::new(0.0, self.cfg.noise_std).expect("valid std"));
        for &p in phonemes {
            let n = r.random_range(lo..=hi);
            for _ in 0..n {
                for c in 0..f {
                    let mu = self.phoneme_means.get(p, c);
                    let v = match &noise {
                        Some(d) => mu + d.sample(r),
                        None => mu,
                    };
                    data.push(round_f32(v));
                }
            }
        }
        let t = data.len() / f;
        Matrix::from_vec(t, f, data)
    }

    pub fn utterance(&self, kind: UttKind, index: usize, split: Split) -> Utterance {
        let mut r = rng::stream(self.cfg.seed, &[tag::UTTERANCE, kind.tag(), index as u64]);
        let [lo, hi] = self.cfg.text_len;
        let len = r.random_range(lo..=hi);
        let text = self.language.sample(len, &mut r);
        let phonemes = self.lexicon.text_to_phonemes(&text).expect("language emits lexicon tokens");
        let features = (kind != UttKind::Text).then(|| self.render(&phonemes, &mut r));
        Utterance {
            id: format!("{}-{index:06}", kind.as_str()),
            features,
            text: (kind != UttKind::Speech).then_some(text),
            split,
        }
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn split_for(index: usize, total: usize, dev: f64, test: f64) -> Split {
    let n_test = (total as f64 * test).round() as usize;
    let n_dev = (total as f64 * dev).round() as usize;
    let n_train = total.saturating_sub(n_test + n_dev);
    if index < n_train {
        Split::Train
    } else if index < n_train + n_dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Generates the full corpus. Paired data is split train/dev/test, text is
/// split train/dev (dev drives stage-1 early stopping), unlabeled speech is
/// all train.
pub fn synth_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    let gen = Generator::new(cfg)?;
    let mut utterances = Vec::with_capacity(cfg.n_paired_utts + cfg.n_text_utts + cfg.n_unlabeled_speech_utts);
    for i in 0..cfg.n_paired_utts {
        let split = split_for(i, cfg.n_paired_utts, cfg.dev_fraction, cfg.test_fraction);
        utterances.push(gen.utterance(UttKind::Paired, i, split));
    }
    for i in 0..cfg.n_unlabeled_speech_utts {
        utterances.push(gen.utterance(UttKind::Speech, i, Split::Train));
    }
    for i in 0..cfg.n_text_utts {
        let split = split_for(i, cfg.n_text_utts, cfg.dev_fraction.min(0.02), 0.0);
        utterances.push(gen.utterance(UttKind::Text, i, split));
    }
    Ok(Corpus { config: cfg.clone(), lexicon: gen.lexicon, utterances })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            n_text_utts: 40,
            n_unlabeled_speech_utts: 30,
            n_paired_utts: 100,
            ..SyntheticCorpusConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_with_homophones() {
        let cfg = SyntheticCorpusConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.phoneme_vocab(), 24);
    }

    #[test]
    fn counts_match_configuration() {
        let c = synth_corpus(&small()).unwrap();
        let paired = c.utterances.iter().filter(|u| u.kind() == UttKind::Paired).count();
        assert_eq!(paired, 100);
        assert_eq!(c.utterances.iter().filter(|u| u.kind() == UttKind::Speech).count(), 30);
        assert_eq!(c.utterances.iter().filter(|u| u.kind() == UttKind::Text).count(), 40);
        for u in &c.utterances {
            u.validate().unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(synth_corpus(&small()).unwrap(), synth_corpus(&small()).unwrap());
        let other = SyntheticCorpusConfig { seed: 99, ..small() };
        assert_ne!(synth_corpus(&small()).unwrap(), synth_corpus(&other).unwrap());
    }

    #[test]
    fn ids_are_unique_and_splits_disjoint() {
        let c = synth_corpus(&small()).unwrap();
        let ids: HashSet<_> = c.utterances.iter().map(|u| &u.id).collect();
        assert_eq!(ids.len(), c.utterances.len());
        let splits: HashSet<_> = c.utterances.iter().filter(|u| u.kind() == UttKind::Paired).map(|u| u.split).collect();
        assert_eq!(splits.len(), 3);
    }

    #[test]
    fn zero_noise_single_frame_reproduces_phoneme_means() {
        let cfg = SyntheticCorpusConfig { noise_std: 0.0, frames_per_phoneme: [1, 1], ..small() };
        let gen = Generator::new(&cfg).unwrap();
        let u = gen.utterance(UttKind::Paired, 3, Split::Train);
        let phonemes = gen.lexicon.text_to_phonemes(u.text.as_ref().unwrap()).unwrap();
        let feats = u.features.unwrap();
        assert_eq!(feats.rows(), phonemes.len());
        for (t, &p) in phonemes.iter().enumerate() {
            assert_eq!(feats.row(t), gen.phoneme_means.row(p));
        }
    }

    #[test]
    fn zero_noise_frames_are_nearest_centroid_separable() {
        let cfg = SyntheticCorpusConfig { noise_std: 0.0, ..small() };
        let gen = Generator::new(&cfg).unwrap();
        let means = &gen.phoneme_means;
        for i in 0..20 {
            let u = gen.utterance(UttKind::Paired, i, Split::Train);
            let phonemes = gen.lexicon.text_to_phonemes(u.text.as_ref().unwrap()).unwrap();
            let feats = u.features.unwrap();
            let mut decoded = Vec::new();
            for t in 0..feats.rows() {
                let best = (0..means.rows())
                    .min_by(|&a, &b| {
                        let da: f64 = feats.row(t).iter().zip(means.row(a)).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = feats.row(t).iter().zip(means.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                decoded.push(best);
            }
            decoded.dedup();
            let mut expected = phonemes.clone();
            expected.dedup();
            assert_eq!(decoded, expected);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            SyntheticCorpusConfig { n_paired_utts: 0, ..small() },
            SyntheticCorpusConfig { noise_std: -1.0, ..small() },
            SyntheticCorpusConfig { phoneme_vocab_size: Some(100), ..small() },
            SyntheticCorpusConfig { frames_per_phoneme: [3, 2], ..small() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
