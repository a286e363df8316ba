//! Text-token to phoneme mapping and the span noising applied to phoneme
//! inputs of the phoneme-to-text task.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Many-to-one map from text tokens to phoneme ids `0..phoneme_vocab_size`.
/// The four special ids follow the phoneme range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    text_to_phoneme: Vec<usize>,
    phoneme_vocab_size: usize,
}

impl Lexicon {
    pub fn new(text_to_phoneme: Vec<usize>, phoneme_vocab_size: usize) -> Result<Self> {
        if phoneme_vocab_size == 0 {
            return Err(Error::Config("phoneme vocabulary is empty".into()));
        }
        if let Some((token, &p)) = text_to_phoneme.iter().enumerate().find(|(_, &p)| p >= phoneme_vocab_size) {
            return Err(Error::Config(format!(
                "token {token} maps to phoneme {p} outside 0..{phoneme_vocab_size}"
            )));
        }
        Ok(Self { text_to_phoneme, phoneme_vocab_size })
    }

    /// Tokens `0..I` take a seeded permutation of the phoneme inventory, so
    /// every phoneme is reachable; tokens `I..V` become homophones of a
    /// uniformly chosen phoneme.
    pub fn synthetic(text_vocab_size: usize, phoneme_vocab_size: usize, seed: u64) -> Result<Self> {
        if phoneme_vocab_size == 0 || phoneme_vocab_size > text_vocab_size {
            return Err(Error::Config(format!(
                "need 1 <= phoneme_vocab_size ({phoneme_vocab_size}) <= text_vocab_size ({text_vocab_size})"
            )));
        }
        let mut r = rng::stream(seed, &[rng::tag::LEXICON]);
        let mut map: Vec<usize> = (0..phoneme_vocab_size).collect();
        map.shuffle(&mut r);
        for _ in phoneme_vocab_size..text_vocab_size {
            map.push(r.random_range(0..phoneme_vocab_size));
        }
        Self::new(map, phoneme_vocab_size)
    }

    pub fn text_vocab_size(&self) -> usize {
        self.text_to_phoneme.len()
    }

    pub fn phoneme_vocab_size(&self) -> usize {
        self.phoneme_vocab_size
    }

    pub fn mask_id(&self) -> usize {
        self.phoneme_vocab_size
    }

    pub fn pad_id(&self) -> usize {
        self.phoneme_vocab_size + 1
    }

    pub fn bos_id(&self) -> usize {
        self.phoneme_vocab_size + 2
    }

    pub fn eos_id(&self) -> usize {
        self.phoneme_vocab_size + 3
    }

    /// Phoneme ids plus the four specials.
    pub fn input_vocab_size(&self) -> usize {
        self.phoneme_vocab_size + 4
    }

    pub fn phoneme_of(&self, token: usize) -> Option<usize> {
        self.text_to_phoneme.get(token).copied()
    }

    pub fn text_to_phonemes(&self, text: &[usize]) -> Result<Vec<usize>> {
        text.iter()
            .enumerate()
            .map(|(position, &token)| self.phoneme_of(token).ok_or(Error::UnknownToken { token, position }))
            .collect()
    }

    /// Text tokens grouped by phoneme; groups with more than one member are homophones.
    pub fn homophone_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.phoneme_vocab_size];
        for (t, &p) in self.text_to_phoneme.iter().enumerate() {
            groups[p].push(t);
        }
        groups
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# phoneme_vocab_size={}\n", self.phoneme_vocab_size);
        for (t, p) in self.text_to_phoneme.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{p}");
        }
        s
    }

    pub fn from_tsv(text: &str, file: &str) -> Result<Self> {
        let mut declared = None;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("phoneme_vocab_size=") {
                    declared = Some(v.parse::<usize>().map_err(|e| Error::Parse {
                        file: file.into(),
                        line: line_no,
                        message: format!("bad phoneme_vocab_size: {e}"),
                    })?);
                }
                continue;
            }
            let parse_err = |message: String| Error::Parse { file: file.into(), line: line_no, message };
            let mut fields = line.split('\t');
            let (Some(t), Some(p), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err("expected `token_id<TAB>phoneme_id`".into()));
            };
            let t: usize = t.parse().map_err(|e| parse_err(format!("token id: {e}")))?;
            let p: usize = p.parse().map_err(|e| parse_err(format!("phoneme id: {e}")))?;
            pairs.push((t, p));
        }
        pairs.sort_unstable();
        for (i, &(t, _)) in pairs.iter().enumerate() {
            if t != i {
                return Err(Error::Parse {
                    file: file.into(),
                    line: 0,
                    message: format!("token ids must cover 0..{} exactly once; problem at token {t}", pairs.len()),
                });
            }
        }
        let map: Vec<usize> = pairs.into_iter().map(|(_, p)| p).collect();
        let inferred = map.iter().max().map_or(0, |m| m + 1);
        Self::new(map, declared.unwrap_or(inferred))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub mask_ratio: f64,
    pub max_span: usize,
    /// Share of corrupted positions that get a random phoneme instead of the mask id.
    pub replace_fraction: f64,
    /// Per-token continuation probability of the truncated geometric span length.
    pub span_continue: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.30, max_span: 3, replace_fraction: 0.1, span_continue: 0.5 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.replace_fraction) {
            return Err(Error::Config(format!("replace_fraction {} outside [0, 1]", self.replace_fraction)));
        }
        if !(0.0..1.0).contains(&self.span_continue) {
            return Err(Error::Config(format!("span_continue {} outside [0, 1)", self.span_continue)));
        }
        if self.max_span == 0 {
            return Err(Error::Config("max_span must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoisedPhonemes {
    pub noisy: Vec<usize>,
    pub corrupted: Vec<bool>,
}

/// Corrupts exactly `⌈mask_ratio·n⌉` positions. Spans start uniformly, have
/// truncated-geometric lengths capped at `max_span`, and overlapping spans
/// merge; the last span is cut short once the budget is met. Each corrupted
/// position becomes a uniform random phoneme with probability
/// `replace_fraction`, otherwise the mask id.
pub fn noise_phonemes(seq: &[usize], lex: &Lexicon, cfg: &NoiseConfig, r: &mut impl Rng) -> NoisedPhonemes {
    let n = seq.len();
    let mut corrupted = vec![false; n];
    let budget = ((cfg.mask_ratio * n as f64).ceil() as usize).min(n);
    let mut count = 0;
    while count < budget {
        let start = r.random_range(0..n);
        let mut len = 1;
        while len < cfg.max_span && r.random_bool(cfg.span_continue) {
            len += 1;
        }
        for c in corrupted.iter_mut().skip(start).take(len) {
            if count == budget {
                break;
            }
            if !*c {
                *c = true;
                count += 1;
            }
        }
    }
    let noisy = seq
        .iter()
        .zip(&corrupted)
        .map(|(&p, &c)| {
            if !c {
                p
            } else if cfg.replace_fraction > 0.0 && r.random_bool(cfg.replace_fraction) {
                r.random_range(0..lex.phoneme_vocab_size())
            } else {
                lex.mask_id()
            }
        })
        .collect();
    NoisedPhonemes { noisy, corrupted }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn lex() -> Lexicon {
        Lexicon::synthetic(40, 20, 3).unwrap()
    }

    #[test]
    fn synthetic_lexicon_is_total_and_covers_every_phoneme() {
        let l = lex();
        assert_eq!(l.text_vocab_size(), 40);
        let groups = l.homophone_groups();
        assert!(groups.iter().all(|g| !g.is_empty()));
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 40);
        let specials = [l.mask_id(), l.pad_id(), l.bos_id(), l.eos_id()];
        for (i, &a) in specials.iter().enumerate() {
            assert!(a >= l.phoneme_vocab_size());
            assert!(specials[i + 1..].iter().all(|&b| b != a));
        }
    }

    #[test]
    fn empty_text_maps_to_empty_phonemes() {
        assert!(lex().text_to_phonemes(&[]).unwrap().is_empty());
    }

    #[test]
    fn homophones_give_identical_phonemes() {
        let l = lex();
        let group = l.homophone_groups().into_iter().find(|g| g.len() > 1).unwrap();
        let (a, b) = (group[0], group[1]);
        assert_ne!(a, b);
        assert_eq!(l.text_to_phonemes(&[a]).unwrap(), l.text_to_phonemes(&[b]).unwrap());
    }

    #[test]
    fn conversion_is_elementwise_lookup() {
        let l = lex();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let text: Vec<usize> = (0..50).map(|_| r.random_range(0..40)).collect();
        let oracle: Vec<usize> = text.iter().map(|&t| l.text_to_phoneme[t]).collect();
        assert_eq!(l.text_to_phonemes(&text).unwrap(), oracle);
    }

    #[test]
    fn unknown_token_reports_position() {
        match lex().text_to_phonemes(&[1, 2, 99]) {
            Err(Error::UnknownToken { token: 99, position: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tsv_round_trip() {
        let l = lex();
        assert_eq!(Lexicon::from_tsv(&l.to_tsv(), "mem").unwrap(), l);
        assert!(matches!(Lexicon::from_tsv("0\t1\n1\n", "mem"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn zero_ratio_is_a_no_op() {
        let l = lex();
        let seq: Vec<usize> = (0..20).collect();
        let cfg = NoiseConfig { mask_ratio: 0.0, ..NoiseConfig::default() };
        let out = noise_phonemes(&seq, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.noisy, seq);
        assert!(out.corrupted.iter().all(|c| !c));
    }

    #[test]
    fn full_ratio_without_replacement_masks_everything() {
        let l = lex();
        let seq: Vec<usize> = (0..20).collect();
        let cfg = NoiseConfig { mask_ratio: 1.0, replace_fraction: 0.0, ..NoiseConfig::default() };
        let out = noise_phonemes(&seq, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.noisy.iter().all(|&p| p == l.mask_id()));
    }

    #[test]
    fn corrupted_fraction_concentrates_at_the_ratio() {
        let l = lex();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let seq: Vec<usize> = (0..1000).map(|_| r.random_range(0..20)).collect();
        let cfg = NoiseConfig::default();
        let mut total = 0.0;
        for seed in 0..200 {
            let out = noise_phonemes(&seq, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.noisy.len(), seq.len());
            total += out.corrupted.iter().filter(|&&c| c).count() as f64 / 1000.0;
        }
        let mean = total / 200.0;
        assert!((0.29..=0.31).contains(&mean), "mean corrupted fraction {mean}");
    }
}
