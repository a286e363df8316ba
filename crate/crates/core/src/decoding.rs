//! Beam search with shallow fusion, a count-based language model and token
//! error rate.
//!
//! Token ids `0..V` are text tokens; `V` is the end-of-sequence symbol in
//! every next-token distribution and the start symbol in every context.

use std::collections::HashMap;
use std::path::Path;

use autograd::log_sum_exp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{load_json, save_json};
use crate::dataset::PairedItem;
use crate::error::{Error, Result};
use crate::model::{Model, OutputSpace};

/// Next-token log-probabilities over `V + 1` symbols.
pub trait LanguageModel: Sync {
    fn vocab(&self) -> usize;
    fn next_logp(&self, prefix: &[usize]) -> Vec<f64>;

    /// Log-probability of `seq` followed by the end symbol.
    fn sequence_logp(&self, seq: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..=seq.len() {
            let next = seq.get(i).copied().unwrap_or(self.vocab());
            total += self.next_logp(&seq[..i])[next];
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgramConfig {
    pub order: usize,
    /// Add-α pseudo-count.
    pub alpha: f64,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self { order: 3, alpha: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ContextCounts {
    context: Vec<usize>,
    next: Vec<(usize, u64)>,
}

/// Order-n model with add-α smoothing over the `V + 1` outcomes of each
/// context. Contexts are left-padded with the start symbol; unseen contexts
/// give the uniform distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NgramFile", into = "NgramFile")]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    vocab: usize,
    counts: HashMap<Vec<usize>, (u64, HashMap<usize, u64>)>,
}

#[derive(Serialize, Deserialize)]
struct NgramFile {
    order: usize,
    alpha: f64,
    vocab: usize,
    contexts: Vec<ContextCounts>,
}

impl From<NgramFile> for NgramLm {
    fn from(f: NgramFile) -> Self {
        let counts = f
            .contexts
            .into_iter()
            .map(|c| {
                let total = c.next.iter().map(|&(_, n)| n).sum();
                (c.context, (total, c.next.into_iter().collect()))
            })
            .collect();
        Self { order: f.order, alpha: f.alpha, vocab: f.vocab, counts }
    }
}

impl From<NgramLm> for NgramFile {
    fn from(lm: NgramLm) -> Self {
        let mut contexts: Vec<ContextCounts> = lm
            .counts
            .into_iter()
            .map(|(context, (_, next))| {
                let mut next: Vec<_> = next.into_iter().collect();
                next.sort_unstable();
                ContextCounts { context, next }
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        Self { order: lm.order, alpha: lm.alpha, vocab: lm.vocab, contexts }
    }
}

impl NgramLm {
    fn context(&self, prefix: &[usize]) -> Vec<usize> {
        let n = self.order - 1;
        let mut ctx = vec![self.vocab; n.saturating_sub(prefix.len())];
        ctx.extend_from_slice(&prefix[prefix.len().saturating_sub(n)..]);
        ctx
    }

    /// Mean negative log-likelihood per predicted symbol (end symbols
    /// included), exponentiated.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let n: usize = corpus.iter().map(|s| s.len() + 1).sum();
        if n == 0 {
            return Err(Error::Empty("evaluation corpus"));
        }
        let total: f64 = corpus.iter().map(|s| self.sequence_logp(s)).sum();
        Ok((-total / n as f64).exp())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, "mtpt-ngram", 1, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lm: Self = load_json(path, "mtpt-ngram", 1)?;
        if lm.order == 0 || !(lm.alpha > 0.0) || lm.vocab == 0 {
            return Err(Error::Config(format!("{}: invalid language model header", path.display())));
        }
        Ok(lm)
    }
}

impl LanguageModel for NgramLm {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn next_logp(&self, prefix: &[usize]) -> Vec<f64> {
        let outcomes = (self.vocab + 1) as f64;
        let ctx = self.context(prefix);
        let Some((total, next)) = self.counts.get(&ctx) else {
            return vec![-outcomes.ln(); self.vocab + 1];
        };
        let denom = (*total as f64 + self.alpha * outcomes).ln();
        (0..=self.vocab)
            .map(|w| (next.get(&w).copied().unwrap_or(0) as f64 + self.alpha).ln() - denom)
            .collect()
    }
}

pub fn train_lm(corpus: &[Vec<usize>], vocab: usize, cfg: &NgramConfig) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::Empty("language model training corpus"));
    }
    if cfg.order == 0 || !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::Config(format!("n-gram order {} / alpha {} invalid", cfg.order, cfg.alpha)));
    }
    let mut lm = NgramLm { order: cfg.order, alpha: cfg.alpha, vocab, counts: HashMap::new() };
    for seq in corpus {
        for i in 0..=seq.len() {
            let next = match seq.get(i) {
                Some(&w) if w >= vocab => return Err(Error::UnknownToken { token: w, position: i }),
                Some(&w) => w,
                None => vocab,
            };
            let ctx = lm.context(&seq[..i]);
            let e = lm.counts.entry(ctx).or_default();
            e.0 += 1;
            *e.1.entry(next).or_default() += 1;
        }
    }
    Ok(lm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Shallow-fusion weight μ on the language model.
    pub lm_weight: f64,
    /// Exponent β of the length normalizer `((5 + len) / 6)^β`.
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 4, lm_weight: 0.3, length_penalty: 0.0, max_len: 32 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::Config(format!("lm_weight {} must be finite and >= 0", self.lm_weight)));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }

    fn normalizer(&self, len: usize) -> f64 {
        if self.length_penalty == 0.0 {
            1.0
        } else {
            ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Length-normalized fused score.
    pub score: f64,
    /// False when the hypothesis hit `max_len` and the end symbol was forced.
    pub finished: bool,
}

#[derive(Clone)]
struct Partial {
    tokens: Vec<usize>,
    raw: f64,
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search over a next-token scorer returning `V + 1` log-probs.
/// Candidates are ranked by score, ties broken by the lexicographically
/// smallest token sequence. At `max_len` tokens only the end symbol may
/// follow.
pub fn beam_search(
    vocab: usize,
    mut step: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    lm: Option<&dyn LanguageModel>,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let lm = match (lm, cfg.lm_weight > 0.0) {
        (_, false) => None,
        (Some(lm), true) if lm.vocab() == vocab => Some(lm),
        (Some(lm), true) => return Err(Error::Dimension { expected: vocab, got: lm.vocab() }),
        (None, true) => return Err(Error::Config("lm_weight > 0 needs a language model".into())),
    };
    let mut live = vec![Partial { tokens: Vec::new(), raw: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..=cfg.max_len {
        let mut cands: Vec<(Partial, bool)> = Vec::new();
        let at_limit = live[0].tokens.len() == cfg.max_len;
        for p in &live {
            let lp = step(&p.tokens)?;
            if lp.len() != vocab + 1 {
                return Err(Error::Dimension { expected: vocab + 1, got: lp.len() });
            }
            let fused = lm.map(|lm| lm.next_logp(&p.tokens));
            for (w, &l) in lp.iter().enumerate() {
                if at_limit && w != vocab {
                    continue;
                }
                let s = l + fused.as_ref().map_or(0.0, |f| cfg.lm_weight * f[w]);
                let mut tokens = p.tokens.clone();
                if w != vocab {
                    tokens.push(w);
                }
                cands.push((Partial { tokens, raw: p.raw + s }, w == vocab));
            }
        }
        let norm = |c: &(Partial, bool)| c.0.raw / cfg.normalizer(c.0.tokens.len());
        cands.sort_by(|a, b| better((norm(a), &a.0.tokens), (norm(b), &b.0.tokens)).then(b.1.cmp(&a.1)));
        cands.truncate(cfg.beam_size);
        live.clear();
        for c in cands {
            let score = norm(&c);
            if c.1 {
                let done = c.0.tokens.len() < cfg.max_len;
                finished.push(Hypothesis { tokens: c.0.tokens, score, finished: done });
            } else {
                live.push(c.0);
            }
        }
        if live.is_empty() {
            break;
        }
        // Scores only fall as hypotheses grow when nothing rewards length.
        if cfg.length_penalty == 0.0 {
            let best_live = live.iter().map(|p| p.raw).fold(f64::NEG_INFINITY, f64::max);
            if finished.iter().any(|h| h.score > best_live) {
                break;
            }
        }
    }
    finished.into_iter().min_by(|a, b| better((a.score, &a.tokens), (b.score, &b.tokens))).ok_or(Error::Empty("beam"))
}

/// Argmax decoding, ties to the lowest id.
pub fn greedy_search(vocab: usize, mut step: impl FnMut(&[usize]) -> Result<Vec<f64>>, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    loop {
        let lp = step(&tokens)?;
        let limit = tokens.len() == max_len;
        let (w, &l) = lp
            .iter()
            .enumerate()
            .filter(|&(w, _)| !limit || w == vocab)
            .fold(None, |best: Option<(usize, &f64)>, (w, l)| match best {
                Some((_, b)) if *b >= *l => best,
                _ => Some((w, l)),
            })
            .ok_or(Error::Empty("next-token distribution"))?;
        score += l;
        if w == vocab {
            let finished = !limit;
            return Ok(Hypothesis { tokens, score, finished });
        }
        tokens.push(w);
    }
}

fn model_step<'a>(model: &'a Model, h: &'a autograd::Matrix) -> impl FnMut(&[usize]) -> Result<Vec<f64>> + 'a {
    let v = model.config.text_vocab;
    move |prefix: &[usize]| {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(v);
        inputs.extend_from_slice(prefix);
        model.decode_step(&inputs, h, OutputSpace::Text)
    }
}

/// Beam-decodes one utterance to text.
pub fn decode_utterance(
    model: &Model,
    features: &autograd::Matrix,
    lm: Option<&dyn LanguageModel>,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    let h = model.encode_speech(features, None)?;
    let v = model.config.text_vocab;
    beam_search(v, model_step(model, &h), lm, cfg)
}

pub fn greedy_utterance(model: &Model, features: &autograd::Matrix, max_len: usize) -> Result<Hypothesis> {
    let h = model.encode_speech(features, None)?;
    greedy_search(model.config.text_vocab, model_step(model, &h), max_len)
}

/// Decodes in parallel; output order follows `items`.
pub fn decode_set(
    model: &Model,
    items: &[PairedItem],
    lm: Option<&dyn LanguageModel>,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    items.par_iter().map(|it| decode_utterance(model, &it.features, lm, cfg)).collect()
}

/// Greedy-decoded token error rate over `items`.
pub fn greedy_ter(model: &Model, items: &[PairedItem], max_len: usize) -> Result<f64> {
    let hyps: Vec<Vec<usize>> =
        items.par_iter().map(|it| greedy_utterance(model, &it.features, max_len).map(|h| h.tokens)).collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = items.iter().map(|it| it.text.clone()).collect();
    token_error_rate(&hyps, &refs)
}

/// Substitutions, insertions and deletions turning `hyp` into `reference`.
pub fn levenshtein<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(h != r)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Summed edit distance over summed reference length.
pub fn token_error_rate<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Length { expected: refs.len(), got: hyps.len() });
    }
    let n: usize = refs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Empty("reference set"));
    }
    let e: usize = hyps.iter().zip(refs).map(|(h, r)| levenshtein(h, r)).sum();
    Ok(e as f64 / n as f64)
}

/// Log-normalizer check used by tests and the CLI.
pub fn distribution_mass(logp: &[f64]) -> f64 {
    log_sum_exp(logp).exp()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Deterministic toy scorer: log-softmax of a hash of the prefix.
    fn toy_scorer(vocab: usize, seed: u64) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let mut h = seed;
            for &t in prefix {
                h = crate::rng::derive_seed(h, &[t as u64]);
            }
            let mut r = ChaCha8Rng::seed_from_u64(h);
            let logits: Vec<f64> = (0..=vocab).map(|_| r.random_range(-2.0..2.0)).collect();
            let z = log_sum_exp(&logits);
            Ok(logits.iter().map(|l| l - z).collect())
        }
    }

    fn textbook_edit(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[vec!['a', 'x', 'c']], &[vec!['a', 'b', 'c']]).unwrap(), 1.0 / 3.0);
        assert_eq!(token_error_rate(&[vec![1, 2], vec![3]], &[vec![1, 2], vec![3]]).unwrap(), 0.0);
        assert!(matches!(token_error_rate::<u8>(&[], &[]), Err(Error::Empty(_))));
        assert_eq!(levenshtein(&[1, 2, 3], &[] as &[i32]), 3);
    }

    #[test]
    fn ter_matches_textbook_dp() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        let mut errs = 0;
        let mut n = 0;
        for _ in 0..100 {
            let a: Vec<u8> = (0..r.random_range(0..9)).map(|_| r.random_range(0..4)).collect();
            let b: Vec<u8> = (0..r.random_range(1..9)).map(|_| r.random_range(0..4)).collect();
            errs += textbook_edit(&a, &b);
            n += b.len();
            hyps.push(a);
            refs.push(b);
        }
        assert_eq!(token_error_rate(&hyps, &refs).unwrap(), errs as f64 / n as f64);
    }

    #[test]
    fn ngram_normalizes_and_memorizes() {
        let corpus = vec![vec![0, 1, 2, 3]; 50];
        let lm = train_lm(&corpus, 5, &NgramConfig { order: 3, alpha: 1e-4 }).unwrap();
        for prefix in [&[][..], &[0], &[0, 1], &[4, 4, 4], &[2, 3]] {
            assert!((distribution_mass(&lm.next_logp(prefix)) - 1.0).abs() < 1e-9);
        }
        assert!(lm.sequence_logp(&[0, 1, 2, 3]) > -1e-3);
        assert!(lm.perplexity(&corpus).unwrap() < 1.001);
        assert!(train_lm(&[], 5, &NgramConfig::default()).is_err());
    }

    #[test]
    fn ngram_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = train_lm(&[vec![0, 1], vec![1, 1, 0]], 2, &NgramConfig::default()).unwrap();
        let p = dir.path().join("lm.json");
        lm.save(&p).unwrap();
        assert_eq!(NgramLm::load(&p).unwrap(), lm);
    }

    /// All sequences of up to `max_len` tokens (finished) and exactly
    /// `max_len` tokens (unfinished), scored like the beam.
    fn exhaustive(vocab: usize, max_len: usize, step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut frontier = vec![(Vec::new(), 0.0)];
        for len in 0..=max_len {
            let mut next = Vec::new();
            for (seq, s) in frontier {
                let lp = step(&seq).unwrap();
                let h = Hypothesis { tokens: seq.clone(), score: s + lp[vocab], finished: true };
                if best.as_ref().is_none_or(|b| better((h.score, &h.tokens), (b.score, &b.tokens)).is_lt()) {
                    best = Some(h);
                }
                if len < max_len {
                    for (w, l) in lp.iter().enumerate().take(vocab) {
                        let mut t = seq.clone();
                        t.push(w);
                        next.push((t, s + l));
                    }
                }
            }
            frontier = next;
        }
        best.unwrap()
    }

    #[test]
    fn huge_beam_is_exhaustive() {
        for seed in 0..30 {
            let cfg = BeamConfig { beam_size: 4usize.pow(3) * 5, lm_weight: 0.0, length_penalty: 0.0, max_len: 3 };
            let h = beam_search(4, toy_scorer(4, seed), None, &cfg).unwrap();
            let o = exhaustive(4, 3, &mut toy_scorer(4, seed));
            assert_eq!(h.tokens, o.tokens);
            assert!((h.score - o.score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_is_greedy_and_zero_weight_ignores_lm() {
        let lm = train_lm(&[vec![0, 1, 2], vec![3, 3]], 4, &NgramConfig::default()).unwrap();
        for seed in 0..30 {
            let g = greedy_search(4, toy_scorer(4, seed), 6).unwrap();
            let cfg = BeamConfig { beam_size: 1, lm_weight: 0.0, length_penalty: 0.0, max_len: 6 };
            let b = beam_search(4, toy_scorer(4, seed), None, &cfg).unwrap();
            assert_eq!(b.tokens, g.tokens);
            assert_eq!(b.finished, g.finished);
            let cfg = BeamConfig { beam_size: 3, ..cfg };
            assert_eq!(
                beam_search(4, toy_scorer(4, seed), Some(&lm), &cfg).unwrap(),
                beam_search(4, toy_scorer(4, seed), None, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn fusion_needs_a_matching_lm() {
        let cfg = BeamConfig { lm_weight: 0.5, ..BeamConfig::default() };
        assert!(beam_search(4, toy_scorer(4, 0), None, &cfg).is_err());
        let lm = train_lm(&[vec![0]], 3, &NgramConfig::default()).unwrap();
        assert!(beam_search(4, toy_scorer(4, 0), Some(&lm), &cfg).is_err());
    }

    #[test]
    fn length_cap_is_flagged() {
        // Stopping is expensive until the cap.
        let step = |p: &[usize]| Ok(vec![0.0, if p.len() < 4 { -50.0 } else { -1.0 }]);
        let cfg = BeamConfig { beam_size: 2, lm_weight: 0.0, length_penalty: 0.0, max_len: 4 };
        let h = beam_search(1, step, None, &cfg).unwrap();
        assert!(!h.finished);
        assert_eq!(h.tokens, vec![0; 4]);
        let g = greedy_search(1, step, 4).unwrap();
        assert_eq!((g.tokens, g.finished), (h.tokens, false));
    }

    proptest! {
        #[test]
        fn edit_distance_properties(a in prop::collection::vec(0u8..3, 0..10), b in prop::collection::vec(0u8..3, 0..10)) {
            let d = levenshtein(&a, &b);
            prop_assert_eq!(d, levenshtein(&b, &a));
            prop_assert_eq!(d == 0, a == b);
            prop_assert!(d <= a.len().max(b.len()));
            prop_assert!(d >= a.len().abs_diff(b.len()));
        }
    }
}
