//! Training pools per task, built from a corpus and the pseudo-code stages.

use autograd::Matrix;
use rayon::prelude::*;

use crate::data_synth::{Corpus, Split, UttKind};
use crate::error::Result;
use crate::lexicon::Lexicon;
use crate::pseudo_codes::PseudoCoder;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechItem {
    pub id: String,
    pub features: Matrix,
    /// Pseudo-codes; empty when no coder was supplied.
    pub codes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem {
    pub id: String,
    pub features: Matrix,
    pub text: Vec<usize>,
    pub phonemes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextItem {
    pub text: Vec<usize>,
    pub phonemes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub lexicon: Lexicon,
    pub speech: Vec<SpeechItem>,
    pub paired: Vec<PairedItem>,
    pub text: Vec<TextItem>,
    pub paired_dev: Vec<PairedItem>,
    pub paired_test: Vec<PairedItem>,
    pub text_dev: Vec<TextItem>,
    pub phoneme_vocab: usize,
    pub text_vocab: usize,
    pub code_vocab: usize,
}

fn paired(corpus: &Corpus, split: Split) -> Result<Vec<PairedItem>> {
    corpus
        .select(UttKind::Paired, split)
        .into_iter()
        .map(|u| {
            let text = u.text.clone().unwrap_or_default();
            Ok(PairedItem {
                id: u.id.clone(),
                features: u.features.clone().unwrap_or_else(|| Matrix::zeros(0, 0)),
                phonemes: corpus.lexicon.text_to_phonemes(&text)?,
                text,
            })
        })
        .collect()
}

fn texts(corpus: &Corpus, lex: &Lexicon, split: Split) -> Result<Vec<TextItem>> {
    corpus
        .select(UttKind::Text, split)
        .into_iter()
        .map(|u| {
            let text = u.text.clone().unwrap_or_default();
            Ok(TextItem { phonemes: lex.text_to_phonemes(&text)?, text })
        })
        .collect()
}

impl TaskData {
    pub fn from_corpus(corpus: &Corpus, coder: Option<&PseudoCoder>) -> Result<Self> {
        let speech_utts = corpus.select(UttKind::Speech, Split::Train);
        let speech = speech_utts
            .par_iter()
            .map(|u| {
                let features = u.features.clone().unwrap_or_else(|| Matrix::zeros(0, 0));
                let codes = match coder {
                    Some(c) => c.encode(&features)?,
                    None => Vec::new(),
                };
                Ok(SpeechItem { id: u.id.clone(), features, codes })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lexicon: corpus.lexicon.clone(),
            speech,
            paired: paired(corpus, Split::Train)?,
            paired_dev: paired(corpus, Split::Dev)?,
            paired_test: paired(corpus, Split::Test)?,
            text: texts(corpus, &corpus.lexicon, Split::Train)?,
            text_dev: texts(corpus, &corpus.lexicon, Split::Dev)?,
            phoneme_vocab: corpus.lexicon.phoneme_vocab_size(),
            text_vocab: corpus.lexicon.text_vocab_size(),
            code_vocab: coder.map_or(0, PseudoCoder::vocab_size),
        })
    }
}
