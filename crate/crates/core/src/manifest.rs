//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.tsv   #mtpt-manifest<TAB>v1, a column header, then one record per utterance:
//!                      id  kind  split  features  text
//! <dir>/features.bin   concatenated records: T:u32le F:u32le then T·F f32le values
//! <dir>/lexicon.tsv    token_id<TAB>phoneme_id
//! <dir>/corpus.json    the generating configuration
//! ```
//!
//! `features` is `features.bin:<byte offset>` or `-`; `text` is space
//! separated token ids or `-`.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use autograd::Matrix;

use crate::data_synth::{Corpus, Split, SyntheticCorpusConfig, UttKind, Utterance};
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

pub const MANIFEST_MAGIC: &str = "#mtpt-manifest";
pub const MANIFEST_VERSION: &str = "v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const CORPUS_CONFIG_FILE: &str = "corpus.json";
const COLUMNS: &str = "id\tkind\tsplit\tfeatures\ttext";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureRef {
    pub file: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: UttKind,
    pub split: Split,
    pub features: Option<FeatureRef>,
    pub text: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id).ok_or_else(|| Error::MissingId(id.to_string()))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\t{MANIFEST_VERSION}\n{COLUMNS}\n");
        for e in &self.entries {
            let feats = e.features.as_ref().map_or("-".to_string(), |f| format!("{}:{}", f.file, f.offset));
            let text = e.text.as_ref().map_or("-".to_string(), |t| join(t));
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, e.kind.as_str(), e.split.as_str(), feats, text));
        }
        s
    }

    pub fn from_tsv(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { file: file.to_string(), line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == format!("{MANIFEST_MAGIC}\t{MANIFEST_VERSION}") => {}
            Some((_, l)) if l.starts_with(MANIFEST_MAGIC) => {
                return Err(err(1, format!("unsupported manifest version in `{l}`")))
            }
            _ => return Err(err(1, format!("missing `{MANIFEST_MAGIC}` header"))),
        }
        match lines.next() {
            Some((_, l)) if l == COLUMNS => {}
            _ => return Err(err(2, "missing column header".into())),
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let line_no = n + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let record = fields.first().copied().unwrap_or("");
            let rec_err = |m: String| err(line_no, format!("record `{record}`: {m}"));
            if fields.len() != 5 {
                return Err(rec_err(format!("expected 5 fields, found {}", fields.len())));
            }
            let kind = UttKind::parse(fields[1]).ok_or_else(|| rec_err(format!("bad kind `{}`", fields[1])))?;
            let split = Split::parse(fields[2]).ok_or_else(|| rec_err(format!("bad split `{}`", fields[2])))?;
            let features = match fields[3] {
                "-" => None,
                f => {
                    let (file, off) =
                        f.rsplit_once(':').ok_or_else(|| rec_err(format!("bad feature reference `{f}`")))?;
                    let offset = off.parse().map_err(|e| rec_err(format!("bad feature offset: {e}")))?;
                    Some(FeatureRef { file: file.to_string(), offset })
                }
            };
            let text = match fields[4] {
                "-" => None,
                t => Some(
                    t.split(' ')
                        .map(|tok| tok.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| rec_err(format!("bad text token: {e}")))?,
                ),
            };
            let expected = match kind {
                UttKind::Paired => features.is_some() && text.is_some(),
                UttKind::Speech => features.is_some() && text.is_none(),
                UttKind::Text => features.is_none() && text.is_some(),
            };
            if !expected {
                return Err(rec_err(format!("payload does not match kind `{}`", kind.as_str())));
            }
            if !seen.insert(record.to_string()) {
                return Err(rec_err("duplicate id".into()));
            }
            entries.push(ManifestEntry { id: record.to_string(), kind, split, features, text });
        }
        Ok(Self { entries })
    }
}

fn join(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_features(w: &mut impl Write, m: &Matrix) -> std::io::Result<u64> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(8 + 4 * m.len() as u64)
}

pub fn read_features(r: &mut impl Read) -> std::io::Result<Matrix> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let t = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let f = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; t * f * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Matrix::from_vec(t, f, data))
}

/// Writes manifest, feature pack, lexicon and config into `dir`.
pub fn store_corpus(corpus: &Corpus, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feat_path = dir.join(FEATURES_FILE);
    let file = File::create(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    let mut w = BufWriter::new(file);
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        u.validate()?;
        let features = match &u.features {
            Some(m) => {
                let here = offset;
                offset += write_features(&mut w, m).map_err(|e| Error::io(&feat_path, e))?;
                Some(FeatureRef { file: FEATURES_FILE.to_string(), offset: here })
            }
            None => None,
        };
        entries.push(ManifestEntry { id: u.id.clone(), kind: u.kind(), split: u.split, features, text: u.text.clone() });
    }
    w.flush().map_err(|e| Error::io(&feat_path, e))?;
    let manifest = Manifest { entries };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_tsv()).map_err(|e| Error::io(&mpath, e))?;
    corpus.lexicon.save(&dir.join(LEXICON_FILE))?;
    let cpath = dir.join(CORPUS_CONFIG_FILE);
    let json = serde_json::to_string_pretty(&corpus.config).expect("config serialises");
    fs::write(&cpath, json).map_err(|e| Error::io(&cpath, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::from_tsv(&text, &path.display().to_string())
}

/// Resolves one entry; feature paths are relative to `root`.
pub fn load_utterance(manifest: &Manifest, root: &Path, id: &str) -> Result<Utterance> {
    let e = manifest.entry(id)?;
    let features = match &e.features {
        Some(f) => {
            let path: PathBuf = root.join(&f.file);
            let mut file = File::open(&path).map_err(|err| Error::io(&path, err))?;
            file.seek(SeekFrom::Start(f.offset)).map_err(|err| Error::io(&path, err))?;
            Some(read_features(&mut std::io::BufReader::new(file)).map_err(|err| Error::io(&path, err))?)
        }
        None => None,
    };
    Ok(Utterance { id: e.id.clone(), features, text: e.text.clone(), split: e.split })
}

/// Loads every utterance of a stored corpus, reading the feature pack once.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
    let lexicon = Lexicon::load(&dir.join(LEXICON_FILE))?;
    let cpath = dir.join(CORPUS_CONFIG_FILE);
    let ctext = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let config: SyntheticCorpusConfig = serde_json::from_str(&ctext).map_err(|e| Error::Parse {
        file: cpath.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut packs: Vec<(String, Vec<u8>)> = Vec::new();
    let mut utterances = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let features = match &e.features {
            Some(f) => {
                if !packs.iter().any(|(n, _)| n == &f.file) {
                    let p = dir.join(&f.file);
                    packs.push((f.file.clone(), fs::read(&p).map_err(|err| Error::io(&p, err))?));
                }
                let bytes = &packs.iter().find(|(n, _)| n == &f.file).expect("loaded").1;
                let start = f.offset as usize;
                let mut slice = bytes.get(start..).unwrap_or(&[]);
                Some(read_features(&mut slice).map_err(|err| Error::Parse {
                    file: f.file.clone(),
                    line: 0,
                    message: format!("record `{}` at offset {start}: {err}", e.id),
                })?)
            }
            None => None,
        };
        utterances.push(Utterance { id: e.id.clone(), features, text: e.text.clone(), split: e.split });
    }
    Ok(Corpus { config, lexicon, utterances })
}
