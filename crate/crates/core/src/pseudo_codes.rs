//! Turning unlabeled speech into discrete pseudo-codes: a frozen teacher
//! featurizer, k-means units, run-length deduplication and BPE.

use std::collections::HashMap;
use std::path::Path;

use autograd::Matrix;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Frozen stand-in for a pretrained speech encoder: frames are averaged over
/// non-overlapping windows and projected by a fixed random matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherFeaturizer {
    /// F×D.
    pub projection: Matrix,
    pub window: usize,
}

impl TeacherFeaturizer {
    pub fn new(feature_dim: usize, dim: usize, window: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || dim == 0 || window == 0 {
            return Err(Error::Config("teacher dimensions and window must be positive".into()));
        }
        let mut r = rng::stream(seed, &[tag::TEACHER]);
        let normal = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).expect("valid std");
        let data = (0..feature_dim * dim).map(|_| normal.sample(&mut r)).collect();
        Ok(Self { projection: Matrix::from_vec(feature_dim, dim, data), window })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    /// T×F frames to ⌈T/window⌉×D vectors; a trailing partial window is
    /// averaged over the frames it has.
    pub fn featurize(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: frames.cols() });
        }
        let t = frames.rows();
        let out = t.div_ceil(self.window);
        let mut pooled = Matrix::zeros(out, frames.cols());
        for o in 0..out {
            let rows = o * self.window..((o + 1) * self.window).min(t);
            let n = rows.len() as f64;
            let dst = pooled.row_mut(o);
            for r in rows {
                for (d, &s) in dst.iter_mut().zip(frames.row(r)) {
                    *d += s / n;
                }
            }
        }
        Ok(pooled.matmul(&self.projection))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save_json(path, "mtpt-teacher", 1, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::load_json(path, "mtpt-teacher", 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// K×D.
    pub centroids: Matrix,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(vectors: &Matrix, centroids: &Matrix) -> Vec<(usize, f64)> {
    (0..vectors.rows()).into_par_iter().map(|i| nearest(vectors.row(i), centroids)).collect()
}

impl Codebook {
    pub fn new(centroids: Matrix) -> Result<Self> {
        let cb = Self { centroids };
        cb.validate()?;
        Ok(cb)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.centroids;
        if c.rows() < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 centroids, has {}", c.rows())));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("codebook centroids"));
        }
        for a in 0..c.rows() {
            for b in a + 1..c.rows() {
                if c.row(a) == c.row(b) {
                    return Err(Error::Config(format!("centroids {a} and {b} are identical")));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn quantize(&self, frames: &Matrix) -> Result<Vec<usize>> {
        if frames.cols() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: frames.cols() });
        }
        Ok((0..frames.rows()).map(|i| nearest(frames.row(i), &self.centroids).0).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save_json(path, "mtpt-codebook", 1, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cb: Self = artifact::load_json(path, "mtpt-codebook", 1)?;
        cb.validate()?;
        Ok(cb)
    }
}

#[derive(Clone, Debug)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Inertia after each assignment step, ending with the final centroids.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_fit(vectors: &Matrix, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<KmeansFit> {
    if k < 2 {
        return Err(Error::Config(format!("k-means needs K >= 2, got {k}")));
    }
    if vectors.rows() < k {
        return Err(Error::InsufficientData(format!("{} vectors for {k} clusters", vectors.rows())));
    }
    let mut r = rng::stream(seed, &[tag::KMEANS]);
    let n = vectors.rows();
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(vectors.row(i), vectors.row(chosen[0]))).collect();
    while chosen.len() < k {
        let dist = WeightedIndex::new(&d2)
            .map_err(|_| Error::InsufficientData(format!("fewer than {k} distinct vectors")))?;
        let next = dist.sample(&mut r);
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(vectors.row(i), vectors.row(next)));
        }
    }
    let init = Matrix::from_rows(&chosen.iter().map(|&i| vectors.row(i).to_vec()).collect::<Vec<_>>());
    kmeans_from_init(vectors, init, max_iters, tol)
}

/// Lloyd iterations from given centroids. Stops once no centroid moves by
/// `tol` or more. An emptied cluster is moved onto the point farthest from
/// its current centroid.
pub fn kmeans_from_init(vectors: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> Result<KmeansFit> {
    if init.cols() != vectors.cols() {
        return Err(Error::Dimension { expected: vectors.cols(), got: init.cols() });
    }
    let (k, dim) = init.shape();
    let mut centroids = init;
    let mut inertia = Vec::new();
    let mut iterations = 0;
    let mut reseeded = 0;
    let mut assignment = assign_all(vectors, &centroids);
    while iterations < max_iters {
        inertia.push(assignment.iter().map(|a| a.1).sum());
        iterations += 1;
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(vectors.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; vectors.rows()];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new: Vec<f64> = if counts[c] > 0 {
                sums.row(c).iter().map(|s| s / counts[c] as f64).collect()
            } else {
                reseeded += 1;
                let far = (0..vectors.rows())
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if assignment[b].1 >= assignment[i].1 => Some(b),
                        _ => Some(i),
                    })
                    .ok_or_else(|| Error::InsufficientData("no point left to reseed an empty cluster".into()))?;
                taken[far] = true;
                vectors.row(far).to_vec()
            };
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        assignment = assign_all(vectors, &centroids);
        if shift < tol {
            break;
        }
    }
    inertia.push(assignment.iter().map(|a| a.1).sum());
    Ok(KmeansFit { codebook: Codebook { centroids }, inertia, iterations, reseeded })
}

/// Collapses runs of equal adjacent units.
pub fn deduplicate(units: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(units.len());
    for &u in units {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    out
}

/// Merge `r` creates symbol `base + r` from its pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub base: usize,
    pub merges: Vec<(usize, usize)>,
}

fn merge_pair(seq: &[usize], pair: (usize, usize), new: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Repeatedly merges the most frequent adjacent pair (ties to the smallest
/// pair) until the vocabulary reaches `target_vocab` or no pair occurs twice.
pub fn bpe_train(corpus: &[Vec<usize>], base: usize, target_vocab: usize) -> Result<BpeModel> {
    if target_vocab < base {
        return Err(Error::Config(format!("BPE target vocabulary {target_vocab} is below the {base} base units")));
    }
    if let Some(&u) = corpus.iter().flatten().find(|&&u| u >= base) {
        return Err(Error::UnknownSymbol(u as u32));
    }
    let mut seqs: Vec<Vec<usize>> = corpus.to_vec();
    let mut merges = Vec::new();
    while base + merges.len() < target_vocab {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new = base + merges.len();
        for s in &mut seqs {
            *s = merge_pair(s, pair, new);
        }
        merges.push(pair);
    }
    Ok(BpeModel { base, merges })
}

impl BpeModel {
    pub fn vocab_size(&self) -> usize {
        self.base + self.merges.len()
    }

    /// Greedy encoding: the lowest-rank adjacent pair present is merged
    /// everywhere, until no known pair remains.
    pub fn encode(&self, units: &[usize]) -> Result<Vec<usize>> {
        if let Some(&u) = units.iter().find(|&&u| u >= self.base) {
            return Err(Error::UnknownSymbol(u as u32));
        }
        let ranks: HashMap<(usize, usize), usize> =
            self.merges.iter().enumerate().map(|(r, &p)| (p, r)).collect();
        let mut seq = units.to_vec();
        loop {
            let best = seq.windows(2).filter_map(|w| ranks.get(&(w[0], w[1]))).min();
            let Some(&rank) = best else { break };
            seq = merge_pair(&seq, self.merges[rank], self.base + rank);
        }
        Ok(seq)
    }

    pub fn decode(&self, codes: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(codes.len() * 2);
        let mut stack: Vec<usize> = Vec::new();
        for &c in codes {
            if c >= self.vocab_size() {
                return Err(Error::UnknownSymbol(c as u32));
            }
            stack.push(c);
            while let Some(s) = stack.pop() {
                if s < self.base {
                    out.push(s);
                } else {
                    let (a, b) = self.merges[s - self.base];
                    stack.push(b);
                    stack.push(a);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save_json(path, "mtpt-bpe", 1, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = artifact::load_json(path, "mtpt-bpe", 1)?;
        for (r, &(a, b)) in m.merges.iter().enumerate() {
            if a >= m.base + r || b >= m.base + r {
                return Err(Error::Config(format!("BPE merge {r} refers to a later symbol")));
            }
        }
        Ok(m)
    }
}

/// Units before BPE: featurize, quantize, deduplicate.
pub fn speech_to_units(featurizer: &TeacherFeaturizer, cb: &Codebook, features: &Matrix) -> Result<Vec<usize>> {
    let feats = featurizer.featurize(features)?;
    Ok(deduplicate(&cb.quantize(&feats)?))
}

pub fn speech_to_pseudocodes(
    featurizer: &TeacherFeaturizer,
    cb: &Codebook,
    bpe: &BpeModel,
    features: &Matrix,
) -> Result<Vec<usize>> {
    bpe.encode(&speech_to_units(featurizer, cb, features)?)
}

/// The three fitted stages bundled for annotating speech.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoCoder {
    pub featurizer: TeacherFeaturizer,
    pub codebook: Codebook,
    pub bpe: BpeModel,
}

impl PseudoCoder {
    pub fn new(featurizer: TeacherFeaturizer, codebook: Codebook, bpe: BpeModel) -> Result<Self> {
        if featurizer.dim() != codebook.dim() {
            return Err(Error::Dimension { expected: featurizer.dim(), got: codebook.dim() });
        }
        if bpe.base != codebook.k() {
            return Err(Error::Config(format!(
                "BPE model was trained on {} units but the codebook has {}",
                bpe.base,
                codebook.k()
            )));
        }
        Ok(Self { featurizer, codebook, bpe })
    }

    pub fn vocab_size(&self) -> usize {
        self.bpe.vocab_size()
    }

    pub fn encode(&self, features: &Matrix) -> Result<Vec<usize>> {
        speech_to_pseudocodes(&self.featurizer, &self.codebook, &self.bpe, features)
    }
}

/// Stacks teacher vectors from many utterances for k-means, keeping every
/// `stride`-th vector so that at most `max_points` remain.
pub fn teacher_vectors(featurizer: &TeacherFeaturizer, utts: &[&Matrix], max_points: usize) -> Result<Matrix> {
    let feats = utts.iter().map(|m| featurizer.featurize(m)).collect::<Result<Vec<_>>>()?;
    let total: usize = feats.iter().map(Matrix::rows).sum();
    if total == 0 {
        return Err(Error::Empty("speech for codebook training"));
    }
    let stride = total.div_ceil(max_points.max(1));
    let rows: Vec<Vec<f64>> = feats
        .iter()
        .flat_map(|m| (0..m.rows()).map(move |i| m.row(i).to_vec()))
        .step_by(stride)
        .collect();
    Ok(Matrix::from_rows(&rows))
}

/// Settings for fitting the teacher, codebook and BPE in one go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoderConfig {
    pub teacher_dim: usize,
    pub window: usize,
    pub clusters: usize,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub max_points: usize,
    pub bpe_vocab: usize,
    pub seed: u64,
}

impl Default for CoderConfig {
    fn default() -> Self {
        Self {
            teacher_dim: 16,
            window: 2,
            clusters: 32,
            kmeans_iters: 50,
            kmeans_tol: 1e-6,
            max_points: 20_000,
            bpe_vocab: 128,
            seed: 1,
        }
    }
}

/// Fits all three stages on `utts`.
pub fn fit_pseudo_coder(utts: &[&Matrix], cfg: &CoderConfig) -> Result<PseudoCoder> {
    let feature_dim = utts.first().map(|m| m.cols()).ok_or(Error::Empty("speech for codebook training"))?;
    let featurizer = TeacherFeaturizer::new(feature_dim, cfg.teacher_dim, cfg.window, cfg.seed)?;
    let vectors = teacher_vectors(&featurizer, utts, cfg.max_points)?;
    let fit = kmeans_fit(&vectors, cfg.clusters, cfg.kmeans_iters, cfg.kmeans_tol, cfg.seed)?;
    let units = utts.iter().map(|m| speech_to_units(&featurizer, &fit.codebook, m)).collect::<Result<Vec<_>>>()?;
    let bpe = bpe_train(&units, cfg.clusters, cfg.bpe_vocab)?;
    PseudoCoder::new(featurizer, fit.codebook, bpe)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_points(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(-5.0..5.0)).collect())
    }

    #[test]
    fn two_exact_clusters() {
        let mut rows = vec![vec![0.0, 0.0]; 10];
        rows.extend(vec![vec![10.0, 10.0]; 10]);
        let fit = kmeans_fit(&Matrix::from_rows(&rows), 2, 50, 1e-9, 3).unwrap();
        let mut c: Vec<Vec<f64>> = (0..2).map(|k| fit.codebook.centroids.row(k).to_vec()).collect();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let pts = random_points(200, 3, seed);
            let fit = kmeans_fit(&pts, 8, 100, 0.0, seed).unwrap();
            for w in fit.inertia.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {:?}", fit.inertia);
            }
        }
    }

    #[test]
    fn too_few_vectors_is_an_error() {
        assert!(matches!(kmeans_fit(&random_points(3, 2, 0), 4, 10, 0.0, 0), Err(Error::InsufficientData(_))));
        let dup = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert!(matches!(kmeans_fit(&dup, 2, 10, 0.0, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let pts = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]);
        // The third centroid starts far from all data and captures nothing.
        let init = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![100.0]]);
        let fit = kmeans_from_init(&pts, init, 20, 0.0).unwrap();
        assert!(fit.reseeded >= 1);
        assert!(fit.codebook.validate().is_ok());
        assert!(*fit.inertia.last().unwrap() < fit.inertia[0]);
    }

    /// Scalar Lloyd's algorithm written independently: explicit loops, no
    /// shared helpers.
    fn oracle_lloyd(points: &[Vec<f64>], mut cents: Vec<Vec<f64>>, iters: usize) -> f64 {
        let dist = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
            let mut s = 0.0;
            for j in 0..a.len() {
                s += (a[j] - b[j]) * (a[j] - b[j]);
            }
            s
        };
        let assign = |cents: &Vec<Vec<f64>>| -> Vec<usize> {
            points
                .iter()
                .map(|p| {
                    let mut best = 0;
                    for c in 1..cents.len() {
                        if dist(p, &cents[c]) < dist(p, &cents[best]) {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        };
        for _ in 0..iters {
            let a = assign(&cents);
            let mut next = cents.clone();
            for (c, cent) in next.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&a).filter(|(_, &k)| k == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    for j in 0..cent.len() {
                        cent[j] = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            if next == cents {
                break;
            }
            cents = next;
        }
        let a = assign(&cents);
        points.iter().zip(&a).map(|(p, &c)| dist(p, &cents[c])).sum()
    }

    #[test]
    fn lloyd_matches_scalar_oracle_from_same_init() {
        let pts = random_points(30, 2, 11);
        let rows: Vec<Vec<f64>> = (0..30).map(|i| pts.row(i).to_vec()).collect();
        let init = vec![rows[0].clone(), rows[10].clone(), rows[20].clone()];
        let fit = kmeans_from_init(&pts, Matrix::from_rows(&init), 100, 1e-12).unwrap();
        assert_eq!(fit.reseeded, 0);
        let expected = oracle_lloyd(&rows, init, 100);
        assert!((fit.inertia.last().unwrap() - expected).abs() < 1e-9);
        // Fixed point: re-assigning with final centroids changes nothing.
        let q = fit.codebook.quantize(&pts).unwrap();
        let again = kmeans_from_init(&pts, fit.codebook.centroids.clone(), 1, 0.0).unwrap();
        assert_eq!(again.codebook.quantize(&pts).unwrap(), q);
    }

    #[test]
    fn quantize_hits_ties_and_brute_force() {
        let cb = Codebook::new(Matrix::from_rows(&[
            vec![0.0, -10.0],
            vec![1.0, 0.0],
            vec![5.0, 5.0],
            vec![9.0, 9.0],
            vec![-1.0, 0.0],
        ]))
        .unwrap();
        assert_eq!(cb.quantize(&Matrix::from_rows(&[vec![5.0, 5.0]])).unwrap(), [2]);
        // Equidistant from centroids 1 and 4.
        assert_eq!(cb.quantize(&Matrix::from_rows(&[vec![0.0, 3.0]])).unwrap(), [1]);
        let cb2 = Codebook::new(Matrix::from_rows(&[vec![0.0], vec![2.0], vec![7.0], vec![8.0], vec![4.0]])).unwrap();
        assert_eq!(cb2.quantize(&Matrix::from_rows(&[vec![3.0]])).unwrap(), [1]);
        assert!(matches!(cb.quantize(&Matrix::zeros(1, 3)), Err(Error::Dimension { .. })));

        let pts = random_points(100, 2, 4);
        let q = cb.quantize(&pts).unwrap();
        for (i, &u) in q.iter().enumerate() {
            let p = pts.row(i);
            let d: Vec<f64> =
                (0..5).map(|k| (p[0] - cb.centroids.get(k, 0)).powi(2) + (p[1] - cb.centroids.get(k, 1)).powi(2)).collect();
            let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(u, d.iter().position(|&x| x == m).unwrap());
        }
    }

    #[test]
    fn codebook_rejects_duplicates() {
        assert!(Codebook::new(Matrix::from_rows(&[vec![1.0], vec![1.0]])).is_err());
        assert!(Codebook::new(Matrix::from_rows(&[vec![1.0]])).is_err());
    }

    #[test]
    fn deduplicate_examples() {
        assert_eq!(deduplicate(&[1, 1, 1, 2, 3, 3]), [1, 2, 3]);
        assert!(deduplicate(&[]).is_empty());
        assert_eq!(deduplicate(&[4, 2, 4]), [4, 2, 4]);
    }

    #[test]
    fn bpe_boundaries() {
        let m = bpe_train(&[vec![0, 1, 0, 1, 0, 1]], 2, 3).unwrap();
        assert_eq!(m.merges, [(0, 1)]);
        let m = bpe_train(&[vec![0, 1, 0, 1]], 2, 2).unwrap();
        assert!(m.merges.is_empty());
        assert_eq!(m.encode(&[1, 0, 1]).unwrap(), [1, 0, 1]);
        assert!(bpe_train(&[vec![0, 1]], 2, 1).is_err());
        // No pair occurs twice, so training stops early.
        assert!(bpe_train(&[vec![0, 1, 2]], 3, 10).unwrap().merges.is_empty());
        assert!(matches!(m.decode(&[7]), Err(Error::UnknownSymbol(7))));
        assert!(matches!(m.encode(&[2]), Err(Error::UnknownSymbol(2))));
    }

    /// Independent trainer over string symbols: ordered map counting, ties
    /// resolved by the map's key order.
    fn oracle_bpe(corpus: &[Vec<usize>], base: usize, target: usize) -> Vec<(usize, usize)> {
        let mut seqs = corpus.to_vec();
        let mut merges = Vec::new();
        while base + merges.len() < target {
            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for s in &seqs {
                for i in 1..s.len() {
                    *counts.entry((s[i - 1], s[i])).or_insert(0) += 1;
                }
            }
            let mut best: Option<((usize, usize), usize)> = None;
            for (p, c) in counts {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            match best {
                Some((p, c)) if c >= 2 => {
                    let id = base + merges.len();
                    for s in seqs.iter_mut() {
                        let mut t = Vec::new();
                        let mut i = 0;
                        while i < s.len() {
                            if i + 1 < s.len() && s[i] == p.0 && s[i + 1] == p.1 {
                                t.push(id);
                                i += 2;
                            } else {
                                t.push(s[i]);
                                i += 1;
                            }
                        }
                        *s = t;
                    }
                    merges.push(p);
                }
                _ => break,
            }
        }
        merges
    }

    fn fixture() -> Vec<Vec<usize>> {
        vec![
            vec![0, 1, 2, 0, 1, 2, 3],
            vec![3, 3, 3, 0, 1],
            vec![2, 0, 1, 2, 2, 0],
            vec![1, 2, 3, 1, 2, 3, 0, 1],
            vec![0, 1, 2, 3],
        ]
    }

    #[test]
    fn bpe_training_matches_counting_oracle() {
        let m = bpe_train(&fixture(), 4, 12).unwrap();
        assert!(!m.merges.is_empty());
        assert_eq!(m.merges, oracle_bpe(&fixture(), 4, 12));
    }

    #[test]
    fn bpe_encoding_matches_rank_exhaustive_oracle() {
        let m = bpe_train(&fixture(), 4, 12).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let len = r.random_range(0..20);
            let x: Vec<usize> = (0..len).map(|_| r.random_range(0..4)).collect();
            // Apply every merge once, in rank order, across the whole sequence.
            let mut expect = x.clone();
            for (rank, &(a, b)) in m.merges.iter().enumerate() {
                let mut t = Vec::new();
                let mut i = 0;
                while i < expect.len() {
                    if i + 1 < expect.len() && expect[i] == a && expect[i + 1] == b {
                        t.push(4 + rank);
                        i += 2;
                    } else {
                        t.push(expect[i]);
                        i += 1;
                    }
                }
                expect = t;
            }
            assert_eq!(m.encode(&x).unwrap(), expect);
        }
    }

    proptest! {
        #[test]
        fn bpe_round_trips(x in proptest::collection::vec(0usize..4, 0..40)) {
            let m = bpe_train(&fixture(), 4, 12).unwrap();
            let enc = m.encode(&x).unwrap();
            prop_assert!(enc.len() <= x.len());
            prop_assert_eq!(m.decode(&enc).unwrap(), x);
        }

        #[test]
        fn deduplicate_is_idempotent_and_never_lengthens(x in proptest::collection::vec(0usize..5, 0..50)) {
            let d = deduplicate(&x);
            prop_assert!(d.len() <= x.len());
            prop_assert_eq!(deduplicate(&d), d.clone());
            prop_assert!(d.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn featurizer_pools_then_projects() {
        let f = TeacherFeaturizer::new(2, 3, 2, 1).unwrap();
        let frames = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 5.0]]);
        let out = f.featurize(&frames).unwrap();
        assert_eq!(out.shape(), (2, 3));
        for j in 0..3 {
            let p = &f.projection;
            let want0 = 2.0 * p.get(0, j) + 1.0 * p.get(1, j);
            let want1 = 5.0 * p.get(0, j) + 5.0 * p.get(1, j);
            assert!((out.get(0, j) - want0).abs() < 1e-12);
            assert!((out.get(1, j) - want1).abs() < 1e-12);
        }
        assert_eq!(f, TeacherFeaturizer::new(2, 3, 2, 1).unwrap());
        assert!(f.featurize(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn pipeline_composes_stages_and_collapses_constant_runs() {
        use crate::data_synth::{Generator, SyntheticCorpusConfig};
        let cfg = SyntheticCorpusConfig { noise_std: 0.0, ..SyntheticCorpusConfig::default() };
        let g = Generator::new(&cfg).unwrap();
        let f = TeacherFeaturizer::new(cfg.feature_dim, 8, 1, 3).unwrap();
        let cb = Codebook::new(f.featurize(&g.phoneme_means).unwrap()).unwrap();
        let mut corpus = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let phones: Vec<Vec<usize>> =
            (0..30).map(|_| (0..6).map(|_| r.random_range(0..cb.k())).collect()).collect();
        for p in &phones {
            corpus.push(speech_to_units(&f, &cb, &g.render(p, &mut r)).unwrap());
        }
        let bpe = bpe_train(&corpus, cb.k(), cb.k() + 10).unwrap();
        for p in &phones {
            let feats = g.render(p, &mut r);
            let codes = speech_to_pseudocodes(&f, &cb, &bpe, &feats).unwrap();
            assert!(codes.len() <= deduplicate(p).len());
            assert_eq!(codes, speech_to_pseudocodes(&f, &cb, &bpe, &feats).unwrap());
            // Stage-by-stage composition.
            let units = deduplicate(&cb.quantize(&f.featurize(&feats).unwrap()).unwrap());
            assert_eq!(units, deduplicate(p));
            assert_eq!(codes, bpe.encode(&units).unwrap());
        }
    }

    #[test]
    fn artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = TeacherFeaturizer::new(4, 3, 2, 9).unwrap();
        f.save(&dir.path().join("t.json")).unwrap();
        assert_eq!(TeacherFeaturizer::load(&dir.path().join("t.json")).unwrap(), f);
        let cb = kmeans_fit(&random_points(50, 3, 1), 4, 20, 1e-9, 1).unwrap().codebook;
        cb.save(&dir.path().join("c.json")).unwrap();
        assert_eq!(Codebook::load(&dir.path().join("c.json")).unwrap(), cb);
        let m = bpe_train(&fixture(), 4, 12).unwrap();
        m.save(&dir.path().join("b.json")).unwrap();
        assert_eq!(BpeModel::load(&dir.path().join("b.json")).unwrap(), m);
    }

    proptest! {
        #[test]
        fn kmeans_inertia_never_increases(seed in 0u64..500, n in 10usize..120, dim in 1usize..4, k in 2usize..6) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Matrix::from_vec(n, dim, (0..n * dim).map(|_| r.random_range(-5.0..5.0)).collect());
            let fit = kmeans_fit(&x, k, 60, 0.0, seed).unwrap();
            prop_assert!(fit.inertia.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
            let assigned = fit.codebook.quantize(&x).unwrap();
            prop_assert!(assigned.iter().all(|&c| c < k));
        }
    }
}
