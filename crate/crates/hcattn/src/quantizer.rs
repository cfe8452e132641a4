//! Grouped vector quantization of key vectors.
//!
//! A d-dimensional key splits into `g` sub-vectors of dimension `d/g`;
//! each group gets its own codebook of `c` centroids trained by
//! mini-batch k-means. Keys are then stored as `n x g` rows of 16-bit
//! centroid indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{squared_distance, Matrix};
use crate::rng::{mix, SplitMix64};
use crate::tensor_io::{TensorData, TensorDump};

pub const CODEBOOK_MAGIC: [u8; 4] = *b"HCCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// Maximum centroid count an index row can address.
pub const MAX_CENTROIDS: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizerConfig {
    /// Head dimension.
    pub d: usize,
    /// Group count; must divide `d`.
    pub g: usize,
    /// Centroids per codebook, at most [`MAX_CENTROIDS`].
    pub c: usize,
    /// Pool every group's sub-vectors into one clustering and replicate it.
    pub shared_codebook: bool,
    pub kmeans_batch_size: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl QuantizerConfig {
    /// Config with the default training schedule: batch 10,000, at most
    /// 200 iterations, 3 restarts, per-group codebooks.
    pub fn new(d: usize, g: usize, c: usize) -> Self {
        Self {
            d,
            g,
            c,
            shared_codebook: false,
            kmeans_batch_size: 10_000,
            kmeans_max_iters: 200,
            kmeans_restarts: 3,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.kmeans_restarts = restarts;
        self
    }

    pub fn shared(mut self) -> Self {
        self.shared_codebook = true;
        self
    }

    /// Sub-vector dimension `d/g`.
    pub fn sub_dim(&self) -> usize {
        self.d / self.g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.g == 0 || self.d % self.g != 0 {
            return Err(Error::InvalidConfig(format!(
                "group count {} must divide head dimension {}",
                self.g, self.d
            )));
        }
        if self.c == 0 || self.c > MAX_CENTROIDS {
            return Err(Error::InvalidConfig(format!(
                "centroid count {} outside [1, {MAX_CENTROIDS}]",
                self.c
            )));
        }
        if self.kmeans_batch_size == 0 || self.kmeans_max_iters == 0 || self.kmeans_restarts == 0
        {
            return Err(Error::InvalidConfig(
                "k-means batch size, iteration cap and restarts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trained centroids for all groups, shape `g x c x (d/g)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    config: QuantizerConfig,
    inertia: f64,
}

impl Codebook {
    /// Build directly from a centroid buffer (tests, file loads, ablations).
    pub fn from_parts(config: QuantizerConfig, centroids: Vec<f32>, inertia: f64) -> Result<Self> {
        config.validate()?;
        let expected = config.g * config.c * config.sub_dim();
        if centroids.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "codebook needs {expected} values, got {}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("codebook centroids"));
        }
        Ok(Self {
            centroids,
            config,
            inertia,
        })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    /// Mean squared quantization error on the training data.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Centroid `index` of `group`.
    pub fn centroid(&self, group: usize, index: usize) -> &[f32] {
        let sd = self.config.sub_dim();
        let base = (group * self.config.c + index) * sd;
        &self.centroids[base..base + sd]
    }

    /// All centroids of one group, `c x sub_dim` row-major.
    pub fn group(&self, group: usize) -> &[f32] {
        let sd = self.config.sub_dim();
        let per_group = self.config.c * sd;
        &self.centroids[group * per_group..(group + 1) * per_group]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        let c = &self.config;
        w.write_all(&(c.d as u32).to_le_bytes())?;
        w.write_all(&(c.g as u32).to_le_bytes())?;
        w.write_all(&(c.c as u32).to_le_bytes())?;
        w.write_all(&[c.shared_codebook as u8])?;
        w.write_all(&(c.kmeans_batch_size as u32).to_le_bytes())?;
        w.write_all(&(c.kmeans_max_iters as u32).to_le_bytes())?;
        w.write_all(&(c.kmeans_restarts as u32).to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&self.inertia.to_le_bytes())?;
        let dump = TensorDump::f32(
            vec![c.g, c.c, c.sub_dim()],
            self.centroids.clone(),
        )?;
        dump.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                expected: CODEBOOK_MAGIC,
                found: magic,
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CODEBOOK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let next_u32 = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let d = next_u32(r)? as usize;
        let g = next_u32(r)? as usize;
        let c = next_u32(r)? as usize;
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let shared = byte[0] != 0;
        let batch = next_u32(r)? as usize;
        let iters = next_u32(r)? as usize;
        let restarts = next_u32(r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let inertia = f64::from_le_bytes(u64buf);
        let config = QuantizerConfig {
            d,
            g,
            c,
            shared_codebook: shared,
            kmeans_batch_size: batch,
            kmeans_max_iters: iters,
            kmeans_restarts: restarts,
            seed,
        };
        let dump = TensorDump::read_from(r)?;
        if dump.shape() != [g, c, config.sub_dim()] {
            return Err(Error::ShapeMismatch(format!(
                "centroid tensor shape {:?} does not match config",
                dump.shape()
            )));
        }
        let centroids = match dump.data() {
            TensorData::F32(v) => v.clone(),
            _ => return Err(Error::ShapeMismatch("centroid tensor must be f32".into())),
        };
        Self::from_parts(config, centroids, inertia)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Per-token centroid indices, `n x g`, 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyIndexMatrix {
    indices: Vec<u16>,
    n: usize,
    g: usize,
}

impl KeyIndexMatrix {
    pub fn new(n: usize, g: usize, indices: Vec<u16>) -> Result<Self> {
        if indices.len() != n * g {
            return Err(Error::ShapeMismatch(format!(
                "index matrix {n}x{g} needs {} entries, got {}",
                n * g,
                indices.len()
            )));
        }
        Ok(Self { indices, n, g })
    }

    pub fn empty(g: usize) -> Self {
        Self {
            indices: Vec::new(),
            n: 0,
            g,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn row(&self, token: usize) -> &[u16] {
        &self.indices[token * self.g..(token + 1) * self.g]
    }

    pub fn push_row(&mut self, row: &[u16]) -> Result<()> {
        if row.len() != self.g {
            return Err(Error::ShapeMismatch(format!(
                "index row length {} does not match group count {}",
                row.len(),
                self.g
            )));
        }
        self.indices.extend_from_slice(row);
        self.n += 1;
        Ok(())
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn max_index(&self) -> Option<u16> {
        self.indices.iter().copied().max()
    }
}

struct GroupTraining {
    centers: Vec<f32>,
    /// Mean squared distance on the full group data after training.
    inertia: f64,
    /// Same quantity for the k-means++ initialization, before any update.
    init_inertia: f64,
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(point: &[f32], centers: &[f32], sub_dim: usize) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (idx, cand) in centers.chunks_exact(sub_dim).enumerate() {
        let d = squared_distance(point, cand);
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(
    points: &[f32],
    n: usize,
    sub_dim: usize,
    c: usize,
    rng: &mut SplitMix64,
) -> Vec<f32> {
    let mut centers = Vec::with_capacity(c * sub_dim);
    let first = rng.gen_index(n);
    centers.extend_from_slice(&points[first * sub_dim..(first + 1) * sub_dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(sub_dim)
        .map(|p| squared_distance(p, &centers[..sub_dim]))
        .collect();
    while centers.len() < c * sub_dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // fewer distinct points than centroids; duplicates are harmless
            rng.gen_index(n)
        };
        let new_center = &points[pick * sub_dim..(pick + 1) * sub_dim];
        centers.extend_from_slice(new_center);
        for (i, p) in points.chunks_exact(sub_dim).enumerate() {
            let d = squared_distance(p, new_center);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

fn full_inertia(points: &[f32], n: usize, sub_dim: usize, centers: &[f32]) -> f64 {
    let total: f64 = points
        .chunks_exact(sub_dim)
        .map(|p| nearest(p, centers, sub_dim).1)
        .sum();
    total / n as f64
}

// Stop after this many iterations without a relative batch-cost
// improvement of at least MIN_IMPROVEMENT (mirrors the usual mini-batch
// stopping rule; the iteration cap still applies).
const NO_IMPROVE_LIMIT: usize = 10;
const MIN_IMPROVEMENT: f64 = 1e-4;

/// One mini-batch k-means run: k-means++ seeding, then per-center
/// learning-rate updates over shuffled batches.
fn train_once(
    points: &[f32],
    n: usize,
    sub_dim: usize,
    cfg: &QuantizerConfig,
    rng: &mut SplitMix64,
) -> GroupTraining {
    let c = cfg.c;
    let mut centers = kmeans_pp_init(points, n, sub_dim, c, rng);
    let init_inertia = full_inertia(points, n, sub_dim, &centers);
    let init_centers = centers.clone();

    let b = cfg.kmeans_batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut counts = vec![0u64; c];
    let mut assignments = vec![0usize; b];
    let mut best_cost = f64::INFINITY;
    let mut no_improve = 0usize;

    for _ in 0..cfg.kmeans_max_iters {
        rng.shuffle(&mut order);
        let batch = &order[..b];

        // assignments against the centers fixed at batch start
        let mut cost = 0.0f64;
        for (slot, &idx) in batch.iter().enumerate() {
            let p = &points[idx * sub_dim..(idx + 1) * sub_dim];
            let (a, d) = nearest(p, &centers, sub_dim);
            assignments[slot] = a;
            cost += d;
        }
        let cost = cost / b as f64;

        for (slot, &idx) in batch.iter().enumerate() {
            let a = assignments[slot];
            counts[a] += 1;
            let eta = 1.0f32 / counts[a] as f32;
            let p = &points[idx * sub_dim..(idx + 1) * sub_dim];
            let center = &mut centers[a * sub_dim..(a + 1) * sub_dim];
            // delta form keeps converged centers bit-exact fixed points
            for (cv, &pv) in center.iter_mut().zip(p) {
                *cv += eta * (pv - *cv);
            }
        }

        // centers never assigned since the start are dead; reseed them
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                let pick = rng.gen_index(n);
                centers[k * sub_dim..(k + 1) * sub_dim]
                    .copy_from_slice(&points[pick * sub_dim..(pick + 1) * sub_dim]);
            }
        }

        if cost == 0.0 {
            break;
        }
        if cost < best_cost * (1.0 - MIN_IMPROVEMENT) {
            best_cost = cost;
            no_improve = 0;
        } else {
            no_improve += 1;
            if no_improve >= NO_IMPROVE_LIMIT {
                break;
            }
        }
    }

    let mut inertia = full_inertia(points, n, sub_dim, &centers);
    if inertia > init_inertia {
        // mini-batch updates are not monotone on the full data; never
        // return something worse than the seeding
        centers = init_centers;
        inertia = init_inertia;
    }
    GroupTraining {
        centers,
        inertia,
        init_inertia,
    }
}

fn train_group(points: &[f32], n: usize, sub_dim: usize, cfg: &QuantizerConfig, base_seed: u64) -> GroupTraining {
    let mut best: Option<GroupTraining> = None;
    for restart in 0..cfg.kmeans_restarts {
        let mut rng = SplitMix64::new(mix(base_seed, restart as u64));
        let run = train_once(points, n, sub_dim, cfg, &mut rng);
        debug_assert!(run.inertia <= run.init_inertia);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("restarts >= 1")
}

fn group_points(k_val: &Matrix, group: usize, sub_dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(k_val.rows() * sub_dim);
    for token in 0..k_val.rows() {
        out.extend_from_slice(&k_val.row(token)[group * sub_dim..(group + 1) * sub_dim]);
    }
    out
}

/// Train a codebook on validation keys with mini-batch k-means.
///
/// Groups are trained independently (in parallel); each group keeps the
/// lowest-inertia result over `kmeans_restarts` seeded runs. With
/// `shared_codebook` every group's sub-vectors are pooled into one
/// clustering and the result is replicated across groups.
pub fn train_codebook(k_val: &Matrix, cfg: &QuantizerConfig) -> Result<Codebook> {
    cfg.validate()?;
    if k_val.cols() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "training keys have width {}, config expects {}",
            k_val.cols(),
            cfg.d
        )));
    }
    if k_val.rows() < cfg.c {
        return Err(Error::InvalidConfig(format!(
            "need at least c={} training tokens, got {}",
            cfg.c,
            k_val.rows()
        )));
    }
    if !k_val.is_finite() {
        return Err(Error::NonFinite("training keys"));
    }
    let sd = cfg.sub_dim();

    if cfg.shared_codebook {
        let mut pooled = Vec::with_capacity(k_val.rows() * cfg.g * sd);
        for group in 0..cfg.g {
            pooled.extend_from_slice(&group_points(k_val, group, sd));
        }
        let n = k_val.rows() * cfg.g;
        let result = train_group(&pooled, n, sd, cfg, mix(cfg.seed, u64::MAX));
        let mut centroids = Vec::with_capacity(cfg.g * cfg.c * sd);
        for _ in 0..cfg.g {
            centroids.extend_from_slice(&result.centers);
        }
        // per-token row error sums over g groups
        return Codebook::from_parts(*cfg, centroids, result.inertia * cfg.g as f64);
    }

    let results: Vec<GroupTraining> = (0..cfg.g)
        .into_par_iter()
        .map(|group| {
            let points = group_points(k_val, group, sd);
            train_group(
                &points,
                k_val.rows(),
                sd,
                cfg,
                mix(cfg.seed, group as u64),
            )
        })
        .collect();

    let mut centroids = Vec::with_capacity(cfg.g * cfg.c * sd);
    let mut inertia = 0.0f64;
    for r in &results {
        centroids.extend_from_slice(&r.centers);
        inertia += r.inertia;
    }
    Codebook::from_parts(*cfg, centroids, inertia)
}

/// Encode one key row into centroid indices.
pub fn encode_row(key: &[f32], cb: &Codebook, out: &mut [u16]) -> Result<()> {
    let cfg = cb.config();
    if key.len() != cfg.d || out.len() != cfg.g {
        return Err(Error::ShapeMismatch(format!(
            "encode_row expects key width {} and {} groups",
            cfg.d, cfg.g
        )));
    }
    let sd = cfg.sub_dim();
    for group in 0..cfg.g {
        let sub = &key[group * sd..(group + 1) * sd];
        let (idx, _) = nearest(sub, cb.group(group), sd);
        out[group] = idx as u16;
    }
    Ok(())
}

/// Encode keys into an `n x g` index matrix. Nearest neighbor is by
/// squared Euclidean distance; ties break toward the lowest index.
pub fn encode(keys: &Matrix, cb: &Codebook) -> Result<KeyIndexMatrix> {
    let cfg = cb.config();
    if keys.cols() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "keys have width {}, codebook expects {}",
            keys.cols(),
            cfg.d
        )));
    }
    let mut indices = vec![0u16; keys.rows() * cfg.g];
    indices
        .par_chunks_exact_mut(cfg.g)
        .enumerate()
        .try_for_each(|(token, row)| encode_row(keys.row(token), cb, row))?;
    KeyIndexMatrix::new(keys.rows(), cfg.g, indices)
}

/// Rebuild one approximate key row from its index row.
pub fn reconstruct_row(indices: &[u16], cb: &Codebook) -> Result<Vec<f32>> {
    let cfg = cb.config();
    if indices.len() != cfg.g {
        return Err(Error::ShapeMismatch(format!(
            "index row length {} does not match group count {}",
            indices.len(),
            cfg.g
        )));
    }
    let mut row = Vec::with_capacity(cfg.d);
    for (group, &idx) in indices.iter().enumerate() {
        if idx as usize >= cfg.c {
            return Err(Error::IndexOutOfRange {
                what: "centroid",
                index: idx as usize,
                size: cfg.c,
            });
        }
        row.extend_from_slice(cb.centroid(group, idx as usize));
    }
    Ok(row)
}

/// Rebuild the approximate key matrix from an index matrix.
pub fn reconstruct(p: &KeyIndexMatrix, cb: &Codebook) -> Result<Matrix> {
    let cfg = cb.config();
    if p.g() != cfg.g {
        return Err(Error::ShapeMismatch(format!(
            "index matrix has {} groups, codebook has {}",
            p.g(),
            cfg.g
        )));
    }
    let mut out = Matrix::zeros(p.n(), cfg.d);
    for token in 0..p.n() {
        let row = reconstruct_row(p.row(token), cb)?;
        out.row_mut(token).copy_from_slice(&row);
    }
    Ok(out)
}

/// Mean over tokens of the squared L2 distance between each key row and
/// its encode-then-reconstruct image.
pub fn quantization_error(keys: &Matrix, cb: &Codebook) -> Result<f64> {
    let p = encode(keys, cb)?;
    let recon = reconstruct(&p, cb)?;
    let total: f64 = (0..keys.rows())
        .map(|t| squared_distance(keys.row(t), recon.row(t)))
        .sum();
    Ok(total / keys.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::{gen_synthetic, SyntheticSpec};
    use std::collections::HashSet;

    fn planted_keys(n: usize, d: usize, g: usize, cpg: usize, seed: u64) -> Matrix {
        gen_synthetic(&SyntheticSpec::planted(n, d, g, cpg, 0.0, seed))
            .unwrap()
            .to_matrix()
            .unwrap()
    }

    #[test]
    fn planted_zero_noise_trains_to_zero_inertia() {
        let keys = planted_keys(64, 8, 4, 2, 11);
        let cfg = QuantizerConfig::new(8, 4, 2).with_seed(5);
        let cb = train_codebook(&keys, &cfg).unwrap();
        assert_eq!(cb.inertia(), 0.0);

        // centroids must equal the planted sub-vectors, per group, up to order
        let sd = cfg.sub_dim();
        for group in 0..cfg.g {
            let planted: HashSet<Vec<u32>> = (0..keys.rows())
                .map(|t| {
                    keys.row(t)[group * sd..(group + 1) * sd]
                        .iter()
                        .map(|x| x.to_bits())
                        .collect()
                })
                .collect();
            assert_eq!(planted.len(), 2);
            let trained: HashSet<Vec<u32>> = (0..cfg.c)
                .map(|m| cb.centroid(group, m).iter().map(|x| x.to_bits()).collect())
                .collect();
            assert_eq!(planted, trained, "group {group}");
        }

        // and reconstruct(encode(K)) == K exactly
        let p = encode(&keys, &cb).unwrap();
        let recon = reconstruct(&p, &cb).unwrap();
        assert_eq!(recon.data(), keys.data());
        assert_eq!(quantization_error(&keys, &cb).unwrap(), 0.0);
    }

    #[test]
    fn single_centroid_is_the_group_mean() {
        let keys = gen_synthetic(&SyntheticSpec::gaussian(200, 6, 3))
            .unwrap()
            .to_matrix()
            .unwrap();
        let cfg = QuantizerConfig::new(6, 3, 1).with_seed(1);
        let cb = train_codebook(&keys, &cfg).unwrap();
        let sd = cfg.sub_dim();
        for group in 0..cfg.g {
            for dim in 0..sd {
                let mean: f64 = (0..keys.rows())
                    .map(|t| keys.row(t)[group * sd + dim] as f64)
                    .sum::<f64>()
                    / keys.rows() as f64;
                let got = cb.centroid(group, 0)[dim] as f64;
                assert!(
                    (got - mean).abs() < 1e-5,
                    "group {group} dim {dim}: {got} vs {mean}"
                );
            }
        }
    }

    #[test]
    fn wide_config_clusters_two_dim_subvectors() {
        let cfg = QuantizerConfig::new(128, 64, 4);
        assert_eq!(cfg.sub_dim(), 2);
        let keys = gen_synthetic(&SyntheticSpec::gaussian(64, 128, 2))
            .unwrap()
            .to_matrix()
            .unwrap();
        let cb = train_codebook(&keys, &cfg).unwrap();
        assert_eq!(cb.centroids().len(), 64 * 4 * 2);
        assert_eq!(cb.centroid(63, 3).len(), 2);
    }

    fn toy_codebook() -> Codebook {
        // d=4, g=2, per-group centroids {(0,0), (1,1)}
        let cfg = QuantizerConfig::new(4, 2, 2);
        Codebook::from_parts(
            cfg,
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn encode_brute_force_example() {
        let cb = toy_codebook();
        let keys = Matrix::from_vec(1, 4, vec![0.9, 1.1, 0.1, -0.1]).unwrap();
        let p = encode(&keys, &cb).unwrap();
        assert_eq!(p.row(0), &[1, 0]);
    }

    #[test]
    fn encode_exact_match_and_tie_break() {
        let cb = toy_codebook();
        // key equal to centroid 1 of both groups
        let keys = Matrix::from_vec(1, 4, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(encode(&keys, &cb).unwrap().row(0), &[1, 1]);
        // equidistant to both centroids -> lowest index wins
        let keys = Matrix::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(encode(&keys, &cb).unwrap().row(0), &[0, 0]);
    }

    #[test]
    fn centroids_are_reconstruction_fixed_points() {
        let cb = toy_codebook();
        let keys = Matrix::from_vec(2, 4, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = encode(&keys, &cb).unwrap();
        let recon = reconstruct(&p, &cb).unwrap();
        assert_eq!(recon.data(), keys.data());
        let p2 = encode(&recon, &cb).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn degenerate_single_centroid_reconstruction() {
        let cfg = QuantizerConfig::new(3, 1, 1);
        let cb = Codebook::from_parts(cfg, vec![0.5, -1.0, 2.0], 0.0).unwrap();
        let p = KeyIndexMatrix::new(1, 1, vec![0]).unwrap();
        let recon = reconstruct(&p, &cb).unwrap();
        assert_eq!(recon.row(0), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn reconstruct_rejects_out_of_range_index() {
        let cb = toy_codebook();
        let p = KeyIndexMatrix::new(1, 2, vec![0, 2]).unwrap();
        assert!(matches!(
            reconstruct(&p, &cb),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn more_centroids_never_hurt_on_fixed_data() {
        let keys = gen_synthetic(&SyntheticSpec::gaussian(512, 8, 42))
            .unwrap()
            .to_matrix()
            .unwrap();
        let cb8 = train_codebook(&keys, &QuantizerConfig::new(8, 4, 8).with_seed(3)).unwrap();
        let cb64 = train_codebook(&keys, &QuantizerConfig::new(8, 4, 64).with_seed(3)).unwrap();
        let e8 = quantization_error(&keys, &cb8).unwrap();
        let e64 = quantization_error(&keys, &cb64).unwrap();
        assert!(e64 <= e8, "c=64 error {e64} vs c=8 error {e8}");
        assert!(e8 > 0.0);
    }

    #[test]
    fn training_never_beats_its_initialization_backwards() {
        let keys = gen_synthetic(&SyntheticSpec::gaussian(300, 4, 17))
            .unwrap()
            .to_matrix()
            .unwrap();
        let cfg = QuantizerConfig::new(4, 2, 8).with_seed(9);
        let points = group_points(&keys, 0, 2);
        for restart in 0..3 {
            let mut rng = SplitMix64::new(mix(7, restart));
            let run = train_once(&points, keys.rows(), 2, &cfg, &mut rng);
            assert!(
                run.inertia <= run.init_inertia,
                "restart {restart}: {} > {}",
                run.inertia,
                run.init_inertia
            );
        }
    }

    #[test]
    fn shared_codebook_replicates_slices() {
        let keys = gen_synthetic(&SyntheticSpec::gaussian(128, 8, 23))
            .unwrap()
            .to_matrix()
            .unwrap();
        let cfg = QuantizerConfig::new(8, 4, 4).with_seed(2).shared();
        let cb = train_codebook(&keys, &cfg).unwrap();
        for group in 1..4 {
            assert_eq!(cb.group(group), cb.group(0), "group {group}");
        }
    }

    #[test]
    fn training_errors() {
        let keys = Matrix::from_vec(2, 4, vec![0.0; 8]).unwrap();
        // fewer samples than centroids
        assert!(train_codebook(&keys, &QuantizerConfig::new(4, 2, 3)).is_err());
        // g does not divide d
        assert!(train_codebook(&keys, &QuantizerConfig::new(4, 3, 1)).is_err());
        // non-finite input
        let bad = Matrix::from_vec(2, 4, vec![0.0, 1.0, f32::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            train_codebook(&bad, &QuantizerConfig::new(4, 2, 1)),
            Err(Error::NonFinite(_))
        ));
        // 16-bit index bound: 8192 and 65536 fit, 70000 does not
        assert!(QuantizerConfig::new(128, 32, 8192).validate().is_ok());
        assert!(QuantizerConfig::new(128, 64, 65_536).validate().is_ok());
        assert!(QuantizerConfig::new(128, 64, 70_000).validate().is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let keys = planted_keys(32, 4, 2, 2, 3);
        let cfg = QuantizerConfig::new(4, 2, 2).with_seed(8);
        let cb = train_codebook(&keys, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.hccb");
        cb.save(&path).unwrap();
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back, cb);
    }
}
