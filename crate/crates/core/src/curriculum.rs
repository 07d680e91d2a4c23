//! Training-time view samplers.
//!
//! * CA-CS: views sorted by pose distance to an anchor, sampled at equal
//!   stride from a prefix that grows with training progress.
//! * P-VS: batch composition shifting from aerial-heavy to ground/satellite.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pair_distance, GeometryError, Pose};
use crate::raster::write_atomic;
use crate::scene::{Modality, SiteManifest, ViewRecord};

pub const CACHE_MAGIC: &[u8; 4] = b"SKYC";

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("insufficient {what} views: requested {requested}, available {available}")]
    InsufficientViews { what: String, requested: usize, available: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid progress: tau must be in [0, 1], got {0}")]
    InvalidProgress(f64),
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
    #[error("malformed distance cache: {0}")]
    Malformed(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of the training schedule elapsed.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CurriculumProgress(f64);

impl CurriculumProgress {
    pub fn new(tau: f64) -> Result<Self, CurriculumError> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(CurriculumError::InvalidProgress(tau))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }
}

/// Symmetric matrix of pairwise pose distances, row-major, aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCache {
    pub ids: Vec<String>,
    m: usize,
    d: Vec<f64>,
}

impl DistanceCache {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.m..(i + 1) * self.m]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// The `M(M−1)/2` entries above the diagonal.
    pub fn upper_triangle(&self) -> Vec<f64> {
        (0..self.m).flat_map(|i| ((i + 1)..self.m).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.d.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        for v in &self.d {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses a cache file; `ids` must match its size. Values come back at
    /// `f32` precision.
    pub fn from_bytes(bytes: &[u8], ids: Vec<String>) -> Result<Self, CurriculumError> {
        if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
            return Err(CurriculumError::Malformed("missing SKYC header".into()));
        }
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * m * m {
            return Err(CurriculumError::Malformed(format!("size does not match M = {m}")));
        }
        if ids.len() != m {
            return Err(CurriculumError::Malformed(format!("cache covers {m} views but {} ids given", ids.len())));
        }
        let d = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Ok(Self { ids, m, d })
    }

    pub fn write(&self, path: &Path) -> Result<(), CurriculumError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, ids: Vec<String>) -> Result<Self, CurriculumError> {
        Self::from_bytes(&fs::read(path)?, ids)
    }
}

pub fn build_distance_cache(views: &[ViewRecord], lambda_t: f64) -> Result<DistanceCache, CurriculumError> {
    let poses: Vec<Pose> = views.iter().map(ViewRecord::pose).collect();
    let mut cache = build_distance_cache_from_poses(&poses, lambda_t)?;
    cache.ids = views.iter().map(|v| v.id.clone()).collect();
    Ok(cache)
}

/// Cache over bare poses; ids are the decimal indices.
pub fn build_distance_cache_from_poses(poses: &[Pose], lambda_t: f64) -> Result<DistanceCache, CurriculumError> {
    // Validates lambda_t once up front.
    pair_distance(&Pose::identity(), &Pose::identity(), lambda_t)?;
    let m = poses.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| match i.cmp(&j) {
                    std::cmp::Ordering::Equal => 0.0,
                    // Computed once per unordered pair, as (min, max).
                    std::cmp::Ordering::Less => pair_distance(&poses[i], &poses[j], lambda_t).unwrap(),
                    std::cmp::Ordering::Greater => pair_distance(&poses[j], &poses[i], lambda_t).unwrap(),
                })
                .collect()
        })
        .collect();
    Ok(DistanceCache { ids: (0..m).map(|i| i.to_string()).collect(), m, d: rows.concat() })
}

/// Eligible prefix length `ceil(n + (available − n)·τ)`.
pub fn cacs_prefix_len(available: usize, n: usize, progress: CurriculumProgress) -> usize {
    let span = (available - n) as f64 * progress.tau();
    let nearest = span.round();
    // Products like 10 × 0.7 land a hair above the integer they denote.
    let extra = if (span - nearest).abs() <= 1e-9 * span.max(1.0) { nearest } else { span.ceil() };
    (n + extra as usize).min(available)
}

/// `round(num/den)` with ties to even, in exact integer arithmetic.
fn div_round_even(num: usize, den: usize) -> usize {
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q % 2),
    }
}

/// CA-CS over every non-anchor view.
pub fn cacs_sample(
    anchor: usize,
    cache: &DistanceCache,
    n: usize,
    progress: CurriculumProgress,
) -> Result<Vec<usize>, CurriculumError> {
    let candidates: Vec<usize> = (0..cache.len()).collect();
    cacs_sample_among(anchor, cache, &candidates, n, progress)
}

/// CA-CS restricted to `candidates` (the anchor is skipped if present).
/// Returns cache indices in sampled order (nearest first).
pub fn cacs_sample_among(
    anchor: usize,
    cache: &DistanceCache,
    candidates: &[usize],
    n: usize,
    progress: CurriculumProgress,
) -> Result<Vec<usize>, CurriculumError> {
    if anchor >= cache.len() {
        return Err(CurriculumError::InvalidAnchor(format!("index {anchor} out of range for {} views", cache.len())));
    }
    let row = cache.row(anchor);
    let mut sorted: Vec<usize> = candidates.iter().copied().filter(|&j| j != anchor).collect();
    if let Some(&bad) = sorted.iter().find(|&&j| j >= cache.len()) {
        return Err(CurriculumError::InvalidAnchor(format!("candidate index {bad} out of range")));
    }
    if n > sorted.len() {
        return Err(CurriculumError::InsufficientViews { what: "non-anchor".into(), requested: n, available: sorted.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    sorted.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let p = cacs_prefix_len(sorted.len(), n, progress);
    if n == 1 {
        return Ok(vec![sorted[0]]);
    }
    Ok((0..n).map(|k| sorted[div_round_even(k * (p - 1), n - 1)]).collect())
}

/// Per-modality batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PvsCounts {
    pub n_a: usize,
    pub n_g: usize,
    pub n_s: usize,
}

impl PvsCounts {
    pub fn total(&self) -> usize {
        self.n_a + self.n_g + self.n_s
    }

    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Ground => self.n_g,
            Modality::Aerial => self.n_a,
            Modality::Satellite => self.n_s,
        }
    }
}

pub fn pvs_counts(n_total: usize, progress: CurriculumProgress) -> Result<PvsCounts, CurriculumError> {
    if n_total < 3 {
        return Err(CurriculumError::InvalidBatch(format!("need at least 3 views per batch, got {n_total}")));
    }
    let free = n_total - 2;
    let n_a = ((1.0 - progress.tau()) * free as f64).round_ties_even() as usize;
    let n_a = n_a.min(free);
    let left = free - n_a;
    Ok(PvsCounts { n_a, n_g: 1 + left.div_ceil(2), n_s: 1 + left / 2 })
}

/// Uniform draw without replacement per modality. Ids are grouped ground,
/// aerial, satellite, each in manifest order.
pub fn pvs_sample(manifest: &SiteManifest, counts: PvsCounts, seed: u64) -> Result<Vec<String>, CurriculumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.total());
    for m in Modality::ALL {
        let pool: Vec<&ViewRecord> = manifest.views.iter().filter(|v| v.modality == m).collect();
        let want = counts.get(m);
        if want > pool.len() {
            return Err(CurriculumError::InsufficientViews { what: m.to_string(), requested: want, available: pool.len() });
        }
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), want).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| pool[i].id.clone()));
    }
    Ok(out)
}

/// P-VS counts, then CA-CS within each modality around `anchor`. The anchor
/// fills one slot of its own modality and leads the list.
pub fn composed_sample(
    manifest: &SiteManifest,
    cache: &DistanceCache,
    anchor: usize,
    counts: PvsCounts,
    progress: CurriculumProgress,
) -> Result<Vec<String>, CurriculumError> {
    if cache.len() != manifest.views.len() {
        return Err(CurriculumError::Malformed("cache does not cover the manifest".into()));
    }
    let anchor_view = manifest
        .views
        .get(anchor)
        .ok_or_else(|| CurriculumError::InvalidAnchor(format!("index {anchor} out of range")))?;
    let mut out = vec![anchor_view.id.clone()];
    for m in Modality::ALL {
        let mut want = counts.get(m);
        if m == anchor_view.modality {
            if want == 0 {
                return Err(CurriculumError::InvalidAnchor(format!("batch has no {m} slot for the {m} anchor")));
            }
            want -= 1;
        }
        let pool: Vec<usize> = (0..manifest.views.len()).filter(|&i| manifest.views[i].modality == m).collect();
        let picked = cacs_sample_among(anchor, cache, &pool, want, progress).map_err(|e| match e {
            CurriculumError::InsufficientViews { requested, available, .. } => {
                CurriculumError::InsufficientViews { what: m.to_string(), requested, available }
            }
            e => e,
        })?;
        out.extend(picked.into_iter().map(|i| manifest.views[i].id.clone()));
    }
    Ok(out)
}
