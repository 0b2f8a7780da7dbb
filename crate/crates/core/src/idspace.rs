//! Synthetic identity-embedding universe.
//!
//! Identities live on the unit sphere of a `d`-dimensional embedding space.
//! This module generates them, groups them (centroids, density clustering),
//! chooses replacement anchors at a target cosine proximity, and mixes forget
//! embeddings into convex combinations used as training conditions.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PiuError, Result};
use crate::linalg::{dot, norm, normalized};
use crate::rng::{dirichlet, gaussian_vec, rng_from_seed, PiuRng};

/// A point in identity-embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding(pub Vec<f64>);

impl IdentityEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Projects `values` onto the unit sphere.
    pub fn unit(values: &[f64]) -> Result<Self> {
        let n = norm(values);
        if n == 0.0 || !n.is_finite() {
            return invalid("cannot normalize a zero or non-finite vector");
        }
        Ok(Self(values.iter().map(|x| x / n).collect()))
    }
}

impl AsRef<[f64]> for IdentityEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Dataset partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    ForgetTrain,
    ForgetVal,
    RetainTrain,
    RetainVal,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::ForgetTrain => "forget-train",
            Split::ForgetVal => "forget-val",
            Split::RetainTrain => "retain-train",
            Split::RetainVal => "retain-val",
        }
    }

    pub fn is_forget(self) -> bool {
        matches!(self, Split::ForgetTrain | Split::ForgetVal)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = PiuError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget-train" => Ok(Split::ForgetTrain),
            "forget-val" => Ok(Split::ForgetVal),
            "retain-train" => Ok(Split::RetainTrain),
            "retain-val" => Ok(Split::RetainVal),
            other => Err(PiuError::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub embedding: IdentityEmbedding,
    pub identity: usize,
    pub split: Split,
}

/// Fractions used when partitioning samples into train/validation splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub forget_train: f64,
    pub retain_train: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            forget_train: 0.65,
            retain_train: 0.9,
        }
    }
}

/// Samples grouped by identity, with per-identity centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    dim: usize,
    samples: Vec<Sample>,
    by_identity: BTreeMap<usize, Vec<usize>>,
    centroids: BTreeMap<usize, Vec<f64>>,
}

impl IdentityDataset {
    pub fn from_samples(dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if dim < 2 {
            return invalid("embedding dimension must be at least 2");
        }
        let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.embedding.dim() != dim {
                return invalid(format!(
                    "sample {i} has dimension {} but dataset dimension is {dim}",
                    s.embedding.dim()
                ));
            }
            by_identity.entry(s.identity).or_default().push(i);
        }
        let mut centroids = BTreeMap::new();
        for (&id, idx) in &by_identity {
            let members: Vec<&[f64]> = idx
                .iter()
                .map(|&i| samples[i].embedding.as_slice())
                .collect();
            centroids.insert(id, centroid(&members)?);
        }
        Ok(Self {
            dim,
            samples,
            by_identity,
            centroids,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn identities(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_identity.keys().copied()
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn contains_identity(&self, id: usize) -> bool {
        self.by_identity.contains_key(&id)
    }

    /// Indices into [`samples`](Self::samples) for one identity.
    pub fn members(&self, id: usize) -> &[usize] {
        self.by_identity.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Unnormalized mean embedding of an identity.
    pub fn centroid(&self, id: usize) -> Option<&[f64]> {
        self.centroids.get(&id).map(Vec::as_slice)
    }

    pub fn centroids(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.centroids
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// The identity holding forget-split samples, if any.
    pub fn forget_identity(&self) -> Option<usize> {
        self.samples
            .iter()
            .find(|s| s.split.is_forget())
            .map(|s| s.identity)
    }

    /// Reassigns every split so that `forget` becomes the forget identity.
    pub fn resplit(&self, forget: usize, ratios: SplitRatios, seed: u64) -> Result<Self> {
        if !self.contains_identity(forget) {
            return invalid(format!("identity {forget} not in dataset"));
        }
        let mut samples = self.samples.clone();
        assign_splits(&mut samples, &self.by_identity, forget, ratios, seed);
        Self::from_samples(self.dim, samples)
    }

    /// Serializes to the line-oriented `piu-idset v1` text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("piu-idset v1 dim={}\n", self.dim);
        for s in &self.samples {
            out.push_str(&s.identity.to_string());
            out.push(' ');
            out.push_str(s.split.as_str());
            for v in s.embedding.as_slice() {
                out.push(' ');
                out.push_str(&format_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| PiuError::Format("empty dataset file".into()))?;
        let dim = header
            .strip_prefix("piu-idset v1 dim=")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| PiuError::Format(format!("bad header `{header}`")))?;
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let bad = || PiuError::Format(format!("malformed sample on line {}", lineno + 2));
            let identity = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            let split: Split = fields.next().ok_or_else(bad)?.parse()?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if values.len() != dim {
                return Err(bad());
            }
            samples.push(Sample {
                embedding: IdentityEmbedding(values),
                identity,
                split,
            });
        }
        Self::from_samples(dim, samples)
    }
}

/// Decimal with 17 significant digits; parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn assign_splits(
    samples: &mut [Sample],
    by_identity: &BTreeMap<usize, Vec<usize>>,
    forget: usize,
    ratios: SplitRatios,
    seed: u64,
) {
    let mut rng = crate::rng::substream(seed, 0x5_1717);
    for (&id, members) in by_identity {
        let n = members.len();
        let order = index::sample(&mut rng, n, n).into_vec();
        let (train_frac, train, val) = if id == forget {
            (ratios.forget_train, Split::ForgetTrain, Split::ForgetVal)
        } else {
            (ratios.retain_train, Split::RetainTrain, Split::RetainVal)
        };
        let mut n_train = ((n as f64) * train_frac).round() as usize;
        n_train = n_train.clamp(1, n);
        if id == forget && n >= 2 && n_train == n {
            n_train = n - 1;
        }
        for (rank, &pos) in order.iter().enumerate() {
            samples[members[pos]].split = if rank < n_train { train } else { val };
        }
    }
}

/// Parameters for [`generate_identities`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub spread: f64,
    pub dim: usize,
    pub seed: u64,
    /// Identity whose samples receive the forget splits.
    pub forget_identity: usize,
    pub ratios: SplitRatios,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_identities: 64,
            samples_per_identity: 12,
            spread: 0.15,
            dim: 32,
            seed: 0,
            forget_identity: 0,
            ratios: SplitRatios::default(),
        }
    }
}

/// Draws identity centers uniformly on the sphere and jitters samples around them.
pub fn generate_identities(spec: &GeneratorSpec) -> Result<IdentityDataset> {
    if spec.num_identities < 2 {
        return invalid("need at least two identities");
    }
    if spec.samples_per_identity < 1 {
        return invalid("need at least one sample per identity");
    }
    if !(spec.spread >= 0.0) || !spec.spread.is_finite() {
        return invalid("spread must be finite and non-negative");
    }
    if spec.dim < 2 {
        return invalid("dim must be at least 2");
    }
    if spec.forget_identity >= spec.num_identities {
        return invalid("forget identity out of range");
    }
    let mut rng = rng_from_seed(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for id in 0..spec.num_identities {
        let center = random_unit(&mut rng, spec.dim);
        for _ in 0..spec.samples_per_identity {
            let values = if spec.spread == 0.0 {
                center.clone()
            } else {
                let noise = gaussian_vec(&mut rng, spec.dim);
                let jittered: Vec<f64> = center
                    .iter()
                    .zip(&noise)
                    .map(|(c, e)| c + spec.spread * e)
                    .collect();
                normalized(&jittered)
            };
            samples.push(Sample {
                embedding: IdentityEmbedding(values),
                identity: id,
                split: Split::RetainTrain,
            });
        }
    }
    let dataset = IdentityDataset::from_samples(spec.dim, samples)?;
    dataset.resplit(spec.forget_identity, spec.ratios, spec.seed)
}

fn random_unit(rng: &mut PiuRng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Component-wise arithmetic mean; the result is not renormalized.
pub fn centroid<V: AsRef<[f64]>>(samples: &[V]) -> Result<Vec<f64>> {
    let first = match samples.first() {
        Some(f) => f.as_ref(),
        None => return invalid("centroid of an empty set"),
    };
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return invalid("centroid inputs have mismatched dimensions");
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return invalid("cosine similarity of vectors with different dimensions");
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return invalid("cosine similarity with a zero vector");
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Label given to points that belong to no cluster.
pub const NOISE: i64 = -1;

/// DBSCAN under cosine distance `1 - cos(u, v)`.
///
/// `min_cluster_size` counts the point itself. Clusters are numbered in the
/// order their first core point appears in the input.
pub fn cluster_identities<V: AsRef<[f64]>>(
    embeddings: &[V],
    eps: f64,
    min_cluster_size: usize,
) -> Result<Vec<i64>> {
    if embeddings.is_empty() {
        return invalid("cannot cluster an empty set");
    }
    if !(eps > 0.0 && eps < 2.0) {
        return invalid("eps must lie in (0, 2)");
    }
    if min_cluster_size < 1 {
        return invalid("min_cluster_size must be at least 1");
    }
    let units: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| IdentityEmbedding::unit(e.as_ref()).map(|u| u.0))
        .collect::<Result<_>>()?;
    let dim = units[0].len();
    if units.iter().any(|u| u.len() != dim) {
        return invalid("embeddings have mismatched dimensions");
    }
    let n = units.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| 1.0 - dot(&units[i], &units[j]) <= eps)
                .collect()
        })
        .collect();

    const UNVISITED: i64 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut next = 0i64;
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        if neighbors[i].len() < min_cluster_size {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = next;
        let mut queue: VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = next;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = next;
            if neighbors[j].len() >= min_cluster_size {
                queue.extend(neighbors[j].iter().copied());
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// Request for a proximity-based anchor identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorQuery {
    pub tau: f64,
    pub tolerance: f64,
    pub forget_identity: usize,
    pub rng_seed: u64,
}

impl AnchorQuery {
    pub fn new(forget_identity: usize, rng_seed: u64) -> Self {
        Self {
            tau: 0.2,
            tolerance: 1e-2,
            forget_identity,
            rng_seed,
        }
    }
}

/// Identities `j != f` with `|cos(mu_f, mu_j) - tau| < tolerance`, ascending by label,
/// each paired with its similarity to the forget centroid.
pub fn anchor_candidates(
    dataset: &IdentityDataset,
    query: &AnchorQuery,
) -> Result<Vec<(usize, f64)>> {
    if !(query.tolerance > 0.0) {
        return invalid("anchor tolerance must be positive");
    }
    if !(query.tau > -1.0 && query.tau < 1.0) {
        return invalid("tau must lie in (-1, 1)");
    }
    let forget = dataset.centroid(query.forget_identity).ok_or_else(|| {
        PiuError::InvalidArgument(format!(
            "forget identity {} not in dataset",
            query.forget_identity
        ))
    })?;
    if dataset.num_identities() < 2 {
        return invalid("anchor selection needs at least one other identity");
    }
    let mut nearest_gap = f64::INFINITY;
    let mut candidates = Vec::new();
    for (&id, mu) in dataset.centroids() {
        if id == query.forget_identity {
            continue;
        }
        let s = cosine_sim(forget, mu)?;
        let gap = (s - query.tau).abs();
        nearest_gap = nearest_gap.min(gap);
        if gap < query.tolerance {
            candidates.push((id, s));
        }
    }
    if candidates.is_empty() {
        return Err(PiuError::NoAnchorFound { nearest_gap });
    }
    Ok(candidates)
}

/// Uniform draw from the anchor candidate set.
pub fn select_anchor(dataset: &IdentityDataset, query: &AnchorQuery) -> Result<usize> {
    let candidates = anchor_candidates(dataset, query)?;
    let mut rng = rng_from_seed(query.rng_seed);
    Ok(candidates[rng.random_range(0..candidates.len())].0)
}

/// Parameters for Dirichlet mixing of forget embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub k: usize,
    pub alpha: f64,
    pub rng_seed: u64,
}

/// A convex combination of source embeddings, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedCondition {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub source_indices: Vec<usize>,
}

pub fn mix_forget_conditions<V: AsRef<[f64]>>(
    sources: &[V],
    spec: &MixSpec,
) -> Result<MixedCondition> {
    let mut rng = rng_from_seed(spec.rng_seed);
    mix_with_rng(&mut rng, sources, spec.k, spec.alpha)
}

/// Draws `k` sources without replacement and mixes them with `w ~ Dir(alpha)`.
pub fn mix_with_rng<V: AsRef<[f64]>>(
    rng: &mut PiuRng,
    sources: &[V],
    k: usize,
    alpha: f64,
) -> Result<MixedCondition> {
    if k < 1 {
        return invalid("mixing needs k >= 1");
    }
    if k > sources.len() {
        return invalid(format!("cannot draw {k} sources from {}", sources.len()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return invalid("dirichlet concentration must be positive");
    }
    let source_indices = index::sample(rng, sources.len(), k).into_vec();
    let weights = dirichlet(rng, k, alpha);
    let values = convex_combination(sources, &source_indices, &weights)?;
    Ok(MixedCondition {
        values,
        weights,
        source_indices,
    })
}

/// `sum_k w_k * sources[indices[k]]`.
pub fn convex_combination<V: AsRef<[f64]>>(
    sources: &[V],
    indices: &[usize],
    weights: &[f64],
) -> Result<Vec<f64>> {
    if indices.len() != weights.len() || indices.is_empty() {
        return invalid("indices and weights must be non-empty and equally long");
    }
    let dim = sources[indices[0]].as_ref().len();
    let mut out = vec![0.0; dim];
    for (&i, &w) in indices.iter().zip(weights) {
        let src = sources
            .get(i)
            .ok_or_else(|| PiuError::InvalidArgument(format!("source index {i} out of range")))?;
        let src = src.as_ref();
        if src.len() != dim {
            return invalid("sources have mismatched dimensions");
        }
        for (o, v) in out.iter_mut().zip(src) {
            *o += w * v;
        }
    }
    Ok(out)
}
