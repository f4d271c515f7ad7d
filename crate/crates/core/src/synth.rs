//! Synthetic "videos" with planted entity structure.
//!
//! Each frame is a square token grid split into contiguous blocks, one per
//! entity. Every entity type owns a Gaussian centroid; token features are the
//! centroid plus isotropic noise of std `1 / separation`. One entity is the
//! query target and is only visible inside a contiguous run of frames, with
//! a background type standing in for it elsewhere.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::AffinityMatrix;
use crate::autodiff::Tensor;
use crate::decoder::{VideoSample, Vocab};
use crate::metrics::Window;
use crate::rng::{derive_index, derive_seed, stream};
use crate::{Error, Result};

/// Rotation of feature pairs `(0,1), (2,3), ...` by `angle` radians, then a
/// constant `bias` added to every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub angle: f64,
    pub bias: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { angle: 0.5, bias: 1.0 }
    }
}

impl DomainShift {
    pub fn apply(&self, features: &mut [f64], dim: usize) {
        let (s, c) = self.angle.sin_cos();
        for row in features.chunks_exact_mut(dim) {
            for pair in row.chunks_exact_mut(2) {
                let (x, y) = (pair[0], pair[1]);
                pair[0] = c * x - s * y;
                pair[1] = s * x + c * y;
            }
            for v in row.iter_mut() {
                *v += self.bias;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_frames: usize,
    /// Tokens per frame; must be a perfect square.
    pub n_tokens: usize,
    pub n_entities: usize,
    /// Number of entity types, one query word each. A background type is
    /// added on top.
    pub n_types: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub frame_interval: f64,
    pub min_window_frames: usize,
    pub max_window_frames: usize,
    pub domain_shift: Option<DomainShift>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 20,
            n_tokens: 64,
            n_entities: 4,
            n_types: 8,
            feature_dim: 16,
            separation: 4.0,
            frame_interval: 0.5,
            min_window_frames: 4,
            max_window_frames: 10,
            domain_shift: Some(DomainShift::default()),
        }
    }
}

impl SynthSpec {
    pub fn grid_side(&self) -> usize {
        (self.n_tokens as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.grid_side();
        if self.n_tokens == 0 || side * side != self.n_tokens {
            return Err(Error::config("n_tokens", format!("{} is not a square grid", self.n_tokens)));
        }
        if self.n_entities == 0 || self.n_entities > self.n_tokens {
            return Err(Error::config("n_entities", format!("must be in 1..={}", self.n_tokens)));
        }
        if self.n_types < self.n_entities {
            return Err(Error::config("n_types", "fewer entity types than entities per video"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::config("separation", "must be finite and > 0"));
        }
        if !(self.frame_interval > 0.0) || !self.frame_interval.is_finite() {
            return Err(Error::config("frame_interval", "must be finite and > 0"));
        }
        if self.min_window_frames == 0 || self.min_window_frames > self.max_window_frames {
            return Err(Error::config("min_window_frames", "need 1 <= min_window_frames <= max_window_frames"));
        }
        if self.max_window_frames > self.n_frames {
            return Err(Error::config("max_window_frames", "longer than the video"));
        }
        if let Some(d) = self.domain_shift {
            if !d.angle.is_finite() || !d.bias.is_finite() {
                return Err(Error::config("domain_shift", "angle and bias must be finite"));
            }
        }
        block_layout(side, self.n_entities).map(|_| ())
    }

    pub fn duration(&self) -> f64 {
        self.n_frames as f64 * self.frame_interval
    }

    pub fn background_type(&self) -> usize {
        self.n_types
    }

    /// Centroids for every type plus background, `[n_types + 1, feature_dim]`.
    pub fn centroids(&self) -> Tensor {
        let mut rng = stream(self.seed, "centroids");
        Tensor::randn(&[self.n_types + 1, self.feature_dim], 1.0, &mut rng)
    }
}

/// Block id of each grid cell. Rows are cut into `floor(sqrt(k))` bands and
/// each band into roughly equal column runs.
pub fn block_layout(side: usize, k: usize) -> Result<Vec<usize>> {
    let bands = ((k as f64).sqrt().floor() as usize).max(1);
    let max_cols = k.div_ceil(bands);
    if bands > side || max_cols > side {
        return Err(Error::config(
            "n_entities",
            format!("{k} contiguous blocks do not fit a {side}x{side} grid"),
        ));
    }
    let mut out = vec![0; side * side];
    let mut block = 0;
    for b in 0..bands {
        let cols = k / bands + usize::from(b < k % bands);
        let (r0, r1) = (b * side / bands, (b + 1) * side / bands);
        for c in 0..cols {
            let (c0, c1) = (c * side / cols, (c + 1) * side / cols);
            for r in r0..r1 {
                for col in c0..c1 {
                    out[r * side + col] = block + c;
                }
            }
        }
        block += cols;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub sample: VideoSample,
    /// `[T * N]` entity type id of each token, background included.
    pub planted_labels: Vec<usize>,
    pub gt_affinity: AffinityMatrix,
    /// Types placed in the blocks, in block order.
    pub entity_types: Vec<usize>,
    pub target_type: usize,
    /// Frame indices of the target's first and last appearance.
    pub target_frames: (usize, usize),
}

impl SynthVideo {
    pub fn label(&self, frame: usize, token: usize) -> usize {
        self.planted_labels[frame * self.sample.tokens_per_frame() + token]
    }
}

/// `+1` where two tokens of a frame share a label, `-1` otherwise.
pub fn affinity_from_labels(labels: &[usize], t: usize, n: usize) -> Result<AffinityMatrix> {
    if labels.len() != t * n {
        return Err(Error::Dimension(format!("{} labels for a {t}x{n} grid", labels.len())));
    }
    let mut v = vec![0.0; t * n * n];
    for f in 0..t {
        let l = &labels[f * n..(f + 1) * n];
        for i in 0..n {
            for j in 0..n {
                v[(f * n + i) * n + j] = if l[i] == l[j] { 1.0 } else { -1.0 };
            }
        }
    }
    AffinityMatrix::new(Tensor::new(&[t, n, n], v)?)
}

fn generate(spec: &SynthSpec, centroids: &Tensor, seed: u64, id: String, shift: Option<DomainShift>) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, n, d) = (spec.n_frames, spec.n_tokens, spec.feature_dim);
    let layout = block_layout(spec.grid_side(), spec.n_entities)?;

    let mut types: Vec<usize> = (0..spec.n_types).collect();
    types.shuffle(&mut rng);
    types.truncate(spec.n_entities);
    let target_block = rng.gen_range(0..spec.n_entities);
    let target_type = types[target_block];
    let len = rng.gen_range(spec.min_window_frames..=spec.max_window_frames);
    let first = rng.gen_range(0..=t - len);
    let last = first + len - 1;

    let mut labels = Vec::with_capacity(t * n);
    for f in 0..t {
        let visible = (first..=last).contains(&f);
        for &b in &layout {
            labels.push(if b == target_block && !visible { spec.background_type() } else { types[b] });
        }
    }

    let noise = 1.0 / spec.separation;
    let mut feats = Vec::with_capacity(t * n * d);
    for &l in &labels {
        for k in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            feats.push(centroids.data()[l * d + k] + noise * z);
        }
    }
    if let Some(s) = shift {
        s.apply(&mut feats, d);
    }

    let times: Vec<f64> = (0..t).map(|i| i as f64 * spec.frame_interval).collect();
    let gt_affinity = affinity_from_labels(&labels, t, n)?;
    let vocab = Vocab::new(spec.n_types);
    let sample = VideoSample {
        id,
        frames: Tensor::new(&[t, n, d], feats)?,
        gt_window: Window::new(times[first], times[last])?,
        times,
        duration: spec.duration(),
        query: vec![vocab.query_id(target_type)?],
        target_affinity: Some(gt_affinity.clone()),
    };
    sample.validate()?;
    Ok(SynthVideo {
        sample,
        planted_labels: labels,
        gt_affinity,
        entity_types: types,
        target_type,
        target_frames: (first, last),
    })
}

/// One video, a pure function of `spec` (its domain shift is not applied).
pub fn gen_video(spec: &SynthSpec) -> Result<SynthVideo> {
    spec.validate()?;
    generate(spec, &spec.centroids(), derive_seed(spec.seed, "video"), format!("video-{}", spec.seed), None)
}

/// `count` videos from a named split. With `shifted` the spec's domain shift
/// is applied to the features.
pub fn gen_split(spec: &SynthSpec, split: &str, count: usize, shifted: bool) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let shift = if shifted {
        Some(spec.domain_shift.ok_or_else(|| Error::config("domain_shift", "an OOD split needs a domain shift"))?)
    } else {
        None
    };
    let centroids = spec.centroids();
    (0..count)
        .map(|i| generate(spec, &centroids, split_seed(spec, split, i), format!("{split}-{i}"), shift))
        .collect()
}

fn split_seed(spec: &SynthSpec, split: &str, index: usize) -> u64 {
    derive_index(derive_seed(spec.seed, split), index as u64)
}

/// Video `index` of a split without generating the ones before it.
pub fn split_video(spec: &SynthSpec, split: &str, index: usize) -> Result<SynthVideo> {
    spec.validate()?;
    generate(spec, &spec.centroids(), split_seed(spec, split, index), format!("{split}-{index}"), None)
}

/// Train and eval sets. Training data is always in-domain; with `ood` the
/// eval set carries the domain shift.
pub fn gen_dataset(spec: &SynthSpec, n_train: usize, n_eval: usize, ood: bool) -> Result<(Vec<SynthVideo>, Vec<SynthVideo>)> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Value("dataset sizes must be at least 1".into()));
    }
    Ok((gen_split(spec, "train", n_train, false)?, gen_split(spec, "eval", n_eval, ood)?))
}

/// Highest-attending slot per token, lowest index on ties. `attn` is
/// `[T, N, N_s]`.
pub fn slot_assignment(attn: &Tensor) -> Result<Vec<usize>> {
    if attn.ndim() != 3 {
        return Err(Error::Dimension(format!("attention must be [T, N, S], got {:?}", attn.shape())));
    }
    let s = attn.shape()[2];
    Ok(attn
        .data()
        .chunks_exact(s)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

/// Adjusted Rand index of two labelings of the same items. When the
/// chance-corrected denominator vanishes the result is 1 for equivalent
/// partitions and 0 otherwise.
pub fn ari_single(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Value(format!("cannot compare labelings of length {} and {}", a.len(), b.len())));
    }
    let mut ids_a: Vec<usize> = a.to_vec();
    ids_a.sort_unstable();
    ids_a.dedup();
    let mut ids_b: Vec<usize> = b.to_vec();
    ids_b.sort_unstable();
    ids_b.dedup();
    let ia = |x: usize| ids_a.binary_search(&x).unwrap_or(0);
    let ib = |x: usize| ids_b.binary_search(&x).unwrap_or(0);
    let mut table = vec![0usize; ids_a.len() * ids_b.len()];
    for (&x, &y) in a.iter().zip(b) {
        table[ia(x) * ids_b.len() + ib(y)] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let rows: f64 = table.chunks_exact(ids_b.len()).map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..ids_b.len())
        .map(|j| choose2((0..ids_a.len()).map(|i| table[i * ids_b.len() + j]).sum()))
        .sum();
    let expected = rows * cols / choose2(a.len()).max(f64::MIN_POSITIVE);
    let max = 0.5 * (rows + cols);
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        return Ok(if same_partition(a, b) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Per-frame ARI averaged over frames; labels are `[T * N]`.
pub fn ari(labels_a: &[usize], labels_b: &[usize], n_tokens: usize) -> Result<f64> {
    if labels_a.len() != labels_b.len() || n_tokens == 0 || labels_a.len() % n_tokens != 0 || labels_a.is_empty() {
        return Err(Error::Dimension(format!(
            "label grids of length {} and {} with {n_tokens} tokens per frame",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let frames = labels_a.len() / n_tokens;
    let mut total = 0.0;
    for (a, b) in labels_a.chunks_exact(n_tokens).zip(labels_b.chunks_exact(n_tokens)) {
        total += ari_single(a, b)?;
    }
    Ok(total / frames as f64)
}

/// Mean of all token features of a video, `[D]`.
pub fn pooled_features(sample: &VideoSample) -> Vec<f64> {
    let d = sample.feature_dim();
    let mut out = vec![0.0; d];
    let rows = sample.frames.data().chunks_exact(d);
    let count = rows.len() as f64;
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= count);
    out
}
