//! Slot alignment loss: compares the token affinity implied by soft slot
//! assignments with an affinity computed from external features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-12;
const COS_EPS: f64 = 1e-15;

/// Per-frame `N x N` affinity, stored as a `[T, N, N]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: Tensor,
}

impl AffinityMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Dimension(format!(
                "affinity must be [T, N, N], got {s:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape()[1]
    }

    /// Largest `|m(t,i,j) - m(t,j,i)|`.
    pub fn asymmetry(&self) -> f64 {
        let (t, n) = (self.n_frames(), self.n_tokens());
        let d = self.values.data();
        let mut worst: f64 = 0.0;
        for f in 0..t {
            for i in 0..n {
                for j in 0..i {
                    worst = worst.max((d[f * n * n + i * n + j] - d[f * n * n + j * n + i]).abs());
                }
            }
        }
        worst
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// External per-token features, `[T, N, d_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    features: Tensor,
}

impl FeatureStack {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.ndim() != 3 {
            return Err(Error::Dimension(format!(
                "feature stack must be [T, N, d_f], got {:?}",
                features.shape()
            )));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn n_frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Which adapter layers contribute to the alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SaPlacement {
    #[default]
    LastLayer,
    AllLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaOptions {
    pub mask_diagonal: bool,
}

impl Default for SaOptions {
    fn default() -> Self {
        Self {
            mask_diagonal: false,
        }
    }
}

/// `M_slot = 2 A_bar A_bar^T - 1`, where `A_bar` is the slot-axis attention
/// `[T, N, N_s]` with each token row L2-normalised.
pub fn slot_similarity<'g>(attn: Var<'g>) -> Result<Var<'g>> {
    if attn.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "slot_similarity expects [T, N, N_s], got {:?}",
            attn.shape()
        )));
    }
    let a_bar = attn.l2_normalize_axis(2, NORM_EPS)?;
    a_bar
        .matmul(a_bar.transpose_last2()?)?
        .scale(2.0)?
        .add_scalar(-1.0)
}

/// Gram matrix of L2-normalised feature rows, per frame.
pub fn feature_affinity(features: &FeatureStack) -> Result<AffinityMatrix> {
    let g = Graph::new();
    let f = g
        .constant(features.features().clone())
        .l2_normalize_axis(2, NORM_EPS)?;
    AffinityMatrix::new(f.matmul(f.transpose_last2()?)?.to_tensor())
}

/// `1 - mean_t cos(vec(M_slot[t]), vec(M_target[t]))`.
///
/// The target is treated as a constant. A frame where either matrix has
/// zero norm contributes cosine 0.
pub fn sa_loss<'g>(m_slot: Var<'g>, m_target: &AffinityMatrix, opts: SaOptions) -> Result<Var<'g>> {
    let shape = m_slot.shape();
    if shape.as_slice() != m_target.values().shape() {
        return Err(Error::Dimension(format!(
            "sa_loss: slot affinity {:?} vs target {:?}",
            shape,
            m_target.values().shape()
        )));
    }
    let g = m_slot.graph();
    let (t, n) = (shape[0], shape[1]);
    let mut target = m_target.values().clone();
    let mut slot = m_slot;
    if opts.mask_diagonal {
        let mask = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 0.0 } else { 1.0 });
        for f in 0..t {
            for i in 0..n {
                target.data_mut()[f * n * n + i * n + i] = 0.0;
            }
        }
        slot = slot.mul(g.constant(mask))?;
    }
    let target = g.constant(target.reshape(&[t, n * n])?);
    let cos = slot.reshape(&[t, n * n])?.row_cosine(target, COS_EPS)?;
    cos.mean_all()?.scale(-1.0)?.add_scalar(1.0)
}

/// `ce + lambda * sa`.
pub fn total_loss<'g>(ce: Var<'g>, sa: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda_sa", format!("must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    ce.add(sa.scale(lambda)?)
}
