//! Anchor-extended NT-Xent.
//!
//! For crop embedding `z_i` with positive cell embedding `z_j`:
//!
//! ```text
//! l(i, j) = -log  exp(s(z_i, z_j) / t)
//!                 ---------------------------------------------------------------
//!                 sum_{k in 2N, k != i} exp(s(z_i, z_k) / t) + sum_{a in A} exp(s(z_i, z_a) / t)
//! ```
//!
//! The first sum runs over every crop and positive embedding in the batch
//! except `z_i` itself (so it contains the numerator term); the second over
//! the anchor negatives in scope for `i`. With no anchors this is plain
//! NT-Xent. [`anchor_ntxent`] is the vectorized, differentiable path;
//! [`reference_ntxent`] is an independent loop-only implementation kept as
//! an oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `| ||z|| - 1 |` accepted as unit norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorScope {
    /// Image k's anchors only enter the loss terms of image k.
    #[default]
    OwnImage,
    /// Every anchor in the batch enters every loss term.
    AllImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Also add the reverse terms `l(j, i)` anchored on each positive.
    pub include_symmetric: bool,
    pub anchor_scope: AnchorScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            include_symmetric: false,
            anchor_scope: AnchorScope::OwnImage,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Embeddings entering one loss evaluation (one pyramid level).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub dim: usize,
    /// `z_i`, one per image.
    pub crops: Vec<Vec<f64>>,
    /// `z_j`, one per image.
    pub positives: Vec<Vec<f64>>,
    /// `z_a`, per image: that image's anchor-negative cell embeddings.
    pub anchors: Vec<Vec<Vec<f64>>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn total_anchors(&self) -> usize {
        self.anchors.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.crops.len();
        if n == 0 {
            return Err(Error::ContractViolation("pair batch is empty".into()));
        }
        if self.positives.len() != n || self.anchors.len() != n {
            return Err(Error::ContractViolation(format!(
                "pair batch has {n} crops, {} positives and {} anchor sets",
                self.positives.len(),
                self.anchors.len()
            )));
        }
        let all = self
            .crops
            .iter()
            .chain(&self.positives)
            .chain(self.anchors.iter().flatten());
        for z in all {
            if z.len() != self.dim {
                return Err(Error::ContractViolation(format!(
                    "embedding of width {} in batch of width {}",
                    z.len(),
                    self.dim
                )));
            }
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::ContractViolation(format!(
                    "embedding norm {norm} is not 1"
                )));
            }
        }
        Ok(())
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss value plus its gradient with respect to every input embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_crops: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_anchors: Vec<Vec<Vec<f64>>>,
}

impl LossGrad {
    fn zeros_like(batch: &PairBatch) -> Self {
        let z = |v: &Vec<Vec<f64>>| v.iter().map(|e| vec![0.0; e.len()]).collect::<Vec<_>>();
        Self {
            loss: 0.0,
            d_crops: z(&batch.crops),
            d_positives: z(&batch.positives),
            d_anchors: batch.anchors.iter().map(z).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        self.loss *= s;
        let all = self
            .d_crops
            .iter_mut()
            .chain(self.d_positives.iter_mut())
            .chain(self.d_anchors.iter_mut().flatten());
        for v in all {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Crop(usize),
    Positive(usize),
    Anchor(usize, usize),
}

fn slot(batch: &PairBatch, s: Slot) -> &[f64] {
    match s {
        Slot::Crop(k) => &batch.crops[k],
        Slot::Positive(k) => &batch.positives[k],
        Slot::Anchor(k, a) => &batch.anchors[k][a],
    }
}

fn slot_grad(grad: &mut LossGrad, s: Slot) -> &mut [f64] {
    match s {
        Slot::Crop(k) => &mut grad.d_crops[k],
        Slot::Positive(k) => &mut grad.d_positives[k],
        Slot::Anchor(k, a) => &mut grad.d_anchors[k][a],
    }
}

/// Mean anchor NT-Xent over the batch.
pub fn anchor_ntxent(batch: &PairBatch, config: &LossConfig) -> Result<f64> {
    anchor_ntxent_with_grad(batch, config).map(|g| g.loss)
}

pub fn anchor_ntxent_with_grad(batch: &PairBatch, config: &LossConfig) -> Result<LossGrad> {
    config.validate()?;
    batch.validate()?;
    let n = batch.len();
    let inv_t = 1.0 / config.temperature;
    let mut grad = LossGrad::zeros_like(batch);

    let anchor_slots = |owner: usize| -> Vec<Slot> {
        match config.anchor_scope {
            AnchorScope::OwnImage => (0..batch.anchors[owner].len())
                .map(|a| Slot::Anchor(owner, a))
                .collect(),
            AnchorScope::AllImages => (0..n)
                .flat_map(|k| (0..batch.anchors[k].len()).map(move |a| Slot::Anchor(k, a)))
                .collect(),
        }
    };

    let mut terms = 0usize;
    let directions: &[bool] = if config.include_symmetric {
        &[false, true]
    } else {
        &[false]
    };
    for &reverse in directions {
        for i in 0..n {
            let (query, target) = if reverse {
                (Slot::Positive(i), Slot::Crop(i))
            } else {
                (Slot::Crop(i), Slot::Positive(i))
            };
            let mut cands: Vec<Slot> = Vec::with_capacity(2 * n + batch.total_anchors());
            for k in 0..n {
                if reverse || k != i {
                    cands.push(Slot::Crop(k));
                }
                if !reverse || k != i {
                    cands.push(Slot::Positive(k));
                }
            }
            cands.extend(anchor_slots(i));
            let target_pos = cands
                .iter()
                .position(|c| matches!((c, target), (Slot::Crop(a), Slot::Crop(b)) | (Slot::Positive(a), Slot::Positive(b)) if *a == b))
                .expect("target is always a candidate");

            let q = slot(batch, query);
            let logits: Vec<f64> = cands
                .iter()
                .map(|&c| cosine_sim(q, slot(batch, c)) * inv_t)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            grad.loss += lse - logits[target_pos];

            let mut dq = vec![0.0; batch.dim];
            for (ci, &c) in cands.iter().enumerate() {
                let p = (logits[ci] - lse).exp();
                let coeff = (p - if ci == target_pos { 1.0 } else { 0.0 }) * inv_t;
                let zc = slot(batch, c);
                for (d, &v) in dq.iter_mut().zip(zc) {
                    *d += coeff * v;
                }
                let gc = slot_grad(&mut grad, c);
                for (d, &v) in gc.iter_mut().zip(q) {
                    *d += coeff * v;
                }
            }
            for (d, v) in slot_grad(&mut grad, query).iter_mut().zip(dq) {
                *d += v;
            }
            terms += 1;
        }
    }
    grad.scale(1.0 / terms as f64);
    Ok(grad)
}

/// Equal-weight mean of per-level losses; gradients are scaled to match.
pub fn multi_level_ntxent(
    levels: &[PairBatch],
    config: &LossConfig,
) -> Result<(f64, Vec<LossGrad>)> {
    if levels.is_empty() {
        return Err(Error::ContractViolation(
            "no pyramid levels to average".into(),
        ));
    }
    let w = 1.0 / levels.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(levels.len());
    for batch in levels {
        let mut g = anchor_ntxent_with_grad(batch, config)?;
        g.scale(w);
        total += g.loss;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Loop-only oracle for [`anchor_ntxent`].
///
/// Lays the batch out SimCLR-style as `2N` views (`k < N` crops, `k >= N`
/// positives) and evaluates every `exp` term directly.
pub fn reference_ntxent(batch: &PairBatch, config: &LossConfig) -> Result<f64> {
    if !(config.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            config.temperature
        )));
    }
    batch.validate()?;
    let n = batch.crops.len();
    let tau = config.temperature;
    let view = |k: usize| -> &Vec<f64> {
        if k < n {
            &batch.crops[k]
        } else {
            &batch.positives[k - n]
        }
    };
    let dot = |a: &Vec<f64>, b: &Vec<f64>| {
        let mut s = 0.0;
        for d in 0..a.len() {
            s += a[d] * b[d];
        }
        s
    };

    let mut total = 0.0;
    let mut count = 0.0;
    let queries: Vec<(usize, usize, usize)> = if config.include_symmetric {
        (0..n)
            .map(|i| (i, n + i, i))
            .chain((0..n).map(|i| (n + i, i, i)))
            .collect()
    } else {
        (0..n).map(|i| (i, n + i, i)).collect()
    };
    for (qi, pi, owner) in queries {
        let q = view(qi);
        let numerator = (dot(q, view(pi)) / tau).exp();
        let mut denominator = 0.0;
        for k in 0..2 * n {
            if k != qi {
                denominator += (dot(q, view(k)) / tau).exp();
            }
        }
        for img in 0..n {
            let in_scope = match config.anchor_scope {
                AnchorScope::OwnImage => img == owner,
                AnchorScope::AllImages => true,
            };
            if in_scope {
                for a in &batch.anchors[img] {
                    denominator += (dot(q, a) / tau).exp();
                }
            }
        }
        total += -(numerator / denominator).ln();
        count += 1.0;
    }
    Ok(total / count)
}
