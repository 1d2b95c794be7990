//! Contrastive caption losses and the supervised base-class loss, each with
//! its analytic gradient with respect to the point features.
//!
//! All losses take unit-normalized point features `f` (n_p x d) and caption
//! embeddings `F` (n_t x d) and score them as `scale * f F^T`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RegionLanguagePair, IGNORE};
use crate::lang::CaptionBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on the average-pooled region feature.
    ClipStyle,
    /// Cross-entropy on each point, averaged within the region.
    Pdc,
    /// `Pdc` with each region weighted by its relative size.
    Rpdc,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" | "clip_style" => Ok(LossKind::ClipStyle),
            "pdc" => Ok(LossKind::Pdc),
            "rpdc" => Ok(LossKind::Rpdc),
            _ => Err(Error::invalid(format!("unknown loss `{s}` (expected clip, pdc or rpdc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionTarget {
    pub points: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossInstance {
    pub point_features: Array2<f64>,
    pub captions: Array2<f64>,
    pub regions: Vec<RegionTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_points: Array2<f64>,
}

impl LossInstance {
    pub fn new(point_features: Array2<f64>, captions: Array2<f64>, regions: Vec<RegionTarget>) -> Result<Self> {
        let inst = Self {
            point_features,
            captions,
            regions,
        };
        inst.check_shapes()?;
        for (name, m) in [("point feature", &inst.point_features), ("caption", &inst.captions)] {
            if let Some(i) = m.rows().into_iter().position(|r| (r.dot(&r).sqrt() - 1.0).abs() > 1e-6) {
                return Err(Error::invalid(format!("{name} row {i} is not unit-norm")));
            }
        }
        Ok(inst)
    }

    /// Instance for one scene: region `k` comes from `pairs[k]` and targets
    /// its bank column.
    pub fn from_bank(point_features: Array2<f64>, bank: &CaptionBank, pairs: &[RegionLanguagePair]) -> Result<Self> {
        if pairs.len() != bank.target_index.len() {
            return Err(Error::invalid("pairs do not match the caption bank"));
        }
        let regions = pairs
            .iter()
            .zip(&bank.target_index)
            .map(|(p, &t)| RegionTarget {
                points: p.point_indices.iter().map(|&i| i as usize).collect(),
                target: t,
            })
            .collect();
        Self::new(point_features, bank.embeddings.clone(), regions)
    }

    pub fn n_t(&self) -> usize {
        self.captions.nrows()
    }

    /// Same regions and captions, different features; no unit-norm check.
    pub fn with_features(&self, point_features: Array2<f64>) -> Self {
        Self {
            point_features,
            captions: self.captions.clone(),
            regions: self.regions.clone(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let (n_p, d) = self.point_features.dim();
        if self.captions.ncols() != d {
            return Err(Error::invalid("caption and point feature dimensions differ"));
        }
        if self.captions.nrows() == 0 {
            return Err(Error::invalid("caption bank is empty"));
        }
        for (k, r) in self.regions.iter().enumerate() {
            if r.points.is_empty() {
                return Err(Error::invalid(format!("region {k} has an empty point set")));
            }
            if r.target >= self.n_t() {
                return Err(Error::invalid(format!("region {k} targets caption {} of {}", r.target, self.n_t())));
            }
            if let Some(&p) = r.points.iter().find(|&&p| p >= n_p) {
                return Err(Error::invalid(format!("region {k} references point {p} of {n_p}")));
            }
        }
        Ok(())
    }
}

/// Softmax of `logits` and `logsumexp(logits)`.
fn softmax(logits: ArrayView1<f64>) -> (Array1<f64>, f64) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let sum = e.sum();
    (e / sum, max + sum.ln())
}

/// Region-aware factors `n_t * |r| / sum_i |r_i|`.
pub fn region_factors(inst: &LossInstance) -> Vec<f64> {
    let total: usize = inst.regions.iter().map(|r| r.points.len()).sum();
    let n_t = inst.n_t() as f64;
    inst.regions
        .iter()
        .map(|r| n_t * r.points.len() as f64 / total as f64)
        .collect()
}

pub fn clip_style_loss(inst: &LossInstance, scale: f64) -> Result<LossResult> {
    inst.check_shapes()?;
    let (n_p, d) = inst.point_features.dim();
    let mut grad = Array2::zeros((n_p, d));
    if inst.regions.is_empty() {
        return Ok(LossResult { value: 0.0, grad_points: grad });
    }
    let inv_r = 1.0 / inst.regions.len() as f64;
    let mut value = 0.0;
    for r in &inst.regions {
        let inv_n = 1.0 / r.points.len() as f64;
        let mut pooled = Array1::<f64>::zeros(d);
        for &i in &r.points {
            pooled += &inst.point_features.row(i);
        }
        pooled *= inv_n;
        let logits = inst.captions.dot(&pooled) * scale;
        let (mut s, lse) = softmax(logits.view());
        value += inv_r * (lse - logits[r.target]);
        s[r.target] -= 1.0;
        let g_pooled = inst.captions.t().dot(&s) * (scale * inv_r * inv_n);
        for &i in &r.points {
            let mut row = grad.row_mut(i);
            row += &g_pooled;
        }
    }
    Ok(LossResult { value, grad_points: grad })
}

/// Point-level cross-entropy with per-region weights; every point of region
/// `r` contributes `weights[r] * (-ln s[i, y_r])`.
fn weighted_point_ce(inst: &LossInstance, scale: f64, weights: &[f64]) -> Result<LossResult> {
    inst.check_shapes()?;
    let (n_p, d) = inst.point_features.dim();
    let n_t = inst.n_t();
    if inst.regions.is_empty() {
        return Ok(LossResult {
            value: 0.0,
            grad_points: Array2::zeros((n_p, d)),
        });
    }
    let mut used = vec![false; n_p];
    for r in &inst.regions {
        for &i in &r.points {
            used[i] = true;
        }
    }
    // Logits and log-normalizers only for points inside some region.
    let rows: Vec<usize> = (0..n_p).filter(|&i| used[i]).collect();
    let mut slot = vec![usize::MAX; n_p];
    for (k, &i) in rows.iter().enumerate() {
        slot[i] = k;
    }
    let feats = inst.point_features.select(Axis(0), &rows);
    let logits = feats.dot(&inst.captions.t()) * scale;
    let mut probs = Array2::zeros((rows.len(), n_t));
    let mut lse = Vec::with_capacity(rows.len());
    for (k, z) in logits.rows().into_iter().enumerate() {
        let (s, l) = softmax(z);
        probs.row_mut(k).assign(&s);
        lse.push(l);
    }

    let mut coef = Array2::<f64>::zeros((rows.len(), n_t));
    let mut value = 0.0;
    for (r, &w) in inst.regions.iter().zip(weights) {
        for &i in &r.points {
            let k = slot[i];
            value += w * (lse[k] - logits[(k, r.target)]);
            let mut c = coef.row_mut(k);
            c.scaled_add(w, &probs.row(k));
            c[r.target] -= w;
        }
    }
    let g = coef.dot(&inst.captions) * scale;
    let mut grad = Array2::zeros((n_p, d));
    for (k, &i) in rows.iter().enumerate() {
        grad.row_mut(i).assign(&g.row(k));
    }
    Ok(LossResult { value, grad_points: grad })
}

pub fn pdc_loss(inst: &LossInstance, scale: f64) -> Result<LossResult> {
    let inv_r = 1.0 / inst.regions.len().max(1) as f64;
    let w: Vec<f64> = inst.regions.iter().map(|r| inv_r / r.points.len().max(1) as f64).collect();
    weighted_point_ce(inst, scale, &w)
}

pub fn rpdc_loss(inst: &LossInstance, scale: f64) -> Result<LossResult> {
    let inv_r = 1.0 / inst.regions.len().max(1) as f64;
    let w: Vec<f64> = region_factors(inst)
        .iter()
        .zip(&inst.regions)
        .map(|(a, r)| a * inv_r / r.points.len().max(1) as f64)
        .collect();
    weighted_point_ce(inst, scale, &w)
}

pub fn caption_loss(kind: LossKind, inst: &LossInstance, scale: f64) -> Result<LossResult> {
    match kind {
        LossKind::ClipStyle => clip_style_loss(inst, scale),
        LossKind::Pdc => pdc_loss(inst, scale),
        LossKind::Rpdc => rpdc_loss(inst, scale),
    }
}

/// Mean softmax cross-entropy over the non-`IGNORE` points, scored against
/// `class_embeddings` (K x d). Labels index rows of `class_embeddings`.
pub fn supervised_ce_loss(
    point_features: &Array2<f64>,
    class_embeddings: &Array2<f64>,
    labels: &[u16],
    scale: f64,
) -> Result<LossResult> {
    let (n_p, d) = point_features.dim();
    let k = class_embeddings.nrows();
    if labels.len() != n_p {
        return Err(Error::invalid("label count does not match point count"));
    }
    if class_embeddings.ncols() != d {
        return Err(Error::invalid("class embedding dimension differs from features"));
    }
    if let Some(l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
        return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
    }
    let rows: Vec<usize> = (0..n_p).filter(|&i| labels[i] != IGNORE).collect();
    let mut grad = Array2::zeros((n_p, d));
    if rows.is_empty() {
        return Ok(LossResult { value: 0.0, grad_points: grad });
    }
    let inv = 1.0 / rows.len() as f64;
    let logits = point_features.select(Axis(0), &rows).dot(&class_embeddings.t()) * scale;
    let mut coef = Array2::<f64>::zeros((rows.len(), k));
    let mut value = 0.0;
    for (j, &i) in rows.iter().enumerate() {
        let y = labels[i] as usize;
        let (s, lse) = softmax(logits.row(j));
        value += inv * (lse - logits[(j, y)]);
        let mut c = coef.row_mut(j);
        c.scaled_add(inv, &s);
        c[y] -= inv;
    }
    let g = coef.dot(class_embeddings) * scale;
    for (j, &i) in rows.iter().enumerate() {
        grad.row_mut(i).assign(&g.row(j));
    }
    Ok(LossResult { value, grad_points: grad })
}
