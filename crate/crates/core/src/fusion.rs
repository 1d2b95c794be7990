//! Point-set overlap and supplementary-oriented fusion of multi-source
//! region-language pairs.
//!
//! A candidate pair is fused when its maximum point-set IoU against the
//! reference set lies in `[t_low, t_high)`. Candidates are visited source by
//! source in `candidate_order`; with [`ReferenceSet::Growing`] every accepted
//! candidate joins the reference set for the ones after it. Afterwards the
//! accepted candidates are subsampled (seeded, uniform) until primary pairs
//! make up at least `epsilon` of the output.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RegionLanguagePair, SourceTag};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSet {
    /// Primary pairs plus every candidate accepted so far.
    #[default]
    Growing,
    /// Primary pairs only.
    PrimaryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub candidate_order: Vec<SourceTag>,
    pub reference: ReferenceSet,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            t_low: 0.0,
            t_high: 0.2,
            epsilon: 0.72,
            seed: 0,
            candidate_order: Vec::new(),
            reference: ReferenceSet::Growing,
        }
    }
}

impl FusionConfig {
    /// Settings under which fusion degenerates to concatenating all sources.
    pub fn data_mixing(candidate_order: Vec<SourceTag>) -> Self {
        Self {
            t_low: 0.0,
            t_high: 1.0,
            epsilon: f64::MIN_POSITIVE,
            candidate_order,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_low) {
            return Err(Error::config(format!("t_low ({}) must lie in [0, 1]", self.t_low)));
        }
        if !(self.t_high > 0.0 && self.t_high <= 1.0) {
            return Err(Error::config(format!("t_high ({}) must lie in (0, 1]", self.t_high)));
        }
        if self.t_low >= self.t_high {
            return Err(Error::config(format!(
                "t_low ({}) must be smaller than t_high ({})",
                self.t_low, self.t_high
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!("epsilon ({}) must lie in (0, 1]", self.epsilon)));
        }
        Ok(())
    }

    /// `t_high = 1` also admits exact duplicates, so `[0, 1]` is the full union.
    fn accepts(&self, tau: f64) -> bool {
        self.t_low <= tau && (tau < self.t_high || self.t_high >= 1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub kept_primary: usize,
    pub kept_per_source: BTreeMap<SourceTag, usize>,
    pub dropped_overlap: usize,
    pub dropped_ratio: usize,
    pub achieved_primary_ratio: f64,
}

/// `|a ∩ b| / |a ∪ b|` for sorted, duplicate-free index sets.
pub fn pointset_iou(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("pointset_iou requires non-empty sets"));
    }
    Ok(iou_sorted(a, b))
}

pub(crate) fn iou_sorted(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Largest IoU between `candidate` and any of `reference`; 0 for an empty reference.
pub fn max_overlap_ratio(candidate: &RegionLanguagePair, reference: &[RegionLanguagePair]) -> Result<f64> {
    let mut best = 0.0f64;
    for r in reference {
        if r.scene_id != candidate.scene_id {
            return Err(Error::invalid(format!(
                "scene mismatch: `{}` vs `{}`",
                candidate.scene_id, r.scene_id
            )));
        }
        best = best.max(pointset_iou(&candidate.point_indices, &r.point_indices)?);
    }
    Ok(best)
}

fn check_pairs<'a>(pairs: impl IntoIterator<Item = &'a RegionLanguagePair>) -> Result<()> {
    let mut scene: Option<&str> = None;
    for p in pairs {
        if p.point_indices.is_empty() {
            return Err(Error::invalid("pair with an empty point set"));
        }
        match scene {
            None => scene = Some(&p.scene_id),
            Some(s) if s != p.scene_id => {
                return Err(Error::invalid(format!("scene mismatch: `{s}` vs `{}`", p.scene_id)))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Threshold filter only: the accepted candidates in visiting order, with the
/// number rejected for overlap.
pub fn filter_candidates<'a>(
    primary: &[RegionLanguagePair],
    candidates_by_source: &'a BTreeMap<SourceTag, Vec<RegionLanguagePair>>,
    cfg: &FusionConfig,
) -> Result<(Vec<&'a RegionLanguagePair>, usize)> {
    cfg.validate()?;
    if let Some(missing) = candidates_by_source
        .keys()
        .find(|k| !cfg.candidate_order.contains(k))
    {
        return Err(Error::config(format!(
            "candidate_order does not list source `{missing}`"
        )));
    }
    check_pairs(primary.iter().chain(candidates_by_source.values().flatten()))?;

    let mut reference: Vec<&[u32]> = primary.iter().map(|p| p.point_indices.as_slice()).collect();
    let mut accepted = Vec::new();
    let mut dropped = 0;
    for tag in &cfg.candidate_order {
        let Some(cands) = candidates_by_source.get(tag) else {
            continue;
        };
        for c in cands {
            let tau = reference
                .iter()
                .map(|r| iou_sorted(&c.point_indices, r))
                .fold(0.0, f64::max);
            if cfg.accepts(tau) {
                if cfg.reference == ReferenceSet::Growing {
                    reference.push(&c.point_indices);
                }
                accepted.push(c);
            } else {
                dropped += 1;
            }
        }
    }
    Ok((accepted, dropped))
}

/// Largest candidate count `m` with `primary / (primary + m) >= epsilon`.
pub fn max_candidates_for_ratio(primary: usize, epsilon: f64) -> usize {
    if primary == 0 {
        return usize::MAX;
    }
    let p = primary as f64;
    let mut m = (p / epsilon - p + 1e-9).floor().max(0.0) as usize;
    while m > 0 && p / (p + m as f64) < epsilon {
        m -= 1;
    }
    m
}

/// Fuses candidate sources into the primary one. The output lists every
/// primary pair unchanged, followed by the kept candidates in visiting order.
pub fn sfusion(
    primary: &[RegionLanguagePair],
    candidates_by_source: &BTreeMap<SourceTag, Vec<RegionLanguagePair>>,
    cfg: &FusionConfig,
) -> Result<(Vec<RegionLanguagePair>, FusionReport)> {
    let (accepted, dropped_overlap) = filter_candidates(primary, candidates_by_source, cfg)?;

    // With no primary pairs the ratio is unattainable for any non-empty output,
    // so the constraint only applies when a primary source contributed.
    let limit = max_candidates_for_ratio(primary.len(), cfg.epsilon);
    let kept: Vec<&RegionLanguagePair> = if accepted.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, accepted.len(), limit).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| accepted[i]).collect()
    } else {
        accepted.clone()
    };

    let mut report = FusionReport {
        kept_primary: primary.len(),
        dropped_overlap,
        dropped_ratio: accepted.len() - kept.len(),
        ..FusionReport::default()
    };
    for tag in candidates_by_source.keys() {
        report.kept_per_source.insert(*tag, 0);
    }
    for c in &kept {
        *report.kept_per_source.entry(c.source).or_default() += 1;
    }
    let total = primary.len() + kept.len();
    report.achieved_primary_ratio = if total == 0 {
        1.0
    } else {
        primary.len() as f64 / total as f64
    };

    let mut fused = primary.to_vec();
    fused.extend(kept.into_iter().cloned());
    Ok((fused, report))
}

/// Plain concatenation of all sources (the data-mixing baseline).
pub fn union_pairs(
    primary: &[RegionLanguagePair],
    candidates_by_source: &BTreeMap<SourceTag, Vec<RegionLanguagePair>>,
    candidate_order: &[SourceTag],
) -> Vec<RegionLanguagePair> {
    let mut out = primary.to_vec();
    for tag in candidate_order {
        if let Some(c) = candidates_by_source.get(tag) {
            out.extend(c.iter().cloned());
        }
    }
    out
}
