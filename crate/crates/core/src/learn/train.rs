//! Training loop: caption loss plus the weighted supervised base-class loss,
//! optimized over seeded mini-batches of scenes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{caption_loss, supervised_ce_loss, LossInstance, LossKind, RegionTarget};
use super::model::{point_inputs, ModelConfig, ModelParams};
use super::optim::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geom::{PointScene, RegionLanguagePair, SourceTag, IGNORE};
use crate::lang::{build_caption_bank, EmbeddingProvider};

/// How pairs from several caption sources enter the caption loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMixing {
    /// One caption bank and one loss term over all pairs of a scene.
    #[default]
    Data,
    /// One bank and one equally weighted loss term per source.
    LossLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub supervised_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub optimizer: OptimizerKind,
    pub batch_scenes: usize,
    pub seed: u64,
    /// Points sampled per scene and step; 0 uses every point.
    pub points_per_scene: usize,
    pub caption_mixing: CaptionMixing,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Rpdc,
            supervised_weight: 1.0,
            steps: 300,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            optimizer: OptimizerKind::Adam,
            batch_scenes: 2,
            seed: 0,
            points_per_scene: 0,
            caption_mixing: CaptionMixing::Data,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if !(self.supervised_weight >= 0.0 && self.supervised_weight.is_finite()) {
            return Err(Error::config("train.supervised_weight must be >= 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("train.adam_betas must lie in [0, 1)"));
        }
        if self.batch_scenes == 0 {
            return Err(Error::config("train.batch_scenes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionGroup {
    pub captions: Array2<f64>,
    pub regions: Vec<RegionTarget>,
}

/// One scene ready for training: encoder inputs, caption loss groups and
/// supervised labels indexing the base-class embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub scene_id: String,
    pub inputs: Array2<f64>,
    pub groups: Vec<CaptionGroup>,
    pub base_labels: Vec<u16>,
}

/// `base` lists the annotated category indices; other labels become `IGNORE`.
pub fn prepare_scene(
    scene: &PointScene,
    pairs: &[RegionLanguagePair],
    provider: &EmbeddingProvider,
    mixing: CaptionMixing,
    base: &[usize],
    context_voxel: f64,
) -> Result<TrainScene> {
    let mut grouped: BTreeMap<Option<SourceTag>, Vec<RegionLanguagePair>> = BTreeMap::new();
    for p in pairs {
        if p.scene_id != scene.scene_id {
            return Err(Error::invalid(format!(
                "pair from scene `{}` given for scene `{}`",
                p.scene_id, scene.scene_id
            )));
        }
        p.validate(scene.len())?;
        let key = match mixing {
            CaptionMixing::Data => None,
            CaptionMixing::LossLevel => Some(p.source),
        };
        grouped.entry(key).or_default().push(p.clone());
    }
    let groups = grouped
        .values()
        .map(|ps| {
            let bank = build_caption_bank(ps, provider)?;
            let regions = ps
                .iter()
                .zip(&bank.target_index)
                .map(|(p, &t)| RegionTarget {
                    points: p.point_indices.iter().map(|&i| i as usize).collect(),
                    target: t,
                })
                .collect();
            Ok(CaptionGroup {
                captions: bank.embeddings,
                regions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base_labels = scene
        .labels
        .iter()
        .map(|&l| match base.iter().position(|&b| b == l as usize) {
            Some(k) if l != IGNORE => k as u16,
            _ => IGNORE,
        })
        .collect();
    Ok(TrainScene {
        scene_id: scene.scene_id.clone(),
        inputs: point_inputs(scene, context_voxel),
        groups,
        base_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_caption: f64,
    pub loss_sup: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_total,loss_caption,loss_sup\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss_total, r.loss_caption, r.loss_sup);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

struct SceneStep {
    caption: f64,
    sup: f64,
    grad: Vec<f64>,
}

fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9).wrapping_add(step as u64 + 1));
    rng
}

/// Restricts the scene to `keep` (sorted point indices) and renumbers regions.
fn subsample(ts: &TrainScene, keep: &[usize]) -> (Array2<f64>, Vec<CaptionGroup>, Vec<u16>) {
    let mut remap = vec![usize::MAX; ts.inputs.nrows()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let groups = ts
        .groups
        .iter()
        .map(|g| CaptionGroup {
            captions: g.captions.clone(),
            regions: g
                .regions
                .iter()
                .filter_map(|r| {
                    let points: Vec<usize> = r.points.iter().map(|&p| remap[p]).filter(|&p| p != usize::MAX).collect();
                    (!points.is_empty()).then_some(RegionTarget {
                        points,
                        target: r.target,
                    })
                })
                .collect(),
        })
        .collect();
    let labels = keep.iter().map(|&i| ts.base_labels[i]).collect();
    (ts.inputs.select(Axis(0), keep), groups, labels)
}

fn scene_step(
    params: &ModelParams,
    ts: &TrainScene,
    cfg: &TrainConfig,
    base_embeddings: &Array2<f64>,
    step: usize,
    scene_index: usize,
) -> Result<SceneStep> {
    let n = ts.inputs.nrows();
    let (inputs, groups, labels) = if cfg.points_per_scene > 0 && cfg.points_per_scene < n {
        let mut rng = step_rng(cfg.seed, step, scene_index as u64 + 1);
        let mut keep = index::sample(&mut rng, n, cfg.points_per_scene).into_vec();
        keep.sort_unstable();
        subsample(ts, &keep)
    } else {
        (ts.inputs.clone(), ts.groups.clone(), ts.base_labels.clone())
    };
    let act = params.forward(inputs);
    let features = &act.output;
    let mut grad = Array2::<f64>::zeros(features.dim());
    let mut caption = 0.0;
    for g in groups.iter().filter(|g| !g.regions.is_empty()) {
        let inst = LossInstance {
            point_features: features.clone(),
            captions: g.captions.clone(),
            regions: g.regions.clone(),
        };
        let r = caption_loss(cfg.loss_kind, &inst, params.logit_scale)?;
        caption += r.value;
        grad += &r.grad_points;
    }
    let mut sup = 0.0;
    if cfg.supervised_weight > 0.0 && base_embeddings.nrows() > 0 {
        let r = supervised_ce_loss(features, base_embeddings, &labels, params.logit_scale)?;
        sup = r.value;
        grad.scaled_add(cfg.supervised_weight, &r.grad_points);
    }
    Ok(SceneStep {
        caption,
        sup,
        grad: params.backward(&act, &grad).flat(),
    })
}

/// Trains from `init` (or a fresh seeded model) and returns the final
/// parameters with the per-step log. Gradients of the scenes in a batch are
/// computed under `exec` and summed in batch order.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[TrainScene],
    base_embeddings: &Array2<f64>,
    embed_dim: usize,
    exec: Exec,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if !scenes.iter().any(|s| s.groups.iter().any(|g| !g.regions.is_empty())) {
        return Err(Error::invalid("training needs at least one scene with a caption pair"));
    }
    if base_embeddings.nrows() > 0 && base_embeddings.ncols() != embed_dim {
        return Err(Error::invalid("base class embeddings do not match the embedding dimension"));
    }
    let mut params = ModelParams::init(&cfg.model, embed_dim, cfg.seed)?;
    let mut flat = params.flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.adam_betas, flat.len());
    let batch = cfg.batch_scenes.min(scenes.len());
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step, 0);
        let mut picked = index::sample(&mut rng, scenes.len(), batch).into_vec();
        picked.sort_unstable();
        let results = exec.try_map(&picked, |&i| scene_step(&params, &scenes[i], cfg, base_embeddings, step, i))?;
        let inv = 1.0 / batch as f64;
        let mut grad = vec![0.0; flat.len()];
        let (mut caption, mut sup) = (0.0, 0.0);
        for r in &results {
            caption += inv * r.caption;
            sup += inv * r.sup;
            for (g, v) in grad.iter_mut().zip(&r.grad) {
                *g += inv * v;
            }
        }
        let total = caption + cfg.supervised_weight * sup;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: total });
        }
        log.rows.push(LogRow {
            step,
            loss_total: total,
            loss_caption: caption,
            loss_sup: sup,
        });
        opt.step(&mut flat, &grad);
        params.set_flat(&flat);
    }
    Ok((params, log))
}
