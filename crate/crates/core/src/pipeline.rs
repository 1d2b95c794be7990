//! End-to-end experiment runner: scene generation, caption simulation,
//! association, fusion, embedding, training and evaluation, each stage
//! reading and writing its files under one work directory.
//!
//! Work directory layout:
//!
//! ```text
//! scenes/<scene>.plcs                 point scenes (train_NNN, eval_NNN)
//! regions/<source>/<scene>.jsonl      simulated regions with view ids
//! pairs/<source>/<scene>.jsonl        associated region-language pairs
//! fused/<scene>.jsonl                 fused training pairs
//! fused/<scene>.report.json           fusion report
//! embeddings.plce                     embeddings of every caption and prompt
//! model.plcw, train_log.csv           trained parameters and loss log
//! metrics.json, metrics.txt           evaluation report
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, confusion_matrix, infer_scores, predict_labels, MetricReport, PartitionSpec};
use crate::exec::Exec;
use crate::fusion::{sfusion, union_pairs, FusionConfig, FusionReport};
use crate::geom::io::{read_pairs, read_regions, read_scene, write_pairs, write_regions, write_scene, RegionRecord};
use crate::geom::{associate_regions_with, RegionLanguagePair, SourceTag, DEFAULT_MIN_POINTS, IGNORE};
use crate::lang::{normalize_text, read_embedding_table, write_embedding_table, CategorySpec, EmbeddingProvider};
use crate::learn::model::{read_checkpoint, write_checkpoint};
use crate::learn::train::{prepare_scene, train, TrainConfig};
use crate::learn::{encode_points, LossKind};
use crate::synth::{default_categories, generate_scene, simulate_source, CaptionStyle, Role, SceneConfig, SourceProfile};

pub const WORKDIR_ENV: &str = "PLC_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub profile: SourceProfile,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Sfusion,
    /// Concatenate every source.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    pub mode: FusionMode,
    pub primary: SourceTag,
    #[serde(flatten)]
    pub config: FusionConfig,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            mode: FusionMode::Sfusion,
            primary: SourceTag::KosLike,
            config: FusionConfig {
                candidate_order: vec![SourceTag::DetT, SourceTag::Sw],
                ..FusionConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingSpec {
    SyntheticHash { dim: usize, seed: u64 },
    FileTable { path: PathBuf },
}

impl EmbeddingSpec {
    pub fn provider(&self) -> Result<EmbeddingProvider> {
        match self {
            EmbeddingSpec::SyntheticHash { dim, seed } => EmbeddingProvider::synthetic(*dim, *seed),
            EmbeddingSpec::FileTable { path } => read_embedding_table(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationSection {
    pub min_points: usize,
    pub z_tolerance: f64,
}

impl Default for AssociationSection {
    fn default() -> Self {
        Self {
            min_points: DEFAULT_MIN_POINTS,
            z_tolerance: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_scenes: 10,
            eval_scenes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub workdir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub split: SplitSection,
    pub sources: Vec<SourceSpec>,
    pub association: AssociationSection,
    pub fusion: FusionSection,
    pub embeddings: EmbeddingSpec,
    pub train: TrainConfig,
    pub eval: PartitionSpec,
    pub paths: PathsSection,
}

fn names(pick: impl Fn(&crate::synth::SceneCategory) -> bool) -> Vec<String> {
    default_categories()
        .iter()
        .filter(|c| pick(c))
        .map(|c| c.name().to_string())
        .collect()
}

impl Default for PipelineConfig {
    /// The committed synthetic benchmark: a salient-only dense-caption source
    /// as primary, a vocabulary-limited detector and a sliding-window
    /// captioner as candidates.
    fn default() -> Self {
        let objects = names(|c| c.role == Role::Object);
        let kos = SourceProfile {
            salient_only: true,
            min_pixel_area: 400.0,
            label_noise: 0.05,
            box_jitter: 0.05,
            ..SourceProfile::new(SourceTag::KosLike, objects.clone(), CaptionStyle::Phrase)
        };
        let det = SourceProfile {
            label_noise: 0.05,
            misname: [("sofa", "chair"), ("bookshelf", "cabinet")]
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .into(),
            ..SourceProfile::new(
                SourceTag::DetT,
                ["table", "cabinet", "chair", "lamp", "bin", "globe"].map(String::from).to_vec(),
                CaptionStyle::Template,
            )
        };
        let sw = SourceProfile {
            label_noise: 0.1,
            ..SourceProfile::new(SourceTag::Sw, names(|_| true), CaptionStyle::Phrase)
        };
        let cats = default_categories();
        let idx = |n: &str| cats.iter().position(|c| c.name() == n).expect("default category");
        Self {
            scene: SceneConfig::default(),
            split: SplitSection::default(),
            sources: vec![
                SourceSpec { profile: kos, seed: 1 },
                SourceSpec { profile: det, seed: 2 },
                SourceSpec { profile: sw, seed: 3 },
            ],
            association: AssociationSection::default(),
            fusion: FusionSection::default(),
            embeddings: EmbeddingSpec::SyntheticHash { dim: 32, seed: 7 },
            train: TrainConfig {
                steps: 1000,
                batch_scenes: 2,
                points_per_scene: 768,
                ..TrainConfig::default()
            },
            eval: PartitionSpec {
                categories: cats.iter().map(|c| c.name().to_string()).collect(),
                base: ["wall", "floor", "ceiling", "table", "cabinet", "chair", "lamp"].map(idx).to_vec(),
                novel: ["sofa", "bookshelf", "bin", "globe"].map(idx).to_vec(),
                foreground_excluded: ["wall", "floor", "ceiling"].map(idx).to_vec(),
            },
            paths: PathsSection::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["clip-sfusion", "pdc-sfusion", "rpdc-sfusion", "rpdc-union"];

/// Benchmark config with the preset's loss and fusion mode.
pub fn preset(name: &str) -> Result<PipelineConfig> {
    let (loss, mode) = match name {
        "clip-sfusion" => (LossKind::ClipStyle, FusionMode::Sfusion),
        "pdc-sfusion" => (LossKind::Pdc, FusionMode::Sfusion),
        "rpdc-sfusion" => (LossKind::Rpdc, FusionMode::Sfusion),
        "rpdc-union" => (LossKind::Rpdc, FusionMode::Union),
        _ => return Err(Error::config(format!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")))),
    };
    let mut cfg = PipelineConfig::default();
    cfg.train.loss_kind = loss;
    cfg.fusion.mode = mode;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Reseeds every random component except the embedding provider.
    pub fn override_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        for (i, s) in self.sources.iter_mut().enumerate() {
            s.seed = seed.wrapping_mul(31).wrapping_add(i as u64 + 1);
        }
        self.fusion.config.seed = seed;
        self.train.seed = seed;
    }

    /// Applies `PLC_WORKDIR` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(WORKDIR_ENV) {
            self.paths.workdir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.split.train_scenes == 0 || self.split.eval_scenes == 0 {
            return Err(Error::config("split needs at least one train and one eval scene"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sources {
            s.profile.validate()?;
            if !seen.insert(s.profile.kind) {
                return Err(Error::config(format!("source {} listed twice", s.profile.kind)));
            }
        }
        if !seen.contains(&self.fusion.primary) {
            return Err(Error::config(format!("fusion.primary {} is not a configured source", self.fusion.primary)));
        }
        self.fusion.config.validate()?;
        for s in &seen {
            if *s != self.fusion.primary && !self.fusion.config.candidate_order.contains(s) {
                return Err(Error::config(format!("fusion.candidate_order does not list source {s}")));
            }
        }
        if self.association.min_points == 0 || !(self.association.z_tolerance > 0.0) {
            return Err(Error::config("association needs min_points >= 1 and z_tolerance > 0"));
        }
        self.train.validate()?;
        self.eval.validate()?;
        let scene_names: Vec<&str> = self.scene.categories.iter().map(|c| c.name()).collect();
        if self.eval.categories.iter().map(String::as_str).ne(scene_names.iter().copied()) {
            return Err(Error::config("eval.categories must list the scene categories in order"));
        }
        Ok(())
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.paths.workdir.join(sub)
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.train_ids().into_iter().chain(self.eval_ids()).collect()
    }

    pub fn train_ids(&self) -> Vec<String> {
        (0..self.split.train_scenes).map(|i| format!("train_{i:03}")).collect()
    }

    pub fn eval_ids(&self) -> Vec<String> {
        (0..self.split.eval_scenes).map(|i| format!("eval_{i:03}")).collect()
    }

    fn scene_path(&self, id: &str) -> PathBuf {
        self.dir("scenes").join(format!("{id}.plcs"))
    }

    fn category_specs(&self) -> Vec<CategorySpec> {
        self.scene.categories.iter().map(|c| c.spec.clone()).collect()
    }
}

fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Generates every train and eval scene.
pub fn stage_gen(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    cfg.validate()?;
    ensure_dir(&cfg.dir("scenes"))?;
    let ids = cfg.scene_ids();
    let counts = exec.try_map_range(ids.len(), |i| {
        let sc = SceneConfig {
            seed: scene_seed(cfg.scene.seed, i),
            ..cfg.scene.clone()
        };
        let scene = generate_scene(&sc, &ids[i])?;
        write_scene(&cfg.scene_path(&ids[i]), &scene)?;
        Ok::<_, Error>(scene.len())
    })?;
    Ok(json!({"stage": "gen", "scenes": ids.len(), "points": counts.iter().sum::<usize>()}))
}

/// Simulates every caption source on the training scenes.
pub fn stage_caption(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    cfg.validate()?;
    let ids = cfg.train_ids();
    let mut per_source = BTreeMap::new();
    for src in &cfg.sources {
        let dir = cfg.dir("regions").join(src.profile.kind.as_str());
        ensure_dir(&dir)?;
        let counts = exec.try_map_range(ids.len(), |i| {
            let scene = read_scene(&cfg.scene_path(&ids[i]))?;
            let views = simulate_source(&scene, &cfg.scene.categories, &src.profile, scene_seed(src.seed, i))?;
            let records: Vec<RegionRecord> = views
                .into_iter()
                .enumerate()
                .flat_map(|(v, rs)| {
                    rs.into_iter().map(move |region| RegionRecord {
                        region,
                        view_id: v as u32,
                    })
                })
                .collect();
            write_regions(&dir.join(format!("{}.jsonl", ids[i])), &records)?;
            Ok::<_, Error>(records.len())
        })?;
        per_source.insert(src.profile.kind.as_str(), counts.iter().sum::<usize>());
    }
    Ok(json!({"stage": "caption", "regions": per_source}))
}

/// Lifts every region file to region-language pairs.
pub fn stage_associate(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    cfg.validate()?;
    let ids = cfg.train_ids();
    let mut per_source = BTreeMap::new();
    for src in &cfg.sources {
        let tag = src.profile.kind.as_str();
        let out_dir = cfg.dir("pairs").join(tag);
        ensure_dir(&out_dir)?;
        let mut kept = 0;
        let mut dropped = 0;
        for id in &ids {
            let scene = read_scene(&cfg.scene_path(id))?;
            let records = read_regions(&cfg.dir("regions").join(tag).join(format!("{id}.jsonl")))?;
            let mut by_view: BTreeMap<u32, Vec<_>> = BTreeMap::new();
            for r in records {
                by_view.entry(r.view_id).or_default().push(r.region);
            }
            let mut pairs = Vec::new();
            for (view, regions) in by_view {
                let a = associate_regions_with(
                    exec,
                    &scene,
                    view as usize,
                    &regions,
                    cfg.association.min_points,
                    cfg.association.z_tolerance,
                )?;
                dropped += a.dropped;
                pairs.extend(a.pairs);
            }
            kept += pairs.len();
            write_pairs(&out_dir.join(format!("{id}.jsonl")), &pairs)?;
        }
        per_source.insert(tag, json!({"pairs": kept, "dropped": dropped}));
    }
    Ok(json!({"stage": "associate", "sources": per_source}))
}

type SourcePairs = (Vec<RegionLanguagePair>, BTreeMap<SourceTag, Vec<RegionLanguagePair>>);

fn load_source_pairs(cfg: &PipelineConfig, id: &str) -> Result<SourcePairs> {
    let mut primary = Vec::new();
    let mut candidates = BTreeMap::new();
    for src in &cfg.sources {
        let tag = src.profile.kind;
        let pairs = read_pairs(&cfg.dir("pairs").join(tag.as_str()).join(format!("{id}.jsonl")))?;
        if tag == cfg.fusion.primary {
            primary = pairs;
        } else {
            candidates.insert(tag, pairs);
        }
    }
    Ok((primary, candidates))
}

/// Fuses the per-source pairs of every training scene.
pub fn stage_fuse(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    cfg.validate()?;
    let ids = cfg.train_ids();
    ensure_dir(&cfg.dir("fused"))?;
    let reports = exec.try_map_range(ids.len(), |i| {
        let id = &ids[i];
        let (primary, candidates) = load_source_pairs(cfg, id)?;
        let (fused, report) = match cfg.fusion.mode {
            FusionMode::Sfusion => {
                let fc = FusionConfig {
                    seed: scene_seed(cfg.fusion.config.seed, i),
                    ..cfg.fusion.config.clone()
                };
                sfusion(&primary, &candidates, &fc)?
            }
            FusionMode::Union => {
                let fused = union_pairs(&primary, &candidates, &cfg.fusion.config.candidate_order);
                let report = FusionReport {
                    kept_primary: primary.len(),
                    kept_per_source: candidates.iter().map(|(k, v)| (*k, v.len())).collect(),
                    dropped_overlap: 0,
                    dropped_ratio: 0,
                    achieved_primary_ratio: if fused.is_empty() {
                        1.0
                    } else {
                        primary.len() as f64 / fused.len() as f64
                    },
                };
                (fused, report)
            }
        };
        write_pairs(&cfg.dir("fused").join(format!("{id}.jsonl")), &fused)?;
        fs::write(
            cfg.dir("fused").join(format!("{id}.report.json")),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        Ok::<_, Error>(report)
    })?;
    let total = |f: fn(&FusionReport) -> usize| reports.iter().map(f).sum::<usize>();
    Ok(json!({
        "stage": "fuse",
        "mode": cfg.fusion.mode,
        "kept_primary": total(|r| r.kept_primary),
        "kept_candidates": total(|r| r.kept_per_source.values().sum()),
        "dropped_overlap": total(|r| r.dropped_overlap),
        "dropped_ratio": total(|r| r.dropped_ratio),
    }))
}

/// Embeds every fused caption and every category prompt into one table.
pub fn stage_embed(cfg: &PipelineConfig, _exec: Exec) -> Result<Value> {
    cfg.validate()?;
    let provider = cfg.embeddings.provider()?;
    let mut texts = BTreeSet::new();
    for id in cfg.train_ids() {
        for p in read_pairs(&cfg.dir("fused").join(format!("{id}.jsonl")))? {
            texts.insert(normalize_text(&p.caption));
        }
    }
    for spec in cfg.category_specs() {
        for prompt in spec.with_defaults().prompts() {
            texts.insert(normalize_text(&prompt));
        }
    }
    let entries = texts
        .into_iter()
        .map(|t| provider.embed_text(&t).map(|v| (t, v)))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&cfg.paths.workdir)?;
    write_embedding_table(&cfg.dir("embeddings.plce"), provider.dim(), &entries)?;
    Ok(json!({"stage": "embed", "texts": entries.len(), "dim": provider.dim()}))
}

fn class_embeddings(provider: &EmbeddingProvider, specs: &[CategorySpec], pick: &[usize]) -> Result<Array2<f64>> {
    let chosen: Vec<CategorySpec> = pick.iter().map(|&i| specs[i].clone().with_defaults()).collect();
    if chosen.is_empty() {
        return Ok(Array2::zeros((0, provider.dim())));
    }
    provider.embed_categories(&chosen)
}

/// Trains on the fused pairs of the training scenes.
pub fn stage_train(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    cfg.validate()?;
    let provider = read_embedding_table(&cfg.dir("embeddings.plce"))?;
    let specs = cfg.category_specs();
    let base = class_embeddings(&provider, &specs, &cfg.eval.base)?;
    let ids = cfg.train_ids();
    let scenes = exec.try_map_range(ids.len(), |i| {
        let scene = read_scene(&cfg.scene_path(&ids[i]))?;
        let pairs = read_pairs(&cfg.dir("fused").join(format!("{}.jsonl", ids[i])))?;
        prepare_scene(
            &scene,
            &pairs,
            &provider,
            cfg.train.caption_mixing,
            &cfg.eval.base,
            cfg.train.model.context_voxel,
        )
    })?;
    let (params, log) = train(&cfg.train, &scenes, &base, provider.dim(), exec)?;
    write_checkpoint(&cfg.dir("model.plcw"), &params)?;
    log.write_csv(&cfg.dir("train_log.csv"))?;
    let first = log.rows.first().map(|r| r.loss_total);
    let last = log.rows.last().map(|r| r.loss_total);
    Ok(json!({"stage": "train", "steps": log.rows.len(), "first_loss": first, "last_loss": last}))
}

/// Evaluates the trained model on the held-out scenes.
pub fn evaluate(cfg: &PipelineConfig, exec: Exec) -> Result<MetricReport> {
    cfg.validate()?;
    let provider = read_embedding_table(&cfg.dir("embeddings.plce"))?;
    let specs = cfg.category_specs();
    let all: Vec<usize> = (0..specs.len()).collect();
    let classes = class_embeddings(&provider, &specs, &all)?;
    let params = read_checkpoint(&cfg.dir("model.plcw"))?;
    let ids = cfg.eval_ids();
    let confs = exec.try_map_range(ids.len(), |i| {
        let scene = read_scene(&cfg.scene_path(&ids[i]))?;
        let features = encode_points(&params, &scene)?;
        let pred = predict_labels(&infer_scores(&features, &classes, params.logit_scale)?);
        confusion_matrix(&pred, &scene.labels, specs.len(), IGNORE)
    })?;
    let mut conf = Array2::<u64>::zeros((specs.len(), specs.len()));
    for c in &confs {
        conf += c;
    }
    compute_metrics(&conf, &cfg.eval)
}

pub fn stage_eval(cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    let report = evaluate(cfg, exec)?;
    fs::write(cfg.dir("metrics.json"), report.to_json() + "\n")?;
    fs::write(cfg.dir("metrics.txt"), report.to_table(&cfg.eval.categories))?;
    Ok(json!({"stage": "eval", "metrics": report}))
}

pub type Stage = fn(&PipelineConfig, Exec) -> Result<Value>;

pub const STAGES: [(&str, Stage); 7] = [
    ("gen", stage_gen),
    ("caption", stage_caption),
    ("associate", stage_associate),
    ("fuse", stage_fuse),
    ("embed", stage_embed),
    ("train", stage_train),
    ("eval", stage_eval),
];

/// Runs every stage in order; `progress` receives each stage summary.
pub fn run_pipeline(cfg: &PipelineConfig, exec: Exec, mut progress: impl FnMut(&Value)) -> Result<MetricReport> {
    cfg.validate()?;
    for (_, stage) in STAGES {
        progress(&stage(cfg, exec)?);
    }
    let text = fs::read_to_string(cfg.dir("metrics.json"))?;
    Ok(serde_json::from_str(&text)?)
}
