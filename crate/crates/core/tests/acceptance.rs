//! Acceptance suite. Prints one PASS/FAIL line per criterion, then asserts
//! that every criterion outside `KNOWN_UNATTAINABLE` passed.
//!
//! Run with `cargo test -p plc-core --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use ndarray::Array2;
use plc_core::evalkit::{compute_metrics, confusion_matrix_default, PartitionSpec};
use plc_core::fusion::{max_candidates_for_ratio, sfusion, union_pairs, FusionConfig};
use plc_core::geom::{associate_regions, project_points, PointScene, Region2D, RegionLanguagePair, SourceTag, IGNORE};
use plc_core::learn::gradcheck::{check_caption_loss, finite_diff_check, random_instance};
use plc_core::learn::{
    caption_loss, clip_style_loss, pdc_loss, rpdc_loss, supervised_ce_loss, LossInstance, LossKind, RegionTarget,
};
use plc_core::pipeline::{preset, run_pipeline, PipelineConfig};
use plc_core::synth::{generate_scene, simulate_source};
use plc_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold as stated; they are still run and reported.
/// 3: the region-aware factor divides by the total point count over all
///    regions, which duplication changes, so rows rescale by the ratio of totals.
/// 5: the harmonic mean of 68.4 and 79.1 is 73.36, outside 73.3 +- 0.05.
const KNOWN_UNATTAINABLE: [u32; 2] = [3, 5];

const GRAD_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-9;
const HIOU_TOL: f64 = 0.05;
const ROUND_TRIP_TOL: f64 = 1e-5;
const LOGIT_SCALE: f64 = 10.0;
/// Central differences carry O(step^2) truncation error; at 1e-4 it reaches
/// 1e-4 relative on coordinates whose gradient is near the 1e-6 floor.
const FD_STEP: f64 = 1e-5;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Writes to the stdout handle directly so lines show without `--nocapture`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn report(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    out!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, detail }
}

fn criterion_1_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_p = rng.random_range(16..=128);
        let n_t = rng.random_range(2..=16);
        let regions = rng.random_range(n_t..=n_t + 8);
        let inst = random_instance(1000 + seed, n_p, n_t, 16, regions);
        for (name, kind) in [("clip", LossKind::ClipStyle), ("pdc", LossKind::Pdc), ("rpdc", LossKind::Rpdc)] {
            let r = check_caption_loss(Exec::Parallel, kind, &inst, LOGIT_SCALE, FD_STEP).unwrap();
            let w = worst.entry(name).or_default();
            *w = w.max(r.max_rel_error);
        }
        let labels: Vec<u16> = (0..n_p)
            .map(|_| if rng.random_bool(0.2) { IGNORE } else { rng.random_range(0..n_t) as u16 })
            .collect();
        let r = finite_diff_check(
            Exec::Parallel,
            |f| supervised_ce_loss(f, &inst.captions, &labels, LOGIT_SCALE),
            &inst.point_features,
            FD_STEP,
            seed,
        )
        .unwrap();
        let w = worst.entry("supervised").or_default();
        *w = w.max(r.max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    let per: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.2e}")).collect();
    report(
        1,
        "gradient oracle",
        max <= GRAD_TOL && secs < 30.0,
        format!("max rel error {} (tol {GRAD_TOL:.0e}, step {FD_STEP:.0e}), {secs:.1} s (limit 30 s)", per.join(", ")),
    )
}

fn uniform_instance(seed: u64, n_p: usize, n_t: usize) -> LossInstance {
    let base = random_instance(seed, n_p, 1, 16, 1);
    let caption = base.captions.row(0).to_owned();
    let captions = Array2::from_shape_fn((n_t, 16), |(_, j)| caption[j]);
    let regions = (0..n_t).map(|k| RegionTarget { points: vec![k % n_p, (k + 1) % n_p], target: k }).collect();
    LossInstance::new(base.point_features, captions, regions).unwrap()
}

fn criterion_2_identities() -> Outcome {
    let mut singleton = 0.0f64;
    let mut equal = 0.0f64;
    let mut uniform = 0.0f64;
    for seed in 0..20u64 {
        let base = random_instance(seed, 48, 8, 16, 1);
        let single: Vec<RegionTarget> = (0..48).map(|i| RegionTarget { points: vec![i], target: i % 8 }).collect();
        let inst = LossInstance::new(base.point_features.clone(), base.captions.clone(), single).unwrap();
        let a = pdc_loss(&inst, LOGIT_SCALE).unwrap().value;
        let b = clip_style_loss(&inst, LOGIT_SCALE).unwrap().value;
        singleton = singleton.max((a - b).abs());

        let blocks: Vec<RegionTarget> = (0..8).map(|k| RegionTarget { points: (k * 6..k * 6 + 6).collect(), target: 7 - k }).collect();
        let inst = LossInstance::new(base.point_features.clone(), base.captions.clone(), blocks).unwrap();
        let a = rpdc_loss(&inst, LOGIT_SCALE).unwrap().value;
        let b = pdc_loss(&inst, LOGIT_SCALE).unwrap().value;
        equal = equal.max((a - b).abs());

        let n_t = 2 + (seed as usize % 10);
        let inst = uniform_instance(seed, 24, n_t);
        for kind in [LossKind::ClipStyle, LossKind::Pdc, LossKind::Rpdc] {
            let v = caption_loss(kind, &inst, LOGIT_SCALE).unwrap().value;
            uniform = uniform.max((v - (n_t as f64).ln()).abs());
        }
    }
    let worst = singleton.max(equal).max(uniform);
    report(
        2,
        "loss identities",
        worst <= IDENTITY_TOL,
        format!(
            "|pdc - clip| singletons {singleton:.1e}, |rpdc - pdc| equal regions {equal:.1e}, |L - ln n_t| uniform {uniform:.1e} (tol {IDENTITY_TOL:.0e})"
        ),
    )
}

/// Disjoint regions of sizes 5, 10, 15, 30 over 60 points.
fn region_instance(seed: u64) -> LossInstance {
    let base = random_instance(seed, 60, 4, 16, 1);
    let mut start = 0;
    let regions = [5usize, 10, 15, 30]
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let r = RegionTarget { points: (start..start + n).collect(), target: k };
            start += n;
            r
        })
        .collect();
    LossInstance::new(base.point_features, base.captions, regions).unwrap()
}

/// Appends `k - 1` copies of every point of region `r`, all inside `r`.
fn duplicate_region(inst: &LossInstance, r: usize, k: usize) -> LossInstance {
    let n_p = inst.point_features.nrows();
    let src = inst.regions[r].points.clone();
    let extra = src.len() * (k - 1);
    let d = inst.point_features.ncols();
    let mut feats = Array2::zeros((n_p + extra, d));
    feats.slice_mut(ndarray::s![..n_p, ..]).assign(&inst.point_features);
    let mut regions = inst.regions.clone();
    for c in 0..k - 1 {
        for (j, &p) in src.iter().enumerate() {
            let row = n_p + c * src.len() + j;
            feats.row_mut(row).assign(&inst.point_features.row(p));
            regions[r].points.push(row);
        }
    }
    LossInstance::new(feats, inst.captions.clone(), regions).unwrap()
}

fn criterion_3_duplication() -> Outcome {
    let mut raw = 0.0f64;
    let mut rescaled = 0.0f64;
    for seed in 0..5u64 {
        let inst = region_instance(seed);
        let g = rpdc_loss(&inst, LOGIT_SCALE).unwrap().grad_points;
        let total: usize = inst.regions.iter().map(|r| r.points.len()).sum();
        for k in [2usize, 5, 10] {
            let dup = duplicate_region(&inst, 0, k);
            let gd = rpdc_loss(&dup, LOGIT_SCALE).unwrap().grad_points;
            let total_dup: usize = dup.regions.iter().map(|r| r.points.len()).sum();
            let ratio = total_dup as f64 / total as f64;
            for &p in &inst.regions[0].points {
                for j in 0..g.ncols() {
                    raw = raw.max((gd[(p, j)] - g[(p, j)]).abs());
                    rescaled = rescaled.max((gd[(p, j)] * ratio - g[(p, j)]).abs());
                }
            }
        }
    }
    out!(
        "INFO [3] rows rescaled by the ratio of total region points agree within {rescaled:.1e}; the per-point weight ignores the point's own region size"
    );
    report(
        3,
        "duplication leaves region gradient rows unchanged",
        raw <= IDENTITY_TOL,
        format!("max row deviation {raw:.2e} over k in {{2, 5, 10}} (tol {IDENTITY_TOL:.0e})"),
    )
}

fn micro_pair(source: SourceTag, set: BTreeSet<u32>) -> RegionLanguagePair {
    RegionLanguagePair {
        scene_id: "micro".into(),
        point_indices: set.into_iter().collect(),
        caption: format!("{source}"),
        source,
        view_id: 0,
    }
}

fn naive_iou(a: &[u32], b: &[u32]) -> f64 {
    let a: HashSet<_> = a.iter().collect();
    let b: HashSet<_> = b.iter().collect();
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

/// Brute-force sequential filter: recompute the maximum IoU of every
/// candidate against everything fused before it.
fn brute_force_accept(
    primary: &[RegionLanguagePair],
    cands: &BTreeMap<SourceTag, Vec<RegionLanguagePair>>,
    order: &[SourceTag],
    t_low: f64,
    t_high: f64,
) -> Vec<RegionLanguagePair> {
    let mut fused: Vec<RegionLanguagePair> = primary.to_vec();
    let mut accepted = Vec::new();
    for tag in order {
        for c in cands.get(tag).into_iter().flatten() {
            let mut tau = 0.0f64;
            for f in &fused {
                tau = tau.max(naive_iou(&c.point_indices, &f.point_indices));
            }
            let inside = t_low <= tau && (tau < t_high || t_high >= 1.0);
            if inside {
                fused.push(c.clone());
                accepted.push(c.clone());
            }
        }
    }
    accepted
}

/// Largest kept count `m <= accepted` with `primary / (primary + m) >= epsilon`.
fn brute_force_kept(primary: usize, accepted: usize, epsilon: f64) -> usize {
    if primary == 0 {
        return accepted;
    }
    (0..=accepted)
        .take_while(|&m| primary as f64 / (primary + m) as f64 >= epsilon)
        .last()
        .unwrap_or(0)
}

fn criterion_4_sfusion() -> Outcome {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources = rng.random_range(2..=3);
        let cand_tags = [SourceTag::DetT, SourceTag::Sw][..sources - 1].to_vec();
        let total = rng.random_range(2..=20);
        let n_primary = rng.random_range(1..total);
        let random_set = |rng: &mut ChaCha8Rng| -> BTreeSet<u32> {
            let lo = rng.random_range(0..24);
            let len = rng.random_range(1..=10);
            (lo..lo + len).filter(|_| rng.random_bool(0.85)).chain([lo]).collect()
        };
        let primary: Vec<_> = (0..n_primary).map(|_| micro_pair(SourceTag::KosLike, random_set(&mut rng))).collect();
        let mut cands: BTreeMap<SourceTag, Vec<RegionLanguagePair>> = BTreeMap::new();
        for _ in n_primary..total {
            let tag = cand_tags[rng.random_range(0..cand_tags.len())];
            let set = if rng.random_bool(0.2) {
                primary[rng.random_range(0..primary.len())].point_indices.iter().copied().collect()
            } else {
                random_set(&mut rng)
            };
            cands.entry(tag).or_default().push(micro_pair(tag, set));
        }
        let t_low = [0.0, 0.0, 0.1][seed as usize % 3];
        let t_high = [0.2, 0.5, 1.0][(seed as usize / 3) % 3];
        let epsilon = [0.72, 0.5, 1e-9][(seed as usize / 9) % 3];
        let cfg = FusionConfig {
            t_low,
            t_high,
            epsilon,
            seed,
            candidate_order: cand_tags.clone(),
            ..FusionConfig::default()
        };
        let accepted = brute_force_accept(&primary, &cands, &cand_tags, t_low, t_high);
        let kept = brute_force_kept(primary.len(), accepted.len(), epsilon);
        if kept != max_candidates_for_ratio(primary.len(), epsilon).min(accepted.len()) {
            mismatches.push(format!("seed {seed}: ratio limit"));
        }
        let (fused, _) = sfusion(&primary, &cands, &cfg).unwrap();
        let (head, tail) = fused.split_at(primary.len().min(fused.len()));
        let mut rest = accepted.iter();
        let subsequence = tail.iter().all(|p| rest.any(|a| a == p));
        if head != primary.as_slice() || tail.len() != kept || !subsequence {
            mismatches.push(format!("seed {seed}: fused set"));
        }
        let mixing = FusionConfig::data_mixing(cand_tags.clone());
        let (mixed, _) = sfusion(&primary, &cands, &mixing).unwrap();
        if mixed != union_pairs(&primary, &cands, &cand_tags) {
            mismatches.push(format!("seed {seed}: data mixing differs from union"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        4,
        "sfusion vs brute-force filter and union recovery",
        mismatches.is_empty() && secs < 10.0,
        format!("{} mismatches over 200 instances {:?}, {secs:.2} s (limit 10 s)", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>()),
    )
}

/// One base and one novel class whose IoUs are `base` and `novel` percent
/// (to within 1e-3), via a confusion matrix built from label vectors.
fn hiou_from_confusion(base: f64, novel: f64) -> f64 {
    let errors = 20_000u64;
    let tp = |iou: f64| (iou / (100.0 - iou) * errors as f64).round() as u64;
    let (a, b) = (tp(base), tp(novel));
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (g, p, n) in [(0u16, 0u16, a), (1, 1, b), (0, 1, errors / 2), (1, 0, errors / 2)] {
        gt.extend(std::iter::repeat_n(g, n as usize));
        pred.extend(std::iter::repeat_n(p, n as usize));
    }
    let conf = confusion_matrix_default(&pred, &gt, 2).unwrap();
    let partition = PartitionSpec {
        categories: vec!["base".into(), "novel".into()],
        base: vec![0],
        novel: vec![1],
        foreground_excluded: vec![],
    };
    let m = compute_metrics(&conf, &partition).unwrap();
    assert!((m.miou_base - base).abs() < 1e-3 && (m.miou_novel - novel).abs() < 1e-3);
    m.hiou
}

fn criterion_5_hiou() -> Outcome {
    let cases = [(68.4, 79.1, 73.3), (69.9, 66.6, 68.2)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (b, n, expected) in cases {
        let h = hiou_from_confusion(b, n);
        let ok = (h - expected).abs() <= HIOU_TOL;
        pass &= ok;
        parts.push(format!("({b}, {n}) -> {h:.3} vs {expected} {}", if ok { "ok" } else { "off" }));
    }
    report(5, "hIoU arithmetic", pass, format!("{} (tol {HIOU_TOL})", parts.join("; ")))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap());
    }
    out
}

fn run_preset(name: &str, seed: u64, dir: &Path) -> f64 {
    let mut cfg = preset(name).unwrap();
    cfg.override_seed(seed);
    cfg.paths.workdir = dir.to_path_buf();
    run_pipeline(&cfg, Exec::Parallel, |_| {}).unwrap().miou_novel
}

fn criterion_6_ablation(root: &Path) -> Outcome {
    let t = Instant::now();
    let seeds = 0..5u64;
    let presets = ["clip-sfusion", "rpdc-sfusion", "rpdc-union"];
    let mut novel: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut same_data = true;
    for seed in seeds.clone() {
        for p in presets {
            let dir = root.join(format!("{p}_{seed}"));
            novel.entry(p).or_default().push(run_preset(p, seed, &dir));
        }
        same_data &= read_dir_bytes(&root.join(format!("clip-sfusion_{seed}/fused")))
            == read_dir_bytes(&root.join(format!("rpdc-sfusion_{seed}/fused")));
    }
    let mean = |p: &str| novel[p].iter().sum::<f64>() / novel[p].len() as f64;
    let (clip, rpdc, union) = (mean("clip-sfusion"), mean("rpdc-sfusion"), mean("rpdc-union"));
    for p in presets {
        let per: Vec<String> = novel[p].iter().map(|v| format!("{v:.1}")).collect();
        out!("INFO [6] {p:<13} novel mIoU per seed [{}] mean {:.2}", per.join(", "), mean(p));
    }
    let secs = t.elapsed().as_secs_f64();
    let a = rpdc > clip && same_data;
    let b = rpdc > union;
    report(
        6,
        "directional ablation",
        a && b && secs < 600.0,
        format!(
            "(a) rpdc {rpdc:.2} > clip {clip:.2} on identical fused data: {}; (b) sfusion {rpdc:.2} > union {union:.2}: {}; seeds 0-4, {secs:.0} s (limit 600 s)",
            if a { "yes" } else { "no" },
            if b { "yes" } else { "no" },
        ),
    )
}

/// Independent per-point visibility and box test from the raw matrices.
fn brute_force_sets(scene: &PointScene, view_id: usize, regions: &[Region2D], z_tol: f64, min_points: usize) -> Vec<Vec<u32>> {
    let v = &scene.views[view_id];
    let m = &v.world_to_cam;
    let k = &v.intrinsics;
    let mut visible = Vec::new();
    for (i, p) in scene.points.iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let cx = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)] * z + m[(0, 3)];
        let cy = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)] * z + m[(1, 3)];
        let cz = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)] * z + m[(2, 3)];
        if cz <= 0.0 {
            continue;
        }
        let u = (k[(0, 0)] * cx + k[(0, 1)] * cy + k[(0, 2)] * cz) / cz;
        let w = (k[(1, 0)] * cx + k[(1, 1)] * cy + k[(1, 2)] * cz) / cz;
        if !(u >= 0.0 && u < v.width as f64 && w >= 0.0 && w < v.height as f64) {
            continue;
        }
        let d = v.depth[w.floor() as usize * v.width as usize + u.floor() as usize] as f64;
        if (cz - d).abs() <= z_tol {
            visible.push((i as u32, u, w));
        }
    }
    regions
        .iter()
        .map(|r| {
            let [x0, y0, x1, y1] = r.bbox;
            visible.iter().filter(|(_, u, w)| *u >= x0 && *u < x1 && *w >= y0 && *w < y1).map(|(i, _, _)| *i).collect::<Vec<u32>>()
        })
        .filter(|s| s.len() >= min_points)
        .collect()
}

fn criterion_7_geometry() -> Outcome {
    let base = PipelineConfig::default();
    let mut mismatches = 0usize;
    let mut regions_checked = 0usize;
    let mut worst_round_trip = 0.0f64;
    for seed in 0..50u64 {
        let mut scene_cfg = base.scene.clone();
        scene_cfg.seed = seed;
        scene_cfg.view_count = 3;
        let scene = generate_scene(&scene_cfg, &format!("geom_{seed}")).unwrap();
        let src = &base.sources[(seed % 3) as usize];
        let per_view = simulate_source(&scene, &base.scene.categories, &src.profile, seed).unwrap();
        for (view_id, regions) in per_view.iter().enumerate() {
            let got = associate_regions(&scene, view_id, regions, 5, 0.08).unwrap();
            let got: Vec<Vec<u32>> = got.pairs.into_iter().map(|p| p.point_indices).collect();
            let expected = brute_force_sets(&scene, view_id, regions, 0.08, 5);
            regions_checked += regions.len();
            if got != expected {
                mismatches += 1;
            }
            let view = &scene.views[view_id];
            for (i, pr) in project_points(&scene, view_id, 0.08).unwrap().iter().enumerate() {
                if !pr.visible {
                    continue;
                }
                let p = scene.points[i];
                let back = view.back_project(pr.u, pr.v, pr.cam_depth).unwrap();
                let err = (back - Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).norm();
                worst_round_trip = worst_round_trip.max(err);
            }
        }
    }
    report(
        7,
        "geometry oracle",
        mismatches == 0 && worst_round_trip < ROUND_TRIP_TOL,
        format!(
            "{mismatches} mismatched views over 50 scenes ({regions_checked} regions); round-trip error {worst_round_trip:.1e} m (tol {ROUND_TRIP_TOL:.0e})"
        ),
    )
}

fn criterion_8_determinism(root: &Path) -> Outcome {
    let first = root.join("rpdc-sfusion_0");
    let second = root.join("determinism");
    run_preset("rpdc-sfusion", 0, &second);
    let mut differing = Vec::new();
    for f in ["metrics.json", "metrics.txt", "model.plcw", "train_log.csv", "embeddings.plce"] {
        if fs::read(first.join(f)).unwrap() != fs::read(second.join(f)).unwrap() {
            differing.push(f);
        }
    }
    for sub in ["scenes", "fused"] {
        if read_dir_bytes(&first.join(sub)) != read_dir_bytes(&second.join(sub)) {
            differing.push(sub);
        }
    }
    report(
        8,
        "pipeline determinism",
        differing.is_empty(),
        format!("two runs of rpdc-sfusion seed 0; differing outputs: {differing:?}"),
    )
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let outcomes = vec![
        criterion_1_gradients(),
        criterion_2_identities(),
        criterion_3_duplication(),
        criterion_4_sfusion(),
        criterion_5_hiou(),
        criterion_6_ablation(root.path()),
        criterion_7_geometry(),
        criterion_8_determinism(root.path()),
    ];
    out!("---");
    for o in &outcomes {
        let note = if !o.pass && KNOWN_UNATTAINABLE.contains(&o.id) { " (known unattainable)" } else { "" };
        out!("{} [{}] {}{note}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name);
    }
    let unexpected: Vec<_> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_UNATTAINABLE.contains(&o.id))
        .map(|o| format!("[{}] {}: {}", o.id, o.name, o.detail))
        .collect();
    assert!(unexpected.is_empty(), "failed criteria: {unexpected:#?}");
}
