use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coherentflow::diffusion::coarse_to_fine;
use coherentflow::metrics::{cluster_purities, cne, matched_accuracy, per, rand_index};
use coherentflow::mining::{build_groups, cluster_frames, FlowCurve};
use coherentflow::recognition::{extract_feature, predict, train, LinearModel};
use coherentflow::segmentation::{label_map, segment_frame, SegmentationConfig};
use coherentflow::semantic::{build_semantic_regions, cluster_coherent_motions, SemanticRegionMap};
use coherentflow::synth::{generate, scenes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stage_seed, PipelineConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::stage::*;

pub struct Dirs {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Dirs {
    fn input(&self) -> CliResult<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Validation("an input directory is required (--in)".into()))
    }

    /// Output directory; stages after `synth` default to writing next to
    /// their input.
    fn output(&self, default_to_input: bool) -> CliResult<PathBuf> {
        match (&self.output, &self.input) {
            (Some(o), _) => Ok(o.clone()),
            (None, Some(i)) if default_to_input => Ok(i.clone()),
            _ => Err(CliError::Validation(
                "an output directory is required (--out)".into(),
            )),
        }
    }
}

#[derive(Serialize)]
struct SynthReport {
    schema_version: u32,
    command: &'static str,
    scene: Option<SceneSummary>,
    clips: Option<ClipSummary>,
}

#[derive(Serialize)]
struct SceneSummary {
    width: usize,
    height: usize,
    num_frames: usize,
    phases: Vec<usize>,
    semantic_count: usize,
}

#[derive(Serialize)]
struct ClipSummary {
    classes: usize,
    train: usize,
    test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub dir: String,
    pub label: usize,
}

pub fn synth(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    if cfg.scene.is_none() && cfg.clips.is_none() {
        return Err(CliError::Validation(
            "synth needs a `scene` or `clips` section".into(),
        ));
    }
    let out = dirs.output(false)?;
    ensure_dir(&out)?;
    let mut report = SynthReport {
        schema_version: SCHEMA_VERSION,
        command: "synth",
        scene: None,
        clips: None,
    };
    if let Some(spec) = &cfg.scene {
        let (seq, truth) = generate(spec)?;
        for (i, f) in seq.frames().iter().enumerate() {
            write_field(&out.join(frame_name(i)), f)?;
        }
        write_json(&out.join(TRUTH), &truth)?;
        write_json(&out.join("scene.json"), spec)?;
        write_labels(
            &out.join("truth_semantic.pgm"),
            truth.dims(),
            &truth.semantic,
        )?;
        report.scene = Some(SceneSummary {
            width: truth.width,
            height: truth.height,
            num_frames: seq.len(),
            phases: truth.phases.clone(),
            semantic_count: truth.semantic_count,
        });
    }
    if let Some(clips) = &cfg.clips {
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "clips"));
        let dir = out.join("clips");
        for (split, n) in [("train", clips.train), ("test", clips.test)] {
            let mut manifest = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % scenes::ACTIVITY_PHASES.len();
                let spec =
                    scenes::activity_clip(class, clips.num_frames, clips.noise_sigma, rng.gen());
                let (seq, _) = generate(&spec)?;
                let rel = format!("{split}/c{i:04}");
                ensure_dir(&dir.join(&rel))?;
                for (k, f) in seq.frames().iter().enumerate() {
                    write_field(&dir.join(&rel).join(frame_name(k)), f)?;
                }
                manifest.push(ClipEntry {
                    dir: rel,
                    label: class,
                });
            }
            write_json(&dir.join(format!("{split}.json")), &manifest)?;
        }
        report.clips = Some(ClipSummary {
            classes: scenes::ACTIVITY_PHASES.len(),
            train: clips.train,
            test: clips.test,
        });
    }
    write_json(&out.join("synth.json"), &report)
}

fn tef_starts(cfg: &PipelineConfig, num_frames: usize) -> CliResult<Vec<usize>> {
    let t_max = cfg.diffusion.t_max;
    if num_frames < t_max {
        return Err(CliError::Validation(format!(
            "{num_frames} frames are fewer than T_max = {t_max}"
        )));
    }
    let starts = match &cfg.detect.tef_starts {
        Some(s) => s.clone(),
        None => {
            let stride = cfg.detect.tef_stride.unwrap_or(t_max.max(1));
            (0..=num_frames - t_max).step_by(stride).collect()
        }
    };
    if let Some(bad) = starts.iter().find(|&&s| s + t_max > num_frames) {
        return Err(CliError::Validation(format!(
            "TEF start {bad} leaves fewer than T_max frames"
        )));
    }
    if starts.is_empty() {
        return Err(CliError::Validation("no TEF start frames".into()));
    }
    Ok(starts)
}

pub fn detect(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    let input = dirs.input()?;
    let out = dirs.output(true)?;
    let seq = read_sequence(input)?;
    let starts = tef_starts(cfg, seq.len())?;
    let truth = read_truth(input)?;
    ensure_dir(&out)?;
    let seed = stage_seed(cfg.seed, "detect");

    let results = starts
        .par_iter()
        .enumerate()
        .map(|(n, &start)| {
            let tef = coarse_to_fine(&seq, start, &cfg.diffusion)?;
            let seg = SegmentationConfig {
                rng_seed: seed.wrapping_add(n as u64),
                ..cfg.segmentation.clone()
            };
            let regions = segment_frame(&tef, &seg, start)?;
            Ok((tef, regions))
        })
        .collect::<coherentflow::Result<Vec<_>>>()?;

    let dims = seq.dims();
    let mut entries = Vec::with_capacity(starts.len());
    let mut pers = Vec::new();
    let (mut counts, mut true_counts) = (Vec::new(), Vec::new());
    for (&start, (tef, regions)) in starts.iter().zip(&results) {
        let tef_name = format!("tef_{start:04}.flo");
        let label_name = format!("regions_{start:04}.pgm");
        let labels = label_map(dims, regions);
        write_field(&out.join(&tef_name), tef)?;
        write_labels(&out.join(&label_name), dims, &labels)?;
        entries.push(TefEntry {
            start_frame: start,
            tef: tef_name,
            labels: label_name,
            regions: regions
                .iter()
                .map(|r| {
                    let (a, b, c, d) = r.bounding_box();
                    let m = r.mean_energy();
                    RegionMeta {
                        id: r.id,
                        area: r.area(),
                        bbox: [a, b, c, d],
                        mean_energy: [m.x, m.y],
                    }
                })
                .collect(),
        });
        if let Some(t) = &truth {
            if t.dims() != dims {
                return Err(CliError::Validation(
                    "truth.json dims differ from the flow files".into(),
                ));
            }
            pers.push(per(&labels, &t.frame_regions[start])?);
            counts.push(regions.len());
            true_counts.push(t.frame_region_ids[start].len());
        }
    }
    let evaluation = match &truth {
        Some(t) => {
            if input != out {
                write_json(&out.join(TRUTH), t)?;
            }
            Some(Evaluation {
                correspondence: "maximum-overlap one-to-one matching of detected and true labels, background included".into(),
                mean_per: pers.iter().sum::<f64>() / pers.len() as f64,
                per: pers,
                cne: cne(&counts, &true_counts)?,
            })
        }
        None => None,
    };
    let report = DetectionReport {
        schema_version: SCHEMA_VERSION,
        command: "detect".into(),
        width: dims.width,
        height: dims.height,
        num_frames: seq.len(),
        tefs: entries,
        evaluation,
    };
    write_json(&out.join(DETECTIONS), &report)
}

#[derive(Serialize)]
struct RegionSummary {
    id: usize,
    area: usize,
    centroid: [f64; 2],
}

#[derive(Serialize)]
struct RegionsReport {
    schema_version: u32,
    command: &'static str,
    count: usize,
    regions: Vec<RegionSummary>,
    step1_k: usize,
    /// Step-1 cluster of every coherent motion, per TEF.
    step1_labels: Vec<Vec<usize>>,
    rand_index: Option<f64>,
}

fn region_summaries(map: &SemanticRegionMap) -> Vec<RegionSummary> {
    (0..map.count)
        .map(|k| {
            let px = map.region_pixels(k as u32);
            let mut c = [0.0, 0.0];
            for &i in &px {
                let (x, y) = map.dims.coords(i);
                c[0] += x as f64;
                c[1] += y as f64;
            }
            if !px.is_empty() {
                c[0] /= px.len() as f64;
                c[1] /= px.len() as f64;
            }
            RegionSummary {
                id: k,
                area: px.len(),
                centroid: c,
            }
        })
        .collect()
}

pub fn regions(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    let input = dirs.input()?;
    let out = dirs.output(true)?;
    let det = load_detections(input)?;
    let flat: Vec<_> = det.motions.iter().flatten().cloned().collect();
    let seed = stage_seed(cfg.seed, "regions");
    let (map, step1_k, step1_labels) = if flat.is_empty() {
        let map = semantic_from_labels(det.dims, &vec![0; det.dims.len()]);
        (map, 0, det.motions.iter().map(|_| Vec::new()).collect())
    } else {
        let step1 = cluster_coherent_motions(&flat, &cfg.similarity, seed)?;
        let map = build_semantic_regions(&det.motions, &step1, det.dims, seed)?;
        let mut it = step1.labels.iter().copied();
        let per_tef = det
            .motions
            .iter()
            .map(|m| it.by_ref().take(m.len()).collect())
            .collect();
        (map, step1.k, per_tef)
    };
    ensure_dir(&out)?;
    write_labels(&out.join(SEMANTIC_PGM), det.dims, &map.shifted_labels())?;
    let rand = match read_truth(input)? {
        Some(t) => Some(rand_index(&map.shifted_labels(), &t.semantic)?),
        None => None,
    };
    let report = RegionsReport {
        schema_version: SCHEMA_VERSION,
        command: "regions",
        count: map.count,
        regions: region_summaries(&map),
        step1_k,
        step1_labels,
        rand_index: rand,
    };
    write_json(&out.join("regions.json"), &report)
}

#[derive(Serialize, Deserialize)]
pub struct ClusterReport {
    pub id: usize,
    /// `(TEF index, region id)` of every member.
    pub members: Vec<(usize, usize)>,
    pub pattern: String,
    pub curve: Option<FlowCurve>,
}

#[derive(Serialize, Deserialize)]
pub struct GroupReport {
    pub id: usize,
    pub tefs: Vec<usize>,
    pub start_frames: Vec<usize>,
    pub clusters: Vec<ClusterReport>,
}

#[derive(Serialize, Deserialize)]
pub struct MiningReport {
    pub schema_version: u32,
    pub command: String,
    pub k: usize,
    pub precluster_k: usize,
    pub labels: Vec<usize>,
    pub rho: Vec<f64>,
    pub groups: Vec<GroupReport>,
    pub accuracy: Option<f64>,
    pub purity: Option<BTreeMap<u32, f64>>,
}

pub fn mine(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    let input = dirs.input()?;
    let out = dirs.output(true)?;
    let det = load_detections(input)?;
    let map = load_semantic(&input.join(SEMANTIC_PGM))?;
    if map.dims != det.dims {
        return Err(CliError::Validation(
            "semantic map dims differ from the detections".into(),
        ));
    }
    let seed = stage_seed(cfg.seed, "mine");
    let fc = cluster_frames(&det.motions, &map, &cfg.similarity, &cfg.mining, seed)?;
    let groups = build_groups(
        &det.motions,
        &fc,
        det.dims,
        &cfg.similarity,
        &cfg.mining,
        seed,
    )?;
    ensure_dir(&out)?;

    let starts: Vec<usize> = det.report.tefs.iter().map(|t| t.start_frame).collect();
    let mut group_reports = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let mut clusters = Vec::with_capacity(group.clusters.len());
        for (j, members) in group.clusters.iter().enumerate() {
            let name = format!("pattern_g{g:02}_c{j:02}.flo");
            write_field(&out.join(&name), &group.patterns[j])?;
            clusters.push(ClusterReport {
                id: j,
                members: members.clone(),
                pattern: name,
                curve: group.curves[j].clone(),
            });
        }
        group_reports.push(GroupReport {
            id: g,
            tefs: group.frames.clone(),
            start_frames: group.frames.iter().map(|&f| starts[f]).collect(),
            clusters,
        });
    }
    let (accuracy, purity) = match read_truth(input)? {
        Some(t) => {
            let phases: Vec<u32> = starts.iter().map(|&s| t.phases[s] as u32).collect();
            let pred: Vec<u32> = fc.labels.iter().map(|&l| l as u32).collect();
            (
                Some(matched_accuracy(&pred, &phases)?),
                Some(cluster_purities(&pred, &phases)?),
            )
        }
        None => (None, None),
    };
    let report = MiningReport {
        schema_version: SCHEMA_VERSION,
        command: "mine".into(),
        k: fc.k,
        precluster_k: fc.preclusters.k,
        labels: fc.labels.clone(),
        rho: fc.costs.rho.clone(),
        groups: group_reports,
        accuracy,
        purity,
    };
    write_json(&out.join("mining.json"), &report)
}

#[derive(Serialize)]
struct Prediction {
    dir: String,
    label: usize,
    predicted: usize,
}

#[derive(Serialize)]
struct RecognitionReport {
    schema_version: u32,
    command: &'static str,
    classes: Vec<usize>,
    trained: bool,
    train_accuracy: Option<f64>,
    accuracy: f64,
    predictions: Vec<Prediction>,
}

fn clip_features(
    cfg: &PipelineConfig,
    dir: &Path,
    clips: &[ClipEntry],
    map: &SemanticRegionMap,
) -> CliResult<Vec<Vec<f64>>> {
    clips
        .par_iter()
        .map(|c| {
            let seq = read_sequence(&dir.join(&c.dir))?;
            let tef = coarse_to_fine(&seq, 0, &cfg.diffusion)?;
            Ok(extract_feature(&tef, map)?)
        })
        .collect()
}

fn accuracy(
    model: &LinearModel,
    xs: &[Vec<f64>],
    clips: &[ClipEntry],
) -> CliResult<(f64, Vec<usize>)> {
    let pred = xs
        .iter()
        .map(|x| predict(model, x))
        .collect::<coherentflow::Result<Vec<_>>>()?;
    let hits = pred
        .iter()
        .zip(clips)
        .filter(|(p, c)| **p == c.label)
        .count();
    Ok((hits as f64 / clips.len().max(1) as f64, pred))
}

pub fn recognize(cfg: &PipelineConfig, dirs: &Dirs) -> CliResult<()> {
    let input = dirs.input()?;
    let out = dirs.output(true)?;
    let regions_path = cfg.recognize.regions.as_ref().ok_or_else(|| {
        CliError::Validation("recognize.regions (semantic region map) is required".into())
    })?;
    let map = load_semantic(regions_path)?;
    let test: Vec<ClipEntry> = read_input_json(&input.join("test.json"))?;

    let (model, trained, train_acc) = match &cfg.recognize.model {
        Some(p) => (
            LinearModel::load(p).map_err(|e| {
                CliError::Validation(format!("cannot load model {}: {e}", p.display()))
            })?,
            false,
            None,
        ),
        None => {
            let train_set: Vec<ClipEntry> = read_input_json(&input.join("train.json"))?;
            let xs = clip_features(cfg, input, &train_set, &map)?;
            let labels: Vec<usize> = train_set.iter().map(|c| c.label).collect();
            let classifier = coherentflow::recognition::ClassifierConfig {
                seed: stage_seed(cfg.seed, "recognize"),
                ..cfg.classifier.clone()
            };
            let model = train(&xs, &labels, &classifier)?;
            let (acc, _) = accuracy(&model, &xs, &train_set)?;
            (model, true, Some(acc))
        }
    };
    let xs = clip_features(cfg, input, &test, &map)?;
    let (acc, pred) = accuracy(&model, &xs, &test)?;
    ensure_dir(&out)?;
    if trained {
        write_json(&out.join("model.json"), &model)?;
    }
    let report = RecognitionReport {
        schema_version: SCHEMA_VERSION,
        command: "recognize",
        classes: model.classes.clone(),
        trained,
        train_accuracy: train_acc,
        accuracy: acc,
        predictions: test
            .iter()
            .zip(pred)
            .map(|(c, p)| Prediction {
                dir: c.dir.clone(),
                label: c.label,
                predicted: p,
            })
            .collect(),
    };
    write_json(&out.join("recognition.json"), &report)
}
