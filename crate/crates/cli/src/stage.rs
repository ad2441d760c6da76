//! On-disk layout shared by the pipeline stages.

use std::path::{Path, PathBuf};

use coherentflow::flo::{read_flo, write_flo};
use coherentflow::pgm::{read_pgm16, write_pgm16};
use coherentflow::segmentation::CoherentMotion;
use coherentflow::semantic::{SemanticRegionMap, BACKGROUND};
use coherentflow::synth::GroundTruth;
use coherentflow::{FlowSequence, GridDims, MotionField};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DETECTIONS: &str = "detections.json";
pub const SEMANTIC_PGM: &str = "semantic.pgm";
pub const TRUTH: &str = "truth.json";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.flo")
}

fn missing(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("cannot read {}: {e}", path.display()))
}

pub fn read_input_flo(path: &Path) -> CliResult<MotionField> {
    read_flo(path).map_err(|e| match e {
        coherentflow::Error::Io(io) => missing(path, io),
        other => other.into(),
    })
}

pub fn read_input_pgm(path: &Path) -> CliResult<(GridDims, Vec<u32>)> {
    read_pgm16(path).map_err(|e| match e {
        coherentflow::Error::Io(io) => missing(path, io),
        other => other.into(),
    })
}

pub fn read_input_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_field(path: &Path, f: &MotionField) -> CliResult<()> {
    write_flo(f, path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_labels(path: &Path, dims: GridDims, labels: &[u32]) -> CliResult<()> {
    write_pgm16(path, dims, labels)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// `frame_*.flo` files of a directory in name order.
pub fn read_sequence(dir: &Path) -> CliResult<FlowSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| missing(dir, e))?;
    let mut names: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("frame_") && name.ends_with(".flo")
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Validation(format!(
            "no frame_*.flo files in {}",
            dir.display()
        )));
    }
    let frames = names
        .iter()
        .map(|p| read_input_flo(p))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(FlowSequence::new(frames, 25.0)?)
}

pub fn read_truth(dir: &Path) -> CliResult<Option<GroundTruth>> {
    let p = dir.join(TRUTH);
    if !p.exists() {
        return Ok(None);
    }
    read_input_json(&p).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeta {
    pub id: usize,
    pub area: usize,
    /// `[min_x, min_y, max_x, max_y]`, inclusive.
    pub bbox: [usize; 4],
    pub mean_energy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TefEntry {
    pub start_frame: usize,
    pub tef: String,
    pub labels: String,
    pub regions: Vec<RegionMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// How detected regions are paired with true ones for PER.
    pub correspondence: String,
    pub per: Vec<f64>,
    pub mean_per: f64,
    pub cne: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema_version: u32,
    pub command: String,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub tefs: Vec<TefEntry>,
    pub evaluation: Option<Evaluation>,
}

pub struct Detections {
    pub report: DetectionReport,
    pub dims: GridDims,
    pub motions: Vec<Vec<CoherentMotion>>,
}

/// Reloads the coherent motions written by `detect`.
pub fn load_detections(dir: &Path) -> CliResult<Detections> {
    let report: DetectionReport = read_input_json(&dir.join(DETECTIONS))?;
    let dims = GridDims::new(report.width, report.height)?;
    let mut motions = Vec::with_capacity(report.tefs.len());
    for entry in &report.tefs {
        let tef = read_input_flo(&dir.join(&entry.tef))?;
        let (ldims, labels) = read_input_pgm(&dir.join(&entry.labels))?;
        if tef.dims() != dims || ldims != dims {
            return Err(CliError::Validation(format!(
                "{} does not match the report dims",
                entry.tef
            )));
        }
        let mut members = vec![Vec::new(); entry.regions.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let slot = members.get_mut(l as usize - 1).ok_or_else(|| {
                CliError::Validation(format!("{}: label {l} not in report", entry.labels))
            })?;
            slot.push(i);
        }
        motions.push(
            members
                .into_iter()
                .enumerate()
                .map(|(id, px)| CoherentMotion::from_mask(id, entry.start_frame, dims, px, &tef))
                .collect(),
        );
    }
    Ok(Detections {
        report,
        dims,
        motions,
    })
}

pub fn semantic_from_labels(dims: GridDims, labels: &[u32]) -> SemanticRegionMap {
    let count = labels.iter().copied().max().unwrap_or(0) as usize;
    let labels = labels
        .iter()
        .map(|&l| if l == 0 { BACKGROUND } else { l - 1 })
        .collect();
    SemanticRegionMap {
        dims,
        labels,
        count,
    }
}

pub fn load_semantic(path: &Path) -> CliResult<SemanticRegionMap> {
    let (dims, labels) = read_input_pgm(path)?;
    Ok(semantic_from_labels(dims, &labels))
}
