//! Pre-defined activity recognition: region-pooled TEF features and a
//! one-vs-rest linear SVM trained with Pegasos.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ThermalEnergyField;
use crate::error::{Error, Result};
use crate::semantic::{SemanticRegionMap, BACKGROUND};

pub type ActivityFeature = Vec<f64>;

/// Mean TEF vector of every semantic region, concatenated in region order.
/// Empty regions contribute (0, 0).
pub fn extract_feature(
    tef: &ThermalEnergyField,
    regions: &SemanticRegionMap,
) -> Result<ActivityFeature> {
    if tef.dims() != regions.dims {
        return Err(Error::validation("TEF and region map dims differ"));
    }
    let mut sums = vec![[0.0f64; 2]; regions.count];
    let mut counts = vec![0usize; regions.count];
    for (v, &l) in tef.vectors().iter().zip(&regions.labels) {
        if l == BACKGROUND {
            continue;
        }
        let k = l as usize;
        sums[k][0] += v.x;
        sums[k][1] += v.y;
        counts[k] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .flat_map(|(s, &c)| {
            if c == 0 {
                [0.0, 0.0]
            } else {
                [s[0] / c as f64, s[1] / c as f64]
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            reg: 1e-3,
            epochs: 200,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::validation("reg must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Class ids, ascending; row `c` of `weights` scores `classes[c]`.
    pub classes: Vec<usize>,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub feature_len: usize,
    /// Per-feature divisor applied before scoring (training RMS).
    pub scale: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        if n < 2 {
            return Err(Error::validation("model needs at least two classes"));
        }
        if self.weights.len() != n || self.bias.len() != n {
            return Err(Error::validation("weights/bias do not match class count"));
        }
        if self.scale.len() != self.feature_len
            || self.weights.iter().any(|w| w.len() != self.feature_len)
        {
            return Err(Error::validation(
                "weight length does not match feature length",
            ));
        }
        let finite = self
            .weights
            .iter()
            .flatten()
            .chain(&self.bias)
            .all(|v| v.is_finite());
        if !finite || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::validation("non-finite model parameters"));
        }
        if !self.classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("class ids must be strictly ascending"));
        }
        Ok(())
    }

    /// Raw one-vs-rest scores, in class order.
    pub fn scores(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_len {
            return Err(Error::validation(format!(
                "feature length {} does not match model length {}",
                feature.len(),
                self.feature_len
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                w.iter()
                    .zip(feature)
                    .zip(&self.scale)
                    .map(|((w, x), s)| w * x / s)
                    .sum::<f64>()
                    + b
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: LinearModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

fn feature_scale(features: &[ActivityFeature], len: usize) -> Vec<f64> {
    (0..len)
        .map(|j| {
            let ms = features.iter().map(|f| f[j] * f[j]).sum::<f64>() / features.len() as f64;
            let rms = ms.sqrt();
            if rms > 1e-300 {
                rms
            } else {
                1.0
            }
        })
        .collect()
}

/// Pegasos on one binary problem; the bias is an extra constant feature
/// and is regularized with the rest.
fn pegasos(
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &ClassifierConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let mut w = vec![0.0; d + 1];
    let radius = 1.0 / cfg.reg.sqrt();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.reg * t as f64);
            let x = &xs[i];
            let margin = ys[i] * (w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]);
            let shrink = 1.0 - eta * cfg.reg;
            for v in w.iter_mut() {
                *v *= shrink;
            }
            if margin < 1.0 {
                for (v, xi) in w[..d].iter_mut().zip(x) {
                    *v += eta * ys[i] * xi;
                }
                w[d] += eta * ys[i];
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                for v in w.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
    let b = w.pop().unwrap_or(0.0);
    (w, b)
}

/// One-vs-rest linear SVM. Deterministic for a fixed seed and input order.
pub fn train(
    features: &[ActivityFeature],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<LinearModel> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::validation("features and labels differ in length"));
    }
    if features.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    let len = features[0].len();
    if features.iter().any(|f| f.len() != len) {
        return Err(Error::validation("features differ in length"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite feature value"));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::validation("training needs at least two classes"));
    }

    let scale = feature_scale(features, len);
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&scale).map(|(x, s)| x / s).collect())
        .collect();
    let mut weights = Vec::with_capacity(classes.len());
    let mut bias = Vec::with_capacity(classes.len());
    for (c, &class) in classes.iter().enumerate() {
        let ys: Vec<f64> = labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let (w, b) = pegasos(&xs, &ys, cfg, &mut rng);
        weights.push(w);
        bias.push(b);
    }
    Ok(LinearModel {
        classes,
        class_names: Vec::new(),
        feature_len: len,
        scale,
        weights,
        bias,
    })
}

/// Highest-scoring class; ties go to the lowest class id.
pub fn predict(model: &LinearModel, feature: &[f64]) -> Result<usize> {
    let scores = model.scores(feature)?;
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    Ok(model.classes[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridDims, MotionField, Vec2};

    fn two_region_map() -> SemanticRegionMap {
        let dims = GridDims::new(4, 2).unwrap();
        let labels = vec![0, 0, 1, 1, 0, 0, 1, BACKGROUND];
        SemanticRegionMap {
            dims,
            labels,
            count: 2,
        }
    }

    #[test]
    fn uniform_tef_features() {
        let map = two_region_map();
        let tef = MotionField::constant(map.dims, Vec2::new(1.0, 0.0));
        assert_eq!(
            extract_feature(&tef, &map).unwrap(),
            vec![1.0, 0.0, 1.0, 0.0]
        );
        let zero = MotionField::zeros(map.dims);
        assert_eq!(extract_feature(&zero, &map).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn per_region_averages() {
        let map = two_region_map();
        let tef = MotionField::from_fn(map.dims, |x, _| {
            if x < 2 {
                Vec2::new(1.0, 0.0)
            } else {
                Vec2::new(0.0, -1.0)
            }
        });
        assert_eq!(
            extract_feature(&tef, &map).unwrap(),
            vec![1.0, 0.0, 0.0, -1.0]
        );
    }

    #[test]
    fn empty_region_is_zero() {
        let mut map = two_region_map();
        map.count = 3;
        let tef = MotionField::constant(map.dims, Vec2::new(2.0, 1.0));
        assert_eq!(extract_feature(&tef, &map).unwrap()[4..], [0.0, 0.0]);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = vec![];
        let mut ys = vec![];
        for i in 0..10 {
            let j = i as f64 * 0.01;
            xs.push(vec![1.0 + j, 0.1 - j]);
            ys.push(3);
            xs.push(vec![-1.0 - j, j]);
            ys.push(7);
        }
        (xs, ys)
    }

    #[test]
    fn separable_toy_set_fits() {
        let (xs, ys) = toy();
        let m = train(&xs, &ys, &ClassifierConfig::default()).unwrap();
        assert_eq!(m.classes, vec![3, 7]);
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(predict(&m, x).unwrap(), y);
        }
        assert_eq!(predict(&m, &[1.05, 0.05]).unwrap(), 3);
    }

    #[test]
    fn single_class_rejected() {
        let r = train(
            &[vec![1.0], vec![2.0]],
            &[0, 0],
            &ClassifierConfig::default(),
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = toy();
        let cfg = ClassifierConfig::default();
        assert_eq!(
            train(&xs, &ys, &cfg).unwrap(),
            train(&xs, &ys, &cfg).unwrap()
        );
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = LinearModel {
            classes: vec![1, 2, 5],
            class_names: vec![],
            feature_len: 1,
            scale: vec![1.0],
            weights: vec![vec![0.0], vec![1.0], vec![1.0]],
            bias: vec![0.0; 3],
        };
        assert_eq!(predict(&m, &[2.0]).unwrap(), 2);
        assert_eq!(predict(&m, &[0.0]).unwrap(), 1);
        assert!(predict(&m, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn positive_scaling_keeps_argmax() {
        let (xs, ys) = toy();
        let mut m = train(&xs, &ys, &ClassifierConfig::default()).unwrap();
        m.bias = vec![0.0; 2];
        for x in &xs {
            let p = predict(&m, x).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * 37.5).collect();
            assert_eq!(predict(&m, &scaled).unwrap(), p);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let (xs, ys) = toy();
        let m = train(&xs, &ys, &ClassifierConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(LinearModel::load(&path).unwrap(), m);
    }
}
