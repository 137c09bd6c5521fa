//! Procedural multi-object scenes: filled geometric shapes on textured
//! backgrounds. Images containing a novel shape class are abnormal.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{preprocess, DatasetSplit, LabeledSample, Partition, RawImage, SplitRule};
use crate::error::{Error, Result};

pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub classes: Vec<String>,
    pub novel_classes: Vec<String>,
    /// Total number of images (normal + abnormal).
    pub count: usize,
    pub abnormal_ratio: f64,
    /// Share of normal images held out for testing.
    pub test_normal_fraction: f64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object half-extent range as a fraction of the image side.
    pub object_scale: [f64; 2],
    /// Size multiplier applied to novel objects (< 1 makes them subtle).
    pub novel_scale: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            classes: ["circle", "square", "triangle", "diamond", "cross"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            novel_classes: vec!["triangle".into()],
            count: 200,
            abnormal_ratio: 0.3,
            test_normal_fraction: 0.2,
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            object_scale: [0.08, 0.16],
            novel_scale: 1.0,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let classes: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        for c in &self.classes {
            if !SHAPES.contains(&c.as_str()) {
                out.push(format!("synthetic.classes: unknown shape {c:?} (known: {})", SHAPES.join(", ")));
            }
        }
        for c in &self.novel_classes {
            if !classes.contains(c.as_str()) {
                out.push(format!("synthetic.novel_classes: {c:?} is not in the class list"));
            }
        }
        if self.count < 10 {
            out.push(format!("synthetic.count must be >= 10, got {}", self.count));
        }
        if !(0.0..=1.0).contains(&self.abnormal_ratio) {
            out.push("synthetic.abnormal_ratio must be in [0, 1]".into());
        }
        if self.abnormal_ratio > 0.0 && self.novel_classes.is_empty() {
            out.push("synthetic.novel_classes is empty but abnormal_ratio > 0".into());
        }
        if !(0.0..=1.0).contains(&self.test_normal_fraction) {
            out.push("synthetic.test_normal_fraction must be in [0, 1]".into());
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            out.push(format!("synthetic.image_size must be a power of two >= 32, got {}", self.image_size));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            out.push("synthetic: need 1 <= min_objects <= max_objects".into());
        }
        let [lo, hi] = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            out.push("synthetic.object_scale must satisfy 0 < lo <= hi < 0.5".into());
        }
        if !(self.novel_scale > 0.0 && self.novel_scale.is_finite()) {
            out.push("synthetic.novel_scale must be > 0".into());
        }
        out
    }

    fn normal_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|c| !self.novel_classes.contains(c))
            .map(String::as_str)
            .collect()
    }
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r && dy.abs() <= r,
        "triangle" => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        "diamond" => dx.abs() + dy.abs() <= r,
        "cross" => {
            let t = r / 3.0;
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
        "ring" => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.36 * r * r
        }
        _ => false,
    }
}

fn draw(px: &mut [u8], size: usize, shape: &str, cx: f64, cy: f64, r: f64, color: [u8; 3]) -> usize {
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size - 1);
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size - 1);
    let mut painted = 0;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            if inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
                painted += 1;
            }
        }
    }
    painted
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RawImage,
    /// Shape classes present, sorted and de-duplicated.
    pub classes: Vec<String>,
    /// Pixels covered by novel objects.
    pub novel_pixels: usize,
}

/// Render scene `index`; content depends only on `(seed, index, abnormal)`.
pub fn render_scene(cfg: &SceneConfig, index: usize, abnormal: bool) -> Result<Scene> {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut px = vec![0u8; size * size * 3];

    // textured background: vertical gradient between two muted colours
    // with stripes and per-pixel noise
    let top: [f64; 3] = [rng.gen_range(40.0..120.0), rng.gen_range(40.0..120.0), rng.gen_range(40.0..120.0)];
    let bottom: [f64; 3] = [rng.gen_range(40.0..120.0), rng.gen_range(40.0..120.0), rng.gen_range(40.0..120.0)];
    let period = rng.gen_range(6.0..14.0);
    for y in 0..size {
        let t = y as f64 / (size - 1) as f64;
        for x in 0..size {
            let stripe = 10.0 * ((x as f64 + y as f64) * std::f64::consts::TAU / period).sin();
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-8.0..8.0);
                let v = top[c] * (1.0 - t) + bottom[c] * t + stripe + noise;
                px[(y * size + x) * 3 + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }

    let normal = cfg.normal_classes();
    if normal.is_empty() {
        return Err(Error::NoNormalData("every synthetic class is novel".into()));
    }
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut present = Vec::with_capacity(n_obj + 1);
    let s = size as f64;
    let [lo, hi] = cfg.object_scale;
    let place = |rng: &mut ChaCha8Rng, shape: &str, scale: f64, px: &mut [u8]| {
        let r = (rng.gen_range(lo..=hi) * s * scale).max(1.0);
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let color = [rng.gen_range(150..=255u8), rng.gen_range(0..=255u8), rng.gen_range(0..=120u8)];
        draw(px, size, shape, cx, cy, r, color)
    };
    for _ in 0..n_obj {
        let shape = *normal.choose(&mut rng).expect("non-empty");
        place(&mut rng, shape, 1.0, &mut px);
        present.push(shape.to_string());
    }
    let mut novel_pixels = 0;
    if abnormal {
        let shape = cfg
            .novel_classes
            .choose(&mut rng)
            .ok_or_else(|| Error::Config("no novel classes to render".into()))?
            .clone();
        novel_pixels = place(&mut rng, &shape, cfg.novel_scale, &mut px);
        present.push(shape);
    }
    present.sort();
    present.dedup();
    Ok(Scene {
        image: RawImage::new(format!("scene-{index:05}"), size, size, 3, px)?,
        classes: present,
        novel_pixels,
    })
}

/// Generate a full split. `round(count · abnormal_ratio)` images carry a
/// novel object and all go to the test partition. Scenes are rendered in
/// RGB and converted to `channels` (1 or 3).
pub fn generate_synthetic_scenes(cfg: &SceneConfig, channels: usize) -> Result<DatasetSplit> {
    let novel: BTreeSet<&String> = cfg.novel_classes.iter().collect();
    let all: BTreeSet<&String> = cfg.classes.iter().collect();
    if !all.is_empty() && novel == all {
        return Err(Error::NoNormalData("novel classes cover the whole class list".into()));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::ConfigList(problems));
    }
    let n_abnormal = (cfg.count as f64 * cfg.abnormal_ratio).round() as usize;
    let n_normal = cfg.count - n_abnormal;
    let n_test_normal = (n_normal as f64 * cfg.test_normal_fraction).round() as usize;

    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut role = vec![(false, Partition::Train); cfg.count];
    for (k, &i) in order.iter().enumerate() {
        role[i] = if k < n_abnormal {
            (true, Partition::Test)
        } else if k < n_abnormal + n_test_normal {
            (false, Partition::Test)
        } else {
            (false, Partition::Train)
        };
    }

    let mut train_normal = Vec::new();
    let mut test = Vec::new();
    for (i, (abnormal, partition)) in role.into_iter().enumerate() {
        let scene = render_scene(cfg, i, abnormal)?;
        let sample = LabeledSample {
            id: scene.image.id.clone(),
            image: preprocess(&scene.image, cfg.image_size, channels)?,
            anomaly_label: abnormal,
            source_label: scene.classes.join(","),
            partition,
        };
        match partition {
            Partition::Train => train_normal.push(sample),
            Partition::Test => test.push(sample),
        }
    }
    let split = DatasetSplit {
        train_normal,
        test,
        rule: SplitRule {
            protocol: "synthetic-scenes".into(),
            novel: cfg.novel_classes.clone(),
            description: format!(
                "{} scenes, seed {}, abnormal ratio {}, novel scale {}",
                cfg.count, cfg.seed, cfg.abnormal_ratio, cfg.novel_scale
            ),
        },
    };
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> SceneConfig {
        SceneConfig {
            count,
            image_size: 32,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic_scenes(&small(30), 3).unwrap();
        let b = generate_synthetic_scenes(&small(30), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scenes(&SceneConfig { seed: 8, ..small(30) }, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_training_image_contains_a_novel_shape() {
        let split = generate_synthetic_scenes(&small(60), 3).unwrap();
        for s in &split.train_normal {
            assert!(!s.source_label.split(',').any(|c| c == "triangle"), "{}", s.source_label);
        }
        for s in &split.test {
            assert_eq!(s.anomaly_label, s.source_label.split(',').any(|c| c == "triangle"));
        }
    }

    #[test]
    fn abnormal_count_follows_ratio() {
        let split = generate_synthetic_scenes(&SceneConfig { count: 100, abnormal_ratio: 0.3, ..small(100) }, 3).unwrap();
        assert_eq!(split.counts().test_abnormal, 30);
        assert_eq!(split.counts().test_normal, 14);
        assert_eq!(split.train_normal.len(), 56);
    }

    #[test]
    fn all_novel_is_rejected() {
        let cfg = SceneConfig {
            classes: vec!["circle".into(), "square".into()],
            novel_classes: vec!["square".into(), "circle".into()],
            ..small(20)
        };
        assert!(matches!(generate_synthetic_scenes(&cfg, 3), Err(Error::NoNormalData(_))));
    }

    #[test]
    fn subtle_novel_objects_are_small() {
        let cfg = SceneConfig { novel_scale: 0.35, image_size: 64, ..small(20) };
        for i in 0..20 {
            let scene = render_scene(&cfg, i, true).unwrap();
            assert!(scene.novel_pixels as f64 <= 0.02 * 64.0 * 64.0, "{}", scene.novel_pixels);
            assert!(scene.novel_pixels > 0);
        }
    }
}
