//! Deterministic synthetic dataset generator. Positive images carry
//! annotated bright elliptical targets; negative images carry unannotated
//! decoy ellipses that differ from targets only by the delta cue: targets
//! have a darker rim ring, decoys do not. Both share the same size and
//! position distributions and the same noise model, so a detector that
//! never trains on negative images is guaranteed to fire on decoys.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Manifest, Polarity};
use crate::geometry::{iou, BBox};
use crate::{Error, Result};

const BACKGROUND: f64 = 0.45;
const CORE: f64 = 0.85;
const RIM_THICKNESS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_side: usize,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub test_positives: usize,
    pub test_negatives: usize,
    /// Bounding-box side range of planted objects, pixels.
    pub target_side: (f64, f64),
    /// Targets per positive image (inclusive range).
    pub targets_per_positive: (usize, usize),
    /// Decoys per negative image (inclusive range).
    pub decoys_per_negative: (usize, usize),
    /// Intensity gap of the rim cue: rim intensity = core - delta.
    pub delta: f64,
    /// Gaussian pixel-noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_side: 64,
            train_positives: 100,
            train_negatives: 100,
            test_positives: 25,
            test_negatives: 25,
            target_side: (12.0, 24.0),
            targets_per_positive: (1, 3),
            decoys_per_negative: (0, 2),
            delta: 0.5,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta <= 0.0 {
            return Err(Error::Config("delta must be positive".into()));
        }
        if self.target_side.0 <= 2.0 * RIM_THICKNESS || self.target_side.0 > self.target_side.1 {
            return Err(Error::Config(format!(
                "bad target side range {:?}",
                self.target_side
            )));
        }
        if self.target_side.1 >= self.image_side as f64 - 2.0 {
            return Err(Error::Config(
                "target side must fit inside the image".into(),
            ));
        }
        if self.train_positives == 0 || self.train_negatives == 0 {
            return Err(Error::Config(
                "need at least one positive and one negative training image".into(),
            ));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    rimmed: bool,
}

impl Ellipse {
    fn bbox(&self) -> BBox {
        BBox {
            x_min: self.cx - self.ax,
            y_min: self.cy - self.ay,
            x_max: self.cx + self.ax,
            y_max: self.cy + self.ay,
        }
    }
}

fn render(side: usize, ellipses: &[Ellipse], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, cfg.noise).unwrap();
    let mut pixels = vec![BACKGROUND; side * side];
    for e in ellipses {
        let rim = CORE - cfg.delta;
        let x0 = (e.cx - e.ax).floor().max(0.0) as usize;
        let x1 = ((e.cx + e.ax).ceil() as usize).min(side - 1);
        let y0 = (e.cy - e.ay).floor().max(0.0) as usize;
        let y1 = ((e.cy + e.ay).ceil() as usize).min(side - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - e.cx) / e.ax;
                let dy = (y as f64 + 0.5 - e.cy) / e.ay;
                let r2 = dx * dx + dy * dy;
                if r2 > 1.0 {
                    continue;
                }
                let value = if e.rimmed {
                    let ix = (x as f64 + 0.5 - e.cx) / (e.ax - RIM_THICKNESS);
                    let iy = (y as f64 + 0.5 - e.cy) / (e.ay - RIM_THICKNESS);
                    if ix * ix + iy * iy <= 1.0 {
                        CORE
                    } else {
                        rim
                    }
                } else {
                    CORE
                };
                pixels[y * side + x] = value;
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    pixels
}

fn plant(count: usize, rimmed: bool, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let side = cfg.image_side as f64;
    let mut out: Vec<Ellipse> = Vec::new();
    'outer: for _ in 0..count {
        for _attempt in 0..30 {
            let sx = rng.gen_range(cfg.target_side.0..=cfg.target_side.1);
            let sy = rng.gen_range(cfg.target_side.0..=cfg.target_side.1);
            let (ax, ay) = (sx / 2.0, sy / 2.0);
            let cx = rng.gen_range(ax + 1.0..side - ax - 1.0);
            let cy = rng.gen_range(ay + 1.0..side - ay - 1.0);
            let e = Ellipse {
                cx,
                cy,
                ax,
                ay,
                rimmed,
            };
            if out.iter().all(|o| iou(&o.bbox(), &e.bbox()) < 0.1) {
                out.push(e);
                continue 'outer;
            }
        }
        // crowded image; give up on this object
    }
    out
}

fn write_png(path: &Path, side: usize, pixels: &[f64]) -> Result<()> {
    let buf: Vec<u8> = pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, buf)
        .expect("pixel buffer size mismatch");
    img.save(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Generated dataset layout: `images/` plus `train.json` and `test.json`
/// at the dataset root.
pub struct GeneratedDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io("creating dataset directory", &images_dir, e))?;

    let mut index = 0usize;
    let mut build_split = |positives: usize, negatives: usize| -> Result<Manifest> {
        let mut records = Vec::new();
        for polarity in [Polarity::Positive, Polarity::Negative] {
            let count = match polarity {
                Polarity::Positive => positives,
                Polarity::Negative => negatives,
            };
            for _ in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let (objects, boxes) = match polarity {
                    Polarity::Positive => {
                        let n = rng
                            .gen_range(cfg.targets_per_positive.0..=cfg.targets_per_positive.1)
                            .max(1);
                        let es = plant(n, true, cfg, &mut rng);
                        let boxes = es.iter().map(|e| e.bbox()).collect();
                        (es, boxes)
                    }
                    Polarity::Negative => {
                        let n =
                            rng.gen_range(cfg.decoys_per_negative.0..=cfg.decoys_per_negative.1);
                        (plant(n, false, cfg, &mut rng), Vec::new())
                    }
                };
                let pixels = render(cfg.image_side, &objects, cfg, &mut rng);
                let name = format!("img_{index:05}.png");
                write_png(&images_dir.join(&name), cfg.image_side, &pixels)?;
                records.push(ImageRecord {
                    image: PathBuf::from("images").join(&name),
                    patient_id: format!("patient_{index:05}"),
                    polarity,
                    boxes,
                });
                index += 1;
            }
        }
        Ok(Manifest { records })
    };

    let train = build_split(cfg.train_positives, cfg.train_negatives)?;
    let test = build_split(cfg.test_positives, cfg.test_negatives)?;
    let train_manifest = out_dir.join("train.json");
    let test_manifest = out_dir.join("test.json");
    train.save(&train_manifest)?;
    test.save(&test_manifest)?;
    Ok(GeneratedDataset {
        train_manifest,
        test_manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub positives: usize,
    pub negatives: usize,
    pub boxes: usize,
    pub box_side_min: f64,
    pub box_side_max: f64,
    pub box_side_mean: f64,
}

pub fn dataset_stats(manifest: &Manifest) -> Result<DatasetStats> {
    manifest.validate()?;
    let mut stats = DatasetStats {
        records: manifest.records.len(),
        positives: 0,
        negatives: 0,
        boxes: 0,
        box_side_min: f64::INFINITY,
        box_side_max: 0.0,
        box_side_mean: 0.0,
    };
    let mut side_sum = 0.0;
    for r in &manifest.records {
        match r.polarity {
            Polarity::Positive => stats.positives += 1,
            Polarity::Negative => stats.negatives += 1,
        }
        for b in &r.boxes {
            stats.boxes += 1;
            for side in [b.width(), b.height()] {
                stats.box_side_min = stats.box_side_min.min(side);
                stats.box_side_max = stats.box_side_max.max(side);
                side_sum += side;
            }
        }
    }
    if stats.boxes > 0 {
        stats.box_side_mean = side_sum / (2 * stats.boxes) as f64;
    } else {
        stats.box_side_min = 0.0;
    }
    Ok(stats)
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} records ({} positive, {} negative), {} boxes, box sides {:.1}..{:.1} px (mean {:.1})",
            self.records,
            self.positives,
            self.negatives,
            self.boxes,
            self.box_side_min,
            self.box_side_max,
            self.box_side_mean
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;

    fn small_config() -> SynthConfig {
        SynthConfig {
            train_positives: 10,
            train_negatives: 10,
            test_positives: 3,
            test_negatives: 3,
            decoys_per_negative: (1, 2),
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate_dataset(&small_config(), dir.path()).unwrap();
        let train = Manifest::load(&out.train_manifest).unwrap();
        assert_eq!(train.positives().len(), 10);
        assert_eq!(train.negatives().len(), 10);
        for r in train.positives() {
            assert!(!r.boxes.is_empty());
        }
        for r in train.negatives() {
            assert!(r.boxes.is_empty());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = small_config();
        generate_dataset(&cfg, d1.path()).unwrap();
        generate_dataset(&cfg, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("train.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("train.json")).unwrap();
        assert_eq!(m1, m2);
        for entry in std::fs::read_dir(d1.path().join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join("images").join(&name)).unwrap();
            let b = std::fs::read(d2.path().join("images").join(&name)).unwrap();
            assert_eq!(a, b, "pixel mismatch in {name:?}");
        }
    }

    #[test]
    fn stats_reflect_construction() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let out = generate_dataset(&cfg, dir.path()).unwrap();
        let train = Manifest::load(&out.train_manifest).unwrap();
        let stats = dataset_stats(&train).unwrap();
        assert_eq!(stats.records, 20);
        assert_eq!(stats.positives, 10);
        assert_eq!(stats.negatives, 10);
        assert!(stats.boxes >= 10);
        assert!(stats.box_side_min >= cfg.target_side.0 - 1e-9);
        assert!(stats.box_side_max <= cfg.target_side.1 + 1e-9);

        let empty = dataset_stats(&Manifest { records: vec![] }).unwrap();
        assert_eq!(empty.records, 0);
        assert_eq!(empty.boxes, 0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config();
        cfg.delta = 0.0;
        assert!(generate_dataset(&cfg, Path::new("/nonexistent")).is_err());
        let mut cfg = small_config();
        cfg.target_side = (40.0, 70.0);
        assert!(cfg.validate().is_err());
    }

    /// Separability oracle: a pixel-threshold classifier over object
    /// crops must separate targets (rimmed) from decoys (unrimmed) with
    /// 100% accuracy at the default large delta. A crop is called a
    /// target when at least 10% of its pixels fall below the midpoint
    /// between the rim intensity and the background.
    #[test]
    fn rim_cue_separates_targets_from_decoys() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.train_positives = 20;
        cfg.train_negatives = 20;
        cfg.decoys_per_negative = (1, 2);
        let out = generate_dataset(&cfg, dir.path()).unwrap();
        let train = Manifest::load(&out.train_manifest).unwrap();

        let rim = CORE - cfg.delta;
        let cut = 0.5 * (rim + BACKGROUND);
        let classify = |img: &crate::autodiff::Tensor, b: &BBox| -> bool {
            let side = img.shape()[1];
            let (x0, x1) = (b.x_min.max(0.0) as usize, (b.x_max as usize).min(side - 1));
            let (y0, y1) = (b.y_min.max(0.0) as usize, (b.y_max as usize).min(side - 1));
            let mut dark = 0usize;
            let mut total = 0usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    total += 1;
                    if img.data()[y * side + x] < cut {
                        dark += 1;
                    }
                }
            }
            dark as f64 / total as f64 >= 0.10
        };

        // targets come from the manifest boxes; decoy boxes are
        // regenerated from the per-image seed the generator used
        for (idx, r) in train.records.iter().enumerate() {
            let img = dataset::load_image(&dataset::image_path(&out.train_manifest, r)).unwrap();
            match r.polarity {
                Polarity::Positive => {
                    for b in &r.boxes {
                        assert!(classify(&img, b), "target missed in {idx}");
                    }
                }
                Polarity::Negative => {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    );
                    let n = rng.gen_range(cfg.decoys_per_negative.0..=cfg.decoys_per_negative.1);
                    for e in plant(n, false, &cfg, &mut rng) {
                        assert!(!classify(&img, &e.bbox()), "decoy misclassified in {idx}");
                    }
                }
            }
        }
    }
}
