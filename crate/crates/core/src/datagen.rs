//! Seeded synthetic crowd scenes and the training-time augmentation pipeline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::groundtruth::{parse_dot_annotations, DotAnnotation, Point, SIGMA_DENSE, SIGMA_SPARSE};
use crate::pgm::{read_pgm, write_pgm};
use crate::tensorgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityProfile {
    Dense,
    Sparse,
}

impl DensityProfile {
    /// Fixed Gaussian bandwidth paired with this profile.
    pub fn sigma(self) -> f64 {
        match self {
            DensityProfile::Dense => SIGMA_DENSE,
            DensityProfile::Sparse => SIGMA_SPARSE,
        }
    }

    fn min_separation(self) -> f64 {
        match self {
            DensityProfile::Dense => 2.0,
            DensityProfile::Sparse => 6.0,
        }
    }
}

impl std::str::FromStr for DensityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(DensityProfile::Dense),
            "sparse" => Ok(DensityProfile::Sparse),
            _ => Err(Error::config(format!("unknown density profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub count_range: (usize, usize),
    pub blob_radius_range: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
    pub density_profile: DensityProfile,
}

impl SceneConfig {
    pub fn dense(seed: u64) -> Self {
        SceneConfig {
            size: 64,
            count_range: (10, 70),
            blob_radius_range: (1.5, 3.0),
            noise_std: 0.03,
            seed,
            density_profile: DensityProfile::Dense,
        }
    }

    pub fn sparse(seed: u64) -> Self {
        SceneConfig {
            size: 64,
            count_range: (1, 15),
            blob_radius_range: (2.5, 5.0),
            noise_std: 0.03,
            seed,
            density_profile: DensityProfile::Sparse,
        }
    }

    pub fn for_profile(profile: DensityProfile, seed: u64) -> Self {
        match profile {
            DensityProfile::Dense => Self::dense(seed),
            DensityProfile::Sparse => Self::sparse(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::config(format!(
                "scene size {} must be a positive multiple of 8",
                self.size
            )));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::config(format!("count range {:?} is inverted", self.count_range)));
        }
        let (r0, r1) = self.blob_radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::config(format!(
                "blob radius range {:?} is invalid",
                self.blob_radius_range
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1,H,W]` in `[0,1]`.
    pub image: Tensor,
    pub annotation: DotAnnotation,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

fn place_heads(rng: &mut ChaCha8Rng, count: usize, size: usize, min_sep: f64) -> Option<Vec<Point>> {
    let hi = (size - 1) as f64;
    let mut pts: Vec<Point> = Vec::with_capacity(count);
    let mut attempts = 0;
    while pts.len() < count {
        if attempts >= 10 * count {
            return None;
        }
        attempts += 1;
        // 1/64 px grid keeps `crop − 1 − x` exact, so flips are involutions
        let mut coord = || (rng.random_range(0.0..=hi) * 64.0).round() / 64.0;
        let p = Point::new(coord(), coord());
        if pts.iter().all(|q| (p.x - q.x).hypot(p.y - q.y) >= min_sep) {
            pts.push(p);
        }
    }
    Some(pts)
}

/// Render scene `index`. The result depends only on `(cfg, index)`.
///
/// Heads are radial-falloff discs over a faint linear background; their
/// centres lie in `[0, size−1]` so horizontal flips stay in bounds.
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, index as u64);
    let n = cfg.size;
    let count = rng.random_range(cfg.count_range.0..=cfg.count_range.1);
    let sep = cfg.density_profile.min_separation();
    let points = place_heads(&mut rng, count, n, sep)
        .or_else(|| place_heads(&mut rng, count, n, sep / 2.0))
        .ok_or_else(|| Error::config(format!("cannot place {count} heads in a {n}x{n} scene")))?;

    let base = rng.random_range(0.05..0.2);
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
            base + gx * c + gy * r
        })
        .collect();
    for p in &points {
        let radius = rng.random_range(cfg.blob_radius_range.0..=cfg.blob_radius_range.1);
        let intensity = rng.random_range(0.4..=1.0);
        let reach = radius.ceil() as i64;
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        for row in (cy - reach).max(0)..=(cy + reach).min(n as i64 - 1) {
            for col in (cx - reach).max(0)..=(cx + reach).min(n as i64 - 1) {
                let d = (col as f64 - p.x).hypot(row as f64 - p.y);
                if d < radius {
                    let t = d / radius;
                    img[row as usize * n + col as usize] += intensity * (1.0 - t * t);
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
        img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Sample {
        image: Tensor::new(vec![1, n, n], img)?,
        annotation: DotAnnotation::new(sample_id(index), n, n, points)?,
    })
}

/// Explicit augmentation choices; [`augment`] draws them at random.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop origin `(row, col)`.
    pub origin: (usize, usize),
    pub flip: bool,
    pub gamma: f64,
}

pub const GAMMA_RANGE: (f64, f64) = (0.8, 1.25);

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            origin: (0, 0),
            flip: false,
            gamma: 1.0,
        }
    }

    pub fn draw(rng: &mut impl Rng, height: usize, width: usize, crop: usize) -> Self {
        AugmentParams {
            origin: (rng.random_range(0..=height - crop), rng.random_range(0..=width - crop)),
            flip: rng.random_bool(0.5),
            gamma: rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1),
        }
    }
}

/// Random crop, horizontal flip with probability 0.5, and a gamma transform.
pub fn augment(sample: &Sample, crop: usize, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (sample.annotation.height, sample.annotation.width);
    check_crop(h, w, crop)?;
    let params = AugmentParams::draw(rng, h, w, crop);
    apply_augment(sample, crop, &params)
}

fn check_crop(h: usize, w: usize, crop: usize) -> Result<()> {
    if crop == 0 || crop > h || crop > w || crop % 8 != 0 {
        return Err(Error::usage(format!(
            "crop {crop} invalid for {h}x{w} image (must fit and be a multiple of 8)"
        )));
    }
    Ok(())
}

/// Apply fixed augmentation choices. Flipped x becomes `crop − 1 − x`,
/// clamped at 0 for the half-pixel sliver beyond the last pixel centre.
pub fn apply_augment(sample: &Sample, crop: usize, p: &AugmentParams) -> Result<Sample> {
    let (h, w) = (sample.annotation.height, sample.annotation.width);
    check_crop(h, w, crop)?;
    let (oy, ox) = p.origin;
    if oy + crop > h || ox + crop > w {
        return Err(Error::usage(format!(
            "crop origin {:?} + {crop} exceeds {h}x{w}",
            p.origin
        )));
    }
    let src = sample.image.data();
    let mut img = Vec::with_capacity(crop * crop);
    for row in oy..oy + crop {
        let line = &src[row * w + ox..row * w + ox + crop];
        if p.flip {
            img.extend(line.iter().rev());
        } else {
            img.extend_from_slice(line);
        }
    }
    if p.gamma != 1.0 {
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(p.gamma));
    }
    let (x0, y0, side) = (ox as f64, oy as f64, crop as f64);
    let points = sample
        .annotation
        .points
        .iter()
        .filter(|q| q.x >= x0 && q.x < x0 + side && q.y >= y0 && q.y < y0 + side)
        .map(|q| {
            let x = q.x - x0;
            Point::new(if p.flip { (side - 1.0 - x).max(0.0) } else { x }, q.y - y0)
        })
        .collect();
    Ok(Sample {
        image: Tensor::new(vec![1, crop, crop], img)?,
        annotation: DotAnnotation::new(sample.annotation.image_id.clone(), crop, crop, points)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scene: SceneConfig,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Content hash of the serialized manifest.
    pub hash: String,
}

/// Git-style content hash (`blob <len>\0<bytes>`) using SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    /// Scenes `0..n_train` form the train split, the next `n_test` the test split.
    pub fn generate(scene: &SceneConfig, n_train: usize, n_test: usize) -> Result<Dataset> {
        let train = (0..n_train)
            .map(|i| generate_scene(scene, i))
            .collect::<Result<Vec<_>>>()?;
        let test = (n_train..n_train + n_test)
            .map(|i| generate_scene(scene, i))
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            scene: scene.clone(),
            train: (0..n_train).map(sample_id).collect(),
            test: (n_train..n_train + n_test).map(sample_id).collect(),
        };
        let hash = content_hash(serde_json::to_string_pretty(&manifest)?.as_bytes());
        Ok(Dataset {
            manifest,
            train,
            test,
            hash,
        })
    }

    /// Lay out `images/{id}.pgm`, `annotations/{id}.csv` and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "annotations"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for s in self.train.iter().chain(&self.test) {
            let id = &s.annotation.image_id;
            write_pgm(&dir.join("images").join(format!("{id}.pgm")), &s.image, 1.0)?;
            let p = dir.join("annotations").join(format!("{id}.csv"));
            std::fs::write(&p, s.annotation.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mp = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", mp.display())))?;
        let load_one = |id: &String| -> Result<Sample> {
            let image = read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let parsed = parse_dot_annotations(&dir.join("annotations").join(format!("{id}.csv")), id, h, w)?;
            if !parsed.rejected.is_empty() {
                return Err(Error::data(format!(
                    "{id}: {} out-of-bounds points",
                    parsed.rejected.len()
                )));
            }
            Ok(Sample {
                image,
                annotation: parsed.annotation,
            })
        };
        let train = manifest.train.iter().map(load_one).collect::<Result<Vec<_>>>()?;
        let test = manifest.test.iter().map(load_one).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            hash: content_hash(text.as_bytes()),
            manifest,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            count_range: (0, 0),
            ..SceneConfig::dense(1)
        };
        let s = generate_scene(&cfg, 0).unwrap();
        assert_eq!(s.annotation.count(), 0);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic_and_counted() {
        let cfg = SceneConfig {
            count_range: (20, 20),
            ..SceneConfig::dense(7)
        };
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.annotation.count(), 20);
        assert_ne!(a, generate_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn heads_sit_on_bright_blobs() {
        let cfg = SceneConfig {
            noise_std: 0.0,
            ..SceneConfig::sparse(2)
        };
        let s = generate_scene(&cfg, 0).unwrap();
        for p in &s.annotation.points {
            let v = s.image.data()[p.y.round() as usize * 64 + p.x.round() as usize];
            assert!(v > 0.3, "blob at {p:?} too dark: {v}");
        }
    }

    #[test]
    fn infeasible_packing_errors() {
        let cfg = SceneConfig {
            size: 8,
            count_range: (60, 60),
            ..SceneConfig::sparse(0)
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_augment() {
        let s = generate_scene(&SceneConfig::dense(3), 0).unwrap();
        assert_eq!(apply_augment(&s, 64, &AugmentParams::identity()).unwrap(), s);
    }

    #[test]
    fn crop_excludes_outside_dot() {
        let ann = DotAnnotation::new("a", 64, 64, vec![Point::new(40.0, 40.0), Point::new(5.0, 6.0)]).unwrap();
        let s = Sample {
            image: Tensor::zeros(&[1, 64, 64]),
            annotation: ann,
        };
        let c = apply_augment(&s, 32, &AugmentParams::identity()).unwrap();
        assert_eq!(c.annotation.points, vec![Point::new(5.0, 6.0)]);
        assert!(apply_augment(&s, 30, &AugmentParams::identity()).is_err());
        assert!(apply_augment(&s, 72, &AugmentParams::identity()).is_err());
    }

    #[test]
    fn flip_mirrors_dots_and_pixels() {
        let s = generate_scene(&SceneConfig::dense(5), 1).unwrap();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let f = apply_augment(&s, 64, &flip).unwrap();
        for (p, q) in s.annotation.points.iter().zip(&f.annotation.points) {
            assert_eq!(q.x, 63.0 - p.x);
            assert_eq!(q.y, p.y);
        }
        assert_eq!(f.image.data()[5 * 64], s.image.data()[5 * 64 + 63]);
        assert_eq!(apply_augment(&f, 64, &flip).unwrap(), s);
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&SceneConfig::dense(11), 3, 2).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.hash, ds.hash);
        for (a, b) in back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)) {
            assert_eq!(a.annotation, b.annotation);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn crop_keeps_exactly_the_window(seed in 0u64..50, oy in 0usize..=32, ox in 0usize..=32, flip: bool, gamma in 0.8f64..1.25) {
            let s = generate_scene(&SceneConfig::dense(seed), 0).unwrap();
            let p = AugmentParams { origin: (oy, ox), flip, gamma };
            let c = apply_augment(&s, 32, &p).unwrap();
            let inside = s.annotation.points.iter().filter(|q| {
                q.x >= ox as f64 && q.x < (ox + 32) as f64 && q.y >= oy as f64 && q.y < (oy + 32) as f64
            }).count();
            prop_assert_eq!(c.annotation.count(), inside);
            prop_assert!(c.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn gamma_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, gamma in 0.8f64..1.25) {
            let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| if i == 0 { a } else if i == 1 { b } else { 0.5 }).collect()).unwrap();
            let s = Sample { image: img, annotation: DotAnnotation::new("g", 8, 8, vec![]).unwrap() };
            let out = apply_augment(&s, 8, &AugmentParams { gamma, ..AugmentParams::identity() }).unwrap();
            let (oa, ob) = (out.image.data()[0], out.image.data()[1]);
            prop_assert!((0.0..=1.0).contains(&oa) && (0.0..=1.0).contains(&ob));
            if a < b { prop_assert!(oa <= ob); }
        }
    }
}
