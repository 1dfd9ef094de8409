//! Dot annotations and the supervision targets derived from them: Gaussian
//! density maps (fixed or k-NN adaptive bandwidth) and binary dot maps.
//!
//! Pixel `(row, col)` is centred on the real coordinate `(y, x) = (row, col)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

/// Fixed bandwidth for dense scenes.
pub const SIGMA_DENSE: f64 = 5.0;
/// Fixed bandwidth for sparse scenes.
pub const SIGMA_SPARSE: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn dist(&self, o: &Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotation {
    pub image_id: String,
    pub points: Vec<Point>,
    pub height: usize,
    pub width: usize,
}

impl DotAnnotation {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !in_bounds(p, height, width)) {
            return Err(Error::usage(format!(
                "point ({}, {}) outside {height}x{width} image",
                p.x, p.y
            )));
        }
        Ok(DotAnnotation {
            image_id: image_id.into(),
            points,
            height,
            width,
        })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y\n");
        for p in &self.points {
            s.push_str(&format!("{:?},{:?}\n", p.x, p.y));
        }
        s
    }
}

fn in_bounds(p: &Point, h: usize, w: usize) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64
}

/// Annotation plus the points dropped for lying outside the image.
#[derive(Debug, Clone)]
pub struct ParsedAnnotation {
    pub annotation: DotAnnotation,
    /// `(line number, point)` of every rejected point.
    pub rejected: Vec<(usize, Point)>,
}

pub fn parse_dot_annotations(path: &Path, image_id: &str, height: usize, width: usize) -> Result<ParsedAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dot_csv(&text, &path.display().to_string(), image_id, height, width)
}

/// Parse `x,y` CSV (header `x,y` required).
pub fn parse_dot_csv(
    text: &str,
    origin: &str,
    image_id: &str,
    height: usize,
    width: usize,
) -> Result<ParsedAnnotation> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h.replace(' ', "") == "x,y" => {}
        Some((ln, h)) => return Err(perr(ln, format!("expected header `x,y`, found {h:?}"))),
        None => return Err(perr(1, "missing header `x,y`".into())),
    }
    let mut points = Vec::new();
    let mut rejected = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(xs), Some(ys), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(perr(ln, format!("expected `x,y`, found {line:?}")));
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| perr(ln, format!("bad number {s:?}: {e}")))
        };
        let p = Point::new(num(xs)?, num(ys)?);
        if in_bounds(&p, height, width) {
            points.push(p);
        } else {
            rejected.push((ln, p));
        }
    }
    Ok(ParsedAnnotation {
        annotation: DotAnnotation::new(image_id, height, width, points)?,
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    /// `[H,W]`, non-negative.
    pub values: Tensor,
    pub count: f64,
}

impl DensityMap {
    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotMap {
    /// `[H,W]` with values in {0, 1}.
    pub values: Tensor,
    /// Heads that landed on an already-marked pixel.
    pub collisions: usize,
    /// Heads whose rounded pixel falls outside the image.
    pub out_of_bounds: usize,
}

/// Round half up.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Add one truncated, renormalized Gaussian of unit mass centred at `p`.
fn splat(map: &mut [f64], h: usize, w: usize, p: &Point, sigma: f64) {
    let (cx, cy) = (round_half_up(p.x), round_half_up(p.y));
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let rows = (cy - r).max(0)..=(cy + r).min(h as i64 - 1);
    let cols = (cx - r).max(0)..=(cx + r).min(w as i64 - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::with_capacity(rows.clone().count() * cols.clone().count());
    let mut total = 0.0;
    for row in rows.clone() {
        let dy = row as f64 - p.y;
        for col in cols.clone() {
            let dx = col as f64 - p.x;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            total += v;
            kernel.push(v);
        }
    }
    if !(total > 0.0) || !total.is_finite() {
        // bandwidth too small to resolve: all mass on the nearest pixel
        let row = cy.clamp(0, h as i64 - 1) as usize;
        let col = cx.clamp(0, w as i64 - 1) as usize;
        map[row * w + col] += 1.0;
        return;
    }
    let mut k = kernel.iter();
    for row in rows {
        for col in cols.clone() {
            map[row as usize * w + col as usize] += k.next().expect("kernel sized to window") / total;
        }
    }
}

fn render(ann: &DotAnnotation, sigmas: impl Iterator<Item = f64>) -> DensityMap {
    let (h, w) = (ann.height, ann.width);
    let mut data = vec![0.0; h * w];
    for (p, s) in ann.points.iter().zip(sigmas) {
        splat(&mut data, h, w, p, s);
    }
    DensityMap {
        values: Tensor::new(vec![h, w], data).expect("sized"),
        count: ann.count() as f64,
    }
}

/// Fixed-bandwidth density map; every dot contributes exactly unit mass even
/// when its kernel is cut by the image border.
pub fn gaussian_density_map(ann: &DotAnnotation, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    Ok(render(ann, std::iter::repeat(sigma)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveKernel {
    pub beta: f64,
    pub k: usize,
    /// Bandwidth for heads with fewer than `k` neighbours.
    pub fallback_sigma: f64,
}

impl Default for AdaptiveKernel {
    fn default() -> Self {
        AdaptiveKernel {
            beta: 0.3,
            k: 3,
            fallback_sigma: SIGMA_DENSE,
        }
    }
}

/// Per-head bandwidth `beta × mean distance to the k nearest other heads`.
pub fn adaptive_sigmas(ann: &DotAnnotation, params: &AdaptiveKernel) -> Result<Vec<f64>> {
    if !(params.beta > 0.0) || params.k == 0 || !(params.fallback_sigma > 0.0) {
        return Err(Error::usage(format!("invalid adaptive kernel {params:?}")));
    }
    let pts = &ann.points;
    if pts.len() <= params.k {
        return Ok(vec![params.fallback_sigma; pts.len()]);
    }
    let mut dists = Vec::with_capacity(pts.len());
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| p.dist(q)));
            dists.select_nth_unstable_by(params.k - 1, f64::total_cmp);
            let mut nearest = dists[..params.k].to_vec();
            nearest.sort_by(f64::total_cmp);
            params.beta * nearest.iter().sum::<f64>() / params.k as f64
        })
        .collect())
}

pub fn adaptive_density_map(ann: &DotAnnotation, params: &AdaptiveKernel) -> Result<DensityMap> {
    let sigmas = adaptive_sigmas(ann, params)?;
    Ok(render(ann, sigmas.into_iter()))
}

/// Binary head map: the rounded pixel of each dot is set to 1.
pub fn dot_target_map(ann: &DotAnnotation) -> DotMap {
    let (h, w) = (ann.height, ann.width);
    let mut data = vec![0.0; h * w];
    let (mut collisions, mut out_of_bounds) = (0, 0);
    for p in &ann.points {
        let (col, row) = (round_half_up(p.x), round_half_up(p.y));
        if col < 0 || row < 0 || col >= w as i64 || row >= h as i64 {
            out_of_bounds += 1;
            continue;
        }
        let cell = &mut data[row as usize * w + col as usize];
        if *cell == 1.0 {
            collisions += 1;
        }
        *cell = 1.0;
    }
    DotMap {
        values: Tensor::new(vec![h, w], data).expect("sized"),
        collisions,
        out_of_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(points: &[(f64, f64)], h: usize, w: usize) -> DotAnnotation {
        DotAnnotation::new("t", h, w, points.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    /// Per-pixel double loop over the whole image, with each dot's truncated
    /// window mass computed separately.
    fn naive_density(a: &DotAnnotation, sigma: f64) -> Vec<f64> {
        let (h, w) = (a.height, a.width);
        let r = (3.0 * sigma).ceil();
        let mut out = vec![0.0; h * w];
        for p in &a.points {
            let (cx, cy) = ((p.x + 0.5).floor(), (p.y + 0.5).floor());
            let inside = |row: usize, col: usize| (row as f64 - cy).abs() <= r && (col as f64 - cx).abs() <= r;
            let g = |row: usize, col: usize| {
                (-((col as f64 - p.x).powi(2) + (row as f64 - p.y).powi(2)) / (2.0 * sigma * sigma)).exp()
            };
            let mut mass = 0.0;
            for row in 0..h {
                for col in 0..w {
                    if inside(row, col) {
                        mass += g(row, col);
                    }
                }
            }
            for row in 0..h {
                for col in 0..w {
                    if inside(row, col) {
                        out[row * w + col] += g(row, col) / mass;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn csv_parsing() {
        let p = parse_dot_csv("x,y\n", "a.csv", "a", 64, 64).unwrap();
        assert_eq!(p.annotation.count(), 0);
        let p = parse_dot_csv("x,y\n1.5,2\n10,20\n", "a.csv", "a", 64, 64).unwrap();
        assert_eq!(p.annotation.count(), 2);
        let p = parse_dot_csv("x,y\n70,3\n5,5\n", "a.csv", "a", 64, 64).unwrap();
        assert_eq!(p.annotation.count(), 1);
        assert_eq!(p.rejected, vec![(2, Point::new(70.0, 3.0))]);
        match parse_dot_csv("x,y\n1,2\n3;4\n", "a.csv", "a", 64, 64) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_dot_csv("a,b\n", "a.csv", "a", 8, 8),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_dot_unit_mass() {
        let m = gaussian_density_map(&ann(&[(32.0, 32.0)], 64, 64), SIGMA_DENSE).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12);
        let m = gaussian_density_map(&ann(&[(0.0, 0.0)], 64, 64), SIGMA_DENSE).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12);
        assert!(gaussian_density_map(&ann(&[], 8, 8), 0.0).is_err());
    }

    #[test]
    fn matches_naive_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|_| (rng.random_range(0.0..48.0), rng.random_range(0.0..40.0)))
            .collect();
        let a = ann(&pts, 40, 48);
        let m = gaussian_density_map(&a, 4.0).unwrap();
        assert!((m.sum() - 10.0).abs() < 1e-6);
        for (x, y) in m.values.data().iter().zip(naive_density(&a, 4.0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_collapses_to_a_delta() {
        let m = gaussian_density_map(&ann(&[(3.4, 2.6)], 8, 8), 1e-4).unwrap();
        assert_eq!(m.values.data()[3 * 8 + 3], 1.0);
        assert_eq!(m.sum(), 1.0);
    }

    #[test]
    fn interior_translation_is_pixel_exact() {
        let a = gaussian_density_map(&ann(&[(20.25, 18.5)], 64, 64), 3.0).unwrap();
        let b = gaussian_density_map(&ann(&[(27.25, 22.5)], 64, 64), 3.0).unwrap();
        for row in 0..64 {
            for col in 0..64 {
                let va = a.values.data()[row * 64 + col];
                let shifted = if row + 4 < 64 && col + 7 < 64 {
                    b.values.data()[(row + 4) * 64 + col + 7]
                } else {
                    0.0
                };
                assert_eq!(va.to_bits(), shifted.to_bits(), "({row},{col})");
            }
        }
    }

    #[test]
    fn adaptive_cases() {
        let k = AdaptiveKernel::default();
        let m = adaptive_density_map(&ann(&[(10.0, 10.0)], 32, 32), &k).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-12);
        assert_eq!(
            adaptive_sigmas(&ann(&[(10.0, 10.0)], 32, 32), &k).unwrap(),
            vec![SIGMA_DENSE]
        );

        let pair = AdaptiveKernel {
            beta: 0.3,
            k: 1,
            fallback_sigma: 5.0,
        };
        let s = adaptive_sigmas(&ann(&[(10.0, 10.0), (20.0, 10.0)], 32, 32), &pair).unwrap();
        assert!(s.iter().all(|v| (v - 3.0).abs() < 1e-12), "{s:?}");

        let cluster = ann(
            &[
                (10.0, 10.0),
                (11.0, 10.0),
                (10.0, 11.0),
                (11.0, 11.0),
                (40.0, 40.0),
                (60.0, 40.0),
            ],
            64,
            64,
        );
        let s = adaptive_sigmas(&cluster, &pair).unwrap();
        assert!(s[..4].iter().all(|&c| c < s[4] && c < s[5]));
    }

    #[test]
    fn dot_map_rules() {
        let d = dot_target_map(&ann(&[(10.4, 20.6)], 64, 64));
        assert_eq!(d.values.data()[21 * 64 + 10], 1.0);
        assert_eq!(d.values.sum(), 1.0);
        assert_eq!(dot_target_map(&ann(&[], 8, 8)).values.sum(), 0.0);
        let d = dot_target_map(&ann(&[(3.4, 3.4), (2.6, 2.5)], 8, 8));
        assert_eq!((d.values.sum(), d.collisions), (1.0, 1));
        let d = dot_target_map(&ann(&[(7.6, 1.0)], 8, 8));
        assert_eq!((d.values.sum(), d.out_of_bounds), (0.0, 1));
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(-0.5), 0);
    }

    proptest! {
        #[test]
        fn mass_is_conserved(
            pts in prop::collection::vec((0.0f64..31.999, 0.0f64..23.999), 0..30),
            sigma in 0.3f64..8.0,
        ) {
            let a = ann(&pts, 24, 32);
            let m = gaussian_density_map(&a, sigma).unwrap();
            prop_assert!((m.sum() - pts.len() as f64).abs() < 1e-6);
            prop_assert!(m.values.data().iter().all(|&v| v >= 0.0));
            let m = adaptive_density_map(&a, &AdaptiveKernel::default()).unwrap();
            prop_assert!((m.sum() - pts.len() as f64).abs() < 1e-6);
        }

        #[test]
        fn spreading_heads_never_shrinks_bandwidth(
            pts in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0), 2..12),
            scale in 1.0f64..3.0,
        ) {
            let k = AdaptiveKernel { beta: 0.3, k: 1, fallback_sigma: 5.0 };
            let a = ann(&pts, 64, 64);
            let spread: Vec<_> = pts.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
            let b = ann(&spread, 64, 64);
            let (sa, sb) = (adaptive_sigmas(&a, &k).unwrap(), adaptive_sigmas(&b, &k).unwrap());
            for (x, y) in sa.iter().zip(&sb) {
                prop_assert!(*y >= *x - 1e-12);
            }
        }

        #[test]
        fn dot_map_is_binary(pts in prop::collection::vec((0.0f64..15.99, 0.0f64..15.99), 0..40)) {
            let d = dot_target_map(&ann(&pts, 16, 16));
            prop_assert!(d.values.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(d.values.sum() as usize + d.collisions + d.out_of_bounds, pts.len());
        }
    }
}
