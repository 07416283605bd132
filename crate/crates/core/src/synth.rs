//! Procedural "synthetic animals" benchmark.
//!
//! Each instance is a head disc with two ear lobes on top of a body ellipse,
//! rotated, scaled and translated at random. Keypoints are drawn as small
//! coloured markers. Species differ in body and head colour and in ear and
//! body proportions. The two eyes sit exactly halfway along the nose-ear
//! paths, so they are reachable by midpoint interpolation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::corpus::{manifest_json, Dataset, Instance, Keypoint, KeypointSchema};
use crate::error::{Error, Result};
use crate::llm::MockTable;
use crate::raster::{ImageBank, Mask, Raster};

pub const KEYPOINTS: [&str; 8] = [
    "nose",
    "left eye",
    "right eye",
    "left ear",
    "right ear",
    "tail",
    "left-front paw",
    "right-front paw",
];

const MARKERS: [[u8; 3]; 8] = [
    [225, 35, 35],
    [35, 205, 60],
    [45, 85, 235],
    [235, 220, 35],
    [220, 45, 205],
    [35, 215, 215],
    [245, 140, 25],
    [130, 55, 205],
];

pub const TRAIN_SPECIES: [&str; 7] = ["cat", "dog", "cow", "horse", "sheep", "bear", "deer"];
pub const HELD_OUT_SPECIES: [&str; 2] = ["fox", "wolf"];

struct Style {
    body: [u8; 3],
    head: [u8; 3],
    ear_spread: f64,
    body_scale: f64,
}

fn style(species: &str) -> Style {
    let (body, head, ear_spread, body_scale) = match species {
        "cat" => ([150, 120, 95], [170, 140, 110], 1.0, 1.0),
        "dog" => ([115, 85, 60], [135, 100, 70], 1.05, 1.05),
        "cow" => ([200, 200, 195], [90, 80, 75], 1.1, 1.15),
        "horse" => ([120, 70, 45], [110, 65, 40], 0.9, 1.15),
        "sheep" => ([215, 210, 190], [70, 65, 60], 1.1, 1.1),
        "bear" => ([75, 55, 40], [85, 62, 45], 1.0, 1.2),
        "deer" => ([160, 110, 70], [175, 125, 80], 0.95, 0.95),
        "fox" => ([195, 100, 45], [205, 115, 55], 0.95, 0.95),
        "wolf" => ([125, 125, 130], [145, 145, 150], 1.0, 1.05),
        _ => ([140, 140, 140], [160, 160, 160], 1.0, 1.0),
    };
    Style {
        body,
        head,
        ear_spread,
        body_scale,
    }
}

pub fn schema() -> KeypointSchema {
    KeypointSchema::new(
        KEYPOINTS.iter().map(|s| s.to_string()).collect(),
        vec![0, 3, 4, 5, 6, 7],
        vec![1, 2],
        vec![(1, 2), (3, 4), (6, 7)],
    )
    .expect("toy schema is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub size: usize,
    pub per_species: usize,
    pub species: Vec<String>,
    pub invisible_rate: f64,
    pub scale: (f64, f64),
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            size: 48,
            per_species: 30,
            species: TRAIN_SPECIES
                .iter()
                .chain(HELD_OUT_SPECIES.iter())
                .map(|s| s.to_string())
                .collect(),
            invisible_rate: 0.08,
            scale: (14.0, 18.0),
            max_rotation: 0.3,
            seed: 7,
        }
    }
}

struct Pose {
    cx: f64,
    cy: f64,
    scale: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    fn to_pixel(&self, [u, v]: [f64; 2]) -> [f64; 2] {
        let (x, y) = (self.cos * u - self.sin * v, self.sin * u + self.cos * v);
        [self.cx + self.scale * x, self.cy + self.scale * y]
    }

    fn to_canonical(&self, px: f64, py: f64) -> [f64; 2] {
        let (x, y) = ((px - self.cx) / self.scale, (py - self.cy) / self.scale);
        [self.cos * x + self.sin * y, -self.sin * x + self.cos * y]
    }
}

fn canonical_keypoints(st: &Style) -> [[f64; 2]; 8] {
    let nose = [0.0, -0.45];
    let lear = [-0.42 * st.ear_spread, -1.0];
    let rear = [0.42 * st.ear_spread, -1.0];
    let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    [
        nose,
        mid(nose, lear),
        mid(nose, rear),
        lear,
        rear,
        [0.0, 0.2 + 0.7 * st.body_scale],
        [-0.45, 0.75],
        [0.45, 0.75],
    ]
}

fn in_ellipse(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> bool {
    ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) <= 1.0
}

fn shade(c: [u8; 3], jitter: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + jitter).clamp(0, 255) as u8)
}

/// Renders one instance; returns image, mask, pixel keypoints and visibility.
fn render(
    rng: &mut ChaCha8Rng,
    st: &Style,
    cfg: &BenchmarkConfig,
) -> (Raster, Mask, Vec<Keypoint>) {
    let n = cfg.size;
    let canon = canonical_keypoints(st);
    let pose = loop {
        let theta = rng.gen_range(-cfg.max_rotation..=cfg.max_rotation);
        let pose = Pose {
            cx: n as f64 / 2.0 + rng.gen_range(-3.0..=3.0),
            cy: n as f64 / 2.0 + 1.0 + rng.gen_range(-3.0..=3.0),
            scale: rng.gen_range(cfg.scale.0..=cfg.scale.1),
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let lo = 2.0;
        let hi = n as f64 - 2.0;
        if canon.iter().all(|&c| {
            let [x, y] = pose.to_pixel(c);
            (lo..hi).contains(&x) && (lo..hi).contains(&y)
        }) {
            break pose;
        }
    };
    let tint = rng.gen_range(-12..=12);
    let body_col = shade(st.body, tint);
    let head_col = shade(st.head, tint);
    let bg: [i32; 3] = [
        rng.gen_range(15..40),
        rng.gen_range(15..40),
        rng.gen_range(15..40),
    ];

    let body_c = [0.0, 0.2];
    let body_r = [0.6 * st.body_scale, 0.7 * st.body_scale];
    let head_c = [0.0, -0.72];
    let head_r = 0.42;
    let ear_r = 0.16;
    let limb_r = 0.15;
    let visible: Vec<bool> = (0..8).map(|_| !rng.gen_bool(cfg.invisible_rate)).collect();
    let pixels: Vec<[f64; 2]> = canon.iter().map(|&c| pose.to_pixel(c)).collect();
    let marker_r = 2.0;

    let mut img = Raster::filled(n, n, [0, 0, 0]);
    let mut mask = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = pose.to_canonical(px, py);
            let mut col = bg.map(|b| (b + rng.gen_range(-8..=8)).clamp(0, 255) as u8);
            let mut fg = false;
            let on_limb = [canon[5], canon[6], canon[7]]
                .iter()
                .any(|e| in_ellipse(p, *e, [limb_r, limb_r]));
            if in_ellipse(p, body_c, body_r) || on_limb {
                col = body_col;
                fg = true;
            }
            let on_ear = [canon[3], canon[4]]
                .iter()
                .any(|e| in_ellipse(p, *e, [ear_r, ear_r]));
            if in_ellipse(p, head_c, [head_r, head_r]) || on_ear {
                col = head_col;
                fg = true;
            }
            for (k, c) in pixels.iter().enumerate() {
                if visible[k] && (px - c[0]).powi(2) + (py - c[1]).powi(2) <= marker_r * marker_r {
                    col = MARKERS[k];
                    fg = true;
                }
            }
            img.set(x, y, col);
            mask.set(x, y, fg);
        }
    }
    let kps = pixels
        .iter()
        .zip(&visible)
        .map(|(p, &v)| Keypoint {
            x: p[0],
            y: p[1],
            visible: v,
        })
        .collect();
    (img, mask, kps)
}

fn mask_bbox(mask: &Mask) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    [
        x0 as f64,
        y0 as f64,
        (x1 + 1 - x0) as f64,
        (y1 + 1 - y0) as f64,
    ]
}

/// Generates the benchmark in memory. Image and mask handles are
/// `"<species>/<index>.png"` and `"<species>/<index>_mask.png"`.
pub fn generate(cfg: &BenchmarkConfig) -> Result<(Dataset, ImageBank)> {
    if cfg.size < 32 {
        return Err(Error::Config(format!(
            "benchmark images must be at least 32 px, got {}",
            cfg.size
        )));
    }
    let mut bank = ImageBank::new();
    let mut instances = Vec::new();
    for (si, species) in cfg.species.iter().enumerate() {
        let st = style(species);
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(si as u64));
        for i in 0..cfg.per_species {
            let (img, mask, keypoints) = render(&mut rng, &st, cfg);
            let image_ref = format!("{species}/{i:03}.png");
            let mask_ref = format!("{species}/{i:03}_mask.png");
            instances.push(Instance {
                image_ref: image_ref.clone(),
                species: species.clone(),
                bbox: mask_bbox(&mask),
                keypoints,
                mask: Some(mask_ref.clone()),
            });
            bank.insert_image(&image_ref, img);
            bank.insert_mask(&mask_ref, mask);
        }
    }
    Ok((Dataset::new(schema(), instances)?, bank))
}

/// Writes PNG images, masks and `manifest.json` under `dir`.
pub fn write_benchmark(dir: &Path, cfg: &BenchmarkConfig) -> Result<Dataset> {
    let (ds, bank) = generate(cfg)?;
    for inst in &ds.instances {
        let path = dir.join(&inst.image_ref);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        bank.image(&inst.image_ref)?.save_png(&path)?;
        if let Some(m) = &inst.mask {
            let mp = dir.join(m);
            let mask = bank
                .mask(m)
                .ok_or_else(|| Error::Argument(format!("missing mask {m}")))?;
            mask.to_image().save(&mp)?;
        }
    }
    let mut manifest = manifest_json(&ds);
    manifest["schema"] = serde_json::to_value(&ds.schema)?;
    let mp = dir.join("manifest.json");
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(ds)
}

#[derive(Deserialize)]
struct PathTable {
    z: f64,
    paths: Vec<(String, String)>,
}

/// Predefined interpolation paths `(start, end)` and their node `z`.
pub fn interpolation_paths() -> (Vec<(String, String)>, f64) {
    let t: PathTable =
        serde_json::from_str(include_str!("../data/toy_paths.json")).expect("bundled path table");
    (t.paths, t.z)
}

/// Canned chat replies for the benchmark's interpolation paths and the
/// reference parsing examples.
pub fn mock_table() -> MockTable {
    MockTable::from_json(include_str!("../data/toy_llm.json")).expect("bundled reply table")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            per_species: 4,
            species: vec!["cat".into(), "fox".into()],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, ba) = generate(&small()).unwrap();
        let (b, bb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        let key = &a.instances[3].image_ref;
        assert_eq!(ba.image(key).unwrap(), bb.image(key).unwrap());
    }

    #[test]
    fn eyes_are_path_midpoints_and_inside_mask() {
        let (ds, bank) = generate(&small()).unwrap();
        for inst in &ds.instances {
            let k = &inst.keypoints;
            for (eye, ear) in [(1, 3), (2, 4)] {
                assert!((k[eye].x - (k[0].x + k[ear].x) / 2.0).abs() < 1e-9);
                assert!((k[eye].y - (k[0].y + k[ear].y) / 2.0).abs() < 1e-9);
            }
            let mask = bank.mask(inst.mask.as_ref().unwrap()).unwrap();
            for kp in k {
                assert!(mask.at(kp.x, kp.y));
                assert!(kp.x >= 2.0 && kp.x < 46.0 && kp.y >= 2.0 && kp.y < 46.0);
            }
            assert!(inst.bbox[2] > 10.0 && inst.bbox[3] > 10.0);
        }
    }

    #[test]
    fn visible_markers_carry_their_colour() {
        let (ds, bank) = generate(&small()).unwrap();
        let inst = &ds.instances[0];
        let img = bank.image(&inst.image_ref).unwrap();
        for (k, kp) in inst.keypoints.iter().enumerate() {
            if kp.visible {
                assert_eq!(img.get(kp.x as usize, kp.y as usize), MARKERS[k]);
            }
        }
    }

    #[test]
    fn bundled_tables_load() {
        let (paths, z) = interpolation_paths();
        assert_eq!(paths.len(), 7);
        assert_eq!(z, 0.5);
        let s = schema();
        for (a, b) in &paths {
            assert!(s.index_of(a).is_some() && s.index_of(b).is_some());
        }
        assert!(!mock_table().entries.is_empty());
    }
}
