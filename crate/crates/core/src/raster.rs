//! RGB rasters, binary masks, and the image bank that resolves image handles.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("raster buffer size")
    }

    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.as_raw().clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    /// Foreground test at pixel coordinates; points outside the raster are background.
    pub fn at(&self, x: f64, y: f64) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        if xi >= self.width || yi >= self.height {
            return false;
        }
        self.data[yi * self.width + xi]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("mask buffer size")
    }
}

/// Resolves `image_ref` / mask handles of a dataset to pixels.
#[derive(Debug, Clone, Default)]
pub struct ImageBank {
    images: HashMap<String, Arc<Raster>>,
    masks: HashMap<String, Arc<Mask>>,
}

impl ImageBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_image(&mut self, key: &str, raster: Raster) {
        self.images.insert(key.to_string(), Arc::new(raster));
    }

    pub fn insert_mask(&mut self, key: &str, mask: Mask) {
        self.masks.insert(key.to_string(), Arc::new(mask));
    }

    pub fn image(&self, key: &str) -> Result<&Raster> {
        self.images
            .get(key)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::Argument(format!("unknown image handle {key:?}")))
    }

    pub fn mask(&self, key: &str) -> Option<&Mask> {
        self.masks.get(key).map(Arc::as_ref)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads every image (and mask) referenced by `ds` relative to `root`,
    /// resizes to `size x size`, and rescales annotations in place.
    pub fn load(ds: &mut Dataset, root: &Path, size: usize) -> Result<Self> {
        let mut bank = Self::new();
        for (index, inst) in ds.instances.iter_mut().enumerate() {
            let path = root.join(&inst.image_ref);
            let img = image::open(&path)
                .map_err(|e| Error::Ingestion {
                    index,
                    message: format!("{}: {e}", path.display()),
                })?
                .to_rgb8();
            let (w0, h0) = (img.width() as f64, img.height() as f64);
            let (sx, sy) = (size as f64 / w0, size as f64 / h0);
            for kp in &mut inst.keypoints {
                if kp.visible && (kp.x < 0.0 || kp.y < 0.0 || kp.x >= w0 || kp.y >= h0) {
                    return Err(Error::Ingestion {
                        index,
                        message: format!("visible keypoint ({}, {}) outside image", kp.x, kp.y),
                    });
                }
                kp.x *= sx;
                kp.y *= sy;
            }
            inst.bbox = [
                inst.bbox[0] * sx,
                inst.bbox[1] * sy,
                inst.bbox[2] * sx,
                inst.bbox[3] * sy,
            ];
            if !bank.images.contains_key(&inst.image_ref) {
                let resized =
                    image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
                bank.insert_image(&inst.image_ref, Raster::from_image(&resized));
            }
            if let Some(mref) = &inst.mask {
                if !bank.masks.contains_key(mref) {
                    let mpath = root.join(mref);
                    let m = image::open(&mpath)
                        .map_err(|e| Error::Ingestion {
                            index,
                            message: format!("{}: {e}", mpath.display()),
                        })?
                        .to_luma8();
                    let m =
                        image::imageops::resize(&m, size as u32, size as u32, FilterType::Nearest);
                    bank.insert_mask(
                        mref,
                        Mask {
                            width: size,
                            height: size,
                            data: m.as_raw().iter().map(|&v| v >= 128).collect(),
                        },
                    );
                }
            }
        }
        Ok(bank)
    }
}
