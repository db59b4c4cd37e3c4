//! Grayscale image planes: decoding, geometric transforms, and packing into
//! normalized 3-channel network input.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma};

use crate::error::{Result, XensError};
use crate::nn::{Scalar, Tensor};

/// Channel statistics of the pretrained backbone's training data.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Single-channel image with intensities in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(XensError::Shape(format!(
                "plane {width}x{height} with {} pixels",
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        Plane {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("plane size matches buffer")
    }
}

pub fn decode_bytes(bytes: &[u8]) -> std::result::Result<Plane, String> {
    let img = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("zero-sized image".into());
    }
    Ok(Plane::from_luma8(&img.to_luma8()))
}

pub fn decode_file(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(|e| XensError::io(path, e))?;
    decode_bytes(&bytes).map_err(|reason| XensError::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Resamples to `size`×`size` with a triangle filter. Same-size input is copied.
pub fn resize(plane: &Plane, size: usize) -> Plane {
    if plane.width == size && plane.height == size {
        return plane.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, plane.data.clone())
            .expect("plane size matches buffer");
    let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    Plane {
        width: size,
        height: size,
        data: out.into_raw(),
    }
}

/// Rotates about the image center by `degrees` (counter-clockwise) with
/// bilinear sampling; pixels that fall outside the source are zero.
pub fn rotate(plane: &Plane, degrees: f64) -> Plane {
    if degrees == 0.0 {
        return plane.clone();
    }
    let (w, h) = (plane.width, plane.height);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Plane::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse map: rotate the destination point back into the source
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            out.set(x, y, bilinear(plane, sx, sy));
        }
    }
    out
}

fn bilinear(p: &Plane, x: f64, y: f64) -> f32 {
    if x < -1.0 || y < -1.0 || x > p.width as f64 || y > p.height as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= p.width as f64 || yi >= p.height as f64 {
            0.0
        } else {
            p.get(xi as usize, yi as usize) as f64
        }
    };
    let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy;
    v as f32
}

pub fn crop(plane: &Plane, x: usize, y: usize, size: usize) -> Result<Plane> {
    if x + size > plane.width || y + size > plane.height || size == 0 {
        return Err(XensError::Shape(format!(
            "crop {size}x{size} at ({x},{y}) outside {}x{}",
            plane.width, plane.height
        )));
    }
    let mut data = Vec::with_capacity(size * size);
    for row in y..y + size {
        let start = row * plane.width + x;
        data.extend_from_slice(&plane.data[start..start + size]);
    }
    Ok(Plane {
        width: size,
        height: size,
        data,
    })
}

pub fn center_crop(plane: &Plane, size: usize) -> Result<Plane> {
    let x = plane.width.saturating_sub(size) / 2;
    let y = plane.height.saturating_sub(size) / 2;
    crop(plane, x, y, size)
}

pub fn hflip(plane: &Plane) -> Plane {
    let mut out = plane.clone();
    for row in out.data.chunks_mut(plane.width) {
        row.reverse();
    }
    out
}

/// Packs same-sized planes into `[B, 3, H, W]`, replicating the gray channel
/// and applying per-channel normalization.
pub fn to_input<F: Scalar>(planes: &[Plane]) -> Result<Tensor<F>> {
    let first = planes
        .first()
        .ok_or_else(|| XensError::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let hw = w * h;
    let mut data = Vec::with_capacity(planes.len() * 3 * hw);
    for p in planes {
        if p.width != w || p.height != h {
            return Err(XensError::Shape(format!(
                "batch mixes {}x{} and {w}x{h} images",
                p.width, p.height
            )));
        }
        for c in 0..3 {
            let (m, s) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
            data.extend(p.data.iter().map(|&v| F::from_f64((v as f64 - m) / s)));
        }
    }
    Tensor::from_vec(&[planes.len(), 3, h, w], data)
}

/// Decoded and resized planes keyed by content hash. When a cache directory is
/// configured (see [`ImageStore::from_env`]) planes are also persisted there.
#[derive(Debug, Default)]
pub struct ImageStore {
    memory: Mutex<HashMap<(String, usize), Arc<Plane>>>,
    disk: Option<PathBuf>,
}

pub const CACHE_ENV: &str = "XENS_CACHE";

impl ImageStore {
    pub fn new(disk: Option<PathBuf>) -> Self {
        ImageStore {
            memory: Mutex::new(HashMap::new()),
            disk,
        }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    /// Image at `path` resized to `size`×`size`. `hash` is the file's content
    /// digest and serves as the cache key.
    pub fn load(&self, path: &Path, hash: &str, size: usize) -> Result<Arc<Plane>> {
        let key = (hash.to_string(), size);
        if let Some(p) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let plane = match self.read_disk(hash, size) {
            Some(p) => p,
            None => {
                let p = resize(&decode_file(path)?, size);
                self.write_disk(hash, &p);
                p
            }
        };
        let plane = Arc::new(plane);
        self.memory.lock().expect("cache lock").insert(key, plane.clone());
        Ok(plane)
    }

    fn disk_path(&self, hash: &str, size: usize) -> Option<PathBuf> {
        self.disk.as_ref().map(|d| d.join(format!("{hash}-{size}.f32")))
    }

    fn read_disk(&self, hash: &str, size: usize) -> Option<Plane> {
        let bytes = std::fs::read(self.disk_path(hash, size)?).ok()?;
        if bytes.len() != size * size * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Some(Plane {
            width: size,
            height: size,
            data,
        })
    }

    fn write_disk(&self, hash: &str, plane: &Plane) {
        let Some(path) = self.disk_path(hash, plane.width) else {
            return;
        };
        let bytes: Vec<u8> = plane.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let tmp = path.with_extension("tmp");
        let ok = std::fs::create_dir_all(path.parent().expect("cache file has a parent"))
            .and_then(|_| std::fs::write(&tmp, &bytes))
            .and_then(|_| std::fs::rename(&tmp, &path));
        if let Err(e) = ok {
            log::warn!("image cache write failed for {}: {e}", path.display());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Plane {
        Plane::new(w, h, (0..w * h).map(|i| i as f32 / (w * h) as f32).collect()).unwrap()
    }

    #[test]
    fn hflip_is_an_involution() {
        let p = ramp(7, 5);
        assert_eq!(hflip(&hflip(&p)), p);
        assert_ne!(hflip(&p), p);
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let p = ramp(5, 5);
        let r = rotate(&p, 90.0);
        for y in 0..5 {
            for x in 0..5 {
                // destination (x, y) samples source (4 - y, x)
                assert!((r.get(x, y) - p.get(4 - y, x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_and_resize_shapes() {
        let p = ramp(31, 17);
        let r = resize(&p, 20);
        assert_eq!((r.width, r.height), (20, 20));
        let c = center_crop(&r, 12).unwrap();
        assert_eq!(c.data.len(), 144);
        assert!(crop(&r, 10, 10, 11).is_err());
    }

    #[test]
    fn input_normalization() {
        let p = Plane::filled(2, 2, 0.485);
        let t: Tensor<f64> = to_input(&[p]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data()[0].abs() < 1e-6);
        assert!((t.data()[4] - (0.485 - 0.456) / 0.224).abs() < 1e-6);
    }
}
