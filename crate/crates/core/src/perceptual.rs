//! Built-in non-neural image distance used when no remote scorer is
//! configured: luminance SSIM and per-channel histogram intersection, both
//! mapped into `[0, 1]` distances.

use std::collections::BTreeMap;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::image::{ImageKind, ImageRef, ImageStore};
use crate::ports::{BackendError, ScorerPort};

const SIDE: u32 = 128;
const WINDOW: u32 = 8;
const STRIDE: u32 = 4;
const BINS: usize = 32;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Mean SSIM over 8x8 windows (stride 4) of two equally sized gray images.
pub fn mean_ssim(a: &GrayImage, b: &GrayImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    let (w, h) = a.dimensions();
    if w < WINDOW || h < WINDOW {
        return if a == b { 1.0 } else { 0.0 };
    }
    let n = (WINDOW * WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut y = 0;
    while y + WINDOW <= h {
        let mut x = 0;
        while x + WINDOW <= w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let pa = a.get_pixel(x + dx, y + dy).0[0] as f64;
                    let pb = b.get_pixel(x + dx, y + dy).0[0] as f64;
                    sa += pa;
                    sb += pb;
                    saa += pa * pa;
                    sbb += pb * pb;
                    sab += pa * pb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
            x += STRIDE;
        }
        y += STRIDE;
    }
    total / count as f64
}

fn histograms(img: &RgbImage) -> [[f64; BINS]; 3] {
    let mut h = [[0.0; BINS]; 3];
    for p in img.pixels() {
        for c in 0..3 {
            h[c][p.0[c] as usize * BINS / 256] += 1.0;
        }
    }
    let total = (img.width() * img.height()).max(1) as f64;
    for ch in h.iter_mut() {
        for v in ch.iter_mut() {
            *v /= total;
        }
    }
    h
}

/// One minus the mean per-channel histogram intersection.
pub fn histogram_distance(a: &RgbImage, b: &RgbImage) -> f64 {
    let (ha, hb) = (histograms(a), histograms(b));
    let inter: f64 = (0..3)
        .map(|c| (0..BINS).map(|i| ha[c][i].min(hb[c][i])).sum::<f64>())
        .sum::<f64>()
        / 3.0;
    (1.0 - inter).clamp(0.0, 1.0)
}

/// Distances between two decoded images, resampled to a common size.
pub fn distances(a: &RgbImage, b: &RgbImage) -> BTreeMap<String, f64> {
    let ra = image::imageops::resize(a, SIDE, SIDE, FilterType::Triangle);
    let rb = image::imageops::resize(b, SIDE, SIDE, FilterType::Triangle);
    let ga = image::DynamicImage::ImageRgb8(ra.clone()).to_luma8();
    let gb = image::DynamicImage::ImageRgb8(rb.clone()).to_luma8();
    let ssim = mean_ssim(&ga, &gb);
    BTreeMap::from([
        ("ssim".to_string(), ((1.0 - ssim) / 2.0).clamp(0.0, 1.0)),
        ("histogram".to_string(), histogram_distance(&ra, &rb)),
    ])
}

/// Scorer over workspace files.
pub struct PerceptualScorer {
    store: ImageStore,
}

impl PerceptualScorer {
    pub fn new(store: ImageStore) -> Self {
        PerceptualScorer { store }
    }

    fn load(&self, r: &ImageRef) -> Result<RgbImage, BackendError> {
        if r.kind != ImageKind::File {
            return Err(BackendError::Unsupported("perceptual scorer needs raster images".into()));
        }
        let bytes = self
            .store
            .read(r)
            .map_err(|e| BackendError::Rejected(e.to_string()))?;
        image::load_from_memory(&bytes)
            .map(|i| i.to_rgb8())
            .map_err(|e| BackendError::InvalidImagePayload(e.to_string()))
    }
}

impl ScorerPort for PerceptualScorer {
    fn distances(&self, a: &ImageRef, b: &ImageRef) -> Result<BTreeMap<String, f64>, BackendError> {
        Ok(distances(&self.load(a)?, &self.load(b)?))
    }
}
