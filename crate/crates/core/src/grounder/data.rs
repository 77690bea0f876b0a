//! Synthetic MRI-like slices with one elliptical lesion per tumor case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect2seg::Mask;
use crate::pgm::GrayImage;

pub const IMAGE_SIZE: usize = 32;
pub const CLASSES: [&str; 4] = ["glioma", "meningioma", "pituitary", "healthy"];
pub const TUMOR_CLASSES: [&str; 3] = ["glioma", "meningioma", "pituitary"];

/// Intensity model of a synthetic acquisition. Shifting these parameters
/// between datasets gives a controllable domain gap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStyle {
    pub background: f64,
    /// Multiplies the lesion-to-background intensity difference.
    pub contrast: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            background: 0.2,
            contrast: 1.0,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub case_id: String,
    /// Row-major, values in [0, 1].
    pub pixels: Vec<f64>,
    /// Normalized (cx, cy, w, h); all zero when `present` is false.
    pub gt_box: [f64; 4],
    pub gt_class: String,
    pub present: bool,
    pub mask: Mask,
}

impl ImageSample {
    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_unit(IMAGE_SIZE, IMAGE_SIZE, &self.pixels)
    }
}

/// Lesion intensity at normalized elliptical radius² `r2` ∈ [0, 1].
fn lesion_intensity(class: &str, r2: f64) -> f64 {
    match class {
        // enhancing rim around a necrotic core
        "glioma" => {
            if r2 > 0.45 {
                0.95
            } else {
                0.4
            }
        }
        "meningioma" => 0.85,
        _ => 0.6,
    }
}

/// Renders one sample of the given class.
pub fn render_sample<R: Rng + ?Sized>(case_id: &str, class: &str, style: &SyntheticStyle, rng: &mut R) -> ImageSample {
    let n = IMAGE_SIZE;
    let side = n as f64;
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise level");
    let mut pixels = vec![style.background; n * n];
    let mut mask = Mask::empty(n, n);
    let present = class != "healthy";
    let mut gt_box = [0.0; 4];

    if present {
        let w = rng.gen_range(0.15..=0.4) * side;
        let h = rng.gen_range(0.15..=0.4) * side;
        let cx = rng.gen_range(w / 2.0..=side - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=side - h / 2.0);
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 + 0.5 - cx) / (w / 2.0);
                let dy = (y as f64 + 0.5 - cy) / (h / 2.0);
                let r2 = dx * dx + dy * dy;
                if r2 <= 1.0 {
                    let v = lesion_intensity(class, r2);
                    pixels[y * n + x] = style.background + style.contrast * (v - style.background);
                    mask.bits[y * n + x] = true;
                }
            }
        }
        gt_box = [cx / side, cy / side, w / side, h / side];
    }

    for p in &mut pixels {
        let v: f64 = *p + noise.sample(rng);
        // 8-bit levels so a PGM round trip is lossless
        *p = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    ImageSample {
        case_id: case_id.to_string(),
        pixels,
        gt_box,
        gt_class: class.to_string(),
        present,
        mask,
    }
}

/// `n` samples with uniformly drawn classes; case ids are `{prefix}{i:04}`.
pub fn gen_synthetic(n: usize, seed: u64, style: &SyntheticStyle, prefix: &str) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = CLASSES[rng.gen_range(0..CLASSES.len())];
            render_sample(&format!("{prefix}{i:04}"), class, style, &mut rng)
        })
        .collect()
}

/// Prompt used when training on `sample`. Healthy slices are paired with a
/// tumor word so the score head learns to reject absent findings.
pub fn training_prompt(sample: &ImageSample, index: usize) -> &'static str {
    match TUMOR_CLASSES.iter().find(|c| **c == sample.gt_class) {
        Some(c) => c,
        None => TUMOR_CLASSES[index % TUMOR_CLASSES.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let style = SyntheticStyle::default();
        assert_eq!(gen_synthetic(8, 3, &style, "s"), gen_synthetic(8, 3, &style, "s"));
        assert_ne!(gen_synthetic(8, 3, &style, "s"), gen_synthetic(8, 4, &style, "s"));
    }

    #[test]
    fn box_contains_pixel_centroid() {
        let clean = SyntheticStyle {
            noise: 0.0,
            ..SyntheticStyle::default()
        };
        let n = IMAGE_SIZE;
        for s in gen_synthetic(200, 11, &clean, "c").iter().filter(|s| s.present) {
            let (mut sx, mut sy, mut k) = (0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    if s.pixels[y * n + x] != s.pixels[0] {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                        k += 1.0;
                    }
                }
            }
            assert!(k > 0.0);
            let (cx, cy) = (sx / k / n as f64, sy / k / n as f64);
            let [bx, by, bw, bh] = s.gt_box;
            assert!((bx - bw / 2.0..=bx + bw / 2.0).contains(&cx), "{}", s.case_id);
            assert!((by - bh / 2.0..=by + bh / 2.0).contains(&cy), "{}", s.case_id);
            assert!((0.15 - 1e-12..=0.4 + 1e-12).contains(&bw));
        }
    }

    #[test]
    fn healthy_has_zero_box_and_mask() {
        for s in gen_synthetic(64, 5, &SyntheticStyle::default(), "h") {
            assert_eq!(s.present, s.gt_class != "healthy");
            if !s.present {
                assert_eq!(s.gt_box, [0.0; 4]);
                assert_eq!(s.mask.count(), 0);
            } else {
                assert!(s.mask.count() > 0);
            }
            assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let data = gen_synthetic(4000, 1, &SyntheticStyle::default(), "u");
        for class in CLASSES {
            let share = data.iter().filter(|s| s.gt_class == class).count() as f64 / 4000.0;
            assert!((share - 0.25).abs() <= 0.05 * 0.25, "{class}: {share}");
        }
    }

    #[test]
    fn healthy_prompts_cycle_tumor_words() {
        let s = render_sample(
            "x",
            "healthy",
            &SyntheticStyle::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let got: Vec<_> = (0..4).map(|i| training_prompt(&s, i)).collect();
        assert_eq!(got, ["glioma", "meningioma", "pituitary", "glioma"]);
    }
}
