use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::SPATIAL_DIVISOR;
use crate::parallel::map_indices;
use crate::tensor::Tensor;

/// One image/label pair. `image` is `C×D×H×W`, `label` is `D×H×W`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub image: Vec<f64>,
    pub channels: usize,
    pub label: Vec<usize>,
    pub extents: [usize; 3],
}

impl VolumeSample {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let v = self.voxels();
        if self.image.len() != self.channels * v || self.label.len() != v {
            return Err(invalid(
                "volume_sample",
                format!(
                    "buffers do not match {} × {:?}",
                    self.channels, self.extents
                ),
            ));
        }
        if self.label.iter().any(|&l| l >= num_classes) {
            return Err(invalid(
                "volume_sample",
                format!("label id ≥ {num_classes}"),
            ));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(invalid("volume_sample", "non-finite image value"));
        }
        Ok(())
    }

    /// Image as a `[1, C, D, H, W]` tensor.
    pub fn image_tensor(&self) -> Result<Tensor> {
        let [d, h, w] = self.extents;
        Tensor::new(self.image.clone(), &[1, self.channels, d, h, w])
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0; num_classes];
        for &l in &self.label {
            hist[l] += 1;
        }
        hist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub extents: [usize; 3],
    pub noise_sigma: f64,
    pub max_ellipsoids_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 8,
            extents: [32, 32, 32],
            noise_sigma: 0.1,
            max_ellipsoids_per_class: 3,
            seed: 0,
        }
    }
}

/// Mean intensity of class `class` in channel `channel`: background 0, the
/// last class 1, with a small per-channel offset so channels differ.
pub fn class_intensity(class: usize, num_classes: usize, channel: usize) -> f64 {
    let base = class as f64 / (num_classes.max(2) - 1) as f64;
    base * (1.0 - 0.1 * channel as f64 / (channel as f64 + 1.0))
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn random<R: Rng>(extents: [usize; 3], rng: &mut R) -> Self {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let e = extents[a] as f64;
            radii[a] = rng.random_range(e / 10.0..e / 4.0).max(1.0);
            center[a] = rng.random_range(radii[a]..(e - radii[a]).max(radii[a] + 1e-9));
        }
        Ellipsoid { center, radii }
    }

    fn paint(&self, label: &mut [usize], extents: [usize; 3], class: usize) {
        let [d, h, w] = extents;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let q = [z as f64, y as f64, x as f64];
                    let r: f64 = (0..3)
                        .map(|a| ((q[a] - self.center[a]) / self.radii[a]).powi(2))
                        .sum();
                    if r <= 1.0 {
                        label[(z * h + y) * w + x] = class;
                    }
                }
            }
        }
    }
}

fn synth_sample(
    cfg: &SynthConfig,
    num_classes: usize,
    channels: usize,
    index: u64,
) -> VolumeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let extents = cfg.extents;
    let v: usize = extents.iter().product();
    let mut label = vec![0; v];
    for class in 1..num_classes {
        let count = rng.random_range(1..=cfg.max_ellipsoids_per_class.max(1));
        for _ in 0..count {
            Ellipsoid::random(extents, &mut rng).paint(&mut label, extents, class);
        }
    }
    // later classes may have covered earlier ones completely; repaint on top
    for _ in 0..16 {
        let hist: Vec<bool> = (0..num_classes).map(|c| label.contains(&c)).collect();
        let Some(missing) = (1..num_classes).find(|&c| !hist[c]) else {
            break;
        };
        Ellipsoid::random(extents, &mut rng).paint(&mut label, extents, missing);
    }
    let noise =
        Normal::new(0.0, cfg.noise_sigma).expect("noise sigma must be finite and non-negative");
    let mut image = vec![0.0; channels * v];
    for ch in 0..channels {
        for (i, &l) in label.iter().enumerate() {
            image[ch * v + i] = class_intensity(l, num_classes, ch) + noise.sample(&mut rng);
        }
    }
    VolumeSample {
        image,
        channels,
        label,
        extents,
    }
}

/// Seeded synthetic dataset: 1..=`max_ellipsoids_per_class` random ellipsoids
/// per foreground class over background, image = class intensity + N(0, σ²)
/// noise. Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(
    cfg: &SynthConfig,
    num_classes: usize,
    channels: usize,
) -> Result<Vec<VolumeSample>> {
    if cfg
        .extents
        .iter()
        .any(|&e| e == 0 || e % SPATIAL_DIVISOR != 0)
    {
        return Err(invalid(
            "synth_dataset",
            format!(
                "extents must be multiples of {SPATIAL_DIVISOR}, got {:?}",
                cfg.extents
            ),
        ));
    }
    if num_classes == 0 || channels == 0 {
        return Err(invalid(
            "synth_dataset",
            "need at least one class and one channel",
        ));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(invalid(
            "synth_dataset",
            "noise_sigma must be finite and non-negative",
        ));
    }
    Ok(map_indices(cfg.samples, |i| {
        synth_sample(cfg, num_classes, channels, i as u64)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub intensity_scale: (f64, f64),
    /// Random spatial crop; `None` keeps full extents.
    pub crop: Option<[usize; 3]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            intensity_scale: (0.9, 1.1),
            crop: None,
        }
    }
}

/// Mirrors image and label along spatial axis `axis` (0 = D, 1 = H, 2 = W).
pub fn flip_axis(sample: &VolumeSample, axis: usize) -> VolumeSample {
    let [d, h, w] = sample.extents;
    let v = d * h * w;
    let src_index = |i: usize| -> usize {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (z, y, x) = match axis {
            0 => (d - 1 - z, y, x),
            1 => (z, h - 1 - y, x),
            _ => (z, y, w - 1 - x),
        };
        (z * h + y) * w + x
    };
    let label = (0..v).map(|i| sample.label[src_index(i)]).collect();
    let image = (0..sample.channels)
        .flat_map(|c| (0..v).map(move |i| (c, i)))
        .map(|(c, i)| sample.image[c * v + src_index(i)])
        .collect();
    VolumeSample {
        image,
        label,
        ..sample.clone()
    }
}

/// Crops `extents` starting at `origin`.
pub fn crop(
    sample: &VolumeSample,
    origin: [usize; 3],
    extents: [usize; 3],
) -> Result<VolumeSample> {
    let [d, h, w] = sample.extents;
    if (0..3).any(|a| origin[a] + extents[a] > sample.extents[a] || extents[a] == 0) {
        return Err(invalid(
            "crop",
            format!(
                "{extents:?} at {origin:?} does not fit {:?}",
                sample.extents
            ),
        ));
    }
    let (v, [cd, ch, cw]) = (d * h * w, extents);
    let mut image = Vec::with_capacity(sample.channels * cd * ch * cw);
    let mut label = Vec::with_capacity(cd * ch * cw);
    for c in 0..=sample.channels {
        for z in 0..cd {
            for y in 0..ch {
                let start = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                if c < sample.channels {
                    image.extend_from_slice(&sample.image[c * v + start..c * v + start + cw]);
                } else {
                    label.extend_from_slice(&sample.label[start..start + cw]);
                }
            }
        }
    }
    Ok(VolumeSample {
        image,
        channels: sample.channels,
        label,
        extents,
    })
}

/// Random flips (each axis independently), intensity scaling of the image,
/// and an optional random crop.
pub fn augment<R: Rng>(
    sample: &VolumeSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<VolumeSample> {
    if let Some(c) = cfg.crop {
        if (0..3).any(|a| c[a] > sample.extents[a] || c[a] == 0) {
            return Err(invalid(
                "augment",
                format!("crop {c:?} larger than volume {:?}", sample.extents),
            ));
        }
    }
    let mut out = sample.clone();
    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_prob {
            out = flip_axis(&out, axis);
        }
    }
    let (lo, hi) = cfg.intensity_scale;
    let scale = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    out.image.iter_mut().for_each(|v| *v *= scale);
    if let Some(c) = cfg.crop {
        let origin = [0, 1, 2].map(|a| rng.random_range(0..=out.extents[a] - c[a]));
        out = crop(&out, origin, c)?;
    }
    Ok(out)
}
