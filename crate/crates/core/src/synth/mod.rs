//! Deterministic multi-domain scene generator standing in for per-camera
//! footage. Each [`DomainSpec`] describes one capture location's bias:
//! background colour and texture, object colour, size and shape statistics,
//! sensor noise and clutter.

mod io;
mod presets;

pub use io::{load_dataset, load_png, save_dataset, save_png, DatasetManifest, ManifestRecord, MANIFEST_VERSION};
pub use presets::{
    hue_distance, make_experiment_domains, DataLayout, ExperimentDomains, TargetPair, MAX_SCALE_SHIFT, PRESETS,
};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruth};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Background hue in `[0, 1)`.
    pub background_hue: f32,
    pub background_saturation: f32,
    pub background_value: f32,
    /// Peak amplitude of the sinusoidal background texture.
    pub texture_amplitude: f32,
    /// Texture wavelength in pixels.
    pub texture_period: f32,
    pub object_hue: f32,
    pub object_count_range: [usize; 2],
    /// Object side length (square root of area) in pixels.
    pub object_scale_range: [f32; 2],
    /// Object width over height.
    pub object_aspect_range: [f32; 2],
    pub noise_sigma: f32,
    /// Expected clutter shapes per image. Clutter is drawn under objects with
    /// hues taken from `occluder_hues`, and is never labelled.
    pub occluder_density: f32,
    pub occluder_hues: Vec<f32>,
    pub class_set: Vec<usize>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("{}.{name}", self.domain_id);
        let [cmin, cmax] = self.object_count_range;
        if cmin == 0 || cmin > cmax {
            return Err(Error::config(field("object_count_range"), "need 1 <= min <= max"));
        }
        let [smin, smax] = self.object_scale_range;
        if !(smin > 0.0 && smin <= smax) {
            return Err(Error::config(field("object_scale_range"), "need 0 < min <= max"));
        }
        let [amin, amax] = self.object_aspect_range;
        if !(amin > 0.0 && amin <= amax) {
            return Err(Error::config(field("object_aspect_range"), "need 0 < min <= max"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config(field("noise_sigma"), "must be >= 0"));
        }
        if !(self.occluder_density >= 0.0) {
            return Err(Error::config(field("occluder_density"), "must be >= 0"));
        }
        if self.occluder_density > 0.0 && self.occluder_hues.is_empty() {
            return Err(Error::config(field("occluder_hues"), "needed when occluder_density > 0"));
        }
        if self.class_set.is_empty() {
            return Err(Error::config(field("class_set"), "must not be empty"));
        }
        if !(self.texture_period > 0.0) {
            return Err(Error::config(field("texture_period"), "must be positive"));
        }
        Ok(())
    }

    pub fn background_rgb(&self) -> [f32; 3] {
        hsv_to_rgb(self.background_hue, self.background_saturation, self.background_value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    /// `[3, H, W]`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Tensor,
    pub ground_truth: Vec<GroundTruth>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The image as a `[1, 3, H, W]` batch.
    pub fn batch(&self) -> Tensor {
        let s = self.image.shape();
        self.image.clone().reshape(&[1, s[0], s[1], s[2]]).expect("3-d image")
    }
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rounds to the nearest representable 8-bit level, so PNG round trips are
/// exact.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy)]
struct Placed {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    shape: Shape,
}

impl Placed {
    fn overlaps(&self, other: &Placed) -> bool {
        self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
            && self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
    }

    fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x0 || py < self.y0 || px >= self.x0 + self.w || py >= self.y0 + self.h {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let rx = self.w as f32 / 2.0;
                let ry = self.h as f32 / 2.0;
                let dx = (px as f32 + 0.5 - self.x0 as f32 - rx) / rx;
                let dy = (py as f32 + 0.5 - self.y0 as f32 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Tight bounds of the rasterised pixels.
    fn tight_box(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for py in self.y0..self.y0 + self.h {
            for px in self.x0..self.x0 + self.w {
                if self.covers(px, py) {
                    x0 = x0.min(px);
                    y0 = y0.min(py);
                    x1 = x1.max(px + 1);
                    y1 = y1.max(py + 1);
                }
            }
        }
        BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32)
    }
}

fn sample_extent<R: rand::Rng>(spec: &DomainSpec, rng: &mut R, height: usize, width: usize) -> (usize, usize) {
    let [smin, smax] = spec.object_scale_range;
    let [amin, amax] = spec.object_aspect_range;
    let scale = if smax > smin { rng.gen_range(smin..smax) } else { smin };
    let aspect = if amax > amin { rng.gen_range(amin..amax) } else { amin };
    let w = (scale * aspect.sqrt()).round().clamp(2.0, width as f32) as usize;
    let h = (scale / aspect.sqrt()).round().clamp(2.0, height as f32) as usize;
    (w, h)
}

fn place<R: rand::Rng>(rng: &mut R, w: usize, h: usize, height: usize, width: usize) -> (usize, usize) {
    (rng.gen_range(0..=width - w), rng.gen_range(0..=height - h))
}

/// Generates sample `index` of a domain. Depends only on `(spec, seed, index)`.
pub fn generate_sample(spec: &DomainSpec, seed: u64, index: usize, image_size: (usize, usize)) -> Result<SceneSample> {
    spec.validate()?;
    let (height, width) = image_size;
    if height < 4 || width < 4 {
        return Err(Error::config("image_size", "must be at least 4x4"));
    }
    let mut rng = stream_rng(seed, "sample", index as u64);
    let [cmin, cmax] = spec.object_count_range;
    let mut count = rng.gen_range(cmin..=cmax);

    // Retry with fewer objects when the scene is too crowded.
    let objects = loop {
        let mut placed: Vec<Placed> = Vec::with_capacity(count);
        let mut failed = false;
        for _ in 0..count {
            let mut ok = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let (w, h) = sample_extent(spec, &mut rng, height, width);
                let (x0, y0) = place(&mut rng, w, h, height, width);
                let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
                let cand = Placed { x0, y0, w, h, shape };
                if placed.iter().all(|p| !p.overlaps(&cand)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                failed = true;
                break;
            }
        }
        if !failed {
            break placed;
        }
        if count <= cmin {
            return Err(Error::Validation(format!(
                "{}: cannot place {count} objects in a {height}x{width} image",
                spec.domain_id
            )));
        }
        count -= 1;
    };

    let whole = spec.occluder_density.floor() as usize;
    let clutter_count = whole + rng.gen_bool((spec.occluder_density - whole as f32) as f64) as usize;
    let mut clutter: Vec<(Placed, f32)> = Vec::new();
    for _ in 0..clutter_count {
        for _ in 0..PLACEMENT_ATTEMPTS / 4 {
            let (w, h) = sample_extent(spec, &mut rng, height, width);
            let (x0, y0) = place(&mut rng, w, h, height, width);
            let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let cand = Placed { x0, y0, w, h, shape };
            if objects.iter().all(|p| !p.overlaps(&cand)) {
                let hue = spec.occluder_hues[rng.gen_range(0..spec.occluder_hues.len())];
                clutter.push((cand, hue));
                break;
            }
        }
    }
    let classes: Vec<usize> = objects
        .iter()
        .map(|_| spec.class_set[rng.gen_range(0..spec.class_set.len())])
        .collect();

    let bg = spec.background_rgb();
    let obj = hsv_to_rgb(spec.object_hue, 0.85, 0.9);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let theta = rng.gen_range(0.0..std::f32::consts::PI);
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;

    let mut data = vec![0f32; CHANNELS * height * width];
    for py in 0..height {
        for px in 0..width {
            let mut rgb = bg;
            if spec.texture_amplitude > 0.0 {
                let t = (px as f32 * dir_x + py as f32 * dir_y) / spec.texture_period;
                let wave = spec.texture_amplitude * (std::f32::consts::TAU * t + phase).sin();
                rgb = rgb.map(|c| c + wave);
            }
            for (shape, hue) in &clutter {
                if shape.covers(px, py) {
                    rgb = hsv_to_rgb(*hue, 0.85, 0.9);
                }
            }
            for shape in &objects {
                if shape.covers(px, py) {
                    rgb = obj;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let noisy = if spec.noise_sigma > 0.0 {
                    v + noise.sample(&mut rng)
                } else {
                    *v
                };
                data[(c * height + py) * width + px] = dequantize(quantize(noisy));
            }
        }
    }

    let ground_truth = objects
        .iter()
        .zip(classes)
        .map(|(p, class_id)| GroundTruth {
            bbox: p.tight_box(),
            class_id,
        })
        .collect();
    Ok(SceneSample {
        sample_id: format!("{}-{index:05}", spec.domain_id),
        image: Tensor::new(vec![CHANNELS, height, width], data)?,
        ground_truth,
    })
}

/// `n` samples of one domain; sample `i` depends only on `(spec, seed, i)`.
pub fn generate_domain_dataset(spec: &DomainSpec, n: usize, seed: u64, image_size: (usize, usize)) -> Result<Vec<SceneSample>> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    (0..n).map(|i| generate_sample(spec, seed, i, image_size)).collect()
}
