//! Procedurally generated shapes datasets with exact ground-truth masks,
//! plus persistence and the corruption ladder used by the robustness
//! experiment.
//!
//! Scenes are colored geometric shapes on a textured value-noise
//! background. Shape color is drawn from one shared palette independently
//! of the class, so raw RGB alone cannot identify the shape class; the
//! class is carried by geometry. Shapes are rasterized by exact
//! membership tests at pixel centers (no anti-aliasing), so masks are
//! unambiguous at boundaries.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::num::Pixel;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An image in [-1, 1] with an integer class mask.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    /// [3, H, W], values in [-1, 1]
    pub pixels: Tensor<Pixel>,
    pub mask: Mask,
    pub class_count: usize,
}

impl LabeledImage {
    pub fn resolution(&self) -> usize {
        self.pixels.hw().0
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.pixels.hw();
        if self.mask.height != h || self.mask.width != w {
            return Err(Error::dimension(
                format!("mask {h}x{w}"),
                format!("{}x{}", self.mask.height, self.mask.width),
            ));
        }
        if self.mask.labels.iter().any(|&v| v as usize >= self.class_count) {
            return Err(Error::config(format!(
                "mask label >= class_count {}",
                self.class_count
            )));
        }
        if !self.pixels.all_finite()
            || self.pixels.data().iter().any(|&v| !(-1.0..=1.0).contains(&v))
        {
            return Err(Error::config("pixels outside [-1, 1]"));
        }
        Ok(())
    }
}

/// Labeled train, unlabeled pool, labeled test.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled_train: Vec<LabeledImage>,
    pub unlabeled: Vec<Tensor<Pixel>>,
    pub test: Vec<LabeledImage>,
    pub class_count: usize,
    pub resolution: usize,
    pub class_names: Vec<String>,
    pub generator_seed: u64,
}

impl DatasetSplit {
    /// Splits generated images in order: first `n_train` labeled for
    /// training, last `n_test` labeled for evaluation, the middle kept as
    /// the unlabeled pool.
    pub fn from_images(
        images: Vec<LabeledImage>,
        n_train: usize,
        n_test: usize,
        generator_seed: u64,
    ) -> Result<Self> {
        if images.is_empty() || n_train + n_test > images.len() {
            return Err(Error::config(format!(
                "split sizes {n_train}+{n_test} exceed {} images",
                images.len()
            )));
        }
        let class_count = images[0].class_count;
        let resolution = images[0].resolution();
        let mut iter = images.into_iter();
        let labeled_train: Vec<LabeledImage> = iter.by_ref().take(n_train).collect();
        let rest: Vec<LabeledImage> = iter.collect();
        let n_unlabeled = rest.len() - n_test;
        let mut unlabeled = Vec::with_capacity(n_unlabeled);
        let mut test = Vec::with_capacity(n_test);
        for (i, img) in rest.into_iter().enumerate() {
            if i < n_unlabeled {
                unlabeled.push(img.pixels);
            } else {
                test.push(img);
            }
        }
        Ok(DatasetSplit {
            labeled_train,
            unlabeled,
            test,
            class_count,
            resolution,
            class_names: class_names(class_count),
            generator_seed,
        })
    }

    /// Labeled-train plus unlabeled images, labels dropped; the diffusion
    /// model trains unsupervised on this pool. Test images stay out.
    pub fn training_pool(&self) -> Vec<&Tensor<Pixel>> {
        let mut v: Vec<&Tensor<Pixel>> =
            self.labeled_train.iter().map(|im| &im.pixels).collect();
        v.extend(self.unlabeled.iter());
        v
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Stripe,
    Diamond,
    Ring,
    Cross,
    Hexagon,
}

const SHAPE_KINDS: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Stripe,
    ShapeKind::Diamond,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Hexagon,
];

const SHAPE_NAMES: [&str; 8] = [
    "circle", "square", "triangle", "stripe", "diamond", "ring", "cross", "hexagon",
];

pub fn class_names(class_count: usize) -> Vec<String> {
    let mut names = vec!["background".to_string()];
    for i in 0..class_count - 1 {
        names.push(SHAPE_NAMES[i].to_string());
    }
    names
}

/// Placement of one shape in a scene. Class index = kind index + 1.
#[derive(Clone, Debug)]
pub struct ShapeSpec {
    kind_index: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    color: [f64; 3],
}

const PALETTE: [[f64; 3]; 6] = [
    [0.90, -0.60, -0.60],
    [-0.60, 0.85, -0.55],
    [-0.50, -0.50, 0.90],
    [0.90, 0.85, -0.60],
    [0.85, -0.55, 0.85],
    [-0.55, 0.85, 0.90],
];

fn rotate(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

impl ShapeSpec {
    fn covers(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let r = self.radius;
        match SHAPE_KINDS[self.kind_index] {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => {
                let (u, v) = rotate(dx, dy, self.rotation);
                u.abs() <= r && v.abs() <= r
            }
            ShapeKind::Triangle => {
                // equilateral triangle with circumradius r
                let mut verts = [(0.0, 0.0); 3];
                for (k, vert) in verts.iter_mut().enumerate() {
                    let a = self.rotation + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                    *vert = (self.cx + r * a.cos(), self.cy + r * a.sin());
                }
                let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
                };
                let p = (px, py);
                let d1 = sign(p, verts[0], verts[1]);
                let d2 = sign(p, verts[1], verts[2]);
                let d3 = sign(p, verts[2], verts[0]);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            ShapeKind::Stripe => {
                let (u, v) = rotate(dx, dy, self.rotation);
                v.abs() <= r * 0.28 && u.abs() <= r * 1.45
            }
            ShapeKind::Diamond => {
                let (u, v) = rotate(dx, dy, self.rotation + std::f64::consts::FRAC_PI_4);
                u.abs() <= r * 0.85 && v.abs() <= r * 0.85
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Cross => {
                let (u, v) = rotate(dx, dy, self.rotation);
                (u.abs() <= r * 0.35 && v.abs() <= r) || (v.abs() <= r * 0.35 && u.abs() <= r)
            }
            ShapeKind::Hexagon => {
                let (u, v) = rotate(dx, dy, self.rotation);
                // regular hexagon, circumradius r
                let q2x = u.abs();
                let q2y = v.abs();
                let s = r * 0.866_025_403_784_438_6; // r * sqrt(3)/2
                q2x <= s && q2y <= r && s * q2y + 0.5 * r * q2x <= s * r
            }
        }
    }

    fn class(&self) -> u8 {
        (self.kind_index + 1) as u8
    }
}

/// Per-kind radius scaling; classes deliberately differ in mean area so
/// the area-stratified analysis has signal to find.
fn kind_radius_scale(kind_index: usize) -> f64 {
    match SHAPE_KINDS[kind_index] {
        ShapeKind::Circle => 1.0,
        ShapeKind::Square => 0.95,
        ShapeKind::Triangle => 0.80,
        ShapeKind::Stripe => 1.10,
        ShapeKind::Diamond => 0.95,
        ShapeKind::Ring => 1.00,
        ShapeKind::Cross => 1.00,
        ShapeKind::Hexagon => 0.95,
    }
}

/// Render a scene from explicit shape placements. The mask assigns each
/// pixel the class of the topmost (last listed) covering shape, else 0.
pub fn render_scene(resolution: usize, shapes: &[ShapeSpec], bg_seed: u64) -> LabeledImage {
    let r = resolution;
    let mut rng = Rng::new(bg_seed);

    // textured background: bilinear value noise over a coarse lattice
    let lattice = 8usize;
    let mut lat = vec![[0.0f64; 3]; (lattice + 1) * (lattice + 1)];
    for cell in lat.iter_mut() {
        let base = rng.range_f64(-0.55, 0.05);
        for (c, v) in cell.iter_mut().enumerate() {
            *v = base + rng.range_f64(-0.12, 0.12) + 0.02 * c as f64;
        }
    }
    let mut pixels = Tensor::<Pixel>::zeros(&[3, r, r]);
    let mut mask = Mask::filled(r, r, 0);
    let max_class = shapes.iter().map(|s| s.class()).max().unwrap_or(0);
    let scale = lattice as f64 / r as f64;
    for y in 0..r {
        for x in 0..r {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            // topmost covering shape wins
            let mut color: Option<[f64; 3]> = None;
            for s in shapes.iter().rev() {
                if s.covers(px, py) {
                    mask.labels[y * r + x] = s.class();
                    color = Some(s.color);
                    break;
                }
            }
            let rgb = match color {
                Some(c) => {
                    // slight per-pixel fill jitter
                    let j = rng.range_f64(-0.03, 0.03);
                    [c[0] + j, c[1] + j, c[2] + j]
                }
                None => {
                    let gx = (px * scale).min(lattice as f64 - 1e-9);
                    let gy = (py * scale).min(lattice as f64 - 1e-9);
                    let x0 = gx.floor() as usize;
                    let y0 = gy.floor() as usize;
                    let fx = gx - x0 as f64;
                    let fy = gy - y0 as f64;
                    let mut rgb = [0.0; 3];
                    for (c, v) in rgb.iter_mut().enumerate() {
                        let a = lat[y0 * (lattice + 1) + x0][c];
                        let b = lat[y0 * (lattice + 1) + x0 + 1][c];
                        let d = lat[(y0 + 1) * (lattice + 1) + x0][c];
                        let e = lat[(y0 + 1) * (lattice + 1) + x0 + 1][c];
                        let top = a + (b - a) * fx;
                        let bot = d + (e - d) * fx;
                        *v = top + (bot - top) * fy + rng.range_f64(-0.04, 0.04);
                    }
                    rgb
                }
            };
            for c in 0..3 {
                pixels.channel_mut(c)[y * r + x] = rgb[c].clamp(-1.0, 1.0) as Pixel;
            }
        }
    }
    LabeledImage {
        pixels,
        mask,
        class_count: (max_class as usize + 1).max(2),
    }
}

fn check_generation_params(resolution: usize, class_count: usize) -> Result<()> {
    if resolution < 16 || resolution % 8 != 0 {
        return Err(Error::config(format!(
            "resolution {resolution} must be >= 16 and divisible by 8 (UNet downsampling)"
        )));
    }
    if class_count < 3 {
        return Err(Error::config(
            "class_count must be >= 3 (background plus at least two shape classes)",
        ));
    }
    if class_count > SHAPE_KINDS.len() + 1 {
        return Err(Error::config(format!(
            "class_count {class_count} exceeds supported maximum {}",
            SHAPE_KINDS.len() + 1
        )));
    }
    Ok(())
}

fn generate_one(resolution: usize, class_count: usize, image_seed: u64) -> LabeledImage {
    let mut rng = Rng::new(derive_seed(image_seed, "scene", 0));
    let n_kinds = class_count - 1;
    let n_shapes = rng.range_usize(1, 4);
    let res = resolution as f64;
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    let min_center_dist = res / 8.0;
    for _ in 0..n_shapes {
        let kind_index = rng.below(n_kinds);
        let base_radius = rng.range_f64(res * 0.14, res * 0.27);
        let radius = base_radius * kind_radius_scale(kind_index);
        let margin = res * 0.12;
        let mut cx = rng.range_f64(margin, res - margin);
        let mut cy = rng.range_f64(margin, res - margin);
        for _try in 0..50 {
            let ok = shapes.iter().all(|s| {
                let d2 = (s.cx - cx) * (s.cx - cx) + (s.cy - cy) * (s.cy - cy);
                d2 >= min_center_dist * min_center_dist
            });
            if ok {
                break;
            }
            cx = rng.range_f64(margin, res - margin);
            cy = rng.range_f64(margin, res - margin);
        }
        let rotation = match SHAPE_KINDS[kind_index] {
            // axis-aligned with jitter keeps square and diamond distinct
            ShapeKind::Square | ShapeKind::Diamond | ShapeKind::Cross => {
                rng.range_f64(-0.26, 0.26)
            }
            _ => rng.range_f64(0.0, std::f64::consts::PI * 2.0),
        };
        let mut color = PALETTE[rng.below(PALETTE.len())];
        for c in color.iter_mut() {
            *c = (*c + rng.range_f64(-0.06, 0.06)).clamp(-1.0, 1.0);
        }
        shapes.push(ShapeSpec {
            kind_index,
            cx,
            cy,
            radius,
            rotation,
            color,
        });
    }
    let mut img = render_scene(resolution, &shapes, derive_seed(image_seed, "background", 0));
    img.class_count = class_count;
    img
}

/// Deterministic dataset generation: a pure function of
/// (count, resolution, class_count, seed).
pub fn generate_shapes_dataset(
    count: usize,
    resolution: usize,
    class_count: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    check_generation_params(resolution, class_count)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(generate_one(
            resolution,
            class_count,
            derive_seed(seed, "image", i as u64),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    resolution: usize,
    class_count: usize,
    class_names: Vec<String>,
    generator_seed: u64,
    labeled_train: Vec<String>,
    unlabeled: Vec<String>,
    test: Vec<String>,
}

/// Quantize [-1, 1] to u8. Round-trip error is at most 1/255.
pub fn quantize(v: Pixel) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(q: u8) -> Pixel {
    (q as f64 / 127.5 - 1.0) as Pixel
}

fn image_to_png(pixels: &Tensor<Pixel>) -> image::RgbImage {
    let (h, w) = pixels.hw();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                quantize(pixels.channel(0)[y * w + x]),
                quantize(pixels.channel(1)[y * w + x]),
                quantize(pixels.channel(2)[y * w + x]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img
}

fn png_to_image(img: &image::RgbImage) -> Tensor<Pixel> {
    let (w, h) = img.dimensions();
    let mut t = Tensor::zeros(&[3, h as usize, w as usize]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                t.channel_mut(c)[(y * w + x) as usize] = dequantize(p.0[c]);
            }
        }
    }
    t
}

fn mask_to_png(mask: &Mask) -> image::GrayImage {
    let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Luma([mask.labels[y * mask.width + x]]),
            );
        }
    }
    img
}

fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load one RGB png from disk into a [-1, 1] tensor.
pub fn load_rgb(path: &Path) -> Result<Tensor<Pixel>> {
    let img = image::open(path)
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))?;
    Ok(png_to_image(&img.to_rgb8()))
}

/// Persist a [-1, 1] tensor as an 8-bit RGB png.
pub fn save_rgb(pixels: &Tensor<Pixel>, path: &Path) -> Result<()> {
    save_png(&image::DynamicImage::ImageRgb8(image_to_png(pixels)), path)
}

/// Persist a class mask as an 8-bit single-channel png.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    save_png(&image::DynamicImage::ImageLuma8(mask_to_png(mask)), path)
}

/// Directory layout: images/{id}.png (8-bit RGB), masks/{id}.png (8-bit
/// single channel, value = class index), manifest.json.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&masks_dir)
        .map_err(|e| Error::io(masks_dir.display().to_string(), e))?;

    let mut manifest = Manifest {
        resolution: split.resolution,
        class_count: split.class_count,
        class_names: split.class_names.clone(),
        generator_seed: split.generator_seed,
        labeled_train: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
    };
    let mut next_id = 0usize;
    let mut fresh_id = move || {
        let id = format!("img_{next_id:05}");
        next_id += 1;
        id
    };
    for im in &split.labeled_train {
        let id = fresh_id();
        save_rgb(&im.pixels, &images_dir.join(format!("{id}.png")))?;
        save_mask(&im.mask, &masks_dir.join(format!("{id}.png")))?;
        manifest.labeled_train.push(id);
    }
    for px in &split.unlabeled {
        let id = fresh_id();
        save_rgb(px, &images_dir.join(format!("{id}.png")))?;
        manifest.unlabeled.push(id);
    }
    for im in &split.test {
        let id = fresh_id();
        save_rgb(&im.pixels, &images_dir.join(format!("{id}.png")))?;
        save_mask(&im.mask, &masks_dir.join(format!("{id}.png")))?;
        manifest.test.push(id);
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))
}

fn load_mask_file(path: &Path, class_count: usize, resolution: usize) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::load(path.display().to_string(), e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (resolution, resolution) {
        return Err(Error::load(
            path.display().to_string(),
            format!("mask is {w}x{h}, expected {resolution}x{resolution}"),
        ));
    }
    let labels: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= class_count) {
        return Err(Error::load(
            path.display().to_string(),
            format!("mask value {bad} >= class_count {class_count}"),
        ));
    }
    Mask::new(h as usize, w as usize, labels)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| {
        Error::load(manifest_path.display().to_string(), "missing manifest.json")
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;

    let load_labeled = |id: &String| -> Result<LabeledImage> {
        let img_path = dir.join("images").join(format!("{id}.png"));
        let pixels = load_rgb(&img_path)?;
        let (h, w) = pixels.hw();
        if (h, w) != (manifest.resolution, manifest.resolution) {
            return Err(Error::load(
                img_path.display().to_string(),
                format!("image is {w}x{h}, expected {0}x{0}", manifest.resolution),
            ));
        }
        let mask = load_mask_file(
            &dir.join("masks").join(format!("{id}.png")),
            manifest.class_count,
            manifest.resolution,
        )?;
        Ok(LabeledImage {
            pixels,
            mask,
            class_count: manifest.class_count,
        })
    };

    let labeled_train: Result<Vec<_>> = manifest.labeled_train.iter().map(load_labeled).collect();
    let test: Result<Vec<_>> = manifest.test.iter().map(load_labeled).collect();
    let unlabeled: Result<Vec<_>> = manifest
        .unlabeled
        .iter()
        .map(|id| load_rgb(&dir.join("images").join(format!("{id}.png"))))
        .collect();

    Ok(DatasetSplit {
        labeled_train: labeled_train?,
        unlabeled: unlabeled?,
        test: test?,
        class_count: manifest.class_count,
        resolution: manifest.resolution,
        class_names: manifest.class_names,
        generator_seed: manifest.generator_seed,
    })
}

// ---------------------------------------------------------------------------
// corruptions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::GaussianBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
    CorruptionKind::Pixelate,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("severity {severity} outside 1..=5")));
        }
        Ok(CorruptionSpec { kind, severity })
    }
}

/// Severity parameter tables. The corruption benchmark the experiment
/// mirrors does not publish its parameterization, so these values are
/// versioned here; pixel values live in [-1, 1].
pub mod severity_tables {
    pub const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.14, 0.20, 0.28];
    pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.8, 1.2, 1.7, 2.4];
    pub const BRIGHTNESS_DELTA: [f64; 5] = [0.12, 0.22, 0.32, 0.42, 0.55];
    pub const CONTRAST_FACTOR: [f64; 5] = [0.80, 0.65, 0.50, 0.35, 0.22];
    pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];
}

/// Scalar parameter for a (kind, severity) pair.
pub fn severity_param(kind: CorruptionKind, severity: u8) -> f64 {
    let i = (severity - 1) as usize;
    match kind {
        CorruptionKind::GaussianNoise => severity_tables::NOISE_STD[i],
        CorruptionKind::GaussianBlur => severity_tables::BLUR_SIGMA[i],
        CorruptionKind::Brightness => severity_tables::BRIGHTNESS_DELTA[i],
        CorruptionKind::Contrast => severity_tables::CONTRAST_FACTOR[i],
        CorruptionKind::Pixelate => severity_tables::PIXELATE_BLOCK[i] as f64,
    }
}

/// Corrupt pixels with an explicit parameter value (tests use this to
/// override the severity tables). The mask is never touched.
pub fn corrupt_with_param(
    image: &LabeledImage,
    kind: CorruptionKind,
    param: f64,
    seed: u64,
) -> LabeledImage {
    let (h, w) = image.pixels.hw();
    let mut px = image.pixels.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = Rng::new(derive_seed(seed, "corrupt-noise", 0));
            for v in px.data_mut() {
                *v += (param * rng.normal_f64()) as Pixel;
            }
        }
        CorruptionKind::GaussianBlur => {
            if param > 0.0 {
                let radius = (3.0 * param).ceil() as isize;
                let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
                for i in -radius..=radius {
                    kernel.push((-(i as f64 * i as f64) / (2.0 * param * param)).exp());
                }
                let ksum: f64 = kernel.iter().sum();
                for k in kernel.iter_mut() {
                    *k /= ksum;
                }
                for c in 0..3 {
                    let plane = px.channel(c).to_vec();
                    // horizontal then vertical pass with clamped borders
                    let mut tmp = vec![0.0f64; h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for (ki, kv) in kernel.iter().enumerate() {
                                let xx = (x as isize + ki as isize - radius)
                                    .clamp(0, w as isize - 1)
                                    as usize;
                                acc += kv * plane[y * w + xx] as f64;
                            }
                            tmp[y * w + x] = acc;
                        }
                    }
                    let out = px.channel_mut(c);
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for (ki, kv) in kernel.iter().enumerate() {
                                let yy = (y as isize + ki as isize - radius)
                                    .clamp(0, h as isize - 1)
                                    as usize;
                                acc += kv * tmp[yy * w + x];
                            }
                            out[y * w + x] = acc as Pixel;
                        }
                    }
                }
            }
        }
        CorruptionKind::Brightness => {
            for v in px.data_mut() {
                *v += param as Pixel;
            }
        }
        CorruptionKind::Contrast => {
            for c in 0..3 {
                let plane = px.channel_mut(c);
                let mean: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                for v in plane.iter_mut() {
                    *v = (mean + (*v as f64 - mean) * param) as Pixel;
                }
            }
        }
        CorruptionKind::Pixelate => {
            let block = param as usize;
            if block > 1 {
                for c in 0..3 {
                    let plane = px.channel_mut(c);
                    for by in (0..h).step_by(block) {
                        for bx in (0..w).step_by(block) {
                            let y_end = (by + block).min(h);
                            let x_end = (bx + block).min(w);
                            let mut acc = 0.0f64;
                            let mut n = 0usize;
                            for y in by..y_end {
                                for x in bx..x_end {
                                    acc += plane[y * w + x] as f64;
                                    n += 1;
                                }
                            }
                            let avg = (acc / n as f64) as Pixel;
                            for y in by..y_end {
                                for x in bx..x_end {
                                    plane[y * w + x] = avg;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for v in px.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    LabeledImage {
        pixels: px,
        mask: image.mask.clone(),
        class_count: image.class_count,
    }
}

/// Corrupt an image per the versioned severity tables. Deterministic given
/// the seed; the mask and spatial dims are unchanged.
pub fn corrupt(image: &LabeledImage, spec: CorruptionSpec, seed: u64) -> LabeledImage {
    corrupt_with_param(image, spec.kind, severity_param(spec.kind, spec.severity), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes_dataset(1, 32, 3, 7).unwrap();
        let b = generate_shapes_dataset(1, 32, 3, 7).unwrap();
        assert_eq!(a[0].pixels.data(), b[0].pixels.data());
        assert_eq!(a[0].mask, b[0].mask);
    }

    #[test]
    fn empty_scene_is_all_background() {
        let img = render_scene(32, &[], 5);
        assert!(img.mask.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn invalid_generation_params_rejected() {
        assert!(generate_shapes_dataset(1, 30, 3, 0).is_err()); // not divisible by 8
        assert!(generate_shapes_dataset(1, 8, 3, 0).is_err()); // too small
        assert!(generate_shapes_dataset(1, 32, 2, 0).is_err()); // K < 3
        assert!(generate_shapes_dataset(1, 32, 10, 0).is_err()); // K > kinds+1
    }

    #[test]
    fn all_classes_appear_across_dataset() {
        // brute-force scan of generated masks
        let images = generate_shapes_dataset(200, 64, 5, 1).unwrap();
        let mut seen = BTreeSet::new();
        for im in &images {
            for &v in &im.mask.labels {
                seen.insert(v);
            }
        }
        assert_eq!(seen, BTreeSet::from([0u8, 1, 2, 3, 4]));
    }

    #[test]
    fn generated_images_validate() {
        for im in generate_shapes_dataset(10, 32, 5, 3).unwrap() {
            im.validate().unwrap();
        }
    }

    #[test]
    fn roundtrip_masks_identical_pixels_close() {
        let images = generate_shapes_dataset(3, 32, 4, 11).unwrap();
        let split = DatasetSplit::from_images(images, 1, 1, 11).unwrap();
        let dir = std::env::temp_dir().join(format!("dseg_synth_rt_{}", std::process::id()));
        save_dataset(&split, &dir).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.labeled_train.len(), 1);
        assert_eq!(loaded.unlabeled.len(), 1);
        assert_eq!(loaded.test.len(), 1);
        assert_eq!(loaded.labeled_train[0].mask, split.labeled_train[0].mask);
        // brute-force max-error scan of the quantization round trip
        let mut max_err = 0.0f32;
        for (a, b) in split.labeled_train[0]
            .pixels
            .data()
            .iter()
            .zip(loaded.labeled_train[0].pixels.data().iter())
        {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err <= 1.0 / 127.0, "max quantization error {max_err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_out_of_range_mask() {
        let images = generate_shapes_dataset(2, 32, 3, 2).unwrap();
        let split = DatasetSplit::from_images(images, 1, 1, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("dseg_synth_bad_{}", std::process::id()));
        save_dataset(&split, &dir).unwrap();
        // tamper: write a mask value beyond class_count
        let bad = image::GrayImage::from_pixel(32, 32, image::Luma([4u8]));
        bad.save(dir.join("masks/img_00000.png")).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img_00000"), "{msg}");
        assert!(msg.contains("class_count"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_without_manifest_fails() {
        let dir = std::env::temp_dir().join(format!("dseg_synth_none_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let err = load_dataset(&dir).unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn quantize_roundtrip_bound() {
        // exhaustive over the u8 code book plus a dense sweep
        for q in 0u8..=255 {
            let v = dequantize(q);
            assert_eq!(quantize(v), q);
        }
        let mut v = -1.0f32;
        while v <= 1.0 {
            let err = (dequantize(quantize(v)) - v).abs();
            assert!(err <= 1.0 / 127.0, "v={v} err={err}");
            v += 0.001;
        }
    }

    #[test]
    fn corruption_preserves_mask_and_dims() {
        let img = &generate_shapes_dataset(1, 32, 5, 9).unwrap()[0];
        for kind in ALL_CORRUPTIONS {
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                let c = corrupt(img, spec, 42);
                assert_eq!(c.mask, img.mask, "{kind:?} sev {sev}");
                assert_eq!(c.pixels.shape(), img.pixels.shape());
                assert!(c.pixels.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_noise_override_is_identity() {
        let img = &generate_shapes_dataset(1, 32, 3, 13).unwrap()[0];
        let c = corrupt_with_param(img, CorruptionKind::GaussianNoise, 0.0, 1);
        assert_eq!(c.pixels.data(), img.pixels.data());
    }

    #[test]
    fn corruption_is_deterministic_given_seed() {
        let img = &generate_shapes_dataset(1, 32, 3, 17).unwrap()[0];
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        let a = corrupt(img, spec, 5);
        let b = corrupt(img, spec, 5);
        assert_eq!(a.pixels.data(), b.pixels.data());
        let c = corrupt(img, spec, 6);
        assert!(a.pixels.l2_distance(&c.pixels) > 0.0);
    }

    #[test]
    fn gaussian_noise_distortion_monotone_in_severity() {
        let img = &generate_shapes_dataset(1, 32, 5, 23).unwrap()[0];
        let mut prev = 0.0f64;
        for sev in 1..=5u8 {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, sev).unwrap();
            let mut mean_l2 = 0.0;
            for s in 0..10u64 {
                mean_l2 += img.pixels.l2_distance(&corrupt(img, spec, s).pixels);
            }
            mean_l2 /= 10.0;
            assert!(mean_l2 >= prev, "severity {sev}: {mean_l2} < {prev}");
            prev = mean_l2;
        }
    }

    #[test]
    fn severity_five_strictly_exceeds_one_for_every_kind() {
        let img = &generate_shapes_dataset(1, 32, 5, 29).unwrap()[0];
        for kind in ALL_CORRUPTIONS {
            let mut l2 = [0.0f64; 2];
            for (i, sev) in [1u8, 5].into_iter().enumerate() {
                let spec = CorruptionSpec::new(kind, sev).unwrap();
                for s in 0..10u64 {
                    l2[i] += img.pixels.l2_distance(&corrupt(img, spec, s).pixels);
                }
                l2[i] /= 10.0;
            }
            assert!(l2[1] > l2[0], "{kind:?}: sev5 {} <= sev1 {}", l2[1], l2[0]);
        }
    }

    #[test]
    fn bad_severity_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::Brightness, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Brightness, 6).is_err());
    }
}
