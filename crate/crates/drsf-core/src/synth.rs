//! Procedural multi-domain image benchmark.
//!
//! Labeled scenes (colored shapes on a background) are rasterized
//! deterministically from per-image seeds, then restyled by parametric
//! transforms that shift appearance without touching the label maps. One
//! source domain, K pseudo-target domains restyling the same scenes, and
//! held-out target domains with fresh scenes and different transform
//! parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::hash::Fnv64;
use crate::rng::RngStream;

pub const FORMAT_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

/// Scene geometry and palette configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Square canvas edge in pixels.
    pub image_size: usize,
    /// Inclusive range of shapes per image.
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Background + one class per shape kind.
    pub class_count: usize,
    /// Base RGB color per class (index 0 = background).
    pub palette: [[f64; 3]; 4],
    /// Uniform per-shape color jitter amplitude.
    pub color_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 16,
            min_shapes: 1,
            max_shapes: 3,
            class_count: 4,
            palette: [
                [0.35, 0.35, 0.33], // background
                [0.85, 0.30, 0.25], // circle
                [0.25, 0.75, 0.30], // square
                [0.25, 0.35, 0.85], // triangle
            ],
            color_jitter: 0.08,
        }
    }
}

/// Shape inventory. Class id = kind index + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Label-preserving parametric appearance transform.
///
/// out = clamp(contrast·(gains⊙pixel + brightness)·(1−fog_alpha)
///             + fog_alpha·fog_color + noise), noise ~ N(0, noise_sigma²).
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransform {
    pub name: String,
    pub brightness_shift: f64,
    pub channel_gains: [f64; 3],
    pub contrast: f64,
    pub fog_alpha: f64,
    pub fog_color: [f64; 3],
    pub noise_sigma: f64,
    /// Seed of the per-domain noise stream.
    pub seed: u64,
}

impl StyleTransform {
    pub fn identity(name: &str) -> Self {
        StyleTransform {
            name: String::from(name),
            brightness_shift: 0.0,
            channel_gains: [1.0, 1.0, 1.0],
            contrast: 1.0,
            fog_alpha: 0.0,
            fog_color: [1.0, 1.0, 1.0],
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fog_alpha) {
            return Err(CoreError::InvalidArgument(format!(
                "fog_alpha {} outside [0,1)",
                self.fog_alpha
            )));
        }
        if self.contrast <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "contrast {} must be positive",
                self.contrast
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "noise_sigma {} must be nonnegative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Parameter vector used for the pseudo/target disjointness margin.
    pub fn param_vector(&self) -> [f64; 10] {
        [
            self.brightness_shift,
            self.channel_gains[0],
            self.channel_gains[1],
            self.channel_gains[2],
            self.contrast,
            self.fog_alpha,
            self.fog_color[0],
            self.fog_color[1],
            self.fog_color[2],
            self.noise_sigma,
        ]
    }

    /// L∞ distance between parameter vectors.
    pub fn distance(&self, other: &StyleTransform) -> f64 {
        self.param_vector()
            .iter()
            .zip(other.param_vector())
            .map(|(a, b)| crate::math::abs(a - b))
            .fold(0.0, f64::max)
    }
}

/// Generation record; identical manifests regenerate identical datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domain_name: String,
    pub scene_seed: u64,
    pub transform: StyleTransform,
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub content_hash: u64,
}

/// Procedurally generated labeled images of one style domain.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub manifest: DatasetManifest,
    /// N×3×H×W, row-major, values in [0,1].
    pub images: Vec<f32>,
    /// N×H×W class ids.
    pub pixel_labels: Vec<u16>,
    /// Dominant shape class per image (0 when only background).
    pub image_labels: Vec<u16>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.manifest.images
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images == 0
    }

    pub fn image(&self, idx: usize) -> &[f32] {
        let sz = CHANNELS * self.manifest.height * self.manifest.width;
        &self.images[idx * sz..(idx + 1) * sz]
    }

    pub fn labels_of(&self, idx: usize) -> &[u16] {
        let sz = self.manifest.height * self.manifest.width;
        &self.pixel_labels[idx * sz..(idx + 1) * sz]
    }

    /// FNV-1a over the little-endian image and label blocks.
    pub fn compute_content_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.update_f32_le(&self.images);
        h.update_u16_le(&self.pixel_labels);
        h.finish()
    }

    /// Mean value per channel over the whole dataset.
    pub fn channel_means(&self) -> [f64; 3] {
        let hw = self.manifest.height * self.manifest.width;
        let mut sums = [0.0f64; 3];
        for img in 0..self.manifest.images {
            for (c, sum) in sums.iter_mut().enumerate() {
                let base = (img * CHANNELS + c) * hw;
                for &v in &self.images[base..base + hw] {
                    *sum += v as f64;
                }
            }
        }
        let denom = (self.manifest.images * hw) as f64;
        [sums[0] / denom, sums[1] / denom, sums[2] / denom]
    }
}

/// A full benchmark: source train/eval splits, K pseudo-domains restyling
/// the source training scenes, and held-out targets on fresh scenes.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source_train: DomainDataset,
    pub source_eval: DomainDataset,
    pub pseudo: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
}

/// Everything needed to build a benchmark deterministically.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub source: StyleTransform,
    pub pseudo: Vec<StyleTransform>,
    pub targets: Vec<StyleTransform>,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub master_seed: u64,
    /// Required L∞ parameter distance between every target and every
    /// pseudo transform.
    pub min_transform_distance: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            scene: SceneSpec::default(),
            source: default_source_transform(),
            pseudo: default_pseudo_transforms(),
            targets: default_target_transforms(),
            train_per_domain: 2000,
            test_per_domain: 500,
            master_seed: 42,
            min_transform_distance: 0.05,
        }
    }
}

pub fn default_source_transform() -> StyleTransform {
    StyleTransform {
        noise_sigma: 0.005,
        seed: 101,
        ..StyleTransform::identity("day")
    }
}

/// K=3 pseudo-domains: dim, hazy, blue-shifted. Shifts are mostly
/// multiplicative so that darkening compresses contrast without clamping
/// away the signal.
pub fn default_pseudo_transforms() -> Vec<StyleTransform> {
    vec![
        StyleTransform {
            name: String::from("night"),
            brightness_shift: -0.08,
            channel_gains: [0.65, 0.70, 0.85],
            contrast: 0.90,
            fog_alpha: 0.0,
            fog_color: [1.0, 1.0, 1.0],
            noise_sigma: 0.02,
            seed: 201,
        },
        StyleTransform {
            name: String::from("fog"),
            brightness_shift: 0.0,
            channel_gains: [1.0, 1.0, 1.0],
            contrast: 0.85,
            fog_alpha: 0.45,
            fog_color: [0.80, 0.80, 0.82],
            noise_sigma: 0.01,
            seed: 202,
        },
        StyleTransform {
            name: String::from("dusk"),
            brightness_shift: -0.10,
            channel_gains: [0.85, 0.80, 1.15],
            contrast: 0.95,
            fog_alpha: 0.0,
            fog_color: [1.0, 1.0, 1.0],
            noise_sigma: 0.015,
            seed: 203,
        },
    ]
}

/// T=2 held-out targets: a heavier haze with different parameters than
/// the pseudo fog, and a compound fog+dim shift.
pub fn default_target_transforms() -> Vec<StyleTransform> {
    vec![
        StyleTransform {
            name: String::from("haze"),
            brightness_shift: 0.0,
            channel_gains: [1.0, 1.0, 1.0],
            contrast: 0.78,
            fog_alpha: 0.62,
            fog_color: [0.87, 0.87, 0.90],
            noise_sigma: 0.035,
            seed: 301,
        },
        StyleTransform {
            name: String::from("fog-dim"),
            brightness_shift: -0.03,
            channel_gains: [0.75, 0.75, 0.85],
            contrast: 0.80,
            fog_alpha: 0.70,
            fog_color: [0.72, 0.72, 0.78],
            noise_sigma: 0.04,
            seed: 302,
        },
    ]
}

// ---------------------------------------------------------------------------
// Scene rasterization
// ---------------------------------------------------------------------------

fn paint(
    image: &mut [f64],
    labels: &mut [u16],
    size: usize,
    x: usize,
    y: usize,
    color: &[f64; 3],
    class: u16,
) {
    let hw = size * size;
    let idx = y * size + x;
    labels[idx] = class;
    for c in 0..CHANNELS {
        image[c * hw + idx] = color[c];
    }
}

fn draw_square(
    image: &mut [f64],
    labels: &mut [u16],
    size: usize,
    x0: usize,
    y0: usize,
    extent: usize,
    color: &[f64; 3],
    class: u16,
) {
    for y in y0..y0 + extent {
        for x in x0..x0 + extent {
            paint(image, labels, size, x, y, color, class);
        }
    }
}

fn draw_circle(
    image: &mut [f64],
    labels: &mut [u16],
    size: usize,
    x0: usize,
    y0: usize,
    extent: usize,
    color: &[f64; 3],
    class: u16,
) {
    // inscribed in the bounding box [x0, x0+extent) × [y0, y0+extent)
    let r = extent as f64 / 2.0;
    let cx = x0 as f64 + r;
    let cy = y0 as f64 + r;
    for y in y0..y0 + extent {
        for x in x0..x0 + extent {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                paint(image, labels, size, x, y, color, class);
            }
        }
    }
}

fn draw_triangle(
    image: &mut [f64],
    labels: &mut [u16],
    size: usize,
    x0: usize,
    y0: usize,
    extent: usize,
    color: &[f64; 3],
    class: u16,
) {
    // apex-up isosceles triangle filling the bounding box
    let denom = (extent.saturating_sub(1)).max(1) as f64;
    let cx = x0 as f64 + extent as f64 / 2.0;
    for (row, y) in (y0..y0 + extent).enumerate() {
        let half = (row as f64 / denom) * (extent as f64 / 2.0);
        for x in x0..x0 + extent {
            let dx = x as f64 + 0.5 - cx;
            if crate::math::abs(dx) <= half {
                paint(image, labels, size, x, y, color, class);
            }
        }
    }
}

/// Rasterize one scene: shapes on a jittered background, exact per-pixel
/// class ids, later shapes painted over earlier ones.
pub fn generate_scene(spec: &SceneSpec, rng: &mut RngStream) -> (Vec<f64>, Vec<u16>) {
    let size = spec.image_size;
    let hw = size * size;
    let mut image = vec![0.0f64; CHANNELS * hw];
    let mut labels = vec![0u16; hw];

    let bg_jit = rng.uniform_in(-spec.color_jitter, spec.color_jitter);
    for c in 0..CHANNELS {
        let v = (spec.palette[0][c] + bg_jit).clamp(0.0, 1.0);
        image[c * hw..(c + 1) * hw].fill(v);
    }

    let span = (spec.max_shapes - spec.min_shapes + 1) as u64;
    let count = spec.min_shapes + rng.below(span) as usize;
    for _ in 0..count {
        let kind = match rng.below(3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let class = match kind {
            ShapeKind::Circle => 1u16,
            ShapeKind::Square => 2u16,
            ShapeKind::Triangle => 3u16,
        };
        let max_extent = (size / 2).max(4).min(size);
        let extent = 4 + rng.below((max_extent - 4 + 1) as u64) as usize;
        let x0 = rng.below((size - extent + 1) as u64) as usize;
        let y0 = rng.below((size - extent + 1) as u64) as usize;
        let base = spec.palette[class as usize];
        let mut color = [0.0f64; 3];
        for (c, col) in color.iter_mut().enumerate() {
            *col = (base[c] + rng.uniform_in(-spec.color_jitter, spec.color_jitter))
                .clamp(0.0, 1.0);
        }
        match kind {
            ShapeKind::Circle => draw_circle(&mut image, &mut labels, size, x0, y0, extent, &color, class),
            ShapeKind::Square => draw_square(&mut image, &mut labels, size, x0, y0, extent, &color, class),
            ShapeKind::Triangle => {
                draw_triangle(&mut image, &mut labels, size, x0, y0, extent, &color, class)
            }
        }
    }
    (image, labels)
}

/// Apply a style transform. Labels are untouched by construction; the
/// caller supplies the per-image noise stream.
pub fn apply_style(image: &[f64], transform: &StyleTransform, rng: &mut RngStream) -> Vec<f64> {
    let hw = image.len() / CHANNELS;
    let mut out = vec![0.0f64; image.len()];
    for c in 0..CHANNELS {
        let gain = transform.channel_gains[c];
        let fog = transform.fog_alpha * transform.fog_color[c];
        for i in 0..hw {
            let v = image[c * hw + i];
            let styled = transform.contrast * (gain * v + transform.brightness_shift)
                * (1.0 - transform.fog_alpha)
                + fog;
            let noise = if transform.noise_sigma > 0.0 {
                transform.noise_sigma * rng.normal()
            } else {
                0.0
            };
            out[c * hw + i] = (styled + noise).clamp(0.0, 1.0);
        }
    }
    out
}

fn dominant_class(labels: &[u16], class_count: usize) -> u16 {
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        counts[l as usize] += 1;
    }
    // dominant shape class; background only when no shape pixels exist
    let mut best = 0u16;
    let mut best_count = 0usize;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > best_count {
            best = c as u16;
            best_count = n;
        }
    }
    best
}

fn quantize(image: &[f64]) -> impl Iterator<Item = f32> + '_ {
    image.iter().map(|&v| v as f32)
}

/// Generate one styled domain. `scene_seed` fixes the scene content;
/// domains sharing it see identical label maps.
pub fn generate_domain(
    spec: &SceneSpec,
    transform: &StyleTransform,
    scene_seed: u64,
    count: usize,
    name: &str,
) -> Result<DomainDataset> {
    transform.validate()?;
    let size = spec.image_size;
    let hw = size * size;
    let scene_root = RngStream::new(scene_seed);
    let style_root = RngStream::new(transform.seed);
    let mut images = Vec::with_capacity(count * CHANNELS * hw);
    let mut pixel_labels = Vec::with_capacity(count * hw);
    let mut image_labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut scene_rng = scene_root.derive(i as u64);
        let (raw, labels) = generate_scene(spec, &mut scene_rng);
        let mut style_rng = style_root.derive(i as u64);
        let styled = apply_style(&raw, transform, &mut style_rng);
        images.extend(quantize(&styled));
        image_labels.push(dominant_class(&labels, spec.class_count));
        pixel_labels.extend_from_slice(&labels);
    }
    let mut ds = DomainDataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            domain_name: String::from(name),
            scene_seed,
            transform: transform.clone(),
            images: count,
            height: size,
            width: size,
            content_hash: 0,
        },
        images,
        pixel_labels,
        image_labels,
    };
    ds.manifest.content_hash = ds.compute_content_hash();
    Ok(ds)
}

fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut r = RngStream::new(master ^ tag.wrapping_mul(0x9e3779b97f4a7c15));
    r.next_u64()
}

/// Build the full benchmark. Pseudo-domains restyle the source training
/// scenes; targets get fresh scenes and must keep a parameter distance of
/// at least `min_transform_distance` from every pseudo transform.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.source.validate()?;
    for t in spec.pseudo.iter().chain(&spec.targets) {
        t.validate()?;
    }
    for target in &spec.targets {
        for pseudo in &spec.pseudo {
            let d = target.distance(pseudo);
            if d < spec.min_transform_distance {
                return Err(CoreError::DomainOverlap(format!(
                    "target {:?} is {d:.4} from pseudo {:?} (margin {})",
                    target.name, pseudo.name, spec.min_transform_distance
                )));
            }
        }
    }
    let train_scene_seed = derive_seed(spec.master_seed, 1);
    let eval_scene_seed = derive_seed(spec.master_seed, 2);
    let target_scene_seed = derive_seed(spec.master_seed, 3);

    let source_train = generate_domain(
        &spec.scene,
        &spec.source,
        train_scene_seed,
        spec.train_per_domain,
        &spec.source.name,
    )?;
    let source_eval = generate_domain(
        &spec.scene,
        &spec.source,
        eval_scene_seed,
        spec.test_per_domain,
        &format!("{}-eval", spec.source.name),
    )?;
    let mut pseudo = Vec::with_capacity(spec.pseudo.len());
    for t in &spec.pseudo {
        pseudo.push(generate_domain(
            &spec.scene,
            t,
            train_scene_seed,
            spec.train_per_domain,
            &t.name,
        )?);
    }
    let mut targets = Vec::with_capacity(spec.targets.len());
    for (i, t) in spec.targets.iter().enumerate() {
        targets.push(generate_domain(
            &spec.scene,
            t,
            derive_seed(target_scene_seed, i as u64),
            spec.test_per_domain,
            &t.name,
        )?);
    }
    Ok(Benchmark {
        source_train,
        source_eval,
        pseudo,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shapes_gives_all_background() {
        let spec = SceneSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..SceneSpec::default()
        };
        let mut rng = RngStream::new(1);
        let (_, labels) = generate_scene(&spec, &mut rng);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn centered_square_pixel_count_is_exact() {
        // rasterize a square directly and count labeled pixels
        let size = 16;
        let mut image = vec![0.0; CHANNELS * size * size];
        let mut labels = vec![0u16; size * size];
        draw_square(&mut image, &mut labels, size, 5, 5, 6, &[1.0, 0.0, 0.0], 2);
        let count = labels.iter().filter(|&&l| l == 2).count();
        assert_eq!(count, 36);
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default();
        let mut a = RngStream::new(99);
        let mut b = RngStream::new(99);
        let (ia, la) = generate_scene(&spec, &mut a);
        let (ib, lb) = generate_scene(&spec, &mut b);
        assert_eq!(la, lb);
        assert!(ia.iter().zip(&ib).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_transform_preserves_image() {
        let spec = SceneSpec::default();
        let mut rng = RngStream::new(5);
        let (image, _) = generate_scene(&spec, &mut rng);
        let identity = StyleTransform::identity("id");
        let mut style_rng = RngStream::new(0);
        let out = apply_style(&image, &identity, &mut style_rng);
        assert!(image.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn heavy_fog_approaches_fog_color() {
        let spec = SceneSpec::default();
        let mut rng = RngStream::new(5);
        let (image, _) = generate_scene(&spec, &mut rng);
        let fog = StyleTransform {
            fog_alpha: 0.999,
            fog_color: [0.6, 0.7, 0.8],
            noise_sigma: 0.0,
            ..StyleTransform::identity("whiteout")
        };
        let mut style_rng = RngStream::new(0);
        let out = apply_style(&image, &fog, &mut style_rng);
        let hw = spec.image_size * spec.image_size;
        for c in 0..CHANNELS {
            for i in 0..hw {
                assert!((out[c * hw + i] - fog.fog_color[c]).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn style_noise_is_reproducible() {
        let spec = SceneSpec::default();
        let mut rng = RngStream::new(5);
        let (image, _) = generate_scene(&spec, &mut rng);
        let noisy = StyleTransform {
            noise_sigma: 0.05,
            ..StyleTransform::identity("noisy")
        };
        let out1 = apply_style(&image, &noisy, &mut RngStream::new(77));
        let out2 = apply_style(&image, &noisy, &mut RngStream::new(77));
        assert!(out1.iter().zip(&out2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pseudo_domains_preserve_source_labels() {
        let spec = BenchmarkSpec {
            train_per_domain: 8,
            test_per_domain: 4,
            ..BenchmarkSpec::default()
        };
        let b = build_benchmark(&spec).unwrap();
        for p in &b.pseudo {
            assert_eq!(p.pixel_labels, b.source_train.pixel_labels);
            assert_eq!(p.image_labels, b.source_train.image_labels);
        }
    }

    #[test]
    fn benchmark_is_reproducible_by_hash() {
        let spec = BenchmarkSpec {
            train_per_domain: 6,
            test_per_domain: 3,
            ..BenchmarkSpec::default()
        };
        let a = build_benchmark(&spec).unwrap();
        let b = build_benchmark(&spec).unwrap();
        assert_eq!(
            a.source_train.manifest.content_hash,
            b.source_train.manifest.content_hash
        );
        for (x, y) in a.targets.iter().zip(&b.targets) {
            assert_eq!(x.manifest.content_hash, y.manifest.content_hash);
        }
        // hash actually covers the payload
        assert_eq!(a.source_train.compute_content_hash(), a.source_train.manifest.content_hash);
    }

    #[test]
    fn k_zero_benchmark_degenerates_to_source_only() {
        let spec = BenchmarkSpec {
            pseudo: vec![],
            train_per_domain: 4,
            test_per_domain: 2,
            ..BenchmarkSpec::default()
        };
        let b = build_benchmark(&spec).unwrap();
        assert!(b.pseudo.is_empty());
        assert_eq!(b.source_train.len(), 4);
    }

    #[test]
    fn overlapping_target_transform_is_rejected() {
        let mut spec = BenchmarkSpec {
            train_per_domain: 4,
            test_per_domain: 2,
            ..BenchmarkSpec::default()
        };
        spec.targets[0] = StyleTransform {
            name: String::from("too-close"),
            seed: 999,
            ..spec.pseudo[0].clone()
        };
        assert!(matches!(
            build_benchmark(&spec),
            Err(CoreError::DomainOverlap(_))
        ));
    }

    #[test]
    fn default_transforms_respect_margin() {
        let spec = BenchmarkSpec::default();
        for t in &spec.targets {
            for p in &spec.pseudo {
                assert!(
                    t.distance(p) >= spec.min_transform_distance,
                    "{} vs {}",
                    t.name,
                    p.name
                );
            }
        }
    }

    #[test]
    fn style_separation_between_domains() {
        let spec = BenchmarkSpec {
            train_per_domain: 32,
            test_per_domain: 16,
            ..BenchmarkSpec::default()
        };
        let b = build_benchmark(&spec).unwrap();
        let mut domains = vec![&b.source_train];
        domains.extend(b.pseudo.iter());
        domains.extend(b.targets.iter());
        let margin = 0.02;
        for i in 0..domains.len() {
            for j in i + 1..domains.len() {
                let a = domains[i].channel_means();
                let c = domains[j].channel_means();
                let dist = a
                    .iter()
                    .zip(&c)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(
                    dist >= margin,
                    "domains {} and {} differ by only {dist}",
                    domains[i].manifest.domain_name,
                    domains[j].manifest.domain_name
                );
            }
        }
    }

    #[test]
    fn dominant_class_rules() {
        // ties break toward the lower class id; background only when no
        // shape pixels exist
        assert_eq!(dominant_class(&[0, 0, 0, 0], 4), 0);
        assert_eq!(dominant_class(&[0, 1, 2, 0], 4), 1);
        assert_eq!(dominant_class(&[3, 3, 1, 0], 4), 3);
    }
}
