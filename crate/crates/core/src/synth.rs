//! Procedural stereo scene and rain synthesis.
//!
//! Scenes are flat-shaded primitives (rectangles, ellipses) at assigned
//! depths over a constant background, rendered into a rectified stereo pair
//! by the pinhole relation `disparity = focal_length_px · baseline / depth`.
//! Geometry is specified in a canonical mid-view; each view shifts a surface
//! horizontally by ±disparity/2. Rain streaks are straight segments with a
//! Gaussian cross-section, rendered per view with the same relation — a
//! nearby streak is displaced much further between views than the scene
//! behind it, and can leave one view entirely (contributing an all-zero
//! layer there).
//!
//! Every value is a pure function of (seed, config, rig): per-sample RNG
//! streams are derived from the master seed and the sample index, so sample
//! `i` is the same no matter how many samples surround it.
//!
//! Color ties to class: each class owns a palette color; object albedo is
//! the class color plus a small per-object jitter. Segmentation is therefore
//! learnable from appearance, and label/image consistency is exact by
//! construction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};

/// A rectified stereo camera pair.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub focal_length_px: f64,
    /// Inter-camera distance in scene units. Zero is permitted as the
    /// degenerate "both views identical" rig used by symmetry tests.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    /// Desk-scale default: 128×128 images with focal·baseline = 100, so a
    /// surface at depth d has disparity 100/d pixels.
    pub fn desk_default() -> Self {
        CameraRig {
            focal_length_px: 100.0,
            baseline: 1.0,
            width: 128,
            height: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length_px > 0.0) {
            return Err(Error::Config(format!(
                "focal_length_px must be positive, got {}",
                self.focal_length_px
            )));
        }
        if !(self.baseline >= 0.0) {
            return Err(Error::Config(format!(
                "baseline must be nonnegative, got {}",
                self.baseline
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "image size must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Horizontal disparity in pixels of a surface at the given depth.
    pub fn disparity(&self, depth: f64) -> f64 {
        self.focal_length_px * self.baseline / depth
    }
}

/// Left or right view of the rig.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

impl View {
    /// Horizontal shift applied to a surface of the given disparity in this
    /// view (geometry lives in the canonical mid-view).
    fn shift(self, disparity: f64) -> f64 {
        match self {
            View::Left => disparity / 2.0,
            View::Right => -disparity / 2.0,
        }
    }

    /// Short file-name tag ("L" / "R"), matching the dataset layout.
    pub fn tag(self) -> &'static str {
        match self {
            View::Left => "L",
            View::Right => "R",
        }
    }
}

/// Flat-shaded primitive in normalized mid-view coordinates (x, y ∈ [0,1],
/// sizes relative to the image's smaller side).
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum ShapePrimitive {
    Rect {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
}

impl ShapePrimitive {
    /// Membership test at a point given in *pixel* coordinates relative to
    /// the shape's pixel-space center (i.e. already shifted per view).
    fn contains(&self, dx: f64, dy: f64, min_side: f64) -> bool {
        match *self {
            ShapePrimitive::Rect { half_w, half_h, .. } => {
                dx.abs() <= half_w * min_side && dy.abs() <= half_h * min_side
            }
            ShapePrimitive::Ellipse { rx, ry, .. } => {
                let nx = dx / (rx * min_side);
                let ny = dy / (ry * min_side);
                nx * nx + ny * ny <= 1.0
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            ShapePrimitive::Rect { cx, cy, .. } | ShapePrimitive::Ellipse { cx, cy, .. } => {
                (cx, cy)
            }
        }
    }
}

/// One scene surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapePrimitive,
    pub depth: f64,
    pub class_id: u8,
    pub albedo: [f32; 3],
}

/// A full procedural scene: surfaces plus a constant background at infinity
/// (disparity 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background_class: u8,
    pub background_albedo: [f32; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.depth > 0.0) {
                return Err(Error::Config(format!(
                    "object {i} has non-positive depth {}",
                    o.depth
                )));
            }
            if o.class_id as usize >= classes {
                return Err(Error::Config(format!(
                    "object {i} class {} out of range for {classes} classes",
                    o.class_id
                )));
            }
        }
        if self.background_class as usize >= classes {
            return Err(Error::Config(format!(
                "background class {} out of range for {classes} classes",
                self.background_class
            )));
        }
        Ok(())
    }
}

/// Scene generation parameters.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            classes: 8,
            objects_min: 4,
            objects_max: 8,
            depth_min: 5.0,
            depth_max: 50.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!(
                "class count must be in [2, 256], got {}",
                self.classes
            )));
        }
        if self.objects_min < 1 || self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "object count range [{}, {}] invalid",
                self.objects_min, self.objects_max
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] invalid",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }
}

/// Fixed palette color of a class: evenly spaced hues at full saturation,
/// deterministic in (class, class count).
pub fn class_color(class: usize, classes: usize) -> [f32; 3] {
    let h = class as f64 / classes as f64 * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (v, p) = (0.85f64, 0.15f64);
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn jittered_albedo(rng: &mut ChaCha8Rng, class: usize, classes: usize) -> [f32; 3] {
    let base = class_color(class, classes);
    let mut out = [0f32; 3];
    for (o, &c) in out.iter_mut().zip(base.iter()) {
        let jitter = rng.random_range(-0.08f64..0.08);
        *o = ((c as f64 + jitter).clamp(0.05, 0.95)) as f32;
    }
    out
}

fn generate_scene_with(rng: &mut ChaCha8Rng, seed: u64, config: &SceneConfig) -> SceneSpec {
    let count = rng.random_range(config.objects_min..=config.objects_max);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = rng.random_range(0.1..0.9);
        let cy = rng.random_range(0.1..0.9);
        let kind: u8 = rng.random_range(0..2);
        let shape = if kind == 0 {
            ShapePrimitive::Rect {
                cx,
                cy,
                half_w: rng.random_range(0.05..0.22),
                half_h: rng.random_range(0.05..0.22),
            }
        } else {
            ShapePrimitive::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.05..0.22),
                ry: rng.random_range(0.05..0.22),
            }
        };
        let depth = rng.random_range(config.depth_min..=config.depth_max);
        let class_id = rng.random_range(0..config.classes) as u8;
        let albedo = jittered_albedo(rng, class_id as usize, config.classes);
        objects.push(SceneObject {
            shape,
            depth,
            class_id,
            albedo,
        });
    }
    let background_class = rng.random_range(0..config.classes) as u8;
    let background_albedo = jittered_albedo(rng, background_class as usize, config.classes);
    SceneSpec {
        objects,
        background_class,
        background_albedo,
        seed,
    }
}

/// Draws a scene from seeded pseudo-randomness; fully deterministic in
/// (seed, config).
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_scene_with(&mut rng, seed, config))
}

/// One rain streak, anchored in the canonical mid-view.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct RainStreak {
    /// Anchor (segment midpoint) in normalized mid-view coordinates.
    pub anchor_x: f64,
    pub anchor_y: f64,
    /// Distance from the camera; nearer streaks shift more between views.
    pub depth: f64,
    /// Segment length in pixels.
    pub length_px: f64,
    /// Angle from vertical, radians (0 = falling straight down).
    pub angle: f64,
    /// Cross-section width in pixels (Gaussian σ = width/2).
    pub width_px: f64,
    /// Peak additive luminance, in (0, 1].
    pub intensity: f64,
}

/// A rain field for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RainSpec {
    pub streaks: Vec<RainStreak>,
    pub seed: u64,
}

impl RainSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.streaks.iter().enumerate() {
            if !(s.depth > 0.0) {
                return Err(Error::Config(format!(
                    "streak {i} has non-positive depth {}",
                    s.depth
                )));
            }
            if !(s.intensity > 0.0 && s.intensity <= 1.0) {
                return Err(Error::Config(format!(
                    "streak {i} intensity {} outside (0, 1]",
                    s.intensity
                )));
            }
        }
        Ok(())
    }
}

/// Rain generation parameters.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct RainConfig {
    pub streaks_min: usize,
    pub streaks_max: usize,
    /// Rain depth range; the default sits nearer than the default scene
    /// objects so rain disparity dominates object disparity.
    pub depth_min: f64,
    pub depth_max: f64,
    pub length_px: (f64, f64),
    pub width_px: (f64, f64),
    pub intensity: (f64, f64),
    /// Angles are drawn uniformly from ±this spread around vertical.
    pub angle_spread: f64,
}

impl Default for RainConfig {
    fn default() -> Self {
        RainConfig {
            streaks_min: 40,
            streaks_max: 80,
            depth_min: 2.0,
            depth_max: 5.0,
            length_px: (8.0, 20.0),
            width_px: (0.7, 1.5),
            intensity: (0.25, 0.7),
            angle_spread: 0.35,
        }
    }
}

impl RainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.streaks_min > self.streaks_max {
            return Err(Error::Config(format!(
                "streak count range [{}, {}] invalid",
                self.streaks_min, self.streaks_max
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max) {
            return Err(Error::Config(format!(
                "rain depth range [{}, {}] invalid",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }
}

fn generate_rain_with(rng: &mut ChaCha8Rng, seed: u64, config: &RainConfig) -> RainSpec {
    let count = rng.random_range(config.streaks_min..=config.streaks_max);
    let streaks = (0..count)
        .map(|_| RainStreak {
            anchor_x: rng.random_range(0.0..1.0),
            anchor_y: rng.random_range(0.0..1.0),
            depth: rng.random_range(config.depth_min..=config.depth_max),
            length_px: rng.random_range(config.length_px.0..=config.length_px.1),
            angle: rng.random_range(-config.angle_spread..=config.angle_spread),
            width_px: rng.random_range(config.width_px.0..=config.width_px.1),
            intensity: rng.random_range(config.intensity.0..=config.intensity.1),
        })
        .collect();
    RainSpec {
        streaks,
        seed,
    }
}

/// Draws a rain field from seeded pseudo-randomness.
pub fn generate_rain(seed: u64, config: &RainConfig) -> Result<RainSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_rain_with(&mut rng, seed, config))
}

/// Rendered clean stereo scene with ground truth.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub clean_left: Tensor<f32>,
    pub clean_right: Tensor<f32>,
    pub labels_left: LabelMap,
    pub labels_right: LabelMap,
    /// Left-view disparity of the front-most surface (background = 0).
    pub disparity: Tensor<f32>,
}

/// Painter's-algorithm stereo rendering: surfaces are painted back to front,
/// so the front-most object owns each pixel's color, label, and disparity.
pub fn render_stereo_clean(scene: &SceneSpec, rig: &CameraRig) -> Result<RenderedScene> {
    rig.validate()?;
    let (w, h) = (rig.width, rig.height);
    let min_side = w.min(h) as f64;

    // Far-to-near painting order; ties broken by list order for determinism.
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        scene.objects[b]
            .depth
            .partial_cmp(&scene.objects[a].depth)
            .expect("finite depths")
            .then(b.cmp(&a))
    });

    let mut out = RenderedScene {
        clean_left: Tensor::zeros(&[3, h, w]),
        clean_right: Tensor::zeros(&[3, h, w]),
        labels_left: LabelMap::filled(h, w, scene.background_class),
        labels_right: LabelMap::filled(h, w, scene.background_class),
        disparity: Tensor::zeros(&[1, h, w]),
    };

    // Background fill.
    for view in [View::Left, View::Right] {
        let img = match view {
            View::Left => &mut out.clean_left,
            View::Right => &mut out.clean_right,
        };
        let plane = h * w;
        for c in 0..3 {
            img.data_mut()[c * plane..(c + 1) * plane].fill(scene.background_albedo[c]);
        }
    }

    for &oi in &order {
        let obj = &scene.objects[oi];
        let disp = rig.disparity(obj.depth);
        let (cx_norm, cy_norm) = obj.shape.center();
        let cy_px = cy_norm * h as f64;
        for view in [View::Left, View::Right] {
            let cx_px = cx_norm * w as f64 + view.shift(disp);
            let (img, labels) = match view {
                View::Left => (&mut out.clean_left, &mut out.labels_left),
                View::Right => (&mut out.clean_right, &mut out.labels_right),
            };
            for y in 0..h {
                let dy = (y as f64 + 0.5) - cy_px;
                for x in 0..w {
                    let dx = (x as f64 + 0.5) - cx_px;
                    if obj.shape.contains(dx, dy, min_side) {
                        for c in 0..3 {
                            img.set3(c, y, x, obj.albedo[c]);
                        }
                        labels.set(y, x, obj.class_id);
                        if view == View::Left {
                            out.disparity.set3(0, y, x, disp as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Renders one streak into a single view's additive luminance layer.
fn render_streak(layer: &mut Tensor<f32>, streak: &RainStreak, shift: f64, w: usize, h: usize) {
    let ax = streak.anchor_x * w as f64 + shift;
    let ay = streak.anchor_y * h as f64;
    // Direction of fall: angle measured from straight down.
    let (dir_x, dir_y) = (streak.angle.sin(), streak.angle.cos());
    let half = streak.length_px / 2.0;
    let (x0, y0) = (ax - dir_x * half, ay - dir_y * half);
    let (x1, y1) = (ax + dir_x * half, ay + dir_y * half);
    let sigma = streak.width_px / 2.0;
    // Beyond this margin the contribution is dropped entirely, keeping
    // "streak off-frame → layer exactly zero" literal.
    let margin = 3.5 * sigma + 1.0;

    let x_min = (x0.min(x1) - margin).floor().max(0.0) as isize;
    let x_max = (x0.max(x1) + margin).ceil().min(w as f64 - 1.0) as isize;
    let y_min = (y0.min(y1) - margin).floor().max(0.0) as isize;
    let y_max = (y0.max(y1) + margin).ceil().min(h as f64 - 1.0) as isize;
    if x_min > x_max || y_min > y_max {
        return;
    }

    let seg_x = x1 - x0;
    let seg_y = y1 - y0;
    let seg_len2 = seg_x * seg_x + seg_y * seg_y;
    let plane = h * w;
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            let px = x as f64 + 0.5 - x0;
            let py = y as f64 + 0.5 - y0;
            // Distance from pixel center to the segment (rounded caps).
            let t = if seg_len2 > 0.0 {
                ((px * seg_x + py * seg_y) / seg_len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let rx = px - t * seg_x;
            let ry = py - t * seg_y;
            let dist2 = rx * rx + ry * ry;
            if dist2 > margin * margin {
                continue;
            }
            let value = (streak.intensity * (-dist2 / (2.0 * sigma * sigma)).exp()) as f32;
            let idx = y as usize * w + x as usize;
            for c in 0..3 {
                let i = c * plane + idx;
                layer.data_mut()[i] += value;
            }
        }
    }
}

/// Renders the rain field into both views' additive layers. A streak whose
/// shifted position misses a view's frame contributes nothing there.
pub fn render_rain_layers(rain: &RainSpec, rig: &CameraRig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    rig.validate()?;
    rain.validate()?;
    let (w, h) = (rig.width, rig.height);
    let mut left = Tensor::zeros(&[3, h, w]);
    let mut right = Tensor::zeros(&[3, h, w]);
    for streak in &rain.streaks {
        let disp = rig.disparity(streak.depth);
        render_streak(&mut left, streak, View::Left.shift(disp), w, h);
        render_streak(&mut right, streak, View::Right.shift(disp), w, h);
    }
    Ok((left, right))
}

/// The additive composition: `clip₀₁(clean + rain)`, elementwise.
pub fn composite<T: Scalar>(clean: &Tensor<T>, rain: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(clean, rain)?;
    debug_assert!(rain.data().iter().all(|&v| v >= T::zero()));
    Ok(clean
        .zip_map(rain, |c, r| c + r)
        .expect("checked shapes")
        .clipped01())
}

/// A complete synthetic stereo training/evaluation record.
#[derive(Clone, Debug)]
pub struct StereoSample {
    pub id: String,
    pub rainy_left: Tensor<f32>,
    pub rainy_right: Tensor<f32>,
    pub clean_left: Tensor<f32>,
    pub clean_right: Tensor<f32>,
    pub rain_left: Tensor<f32>,
    pub rain_right: Tensor<f32>,
    pub labels_left: LabelMap,
    pub labels_right: LabelMap,
    pub disparity: Tensor<f32>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.clean_left.height()
    }

    pub fn width(&self) -> usize {
        self.clean_left.width()
    }

    /// Structural validation: consistent shapes, label ids below the class
    /// count, nonnegative rain.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, t) in [
            ("rainy_left", &self.rainy_left),
            ("rainy_right", &self.rainy_right),
            ("clean_left", &self.clean_left),
            ("clean_right", &self.clean_right),
            ("rain_left", &self.rain_left),
            ("rain_right", &self.rain_right),
        ] {
            if t.shape() != [3, h, w] {
                return Err(Error::Data(format!(
                    "sample {}: {name} has shape {:?}, expected [3, {h}, {w}]",
                    self.id,
                    t.shape()
                )));
            }
        }
        if self.disparity.shape() != [1, h, w] {
            return Err(Error::Data(format!(
                "sample {}: disparity has shape {:?}",
                self.id,
                self.disparity.shape()
            )));
        }
        for (name, l) in [
            ("labels_left", &self.labels_left),
            ("labels_right", &self.labels_right),
        ] {
            if l.height() != h || l.width() != w {
                return Err(Error::Data(format!(
                    "sample {}: {name} is {}x{}, expected {h}x{w}",
                    self.id,
                    l.height(),
                    l.width()
                )));
            }
            if l.max_class_plus_one() > classes {
                return Err(Error::Data(format!(
                    "sample {}: {name} contains class ids ≥ {classes}",
                    self.id
                )));
            }
        }
        for (name, t) in [("rain_left", &self.rain_left), ("rain_right", &self.rain_right)] {
            if t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Data(format!(
                    "sample {}: {name} has negative values",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Checks the compositing identity `rainy = clip₀₁(clean + rain)`
    /// bit-exactly in both views.
    pub fn recompose_exact(&self) -> Result<bool> {
        let left = composite(&self.clean_left, &self.rain_left)?;
        let right = composite(&self.clean_right, &self.rain_right)?;
        Ok(left == self.rainy_left && right == self.rainy_right)
    }
}

/// Everything needed to synthesize a dataset deterministically.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub rig: CameraRig,
    pub scene: SceneConfig,
    pub rain: RainConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rig: CameraRig::desk_default(),
            scene: SceneConfig::default(),
            rain: RainConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        self.scene.validate()?;
        self.rain.validate()
    }

    /// A small, fast configuration for unit tests: 32×32 frames with a
    /// handful of objects and streaks, same geometry conventions as the
    /// default.
    pub fn small_for_tests() -> Self {
        SynthConfig {
            rig: CameraRig {
                focal_length_px: 100.0,
                baseline: 0.16,
                width: 32,
                height: 32,
            },
            scene: SceneConfig {
                classes: 6,
                objects_min: 2,
                objects_max: 4,
                ..SceneConfig::default()
            },
            rain: RainConfig {
                streaks_min: 6,
                streaks_max: 12,
                length_px: (4.0, 8.0),
                ..RainConfig::default()
            },
        }
    }
}

/// Canonical zero-padded sample id for an index.
pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Synthesizes sample `index` of the dataset keyed by `master_seed`. The
/// RNG stream is derived from (seed, index), so each sample is independent
/// of how many others are generated.
pub fn synth_sample(master_seed: u64, index: usize, config: &SynthConfig) -> Result<StereoSample> {
    config.validate()?;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(master_seed);
    scene_rng.set_stream((index as u64) * 2);
    let scene = generate_scene_with(&mut scene_rng, master_seed, &config.scene);

    let mut rain_rng = ChaCha8Rng::seed_from_u64(master_seed);
    rain_rng.set_stream((index as u64) * 2 + 1);
    let rain = generate_rain_with(&mut rain_rng, master_seed, &config.rain);

    let rendered = render_stereo_clean(&scene, &config.rig)?;
    let (rain_left, rain_right) = render_rain_layers(&rain, &config.rig)?;
    let rainy_left = composite(&rendered.clean_left, &rain_left)?;
    let rainy_right = composite(&rendered.clean_right, &rain_right)?;

    let sample = StereoSample {
        id: sample_id(index),
        rainy_left,
        rainy_right,
        clean_left: rendered.clean_left,
        clean_right: rendered.clean_right,
        rain_left,
        rain_right,
        labels_left: rendered.labels_left,
        labels_right: rendered.labels_right,
        disparity: rendered.disparity,
    };
    sample.validate(config.scene.classes)?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_generation_is_deterministic_and_seed_sensitive() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let mut differing = 0;
        for s in 0..100u64 {
            let x = generate_scene(s, &cfg).unwrap();
            let y = generate_scene(s + 1000, &cfg).unwrap();
            if x != y {
                differing += 1;
            }
        }
        assert_eq!(differing, 100, "all seed pairs must differ");
    }

    #[test]
    fn scene_respects_count_range_and_class_bound() {
        let cfg = SceneConfig {
            classes: 8,
            objects_min: 3,
            objects_max: 6,
            ..SceneConfig::default()
        };
        for s in 0..20 {
            let spec = generate_scene(s, &cfg).unwrap();
            assert!((3..=6).contains(&spec.objects.len()));
            assert!(spec.objects.iter().all(|o| (o.class_id as usize) < 8));
            spec.validate(8).unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SceneConfig::default();
        cfg.classes = 1;
        assert!(generate_scene(0, &cfg).is_err());
        let mut cfg = SceneConfig::default();
        cfg.depth_min = 0.0;
        assert!(generate_scene(0, &cfg).is_err());
        let mut rig = CameraRig::desk_default();
        rig.width = 8;
        assert!(rig.validate().is_err());
    }

    #[test]
    fn unit_disparity_object_appears_shifted_by_one_pixel() {
        let rig = CameraRig {
            focal_length_px: 100.0,
            baseline: 1.0,
            width: 64,
            height: 64,
        };
        // depth = focal·baseline → disparity exactly 1 pixel.
        let scene = SceneSpec {
            objects: vec![SceneObject {
                shape: ShapePrimitive::Ellipse {
                    cx: 0.5,
                    cy: 0.5,
                    rx: 0.2,
                    ry: 0.15,
                },
                depth: 100.0,
                class_id: 1,
                albedo: [0.8, 0.2, 0.3],
            }],
            background_class: 0,
            background_albedo: [0.1, 0.1, 0.1],
            seed: 0,
        };
        let r = render_stereo_clean(&scene, &rig).unwrap();
        // left(x) must equal right(x−1) for every in-frame column pair.
        for c in 0..3 {
            for y in 0..64 {
                for x in 1..64 {
                    assert_eq!(
                        r.clean_left.at3(c, y, x),
                        r.clean_right.at3(c, y, x - 1),
                        "channel {c} pixel ({y},{x})"
                    );
                }
            }
        }
        for y in 0..64 {
            for x in 1..64 {
                assert_eq!(r.labels_left.get(y, x), r.labels_right.get(y, x - 1));
            }
        }
    }

    #[test]
    fn zero_baseline_collapses_views() {
        let rig = CameraRig {
            focal_length_px: 100.0,
            baseline: 0.0,
            width: 32,
            height: 32,
        };
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let r = render_stereo_clean(&scene, &rig).unwrap();
        assert_eq!(r.clean_left, r.clean_right);
        assert_eq!(r.labels_left, r.labels_right);
        let rain = generate_rain(3, &RainConfig::default()).unwrap();
        let (l, rr) = render_rain_layers(&rain, &rig).unwrap();
        assert_eq!(l, rr);
    }

    #[test]
    fn disparity_map_reports_focal_baseline_over_depth() {
        let rig = CameraRig {
            focal_length_px: 100.0,
            baseline: 1.0,
            width: 64,
            height: 64,
        };
        for (depth, expected) in [(5.0, 20.0), (10.0, 10.0), (20.0, 5.0), (50.0, 2.0)] {
            let scene = SceneSpec {
                objects: vec![SceneObject {
                    shape: ShapePrimitive::Rect {
                        cx: 0.5,
                        cy: 0.5,
                        half_w: 0.2,
                        half_h: 0.2,
                    },
                    depth,
                    class_id: 1,
                    albedo: [0.5, 0.5, 0.5],
                }],
                background_class: 0,
                background_albedo: [0.1, 0.1, 0.1],
                seed: 0,
            };
            let r = render_stereo_clean(&scene, &rig).unwrap();
            let center = r.disparity.at3(0, 32, 32);
            assert_eq!(center, expected as f32);
            // Background pixels report zero disparity (infinitely far).
            assert_eq!(r.disparity.at3(0, 0, 0), 0.0);
        }
    }

    #[test]
    fn empty_rain_spec_gives_zero_layers() {
        let rig = CameraRig::desk_default();
        let rain = RainSpec {
            streaks: vec![],
            seed: 0,
        };
        let (l, r) = render_rain_layers(&rain, &rig).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn near_streak_at_left_edge_misses_the_right_view() {
        let rig = CameraRig {
            focal_length_px: 100.0,
            baseline: 2.0,
            width: 64,
            height: 64,
        };
        // disparity = 200/1.5 ≈ 133 px > width: the right view's copy sits
        // far off-frame while the left view still sees it near its left edge.
        let disp = rig.disparity(1.5);
        assert!(disp >= rig.width as f64);
        // Mid-view anchor chosen so the left view (shift +disp/2) lands at
        // x ≈ 5 px; the right view (shift −disp/2) then sits at ≈ −128 px.
        let anchor_x = (5.0 - disp / 2.0) / rig.width as f64;
        let streak = RainStreak {
            anchor_x,
            anchor_y: 0.5,
            depth: 1.5,
            length_px: 12.0,
            angle: 0.1,
            width_px: 1.2,
            intensity: 0.6,
        };
        let spec = RainSpec {
            streaks: vec![streak],
            seed: 0,
        };
        let (l, r) = render_rain_layers(&spec, &rig).unwrap();
        assert!(l.data().iter().any(|&v| v > 0.0), "left view must see the streak");
        assert!(r.data().iter().all(|&v| v == 0.0), "right view must be untouched");
    }

    #[test]
    fn rain_displacement_decreases_with_depth() {
        let rig = CameraRig {
            focal_length_px: 100.0,
            baseline: 1.0,
            width: 128,
            height: 64,
        };
        let mut prev_shift = f64::INFINITY;
        // Depths chosen so every disparity is a whole number of pixels and
        // the peak-column difference is exact.
        for depth in [2.0, 4.0, 5.0, 10.0, 20.0] {
            let disp = rig.disparity(depth);
            assert!(disp < prev_shift);
            prev_shift = disp;
            // Verify the rendered displacement matches: locate the brightest
            // column in each view for a single vertical streak.
            let spec = RainSpec {
                streaks: vec![RainStreak {
                    anchor_x: 0.5,
                    anchor_y: 0.5,
                    depth,
                    length_px: 20.0,
                    angle: 0.0,
                    width_px: 1.0,
                    intensity: 0.8,
                }],
                seed: 0,
            };
            let (l, r) = render_rain_layers(&spec, &rig).unwrap();
            let peak_col = |t: &Tensor<f32>| -> usize {
                let mut best = (0usize, -1.0f32);
                for x in 0..128 {
                    let mut colsum = 0.0;
                    for y in 0..64 {
                        colsum += t.at3(0, y, x);
                    }
                    if colsum > best.1 {
                        best = (x, colsum);
                    }
                }
                best.0
            };
            let measured = peak_col(&l) as isize - peak_col(&r) as isize;
            assert_eq!(measured, disp.round() as isize, "depth {depth}");
        }
    }

    #[test]
    fn composite_clips_and_adds() {
        let clean = Tensor::<f32>::from_vec(&[1, 1, 3], vec![0.5, 0.9, 0.2]).unwrap();
        let rain = Tensor::<f32>::from_vec(&[1, 1, 3], vec![0.0, 0.3, 0.3]).unwrap();
        let out = composite(&clean, &rain).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn composite_matches_scalar_oracle_on_random_tensors() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = 3 * 8 * 8;
            let clean_v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let rain_v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
            let clean = Tensor::from_vec(&[3, 8, 8], clean_v.clone()).unwrap();
            let rain = Tensor::from_vec(&[3, 8, 8], rain_v.clone()).unwrap();
            let out = composite(&clean, &rain).unwrap();
            for i in 0..n {
                let expect = (clean_v[i] + rain_v[i]).clamp(0.0, 1.0);
                assert_eq!(out.data()[i], expect);
            }
        }
    }

    #[test]
    fn samples_recompose_exactly_and_are_deterministic() {
        let cfg = SynthConfig::default();
        for index in 0..3 {
            let s = synth_sample(42, index, &cfg).unwrap();
            assert!(s.recompose_exact().unwrap(), "sample {index}");
            let again = synth_sample(42, index, &cfg).unwrap();
            assert_eq!(s.rainy_left, again.rainy_left);
            assert_eq!(s.labels_right.ids(), again.labels_right.ids());
            assert_eq!(s.disparity, again.disparity);
        }
    }

    #[test]
    fn labels_match_albedo_palette_classes() {
        // Every pixel's color must be the albedo of some scene surface of
        // that pixel's labeled class (flat shading, pre-rain).
        let cfg = SynthConfig::default();
        let scene = generate_scene(11, &cfg.scene).unwrap();
        let r = render_stereo_clean(&scene, &cfg.rig).unwrap();
        let mut albedos_by_class: std::collections::HashMap<u8, Vec<[f32; 3]>> =
            std::collections::HashMap::new();
        for o in &scene.objects {
            albedos_by_class.entry(o.class_id).or_default().push(o.albedo);
        }
        albedos_by_class
            .entry(scene.background_class)
            .or_default()
            .push(scene.background_albedo);
        let (h, w) = (cfg.rig.height, cfg.rig.width);
        for y in 0..h {
            for x in 0..w {
                let class = r.labels_left.get(y, x);
                let px = [
                    r.clean_left.at3(0, y, x),
                    r.clean_left.at3(1, y, x),
                    r.clean_left.at3(2, y, x),
                ];
                let candidates = albedos_by_class.get(&class).unwrap();
                assert!(
                    candidates.iter().any(|a| *a == px),
                    "pixel ({y},{x}) labeled {class} has color {px:?} not among class albedos"
                );
            }
        }
    }

    #[test]
    fn sample_index_streams_are_independent_of_count() {
        let cfg = SynthConfig::default();
        let direct = synth_sample(5, 7, &cfg).unwrap();
        // Generating earlier samples first must not change sample 7.
        for i in 0..7 {
            let _ = synth_sample(5, i, &cfg).unwrap();
        }
        let again = synth_sample(5, 7, &cfg).unwrap();
        assert_eq!(direct.rainy_left, again.rainy_left);
        assert_eq!(direct.rainy_right, again.rainy_right);
    }
}
