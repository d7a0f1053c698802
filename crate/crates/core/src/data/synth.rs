//! Synthetic two-domain segmentation data with latent image groups.
//!
//! Each image is a textured background with one or two foreground shapes.
//! By default backgrounds and shapes take their colours from opposite halves
//! of the palette, and every image carries a per-channel colour cast. Source
//! images draw their own cast; the personal images of one group share theirs,
//! together with their background/foreground appearances and a dominant shape
//! class. A cast can move a colour across the halves, so a single image is
//! ambiguous where its group is not. Palette colours are assigned in a
//! stratified way so both domains use every colour equally often when the
//! counts divide evenly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Image, LabeledSample, Mask, PersonalDataset, SourceDataset, UnlabeledSample, IGNORE_INDEX};
use crate::error::{Error, Result};

const PALETTE: [[f32; 3]; 8] = [
    [0.80, 0.30, 0.30],
    [0.30, 0.80, 0.30],
    [0.30, 0.30, 0.80],
    [0.80, 0.80, 0.30],
    [0.80, 0.30, 0.80],
    [0.30, 0.80, 0.80],
    [0.55, 0.55, 0.55],
    [0.80, 0.55, 0.30],
];

/// Shape kinds used for foreground classes 1.., in order.
const SHAPE_KINDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Flat,
    HStripes { period: usize },
    VStripes { period: usize },
    Checker { cell: usize },
}

impl Texture {
    fn modulation(self, y: usize, x: usize) -> f32 {
        let sign = |on: bool| if on { 1.0 } else { -1.0 };
        match self {
            Texture::Flat => 0.0,
            Texture::HStripes { period } => sign((y / (period / 2).max(1)) % 2 == 0),
            Texture::VStripes { period } => sign((x / (period / 2).max(1)) % 2 == 0),
            Texture::Checker { cell } => sign(((y / cell) + (x / cell)) % 2 == 0),
        }
    }

    fn random(rng: &mut impl Rng) -> Texture {
        match rng.random_range(0..4) {
            0 => Texture::Flat,
            1 => Texture::HStripes {
                period: [4, 6, 8][rng.random_range(0..3)],
            },
            2 => Texture::VStripes {
                period: [4, 6, 8][rng.random_range(0..3)],
            },
            _ => Texture::Checker {
                cell: [2, 3, 4][rng.random_range(0..3)],
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub color: [f32; 3],
    pub texture: Texture,
}

impl Appearance {
    fn jittered(&self, rng: &mut impl Rng, jitter: f32) -> Appearance {
        let mut color = self.color;
        if jitter > 0.0 {
            for c in &mut color {
                *c += rng.random_range(-jitter..=jitter);
            }
        }
        Appearance {
            color,
            texture: self.texture,
        }
    }
}

/// Target-domain shift applied to personal images only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    /// Added to every channel.
    pub brightness: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Multiplier on pixel values around 0.5.
    #[serde(default = "one")]
    pub contrast: f32,
}

fn one() -> f32 {
    1.0
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            noise: 0.0,
            contrast: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub user: String,
    pub n_source: usize,
    pub n_personal: usize,
    pub image_size: usize,
    pub n_groups: usize,
    /// Background plus up to six shape classes.
    pub class_count: usize,
    /// Fraction of personal images held out with ground truth for evaluation.
    pub val_fraction: f64,
    /// Shape radius range as a fraction of the image size.
    pub radius: (f32, f32),
    pub max_shapes: usize,
    pub texture_amplitude: f32,
    pub color_jitter: f32,
    /// Probability that a personal image follows its group's family; the rest
    /// draw appearances like source images. Controls correlation strength.
    pub group_purity: f32,
    /// Probability that an image (or a group family) takes its background
    /// colour from one half of the palette and its foreground colour from the
    /// other; otherwise both come from the whole palette.
    pub role_bias: f32,
    /// Largest per-channel colour cast added to an image. Source images draw
    /// their own; personal images share their group's (0 = none).
    pub color_cast: f32,
    pub shift: DomainShift,
    /// Width in pixels of an ignore band drawn around shape boundaries (0 = none).
    pub ignore_border: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            user: "synth".to_string(),
            n_source: 600,
            n_personal: 600,
            image_size: 64,
            n_groups: 4,
            class_count: 4,
            val_fraction: 0.3,
            radius: (0.2, 0.36),
            max_shapes: 2,
            texture_amplitude: 0.12,
            color_jitter: 0.04,
            group_purity: 1.0,
            role_bias: 1.0,
            color_cast: 0.3,
            shift: DomainShift {
                brightness: 0.05,
                noise: 0.15,
                contrast: 0.9,
            },
            ignore_border: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub source: SourceDataset,
    /// Personal images; `annotations` carries ground truth for the held-out split only.
    pub personal: PersonalDataset,
    /// Ground truth of every personal image, for evaluation only.
    pub hidden_truth: BTreeMap<String, Mask>,
    pub true_groups: BTreeMap<String, usize>,
}

struct Family {
    background: Appearance,
    foreground: Appearance,
    dominant_class: u8,
    cast: [f32; 3],
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ellipse,
    Cross,
}

impl ShapeKind {
    fn for_class(class: u8) -> ShapeKind {
        match (class as usize - 1) % SHAPE_KINDS {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Diamond,
            4 => ShapeKind::Ellipse,
            _ => ShapeKind::Cross,
        }
    }

    /// Inside test in coordinates normalized by the radius.
    fn contains(self, dx: f32, dy: f32) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= 1.0,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= 0.85,
            // upward equilateral triangle inscribed in the unit circle (y grows downwards)
            ShapeKind::Triangle => dy <= 0.5 && dy >= -1.0 + 1.732 * dx.abs(),
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
            ShapeKind::Ellipse => dx * dx + (dy / 0.6) * (dy / 0.6) <= 1.0,
            ShapeKind::Cross => {
                (dx.abs() <= 0.35 && dy.abs() <= 1.0) || (dy.abs() <= 0.35 && dx.abs() <= 1.0)
            }
        }
    }
}

struct Canvas {
    size: usize,
    image: Vec<f32>,
    mask: Vec<u8>,
}

impl Canvas {
    fn new(size: usize, background: &Appearance, amplitude: f32) -> Self {
        let mut image = vec![0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let m = background.texture.modulation(y, x) * amplitude;
                for c in 0..3 {
                    image[(c * size + y) * size + x] = background.color[c] + m;
                }
            }
        }
        Self {
            size,
            image,
            mask: vec![0; size * size],
        }
    }

    fn draw(&mut self, kind: ShapeKind, cy: f32, cx: f32, radius: f32, class: u8, look: &Appearance, amplitude: f32) {
        for y in 0..self.size {
            for x in 0..self.size {
                let dy = (y as f32 + 0.5 - cy) / radius;
                let dx = (x as f32 + 0.5 - cx) / radius;
                if kind.contains(dx, dy) {
                    let m = look.texture.modulation(y, x) * amplitude;
                    for c in 0..3 {
                        self.image[(c * self.size + y) * self.size + x] = look.color[c] + m;
                    }
                    self.mask[y * self.size + x] = class;
                }
            }
        }
    }

    fn mark_ignore_border(&mut self, width: usize) {
        if width == 0 {
            return;
        }
        let s = self.size as isize;
        let w = width as isize;
        let orig = self.mask.clone();
        for y in 0..s {
            for x in 0..s {
                let v = orig[(y * s + x) as usize];
                let mut boundary = false;
                'scan: for dy in -w..=w {
                    for dx in -w..=w {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && ny < s && nx >= 0 && nx < s && orig[(ny * s + nx) as usize] != v {
                            boundary = true;
                            break 'scan;
                        }
                    }
                }
                if boundary {
                    self.mask[(y * s + x) as usize] = IGNORE_INDEX;
                }
            }
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Balanced (background, foreground) palette indices for slot `i`: every colour
/// appears equally often in each role over any run of 8·7 consecutive slots, and
/// over every run of 8 in the background role.
fn stratified_colors(perm: &[usize], i: usize) -> (usize, usize) {
    let n = perm.len();
    let bg = i % n;
    let fg = (bg + 1 + (i / n) % (n - 1)) % n;
    (perm[bg], perm[fg])
}

/// Palette halves for background and foreground roles, shared by both domains.
struct Roles {
    background: Vec<usize>,
    foreground: Vec<usize>,
}

impl Roles {
    fn new(seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..PALETTE.len()).collect();
        perm.shuffle(&mut stream(seed, 0));
        let half = PALETTE.len() / 2;
        Self {
            background: perm[..half].to_vec(),
            foreground: perm[half..].to_vec(),
        }
    }

    /// Role-biased colours with probability `bias`, else the stratified pair
    /// for `slot`.
    fn pick(&self, rng: &mut impl Rng, bias: f32, perm: &[usize], slot: usize) -> (usize, usize) {
        if bias > 0.0 && rng.random::<f32>() < bias {
            (
                self.background[rng.random_range(0..self.background.len())],
                self.foreground[rng.random_range(0..self.foreground.len())],
            )
        } else {
            stratified_colors(perm, slot)
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid(format!(
                "image size {} is too small (minimum 16)",
                self.image_size
            )));
        }
        if self.n_groups == 0 || self.n_groups > self.n_personal {
            return Err(Error::invalid(format!(
                "need 1 <= n_groups ({}) <= n_personal ({})",
                self.n_groups, self.n_personal
            )));
        }
        if self.class_count < 2 || self.class_count > 1 + SHAPE_KINDS {
            return Err(Error::invalid(format!(
                "class_count must be in 2..={}, got {}",
                1 + SHAPE_KINDS,
                self.class_count
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::invalid("radius range must satisfy 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.role_bias) {
            return Err(Error::invalid("role_bias must be in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.color_cast) {
            return Err(Error::invalid("color_cast must be in [0, 0.5]"));
        }
        if self.max_shapes == 0 {
            return Err(Error::invalid("max_shapes must be at least 1"));
        }
        Ok(())
    }

    fn random_cast(&self, rng: &mut impl Rng) -> [f32; 3] {
        if self.color_cast > 0.0 {
            std::array::from_fn(|_| rng.random_range(-self.color_cast..=self.color_cast))
        } else {
            [0.0; 3]
        }
    }

    fn random_class(&self, rng: &mut impl Rng) -> u8 {
        rng.random_range(1..self.class_count) as u8
    }

    fn render(
        &self,
        rng: &mut ChaCha8Rng,
        background: &Appearance,
        foreground: &Appearance,
        mut class_of: impl FnMut(&mut ChaCha8Rng) -> u8,
        cast: [f32; 3],
        shift: Option<&DomainShift>,
    ) -> (Image, Mask) {
        let size = self.image_size;
        let sz = size as f32;
        let mut canvas = Canvas::new(size, background, self.texture_amplitude);
        let shapes = rng.random_range(1..=self.max_shapes);
        for _ in 0..shapes {
            let class = class_of(rng);
            let radius = rng.random_range(self.radius.0..=self.radius.1) * sz;
            let lo = radius.min(sz / 2.0);
            let hi = (sz - radius).max(sz / 2.0);
            let cy = rng.random_range(lo..=hi);
            let cx = rng.random_range(lo..=hi);
            canvas.draw(
                ShapeKind::for_class(class),
                cy,
                cx,
                radius,
                class,
                foreground,
                self.texture_amplitude,
            );
        }
        canvas.mark_ignore_border(self.ignore_border);
        if cast != [0.0; 3] {
            let plane = size * size;
            for (c, delta) in cast.iter().enumerate() {
                for v in &mut canvas.image[c * plane..(c + 1) * plane] {
                    *v += delta;
                }
            }
        }
        if let Some(shift) = shift {
            for v in &mut canvas.image {
                let noise: f32 = if shift.noise > 0.0 {
                    rng.sample::<f32, _>(StandardNormal) * shift.noise
                } else {
                    0.0
                };
                *v = (*v - 0.5) * shift.contrast + 0.5 + shift.brightness + noise;
            }
        }
        for v in &mut canvas.image {
            *v = quantize(*v);
        }
        let image = Image::new(size, size, canvas.image).expect("canvas sized for image");
        let mask = Mask::new(size, size, canvas.mask).expect("canvas sized for mask");
        (image, mask)
    }
}

/// Generates a labeled source set and one user's personal set with latent groups.
/// Identical specs produce bit-identical output.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let jitter = spec.color_jitter;
    let roles = Roles::new(spec.seed);

    // source domain
    let mut rng = stream(spec.seed, 1);
    let mut perm: Vec<usize> = (0..PALETTE.len()).collect();
    perm.shuffle(&mut rng);
    let mut source = Vec::with_capacity(spec.n_source);
    for i in 0..spec.n_source {
        let (bg, fg) = roles.pick(&mut rng, spec.role_bias, &perm, i);
        let background = Appearance {
            color: PALETTE[bg],
            texture: Texture::random(&mut rng),
        }
        .jittered(&mut rng, jitter);
        let foreground = Appearance {
            color: PALETTE[fg],
            texture: Texture::random(&mut rng),
        }
        .jittered(&mut rng, jitter);
        let cast = spec.random_cast(&mut rng);
        let (image, mask) = spec.render(&mut rng, &background, &foreground, |r| spec.random_class(r), cast, None);
        source.push(LabeledSample::new(format!("s{i:05}"), image, mask, spec.class_count)?);
    }

    // personal domain: one family per latent group
    let mut rng = stream(spec.seed, 2);
    let mut perm: Vec<usize> = (0..PALETTE.len()).collect();
    perm.shuffle(&mut rng);
    let families: Vec<Family> = (0..spec.n_groups)
        .map(|g| {
            let (bg, fg) = roles.pick(&mut rng, spec.role_bias, &perm, g);
            Family {
                background: Appearance {
                    color: PALETTE[bg],
                    texture: Texture::random(&mut rng),
                },
                foreground: Appearance {
                    color: PALETTE[fg],
                    texture: Texture::random(&mut rng),
                },
                dominant_class: spec.random_class(&mut rng),
                cast: spec.random_cast(&mut rng),
            }
        })
        .collect();

    let mut rng = stream(spec.seed, 3);
    let mut samples = Vec::with_capacity(spec.n_personal);
    let mut hidden_truth = BTreeMap::new();
    let mut true_groups = BTreeMap::new();
    for i in 0..spec.n_personal {
        let group = i % spec.n_groups;
        let family = &families[group];
        let id = format!("p{i:05}");
        let follows = rng.random::<f32>() < spec.group_purity;
        let (background, foreground, dominant, cast) = if follows {
            (
                family.background.jittered(&mut rng, jitter),
                family.foreground.jittered(&mut rng, jitter),
                Some(family.dominant_class),
                family.cast,
            )
        } else {
            let slot = rng.random_range(0..PALETTE.len() * (PALETTE.len() - 1));
            let (bg, fg) = roles.pick(&mut rng, spec.role_bias, &perm, slot);
            (
                Appearance {
                    color: PALETTE[bg],
                    texture: Texture::random(&mut rng),
                }
                .jittered(&mut rng, jitter),
                Appearance {
                    color: PALETTE[fg],
                    texture: Texture::random(&mut rng),
                }
                .jittered(&mut rng, jitter),
                None,
                spec.random_cast(&mut rng),
            )
        };
        let (image, mask) = spec.render(
            &mut rng,
            &background,
            &foreground,
            |r| match dominant {
                Some(d) if r.random::<f32>() < 0.8 => d,
                _ => spec.random_class(r),
            },
            cast,
            Some(&spec.shift),
        );
        samples.push(UnlabeledSample {
            id: id.clone(),
            user: spec.user.clone(),
            image,
        });
        hidden_truth.insert(id.clone(), mask);
        true_groups.insert(id, group);
    }

    let mut rng = stream(spec.seed, 4);
    let n_val = super::sample_count(spec.n_personal, spec.val_fraction);
    let annotations = rand::seq::index::sample(&mut rng, spec.n_personal, n_val)
        .into_iter()
        .map(|i| {
            let id = &samples[i].id;
            (id.clone(), hidden_truth[id].clone())
        })
        .collect();

    Ok(SynthOutput {
        source: SourceDataset {
            class_count: spec.class_count,
            samples: source,
        },
        personal: PersonalDataset {
            user: spec.user.clone(),
            class_count: spec.class_count,
            samples,
            annotations,
        },
        hidden_truth,
        true_groups,
    })
}
