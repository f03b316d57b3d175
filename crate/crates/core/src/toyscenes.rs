//! Procedural street-like scenes for two domains that share a layout
//! distribution but differ in appearance.
//!
//! A scene is a sky band over a ground band, a few axis-aligned blocks
//! standing on the horizon, and small objects and one-pixel poles on the
//! ground. The target domain rotates hue, multiplies in a low-frequency
//! texture field, uses heavier pixel noise, and may carry more rare instances.
//!
//! Samples persist as `.udas` files (little-endian):
//!
//! ```text
//! "UDAS1\n" | u8 domain | u64 seed | u32 H | u32 W | u32 |C|
//! | H·W·3 f32 image, row-major, channel-last | H·W u8 labels
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const VOID: u8 = 255;
pub const CLASS_NAMES: [&str; 5] = ["ground", "sky", "block", "object", "pole"];
pub const GROUND: u8 = 0;
pub const SKY: u8 = 1;
pub const BLOCK: u8 = 2;
pub const OBJECT: u8 = 3;
pub const POLE: u8 = 4;

pub const SAMPLE_MAGIC: &[u8; 6] = b"UDAS1\n";
pub const MAP_MAGIC: &[u8; 6] = b"UDAM1\n";
pub const SAMPLE_EXTENSION: &str = "udas";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("label {label} at pixel {pixel} is not below {num_classes} and not void")]
    Label {
        label: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("class frequencies need at least one labeled source pixel")]
    NoLabeledPixels,
    #[error("class frequencies must be estimated on source samples; sample with seed {0} is target")]
    TargetSample(u64),
    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: truncated, needs {needed} bytes but has {available}")]
    Truncated {
        path: String,
        needed: usize,
        available: usize,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, SceneError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Row-major `H × W` grid of class ids; [`VOID`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label map size");
        LabelMap { height, width, data }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    /// Error on the first label that is neither void nor below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != VOID && usize::from(l) >= num_classes)
        {
            Some(pixel) => Err(SceneError::Label {
                label: self.data[pixel],
                pixel,
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]`, each exactly representable as `f32`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub num_classes: usize,
    pub domain: Domain,
    pub seed: u64,
}

/// A sample whose labels were never decoded. Training only sees these for
/// the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub image: Tensor,
    pub domain: Domain,
    pub seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn without_labels(self) -> UnlabeledSample {
        UnlabeledSample {
            image: self.image,
            domain: self.domain,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub fn new(min: u32, max: u32) -> Self {
        CountRange { min, max }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, extra: u32) -> u32 {
        rng.random_range(self.min..=self.max + extra)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Mean RGB per class, indexed by class id.
    pub palette: Vec<[f64; 3]>,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Hue rotation of the target domain, degrees.
    pub hue_offset: f64,
    /// Amplitude of the multiplicative low-frequency texture on the target.
    pub texture_noise: f64,
    /// Added to the upper bound of the object and pole counts on the target.
    pub frequency_skew: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub block_count: CountRange,
    pub object_count: CountRange,
    pub pole_count: CountRange,
    pub source: Appearance,
    pub target: Appearance,
    pub shift: DomainShift,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            num_classes: 5,
            block_count: CountRange::new(1, 4),
            object_count: CountRange::new(0, 3),
            pole_count: CountRange::new(0, 2),
            source: Appearance {
                palette: vec![
                    [0.42, 0.38, 0.33],
                    [0.45, 0.65, 0.92],
                    [0.74, 0.42, 0.30],
                    [0.92, 0.82, 0.12],
                    [0.15, 0.15, 0.18],
                ],
                noise_sigma: 0.02,
            },
            target: Appearance {
                palette: vec![
                    [0.36, 0.36, 0.36],
                    [0.62, 0.68, 0.78],
                    [0.60, 0.50, 0.44],
                    [0.88, 0.30, 0.22],
                    [0.26, 0.23, 0.21],
                ],
                noise_sigma: 0.06,
            },
            shift: DomainShift {
                hue_offset: 30.0,
                texture_noise: 0.15,
                frequency_skew: 1,
            },
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SceneError::Spec(m));
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) || self.height < 16 || self.width < 16 {
            return fail(format!(
                "height and width must be multiples of 8 and at least 16, got {}x{}",
                self.height, self.width
            ));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=5, got {}", self.num_classes));
        }
        for (name, r) in [
            ("block_count", self.block_count),
            ("object_count", self.object_count),
            ("pole_count", self.pole_count),
        ] {
            if r.min > r.max {
                return fail(format!("{name}.min {} exceeds max {}", r.min, r.max));
            }
        }
        for (name, a) in [("source", &self.source), ("target", &self.target)] {
            if a.palette.len() != CLASS_NAMES.len() {
                return fail(format!("{name}.palette needs {} colors", CLASS_NAMES.len()));
            }
            if a.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return fail(format!("{name}.palette values must lie in [0, 1]"));
            }
            if !(a.noise_sigma >= 0.0 && a.noise_sigma.is_finite()) {
                return fail(format!("{name}.noise_sigma must be non-negative"));
            }
        }
        if !(self.shift.texture_noise >= 0.0 && self.shift.texture_noise < 1.0) {
            return fail("shift.texture_noise must lie in [0, 1)".into());
        }
        if !self.shift.hue_offset.is_finite() {
            return fail("shift.hue_offset must be finite".into());
        }
        Ok(())
    }

    pub fn appearance(&self, domain: Domain) -> &Appearance {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GEOMETRY_STREAM: u64 = 1;
const RARE_STREAM: u64 = 2;
const APPEARANCE_STREAM: u64 = 3;

struct Rect {
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
}

/// Renders one scene; pure in `(spec, domain, seed)`.
pub fn generate_scene(spec: &SceneSpec, domain: Domain, seed: u64) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let classes = spec.num_classes as u8;
    let mut labels = LabelMap::filled(h, w, GROUND);

    // Layout shared by both domains for a given seed.
    let mut geo = ChaCha8Rng::seed_from_u64(mix_seed(seed, GEOMETRY_STREAM));
    let horizon = geo.random_range(h * 7 / 20..=h * 3 / 5);
    let sky = if classes > SKY { SKY } else { GROUND };
    for y in 0..horizon {
        for x in 0..w {
            labels.set(y, x, sky);
        }
    }
    let mut blocks = Vec::new();
    for _ in 0..spec.block_count.draw(&mut geo, 0) {
        let bw = geo.random_range(w / 8..=w / 3);
        let bh = geo.random_range(h / 8..=h * 9 / 20);
        let left = geo.random_range(0..=w - bw);
        let bottom = (horizon + geo.random_range(0..=h / 16)).min(h);
        let top = bottom.saturating_sub(bh);
        blocks.push(Rect {
            top,
            bottom,
            left,
            right: left + bw,
        });
    }
    if classes > BLOCK {
        for b in &blocks {
            for y in b.top..b.bottom {
                for x in b.left..b.right {
                    labels.set(y, x, BLOCK);
                }
            }
        }
    }

    // Rare instances; the target may carry more of them.
    let extra = match domain {
        Domain::Source => 0,
        Domain::Target => spec.shift.frequency_skew,
    };
    let mut rare = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, RARE_STREAM), domain.code().into()));
    let ground_top = (horizon + 2).min(h - 1);
    for _ in 0..spec.object_count.draw(&mut rare, extra) {
        let ow = rare.random_range(2..=5usize);
        let oh = rare.random_range(2..=5usize);
        let bottom = rare.random_range(ground_top..h) + 1;
        let left = rare.random_range(0..=w - ow);
        if classes > OBJECT {
            for y in bottom.saturating_sub(oh)..bottom {
                for x in left..left + ow {
                    labels.set(y, x, OBJECT);
                }
            }
        }
    }
    for _ in 0..spec.pole_count.draw(&mut rare, extra) {
        let ph = rare.random_range(h / 8..=h / 3);
        let bottom = (horizon + rare.random_range(0..=h / 8)).min(h);
        let x = rare.random_range(0..w);
        if classes > POLE {
            for y in bottom.saturating_sub(ph)..bottom {
                labels.set(y, x, POLE);
            }
        }
    }

    let image = render(spec, domain, seed, &labels, &blocks, horizon);
    Sample {
        image,
        labels,
        num_classes: spec.num_classes,
        domain,
        seed,
    }
}

fn render(spec: &SceneSpec, domain: Domain, seed: u64, labels: &LabelMap, blocks: &[Rect], horizon: usize) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let app = spec.appearance(domain);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, APPEARANCE_STREAM), domain.code().into()));

    let jitter: Vec<[f64; 3]> = app
        .palette
        .iter()
        .map(|c| c.map(|v| (v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0)))
        .collect();
    let block_tint: Vec<f64> = blocks.iter().map(|_| rng.random_range(0.85..1.15)).collect();

    let (texture_amp, hue) = match domain {
        Domain::Source => (0.0, 0.0),
        Domain::Target => (spec.shift.texture_noise, spec.shift.hue_offset),
    };
    let texture = value_noise(h, w, 8, &mut rng);
    let rotation = hue_rotation(hue);
    let noise = Normal::new(0.0, app.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let label = labels.get(y, x);
            let mut rgb = jitter[usize::from(label)];
            let shade = match label {
                SKY => 0.85 + 0.25 * (y as f64 / horizon.max(1) as f64),
                GROUND => 1.05 - 0.3 * ((y as f64 - horizon as f64) / (h - horizon).max(1) as f64),
                BLOCK => {
                    let b = blocks
                        .iter()
                        .rposition(|b| y >= b.top && y < b.bottom && x >= b.left && x < b.right);
                    let tint = b.map_or(1.0, |i| block_tint[i]);
                    let window = b.is_some_and(|i| {
                        let r = &blocks[i];
                        (y - r.top) % 4 == 1 && matches!((x - r.left) % 4, 1 | 2)
                    });
                    if window {
                        0.55 * tint
                    } else {
                        tint
                    }
                }
                _ => 1.0,
            };
            let modulation = shade * (1.0 + texture_amp * texture[y * w + x]);
            for v in &mut rgb {
                *v *= modulation;
            }
            let rgb = apply(&rotation, rgb);
            for (c, v) in rgb.iter().enumerate() {
                let noisy = if app.noise_sigma > 0.0 {
                    v + noise.sample(&mut rng)
                } else {
                    *v
                };
                image[c * plane + y * w + x] = f64::from(noisy.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![3, h, w], image).expect("image shape")
}

/// Smooth field in `[-1, 1]`: random lattice values every `cell` pixels,
/// bilinearly interpolated.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            out[y * w + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Rotation about the gray axis of RGB space by `degrees`.
fn hue_rotation(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let r = (1.0f64 / 3.0).sqrt();
    let a = c + (1.0 - c) * k;
    let b = k * (1.0 - c) - r * s;
    let d = k * (1.0 - c) + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Per-class weights `1 − frequency` estimated on source labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Every class weighted 1, i.e. no class balancing.
    pub fn ones(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        ClassWeights { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_frequencies<'a, I>(samples: I, num_classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for sample in samples {
        if sample.domain != Domain::Source {
            return Err(SceneError::TargetSample(sample.seed));
        }
        sample.labels.validate(num_classes)?;
        for &l in sample.labels.data() {
            if l != VOID {
                counts[usize::from(l)] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(SceneError::NoLabeledPixels);
    }
    Ok(ClassWeights {
        weights: counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect(),
    })
}

/// `[C, H, W]` indicator encoding; void pixels are all-zero.
pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<Tensor> {
    labels.validate(num_classes)?;
    let plane = labels.height * labels.width;
    let mut data = vec![0.0; num_classes * plane];
    for (p, &l) in labels.data.iter().enumerate() {
        if l != VOID {
            data[usize::from(l) * plane + p] = 1.0;
        }
    }
    Ok(Tensor::new(vec![num_classes, labels.height, labels.width], data).expect("one-hot shape"))
}

/// `[B, C, H, W]` one-hot stack of several label maps.
pub fn one_hot_batch(labels: &[&LabelMap], num_classes: usize) -> Result<Tensor> {
    let (h, w) = labels
        .first()
        .map(|l| (l.height, l.width))
        .ok_or_else(|| SceneError::Spec("empty label batch".into()))?;
    let mut data = Vec::with_capacity(labels.len() * num_classes * h * w);
    for l in labels {
        if (l.height, l.width) != (h, w) {
            return Err(SceneError::Spec("label maps in a batch differ in size".into()));
        }
        data.extend(one_hot(l, num_classes)?.into_data());
    }
    Ok(Tensor::new(vec![labels.len(), num_classes, h, w], data).expect("batch shape"))
}

struct Header {
    domain: Domain,
    seed: u64,
    height: usize,
    width: usize,
    channels: usize,
}

const HEADER_LEN: usize = 6 + 1 + 8 + 4 + 4 + 4;

fn encode(magic: &[u8; 6], header: &Header, planes: &Tensor, labels: &LabelMap) -> Vec<u8> {
    let (h, w, c) = (header.height, header.width, planes.shape()[0]);
    let plane = h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + plane * (4 * c + 1));
    buf.extend_from_slice(magic);
    buf.push(header.domain.code());
    buf.extend_from_slice(&header.seed.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(header.channels as u32).to_le_bytes());
    let data = planes.data();
    for p in 0..plane {
        for ch in 0..c {
            buf.extend_from_slice(&(data[ch * plane + p] as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(labels.data());
    buf
}

fn decode(
    path: &Path,
    magic: &[u8; 6],
    bytes: &[u8],
    planes_of: impl Fn(&Header) -> usize,
    read_labels: bool,
) -> Result<(Header, Tensor, Option<LabelMap>)> {
    let name = path.display().to_string();
    let truncated = |needed: usize| SceneError::Truncated {
        path: name.clone(),
        needed,
        available: bytes.len(),
    };
    if bytes.len() < magic.len() {
        return Err(truncated(HEADER_LEN));
    }
    if &bytes[..6] != magic {
        return Err(SceneError::BadMagic {
            path: name,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..6]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let domain = Domain::from_code(bytes[6]).ok_or_else(|| SceneError::Format {
        path: name.clone(),
        reason: format!("unknown domain code {}", bytes[6]),
    })?;
    let header = Header {
        domain,
        seed: u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")),
        height: u32_at(15),
        width: u32_at(19),
        channels: u32_at(23),
    };
    let plane = header.height * header.width;
    let c = planes_of(&header);
    let image_bytes = plane * c * 4;
    let needed = HEADER_LEN + image_bytes + plane;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() != needed {
        return Err(SceneError::Format {
            path: name,
            reason: format!(
                "payload is {} bytes but the header implies {} (f32 image, u8 labels)",
                bytes.len() - HEADER_LEN,
                needed - HEADER_LEN
            ),
        });
    }
    let mut data = vec![0.0; c * plane];
    let body = &bytes[HEADER_LEN..HEADER_LEN + image_bytes];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        data[(i % c) * plane + i / c] = f64::from(v);
    }
    let tensor = Tensor::new(vec![c, header.height, header.width], data).expect("decoded shape");
    let labels = read_labels.then(|| {
        LabelMap::new(
            header.height,
            header.width,
            bytes[HEADER_LEN + image_bytes..needed].to_vec(),
        )
    });
    Ok((header, tensor, labels))
}

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let header = Header {
        domain: sample.domain,
        seed: sample.seed,
        height: sample.height(),
        width: sample.width(),
        channels: sample.num_classes,
    };
    encode(SAMPLE_MAGIC, &header, &sample.image, &sample.labels)
}

pub fn write_sample(sample: &Sample, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sample(sample))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(bytes).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn decode_sample(path: &Path, bytes: &[u8]) -> Result<Sample> {
    let (header, image, labels) = decode(path, SAMPLE_MAGIC, bytes, |_| 3, true)?;
    let labels = labels.expect("labels requested");
    labels.validate(header.channels).map_err(|e| SceneError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(Sample {
        image,
        labels,
        num_classes: header.channels,
        domain: header.domain,
        seed: header.seed,
    })
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    decode_sample(path, &read_bytes(path)?)
}

/// Reads a sample's image without decoding its label block.
pub fn read_image_only(path: &Path) -> Result<UnlabeledSample> {
    let bytes = read_bytes(path)?;
    let (header, image, _) = decode(path, SAMPLE_MAGIC, &bytes, |_| 3, false)?;
    Ok(UnlabeledSample {
        image,
        domain: header.domain,
        seed: header.seed,
    })
}

/// A per-pixel map file (`.udam`): the sample layout with `channels` f32
/// values per pixel in place of RGB, under magic `"UDAM1\n"`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    /// `[channels, H, W]`.
    pub values: Tensor,
    /// Auxiliary per-pixel labels (class ids or [`VOID`]).
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

impl MapFile {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

pub fn write_map(map: &MapFile, path: &Path) -> Result<()> {
    let header = Header {
        domain: map.domain,
        seed: map.seed,
        height: map.height(),
        width: map.width(),
        channels: map.channels(),
    };
    write_atomic(path, &encode(MAP_MAGIC, &header, &map.values, &map.labels))
}

pub fn read_map(path: &Path) -> Result<MapFile> {
    let bytes = read_bytes(path)?;
    let (header, values, labels) = decode(path, MAP_MAGIC, &bytes, |h| h.channels, true)?;
    Ok(MapFile {
        values,
        labels: labels.expect("labels requested"),
        domain: header.domain,
        seed: header.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub scene: SceneSpec,
    pub domain: Domain,
    pub count: usize,
    pub seed: u64,
}

/// Seed of sample `index` in a split generated from `base`.
pub fn sample_seed(base: u64, split: u64, index: u64) -> u64 {
    mix_seed(mix_seed(base, split), index)
}

pub fn sample_file_name(domain: Domain, index: usize) -> String {
    format!("{}_{index:06}.{SAMPLE_EXTENSION}", domain.name())
}

/// Generates `count` samples into `dir` and writes `meta.json`.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    domain: Domain,
    count: usize,
    base_seed: u64,
    split: u64,
) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for i in 0..count {
        let sample = generate_scene(spec, domain, sample_seed(base_seed, split, i as u64));
        write_sample(&sample, &dir.join(sample_file_name(domain, i)))?;
    }
    let meta = DatasetMeta {
        scene: spec.clone(),
        domain,
        count,
        seed: base_seed,
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|source| SceneError::Json {
        path: meta_path.display().to_string(),
        source,
    })?;
    write_atomic(&meta_path, format!("{json}\n").as_bytes())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| SceneError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Sample files of a dataset directory, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == SAMPLE_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_labeled(dir: &Path) -> Result<Vec<Sample>> {
    dataset_files(dir)?.iter().map(|p| read_sample(p)).collect()
}

pub fn load_unlabeled(dir: &Path) -> Result<Vec<UnlabeledSample>> {
    dataset_files(dir)?.iter().map(|p| read_image_only(p)).collect()
}
