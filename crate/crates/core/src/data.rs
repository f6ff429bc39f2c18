//! Seeded synthetic biased datasets, MNIST colorization and splitting.
//!
//! Each sample is generated from its own ChaCha stream (`stream = index`), so
//! content does not depend on generation order.

use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const GLYPHS: [[&str; 7]; 10] = [
    [".#####.", "##...##", "##...##", "##...##", "##...##", "##...##", ".#####."],
    ["...##..", "..###..", ".####..", "...##..", "...##..", "...##..", ".######"],
    [".#####.", "##...##", ".....##", "...###.", ".###...", "##.....", "#######"],
    [".#####.", "##...##", ".....##", "..####.", ".....##", "##...##", ".#####."],
    ["...###.", "..####.", ".##.##.", "##..##.", "#######", "....##.", "....##."],
    ["#######", "##.....", "######.", ".....##", ".....##", "##...##", ".#####."],
    [".#####.", "##.....", "##.....", "######.", "##...##", "##...##", ".#####."],
    ["#######", ".....##", "....##.", "...##..", "..##...", "..##...", "..##..."],
    [".#####.", "##...##", "##...##", ".#####.", "##...##", "##...##", ".#####."],
    [".#####.", "##...##", "##...##", ".######", ".....##", ".....##", ".#####."],
];
pub const GLYPH_SIZE: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Biased,
    Unbiased,
}

/// How the class glyph is drawn over the colored background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum GlyphStyle {
    /// Glyph pixels set to `intensity` in every channel.
    Stamp { intensity: f32 },
    /// `amplitude` added to every channel on glyph pixels.
    Add { amplitude: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub n_biases: usize,
    pub height: usize,
    pub width: usize,
    /// Correlation of the (left) background color with the class.
    pub rho: f64,
    /// Right-half correlation for two-sided data.
    pub rho_right: Option<f64>,
    pub n_samples: usize,
    pub role: Role,
    pub seed: u64,
    pub palette_size: usize,
    pub background_scale: f32,
    pub glyph: GlyphStyle,
    /// Maximum glyph offset from center, in pixels.
    pub jitter: usize,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise: f32,
}

impl DatasetSpec {
    /// Single-bias desk-scale data: 9×9 RGB, additive glyph, noise 0.3,
    /// jitter ±1.
    pub fn desk(role: Role, rho: f64, n_samples: usize, seed: u64) -> Self {
        DatasetSpec {
            n_classes: 10,
            n_biases: 10,
            height: 9,
            width: 9,
            rho: if role == Role::Unbiased { 0.1 } else { rho },
            rho_right: None,
            n_samples,
            role,
            seed,
            palette_size: 10,
            background_scale: 0.5,
            glyph: GlyphStyle::Add { amplitude: 0.5 },
            jitter: 1,
            noise: 0.3,
        }
    }

    pub fn two_sided(mut self, rho_right: f64) -> Self {
        self.rho_right = Some(if self.role == Role::Unbiased { 1.0 / self.n_biases as f64 } else { rho_right });
        self
    }

    pub fn n_sources(&self) -> usize {
        if self.rho_right.is_some() {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > GLYPHS.len() {
            return invalid(format!("n_classes must be in 2..={}", GLYPHS.len()));
        }
        if self.n_biases < 2 {
            return invalid("n_biases must be at least 2");
        }
        if self.palette_size < self.n_biases {
            return invalid(format!("palette has {} colors but {} biases", self.palette_size, self.n_biases));
        }
        if self.n_biases > 255 || self.n_classes > 255 {
            return invalid("labels are stored as u8");
        }
        let lo = 1.0 / self.n_biases as f64;
        for r in std::iter::once(self.rho).chain(self.rho_right) {
            if !(lo - 1e-12..=1.0).contains(&r) {
                return invalid(format!("rho = {r} outside [1/N_B, 1]"));
            }
            if self.role == Role::Unbiased && (r - lo).abs() > 1e-12 {
                return invalid("unbiased data must use rho = 1/N_B");
            }
        }
        if self.height < GLYPH_SIZE + 2 * self.jitter || self.width < GLYPH_SIZE + 2 * self.jitter {
            return invalid("image too small for the glyph and its jitter");
        }
        if !(self.noise >= 0.0) {
            return invalid("noise must be nonnegative");
        }
        Ok(())
    }
}

/// `n` evenly spaced hues at full saturation and value, quantized to 8 bits.
pub fn palette(n: usize) -> Vec<[f32; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n as f64 * 6.0;
            let sector = h.floor() as usize % 6;
            let f = h - h.floor();
            let (q, t) = (1.0 - f, f);
            let rgb = match sector {
                0 => [1.0, t, 0.0],
                1 => [q, 1.0, 0.0],
                2 => [0.0, 1.0, t],
                3 => [0.0, q, 1.0],
                4 => [t, 0.0, 1.0],
                _ => [1.0, 0.0, q],
            };
            rgb.map(|c: f64| ((c * 255.0).round() / 255.0) as f32)
        })
        .collect()
}

pub fn glyph(class: usize) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
    let mut g = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    for (r, row) in GLYPHS[class].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            g[r][c] = ch == b'#';
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// `[n, 3, h, w]`.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    /// One label vector per bias source.
    pub bias: Vec<Vec<u8>>,
    pub aligned: Vec<Vec<bool>>,
}

/// Bias index assigned to a class.
pub fn assigned_bias(class: u8, n_biases: usize) -> u8 {
    (class as usize % n_biases) as u8
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_bias<R: Rng>(rng: &mut R, class: u8, rho: f64, nb: usize) -> u8 {
    let home = assigned_bias(class, nb);
    if rng.random::<f64>() < rho {
        home
    } else {
        ((home as usize + rng.random_range(1..nb)) % nb) as u8
    }
}

/// Single-source data: one background color per image.
pub fn gen_color_shapes(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.rho_right.is_some() {
        return invalid("spec is two-sided; use gen_two_sided");
    }
    generate(spec)
}

/// Two-source data: left and right background halves colored independently.
pub fn gen_two_sided(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.rho_right.is_none() {
        return invalid("two-sided generation needs rho_right");
    }
    generate(spec)
}

fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let pal = palette(spec.palette_size);
    let glyphs: Vec<_> = (0..spec.n_classes).map(glyph).collect();
    let plane = h * w;
    let n = spec.n_samples;
    let sources = spec.n_sources();
    let mut images = vec![0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let mut bias = vec![Vec::with_capacity(n); sources];
    let mut aligned = vec![Vec::with_capacity(n); sources];
    for i in 0..n {
        let mut rng = sample_rng(spec.seed, i);
        let y = rng.random_range(0..spec.n_classes) as u8;
        let bl = draw_bias(&mut rng, y, spec.rho, spec.n_biases);
        let br = spec.rho_right.map(|r| draw_bias(&mut rng, y, r, spec.n_biases));
        let j = spec.jitter as i64;
        let (dy, dx) = if j > 0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0, 0) };
        let (dy, dx) = (dy as isize, dx as isize);
        let oy = ((h - GLYPH_SIZE) / 2) as isize + dy;
        let ox = ((w - GLYPH_SIZE) / 2) as isize + dx;
        let img = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        for yy in 0..h {
            for xx in 0..w {
                let b = match br {
                    Some(r) if 2 * xx >= w => r,
                    _ => bl,
                };
                let gy = yy as isize - oy;
                let gx = xx as isize - ox;
                let on = (0..GLYPH_SIZE as isize).contains(&gy)
                    && (0..GLYPH_SIZE as isize).contains(&gx)
                    && glyphs[y as usize][gy as usize][gx as usize];
                for c in 0..3 {
                    let bg = spec.background_scale * pal[b as usize][c];
                    img[c * plane + yy * w + xx] = match (on, spec.glyph) {
                        (true, GlyphStyle::Stamp { intensity }) => intensity,
                        (true, GlyphStyle::Add { amplitude }) => bg + amplitude,
                        (false, _) => bg,
                    };
                }
            }
        }
        if spec.noise > 0.0 {
            for v in img.iter_mut() {
                let z: f32 = rng.sample(StandardNormal);
                *v += spec.noise * z;
            }
        }
        labels.push(y);
        let home = assigned_bias(y, spec.n_biases);
        bias[0].push(bl);
        aligned[0].push(bl == home);
        if let Some(r) = br {
            bias[1].push(r);
            aligned[1].push(r == home);
        }
    }
    Ok(Dataset { spec: spec.clone(), images: Tensor::from_vec(&[n, 3, h, w], images)?, labels, bias, aligned })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.bias.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            bias: self.bias.iter().map(|b| idx.iter().map(|&i| b[i]).collect()).collect(),
            aligned: self.aligned.iter().map(|a| idx.iter().map(|&i| a[i]).collect()).collect(),
        }
    }

    /// Recomputes alignment flags from labels; true when they match storage.
    pub fn alignment_consistent(&self) -> bool {
        let nb = self.spec.n_biases;
        self.bias.iter().zip(&self.aligned).all(|(b, a)| {
            self.labels.iter().zip(b).zip(a).all(|((y, b), a)| (*b == assigned_bias(*y, nb)) == *a)
        })
    }

    /// Subgroup tag for two-sided data, e.g. `"C_L/A_R"`.
    pub fn subgroup(&self, i: usize) -> Option<&'static str> {
        if self.n_sources() != 2 {
            return None;
        }
        Some(match (self.aligned[0][i], self.aligned[1][i]) {
            (true, true) => "A_L/A_R",
            (true, false) => "A_L/C_R",
            (false, true) => "C_L/A_R",
            (false, false) => "C_L/C_R",
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CacheHeader {
            spec: self.spec.clone(),
            n: self.len(),
            shape: self.images.shape.clone(),
            sources: self.n_sources(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.images.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        for b in &self.bias {
            out.extend_from_slice(b);
        }
        for a in &self.aligned {
            out.extend(pack_bits(a));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format("not an FFWD dataset".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let mut pos = 8;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + k).ok_or_else(|| Error::Format("truncated dataset".into()))?;
            pos += k;
            Ok(s)
        };
        let header: CacheHeader = serde_json::from_slice(take(len)?)?;
        let n = header.n;
        let count: usize = header.shape.iter().product();
        if header.shape.first() != Some(&n) {
            return Err(Error::Format("image shape disagrees with sample count".into()));
        }
        let images = take(4 * count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = take(n)?.to_vec();
        let mut bias = Vec::new();
        for _ in 0..header.sources {
            bias.push(take(n)?.to_vec());
        }
        let mut aligned = Vec::new();
        for _ in 0..header.sources {
            aligned.push(unpack_bits(take(n.div_ceil(8))?, n));
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Dataset { spec: header.spec, images: Tensor::from_vec(&header.shape, images)?, labels, bias, aligned })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"FFWD";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    spec: DatasetSpec,
    n: usize,
    shape: Vec<usize>,
    sources: usize,
}

fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, f) in flags.iter().enumerate() {
        if *f {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Disjoint, exhaustive, seeded split. All but the last part get
/// `round(f·n)` samples; the last takes the remainder.
pub fn split(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return invalid("fractions must be nonnegative");
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return invalid(format!("fractions sum to {total}, not 1"));
    }
    let n = data.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let end = if k + 1 == fractions.len() { n } else { (start + (f * n as f64).round() as usize).min(n) };
        parts.push(data.subset(&perm[start..end]));
        start = end;
    }
    Ok(parts)
}

/// Raw IDX contents: either images `[n, rows, cols]` or labels `[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES: u32 = 2051;
pub const IDX_LABELS: u32 = 2049;

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file too short".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let ndim = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        m => return Err(Error::Format(format!("unsupported IDX magic {m:#010x}"))),
    };
    let head = 4 + 4 * ndim;
    if bytes.len() < head {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let data = bytes.get(head..head + count).ok_or_else(|| Error::Format("truncated IDX data".into()))?;
    Ok(Idx { dims, data: data.to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<Idx> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_idx(&buf)
}

/// Colors MNIST digits: each pixel is blended as `x + (1 - x)·color` with
/// `x` the stroke intensity in [0, 1], so background takes the sampled color
/// and strokes stay bright. Colors are drawn per sample as in
/// [`gen_color_shapes`].
pub fn colorize_mnist(images: &Idx, labels: &Idx, rho: f64, n_biases: usize, seed: u64) -> Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return invalid("need an image IDX and a matching label IDX");
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let spec = DatasetSpec {
        n_classes: 10,
        n_biases,
        height: h,
        width: w,
        rho,
        rho_right: None,
        n_samples: n,
        role: if (rho - 1.0 / n_biases as f64).abs() < 1e-12 { Role::Unbiased } else { Role::Biased },
        seed,
        palette_size: n_biases,
        background_scale: 1.0,
        glyph: GlyphStyle::Stamp { intensity: 1.0 },
        jitter: 0,
        noise: 0.0,
    };
    if !(1.0 / n_biases as f64 - 1e-12..=1.0).contains(&rho) {
        return invalid("rho outside [1/N_B, 1]");
    }
    let pal = palette(n_biases);
    let plane = h * w;
    let mut out = vec![0f32; n * 3 * plane];
    let mut bias = Vec::with_capacity(n);
    let mut aligned = Vec::with_capacity(n);
    for i in 0..n {
        let y = labels.data[i];
        if y as usize >= 10 {
            return Err(Error::Format(format!("label {y} out of range")));
        }
        let mut rng = sample_rng(seed, i);
        let b = draw_bias(&mut rng, y, rho, n_biases);
        for p in 0..plane {
            let x = images.data[i * plane + p] as f32 / 255.0;
            for c in 0..3 {
                out[i * 3 * plane + c * plane + p] = x + (1.0 - x) * pal[b as usize][c];
            }
        }
        bias.push(b);
        aligned.push(b == assigned_bias(y, n_biases));
    }
    Ok(Dataset {
        spec,
        images: Tensor::from_vec(&[n, 3, h, w], out)?,
        labels: labels.data.clone(),
        bias: vec![bias],
        aligned: vec![aligned],
    })
}
