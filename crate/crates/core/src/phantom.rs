//! Synthetic objects: multiplicative-disk foam and two-plane phase digits.

use std::path::{Path, PathBuf};

use ledvae_autodiff::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optics::ObjectModel;
use crate::rng::{object_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoamSpec {
    pub grid_n: usize,
    /// Inclusive range of disks per object.
    pub disk_count_range: (usize, usize),
    /// Disk radius as a fraction of the grid side.
    pub radius_range: (f64, f64),
    pub attenuation_range: (f64, f64),
    pub phase_range: (f64, f64),
    /// Width (pixels) of the erfc edge profile; 0 gives hard edges.
    pub edge_px: f64,
    pub seed: u64,
}

impl Default for FoamSpec {
    fn default() -> Self {
        Self {
            grid_n: 32,
            disk_count_range: (4, 10),
            radius_range: (0.06, 0.18),
            attenuation_range: (0.7, 1.0),
            phase_range: (0.0, std::f64::consts::FRAC_PI_2),
            edge_px: 1.0,
            seed: 0,
        }
    }
}

impl FoamSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let (k0, k1) = self.disk_count_range;
        if k0 > k1 {
            errs.push(format!("disk_count_range ({k0}, {k1}) is empty"));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 < 0.5) {
            errs.push(format!("radius_range ({r0}, {r1}) must satisfy 0 < min <= max < 0.5"));
        }
        let (a0, a1) = self.attenuation_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            errs.push(format!("attenuation_range ({a0}, {a1}) must lie in (0, 1] with min <= max"));
        }
        let (p0, p1) = self.phase_range;
        if !(p0.is_finite() && p1.is_finite() && p0 <= p1) {
            errs.push(format!("phase_range ({p0}, {p1}) is empty"));
        }
        if !(self.edge_px >= 0.0 && self.edge_px.is_finite()) {
            errs.push(format!("edge_px must be >= 0 (got {})", self.edge_px));
        }
        if self.grid_n == 0 {
            errs.push("grid_n must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }
}

/// One absorber: centre and radius in pixels, amplitude factor and phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub a: f64,
    pub phi: f64,
}

/// Transmittance `exp(sum_k c_k (ln a_k + i phi_k))` with `c_k` the disk coverage
/// of each pixel. With hard edges this is the plain product of `a_k e^{i phi_k}`
/// over the disks containing the pixel.
pub fn render_disks(grid_n: usize, disks: &[Disk], edge_px: f64) -> Vec<Complex64> {
    let mut log_t = vec![Complex64::new(0.0, 0.0); grid_n * grid_n];
    for d in disks {
        let w = Complex64::new(d.a.ln(), d.phi);
        for y in 0..grid_n {
            for x in 0..grid_n {
                let r = (x as f64 - d.cx).hypot(y as f64 - d.cy);
                let c = if edge_px > 0.0 {
                    0.5 * libm::erfc((r - d.r) / edge_px)
                } else if r <= d.r {
                    1.0
                } else {
                    0.0
                };
                if c > 0.0 {
                    log_t[y * grid_n + x] += w * c;
                }
            }
        }
    }
    log_t.into_iter().map(|z| z.exp()).collect()
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn foam_disks(spec: &FoamSpec, index: usize) -> Vec<Disk> {
    let mut rng = object_rng(spec.seed, index, Stream::Phantom);
    let (k0, k1) = spec.disk_count_range;
    let k = rng.random_range(k0..=k1);
    let n = spec.grid_n as f64;
    (0..k)
        .map(|_| Disk {
            cx: uniform(&mut rng, (0.0, n)),
            cy: uniform(&mut rng, (0.0, n)),
            r: uniform(&mut rng, spec.radius_range) * n,
            a: uniform(&mut rng, spec.attenuation_range),
            phi: uniform(&mut rng, spec.phase_range),
        })
        .collect()
}

pub fn gen_foam(spec: &FoamSpec, m: usize) -> Result<Vec<ObjectModel>> {
    spec.validate()?;
    Ok((0..m)
        .map(|i| ObjectModel {
            grid_n: spec.grid_n,
            slices: vec![render_disks(spec.grid_n, &foam_disks(spec, i), spec.edge_px)],
        })
        .collect())
}

// ---- digits -----------------------------------------------------------------

const GLYPH: usize = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphSource {
    BuiltIn,
    /// Directory of 28x28 binary PGM files, used in file-name order.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphSpec {
    pub grid_n: usize,
    pub source: GlyphSource,
    /// Peak phase in radians.
    pub phase_scale: f64,
    /// Side of the resampled glyph as a fraction of the grid.
    pub glyph_fraction: f64,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            grid_n: 32,
            source: GlyphSource::BuiltIn,
            phase_scale: std::f64::consts::FRAC_PI_2,
            glyph_fraction: 0.75,
            seed: 0,
        }
    }
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.phase_scale > 0.0 && self.phase_scale <= std::f64::consts::PI) {
            errs.push(format!("phase_scale must lie in (0, pi] (got {})", self.phase_scale));
        }
        if !(self.glyph_fraction > 0.0 && self.glyph_fraction <= 1.0) {
            errs.push(format!("glyph_fraction must lie in (0, 1] (got {})", self.glyph_fraction));
        }
        if self.grid_n == 0 {
            errs.push("grid_n must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }
}

const FONT: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

/// The ten built-in digits as 28x28 images in [0, 1]: a 5x7 font scaled by 4
/// and softened with a 3x3 box filter.
pub fn builtin_glyphs() -> Vec<Vec<f64>> {
    FONT.iter()
        .map(|rows| {
            let mut img = vec![0.0; GLYPH * GLYPH];
            for (r, row) in rows.iter().enumerate() {
                for (c, bit) in row.bytes().enumerate() {
                    if bit == b'1' {
                        for dy in 0..4 {
                            for dx in 0..4 {
                                img[(r * 4 + dy) * GLYPH + 4 + c * 4 + dx] = 1.0;
                            }
                        }
                    }
                }
            }
            box_blur(&img, GLYPH)
        })
        .collect()
}

fn box_blur(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < n as i64 && xx >= 0 && xx < n as i64 {
                        s += img[yy as usize * n + xx as usize];
                    }
                }
            }
            out[y * n + x] = s / 9.0;
        }
    }
    out
}

/// Parses a binary (P5) PGM with 8-bit samples, returning values scaled to [0, 1].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| CoreError::Data(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (magic P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() < w * h {
        return Err(bad("pixel data truncated"));
    }
    Ok((w, h, data[..w * h].iter().map(|&v| v as f64 / maxval as f64).collect()))
}

pub fn load_glyph_dir(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::Data(format!("glyph directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CoreError::Data(format!("no .pgm files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| CoreError::Data(format!("{}: {e}", p.display())))?;
            let (w, h, v) = parse_pgm(&bytes)?;
            if (w, h) != (GLYPH, GLYPH) {
                return Err(CoreError::Data(format!("{}: expected 28x28, got {w}x{h}", p.display())));
            }
            Ok(v)
        })
        .collect()
}

/// Bilinear resample of a `src_n x src_n` image to `dst_n x dst_n` (pixel-centre aligned).
pub fn resample_bilinear(src: &[f64], src_n: usize, dst_n: usize) -> Vec<f64> {
    let scale = src_n as f64 / dst_n as f64;
    let sample = |y: f64, x: f64| {
        let cl = |v: f64| v.clamp(0.0, (src_n - 1) as f64);
        let (y, x) = (cl(y), cl(x));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(src_n - 1), (x0 + 1).min(src_n - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src[y0 * src_n + x0] * (1.0 - fx) + src[y0 * src_n + x1] * fx;
        let bot = src[y1 * src_n + x0] * (1.0 - fx) + src[y1 * src_n + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = vec![0.0; dst_n * dst_n];
    for y in 0..dst_n {
        for x in 0..dst_n {
            out[y * dst_n + x] = sample((y as f64 + 0.5) * scale - 0.5, (x as f64 + 0.5) * scale - 0.5);
        }
    }
    out
}

/// Glyph resampled and centred on the grid, values in [0, 1].
pub fn place_glyph(glyph: &[f64], grid_n: usize, fraction: f64) -> Vec<f64> {
    let s = ((grid_n as f64 * fraction).round() as usize).clamp(1, grid_n);
    let small = resample_bilinear(glyph, GLYPH, s);
    let off = (grid_n - s) / 2;
    let mut out = vec![0.0; grid_n * grid_n];
    for y in 0..s {
        for x in 0..s {
            out[(y + off) * grid_n + x + off] = small[y * s + x].clamp(0.0, 1.0);
        }
    }
    out
}

/// Digit indices `(front, back)` of object `index`.
pub fn digit_pair(spec: &GlyphSpec, index: usize, glyph_count: usize) -> (usize, usize) {
    let mut rng = object_rng(spec.seed, index, Stream::Phantom);
    (rng.random_range(0..glyph_count), rng.random_range(0..glyph_count))
}

pub fn gen_two_plane_digits(spec: &GlyphSpec, m: usize) -> Result<Vec<ObjectModel>> {
    spec.validate()?;
    let glyphs = match &spec.source {
        GlyphSource::BuiltIn => builtin_glyphs(),
        GlyphSource::Directory(d) => load_glyph_dir(d)?,
    };
    let placed: Vec<Vec<f64>> = glyphs
        .iter()
        .map(|g| place_glyph(g, spec.grid_n, spec.glyph_fraction))
        .collect();
    let phase = |g: &[f64]| -> Vec<Complex64> {
        g.iter()
            .map(|&v| Complex64::from_polar(1.0, spec.phase_scale * v))
            .collect()
    };
    Ok((0..m)
        .map(|i| {
            let (a, b) = digit_pair(spec, i, placed.len());
            ObjectModel {
                grid_n: spec.grid_n,
                slices: vec![phase(&placed[a]), phase(&placed[b])],
            }
        })
        .collect())
}
