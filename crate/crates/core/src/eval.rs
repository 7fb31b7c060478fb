//! PSNR scoring against ground truth, CSV tables and grayscale PNG rendering.

use std::io::Write;
use std::path::Path;

use ledvae_autodiff::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::optics::ObjectModel;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

pub const CSV_HEADER: [&str; 8] = [
    "method",
    "m",
    "n",
    "pattern_mode",
    "object_id",
    "psnr_complex",
    "psnr_amp",
    "psnr_phase",
];

pub const CSV_COMMENT: &str = "# PSNR peak = max - min of the ground truth on each channel; complex = stacked real and imaginary parts of all slices; estimates aligned by the optimal global phase per slice; phase errors wrapped to (-pi, pi]; nan = channel constant in the truth";

fn check_shapes(est: &ObjectModel, truth: &ObjectModel) -> Result<()> {
    if est.grid_n != truth.grid_n || est.n_slices() != truth.n_slices() {
        return Err(CoreError::Data(format!(
            "estimate ({} slices, {}x{}) and truth ({} slices, {}x{}) differ in shape",
            est.n_slices(),
            est.grid_n,
            est.grid_n,
            truth.n_slices(),
            truth.grid_n,
            truth.grid_n
        )));
    }
    Ok(())
}

/// Multiplies each estimate slice by `e^{-i theta}` with
/// `theta = arg(sum truth * conj(est))`, the global phase minimizing `||truth - est e^{i t}||`.
pub fn align_global_phase(est: &ObjectModel, truth: &ObjectModel) -> Result<ObjectModel> {
    check_shapes(est, truth)?;
    let slices = est
        .slices
        .iter()
        .zip(&truth.slices)
        .map(|(e, t)| {
            let s: Complex64 = t.iter().zip(e).map(|(t, e)| t * e.conj()).sum();
            let theta = if s.norm() == 0.0 { 0.0 } else { s.arg() };
            let rot = Complex64::from_polar(1.0, theta);
            e.iter().map(|z| z * rot).collect()
        })
        .collect();
    Ok(ObjectModel {
        grid_n: est.grid_n,
        slices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Complex,
    Amp,
    Phase,
}

/// `10 log10(peak^2 / mse)`; `+inf` when the inputs match exactly.
pub fn psnr_from(peak: f64, mse: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(CoreError::Data("PSNR undefined: ground truth is constant on this channel".into()));
    }
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

fn range(v: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// PSNR of an (already aligned) estimate on one channel.
pub fn psnr(est: &ObjectModel, truth: &ObjectModel, channel: Channel) -> Result<f64> {
    check_shapes(est, truth)?;
    let t: Vec<Complex64> = truth.slices.concat();
    let e: Vec<Complex64> = est.slices.concat();
    let (peak, mse) = match channel {
        Channel::Complex => {
            let peak = range(t.iter().flat_map(|z| [z.re, z.im]));
            let se: f64 = t.iter().zip(&e).map(|(t, e)| (t - e).norm_sqr()).sum();
            (peak, se / (2 * t.len()) as f64)
        }
        Channel::Amp => {
            let peak = range(t.iter().map(|z| z.norm()));
            let se: f64 = t.iter().zip(&e).map(|(t, e)| (t.norm() - e.norm()).powi(2)).sum();
            (peak, se / t.len() as f64)
        }
        Channel::Phase => {
            let peak = range(t.iter().map(|z| z.arg()));
            let se: f64 = t.iter().zip(&e).map(|(t, e)| (e * t.conj()).arg().powi(2)).sum();
            (peak, se / t.len() as f64)
        }
    };
    psnr_from(peak, mse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub method: String,
    pub m: usize,
    pub n: usize,
    pub pattern_mode: String,
    pub object_id: String,
    pub psnr_complex: f64,
    /// `None` when the truth is constant on the channel.
    pub psnr_amp: Option<f64>,
    pub psnr_phase: Option<f64>,
}

/// Aligns `est` to `truth` and scores all three channels.
pub fn score(est: &ObjectModel, truth: &ObjectModel) -> Result<(f64, Option<f64>, Option<f64>)> {
    let aligned = align_global_phase(est, truth)?;
    let c = psnr(&aligned, truth, Channel::Complex)?;
    let a = psnr(&aligned, truth, Channel::Amp).ok();
    let p = psnr(&aligned, truth, Channel::Phase).ok();
    Ok((c, a, p))
}

pub fn mean_complex(rows: &[PsnrRow]) -> f64 {
    rows.iter().map(|r| r.psnr_complex.min(PSNR_CAP)).sum::<f64>() / rows.len() as f64
}

fn fmt_db(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_nan() => "nan".into(),
        Some(v) => format!("{:.6}", v.min(PSNR_CAP)),
        None => "nan".into(),
    }
}

/// Writes the comment line, the header row, then one row per report.
pub fn report_csv(rows: &[PsnrRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_COMMENT}")?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
    let err = |e: csv::Error| CoreError::Data(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.m.to_string(),
            r.n.to_string(),
            r.pattern_mode.clone(),
            r.object_id.clone(),
            fmt_db(Some(r.psnr_complex)),
            fmt_db(r.psnr_amp),
            fmt_db(r.psnr_phase),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalize {
    /// Minimum maps to 0, maximum to 255; a constant image renders as all zeros.
    MinMax,
    /// `lo` maps to 0, `hi` to 255, values outside are clipped.
    Fixed(f64, f64),
}

pub fn quantize(values: &[f64], norm: Normalize) -> Vec<u8> {
    let (lo, hi) = match norm {
        Normalize::MinMax => values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v))),
        Normalize::Fixed(lo, hi) => (lo, hi),
    };
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// 8-bit grayscale, non-interlaced PNG of a `width x height` row-major image.
pub fn render_png(values: &[f64], width: usize, height: usize, path: &Path, norm: Normalize) -> Result<()> {
    if values.len() != width * height {
        return Err(CoreError::Data(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| CoreError::Data(format!("png: {e}"));
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(&quantize(values, norm)).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(())
}

/// Amplitude and phase planes of every slice, as `(name, values)` pairs.
pub fn amp_phase_planes(obj: &ObjectModel) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (s, sl) in obj.slices.iter().enumerate() {
        out.push((format!("amp{s}"), sl.iter().map(|z| z.norm()).collect()));
        out.push((format!("phase{s}"), sl.iter().map(|z| z.arg()).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(v: Vec<Complex64>) -> ObjectModel {
        let n = (v.len() as f64).sqrt() as usize;
        ObjectModel::new(n, vec![v]).unwrap()
    }

    #[test]
    fn psnr_formula_examples() {
        assert_eq!(psnr_from(1.0, 1.0).unwrap(), 0.0);
        assert!((psnr_from(1.0, 0.01).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from(1.0, 0.0).unwrap(), f64::INFINITY);
        assert!(psnr_from(0.0, 0.1).is_err());
    }

    #[test]
    fn identical_hits_cap_in_csv() {
        let t = obj((0..4).map(|k| Complex64::new(k as f64, 0.5)).collect());
        let (c, _, _) = score(&t, &t).unwrap();
        assert_eq!(c, f64::INFINITY);
        assert_eq!(fmt_db(Some(c)), "99.000000");
    }

    #[test]
    fn global_phase_removed() {
        let t = obj((0..16).map(|k| Complex64::new(1.0 + 0.1 * k as f64, 0.3 * k as f64)).collect());
        let rot = Complex64::from_polar(1.0, 0.7);
        let e = obj(t.slices[0].iter().map(|z| z * rot).collect());
        let a = align_global_phase(&e, &t).unwrap();
        for (x, y) in a.slices[0].iter().zip(&t.slices[0]) {
            assert!((x - y).norm() < 1e-12);
        }
        let same = align_global_phase(&t, &t).unwrap();
        for (x, y) in same.slices[0].iter().zip(&t.slices[0]) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn zero_overlap_keeps_estimate() {
        let t = obj(vec![Complex64::new(1.0, 0.0); 4]);
        let e = obj(vec![Complex64::new(0.0, 0.0); 4]);
        assert_eq!(align_global_phase(&e, &t).unwrap(), e);
    }

    #[test]
    fn minmax_constant_is_black() {
        assert_eq!(quantize(&[3.0; 5], Normalize::MinMax), vec![0; 5]);
        assert_eq!(quantize(&[0.0, 0.5, 1.0], Normalize::MinMax), vec![0, 128, 255]);
        assert_eq!(quantize(&[-1.0, 2.0], Normalize::Fixed(0.0, 1.0)), vec![0, 255]);
    }
}
