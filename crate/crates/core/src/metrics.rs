//! Reconstruction errors and descriptive statistics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::raster::{FilamentMask, PolarityMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// Fraction of mismatched pixels over the whole map.
    pub e_total: f64,
    /// Fraction of mismatched pixels within 40 degrees of the equator.
    pub e_band: f64,
    pub evaluated_total: usize,
    pub evaluated_band: usize,
}

/// Mismatch fractions of a binarized prediction against a target.
///
/// Target pixels valued 0 are left out of numerators and denominators. A
/// region with no evaluable pixel reports 0.
pub fn error_fractions(
    pred: &PolarityMap,
    target: &PolarityMap,
    spec: &GridSpec,
) -> Result<ErrorReport> {
    if !pred.same_shape(target) || !pred.matches(spec) {
        return Err(Error::Size(format!(
            "prediction {}x{}, target {}x{}, grid {}x{}",
            pred.height(),
            pred.width(),
            target.height(),
            target.width(),
            spec.height,
            spec.width
        )));
    }
    if let Some(i) = pred.data().iter().position(|&v| v == 0) {
        return Err(Error::Domain(format!(
            "prediction has 0 at pixel ({}, {}); expected a binarized map",
            i / pred.width(),
            i % pred.width()
        )));
    }
    let bands = spec.band_masks();
    let (mut n, mut bad, mut nb, mut badb) = (0usize, 0usize, 0usize, 0usize);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if t == 0 {
            continue;
        }
        let miss = (p != t) as usize;
        n += 1;
        bad += miss;
        if bands.is_equator(i) {
            nb += 1;
            badb += miss;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ErrorReport {
        e_total: frac(bad, n),
        e_band: frac(badb, nb),
        evaluated_total: n,
        evaluated_band: nb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCounts {
    pub n_filament: usize,
    pub n_pil: usize,
    /// `None` when the map has no PIL pixels.
    pub ratio: Option<f64>,
}

pub fn pixel_counts(filaments: &FilamentMask, pil: &FilamentMask) -> Result<PixelCounts> {
    if !filaments.same_shape(pil) {
        return Err(Error::Size("filament and PIL masks differ in shape".into()));
    }
    let n_filament = filaments.count();
    let n_pil = pil.count();
    Ok(PixelCounts {
        n_filament,
        n_pil,
        ratio: (n_pil > 0).then(|| n_filament as f64 / n_pil as f64),
    })
}

/// PIL pixels of a tri-valued polarity map: pixels coded 0, plus positive
/// pixels with a negative 4-neighbour (columns wrap).
pub fn pil_from_polarity(target: &PolarityMap) -> Result<FilamentMask> {
    let (h, w) = (target.height(), target.width());
    let mut mask = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            let v = target.get(row, col);
            mask[row * w + col] = v == 0
                || (v == 1 && {
                    let mut nb = vec![
                        target.get(row, (col + 1) % w),
                        target.get(row, (col + w - 1) % w),
                    ];
                    if row > 0 {
                        nb.push(target.get(row - 1, col));
                    }
                    if row + 1 < h {
                        nb.push(target.get(row + 1, col));
                    }
                    nb.contains(&-1)
                });
        }
    }
    FilamentMask::new(h, w, mask)
}

/// Sample Pearson correlation; `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::Size(format!(
            "series lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Size("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// One report row per map.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub map_id: String,
    pub errors: ErrorReport,
    pub counts: PixelCounts,
}

pub const REPORT_HEADER: &str = "# map_id e_total e_band n_filament n_pil ratio";

impl ReportRow {
    pub fn format(&self) -> String {
        let ratio = self
            .counts
            .ratio
            .map_or_else(|| "NA".to_string(), |r| format!("{r:.6}"));
        format!(
            "{} {:.6} {:.6} {} {} {}",
            self.map_id,
            self.errors.e_total,
            self.errors.e_band,
            self.counts.n_filament,
            self.counts.n_pil,
            ratio
        )
    }
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.format()).unwrap();
    }
    out
}
