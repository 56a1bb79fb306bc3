//! Synthetic ground-truth worlds: a smooth field periodic in longitude, its
//! sign map, its zero-crossing line, and partial filament fragments along it.
//!
//! ```text
//! g(phi, z) = sum_k a_k cos(m_k phi + psi_k) cos(n_k pi z / 2 + chi_k) + s z^5
//! ```
//!
//! `phi = 2 pi (col + 0.5) / width`, `z = 1 - 2 (row + 0.5) / height`, and `s`
//! is an optional axisymmetric polar component (zero by default) that makes
//! the polar caps unipolar, positive in the North for `s > 0`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};
use crate::raster::{FilamentMask, PolarityMap};

/// Mean filament run length along the PIL, in pixels.
pub const MEAN_RUN_LENGTH: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub amplitude: f64,
    /// Longitudinal wavenumber, at least 1 so every mode averages to zero.
    pub m: u32,
    pub n: u32,
    pub psi: f64,
    pub chi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub harmonics: usize,
    pub max_wavenumber: u32,
    pub fragment_fraction: f64,
    pub seed: u64,
    pub polar_strength: f64,
    /// Explicit modes; when set, `harmonics` and `max_wavenumber` are ignored.
    pub modes: Option<Vec<Mode>>,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        SynthSpec {
            height,
            width,
            harmonics: 3,
            max_wavenumber: 3,
            fragment_fraction: 0.6,
            seed,
            polar_strength: 0.0,
            modes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!(
                "synthetic map must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if self.modes.is_none() && (self.harmonics == 0 || self.max_wavenumber == 0) {
            return Err(Error::Config(
                "need at least one harmonic with wavenumber >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fragment_fraction) {
            return Err(Error::Config(format!(
                "fragment fraction {} outside [0, 1]",
                self.fragment_fraction
            )));
        }
        if !self.polar_strength.is_finite() {
            return Err(Error::Config("polar strength must be finite".into()));
        }
        Ok(())
    }

    fn draw_modes(&self, rng: &mut ChaCha8Rng) -> Vec<Mode> {
        (1..=self.harmonics)
            .map(|k| Mode {
                amplitude: rng.gen_range(0.5..1.0) / k as f64,
                m: rng.gen_range(1..=self.max_wavenumber),
                n: rng.gen_range(0..=self.max_wavenumber),
                psi: rng.gen_range(0.0..2.0 * PI),
                chi: rng.gen_range(0.0..2.0 * PI),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub target: PolarityMap,
    pub pil: FilamentMask,
    pub filaments: FilamentMask,
    /// Underlying field values, row-major.
    pub field: Vec<f64>,
    pub modes: Vec<Mode>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let modes = match &spec.modes {
        Some(m) => m.clone(),
        None => spec.draw_modes(&mut rng),
    };
    let (h, w) = (spec.height, spec.width);
    let mut field = Vec::with_capacity(h * w);
    for row in 0..h {
        let z = 1.0 - 2.0 * (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let phi = 2.0 * PI * (col as f64 + 0.5) / w as f64;
            let g: f64 = modes
                .iter()
                .map(|m| {
                    m.amplitude
                        * (m.m as f64 * phi + m.psi).cos()
                        * (m.n as f64 * PI * z / 2.0 + m.chi).cos()
                })
                .sum();
            field.push(g + spec.polar_strength * z.powi(5));
        }
    }
    let target = PolarityMap::new(
        h,
        w,
        field
            .iter()
            .map(|&g| {
                if g > 0.0 {
                    1
                } else if g < 0.0 {
                    -1
                } else {
                    0
                }
            })
            .collect(),
    )?;
    let pil = zero_crossings(&field, h, w)?;
    let filaments = fragments(&pil, spec.fragment_fraction, &mut rng)?;
    Ok(SynthWorld {
        target,
        pil,
        filaments,
        field,
        modes,
    })
}

/// One-pixel-thin zero level: of each 4-adjacent pair with opposite signs,
/// the pixel with the smaller |g| is marked (lower index on ties). Columns wrap.
fn zero_crossings(field: &[f64], h: usize, w: usize) -> Result<FilamentMask> {
    let mut mask = vec![false; h * w];
    let mut mark = |a: usize, b: usize| {
        let (ga, gb) = (field[a], field[b]);
        if (ga > 0.0) != (gb > 0.0) {
            let pick = if ga.abs() < gb.abs() || (ga.abs() == gb.abs() && a < b) {
                a
            } else {
                b
            };
            mask[pick] = true;
        }
    };
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            mark(i, row * w + (col + 1) % w);
            if row + 1 < h {
                mark(i, i + w);
            }
        }
    }
    for (i, &g) in field.iter().enumerate() {
        if g == 0.0 {
            mask[i] = true;
        }
    }
    FilamentMask::new(h, w, mask)
}

/// PIL pixels in the order of a greedy walk through 8-connected neighbours.
fn walk_order(pil: &FilamentMask) -> Vec<usize> {
    let (h, w) = (pil.height(), pil.width());
    let data = pil.data();
    let mut visited = vec![false; h * w];
    let mut order = Vec::with_capacity(pil.count());
    for start in 0..h * w {
        if !data[start] || visited[start] {
            continue;
        }
        let mut cur = start;
        loop {
            visited[cur] = true;
            order.push(cur);
            let (r, c) = ((cur / w) as isize, (cur % w) as isize);
            let next = [
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ]
            .iter()
            .filter_map(|&(dr, dc)| {
                let nr = r + dr;
                if nr < 0 || nr >= h as isize {
                    return None;
                }
                let nc = (c + dc).rem_euclid(w as isize);
                Some(nr as usize * w + nc as usize)
            })
            .find(|&n| data[n] && !visited[n]);
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
    }
    order
}

/// Contiguous runs along the walk covering `round(rho * |pil|)` pixels, with
/// geometric run lengths and uniformly split gaps.
fn fragments(pil: &FilamentMask, rho: f64, rng: &mut ChaCha8Rng) -> Result<FilamentMask> {
    let order = walk_order(pil);
    let total = order.len();
    let on_target = (rho * total as f64).round() as usize;
    let mut runs = Vec::new();
    let geo = Geometric::new(1.0 / MEAN_RUN_LENGTH).expect("valid probability");
    let mut covered = 0;
    while covered < on_target {
        let len = (1 + geo.sample(rng) as usize).min(on_target - covered);
        runs.push(len);
        covered += len;
    }
    let off_total = total - on_target;
    let mut cuts: Vec<usize> = (0..runs.len())
        .map(|_| rng.gen_range(0..=off_total))
        .collect();
    cuts.sort_unstable();
    let mut mask = vec![false; pil.len()];
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in runs.iter().zip(&cuts) {
        pos += cut - prev_cut;
        prev_cut = *cut;
        for &p in &order[pos..pos + len] {
            mask[p] = true;
        }
        pos += len;
    }
    FilamentMask::new(pil.height(), pil.width(), mask)
}
