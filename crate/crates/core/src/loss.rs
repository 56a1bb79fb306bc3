//! Normalized loss terms over pixel partitions and their exact derivatives.
//!
//! Every integral is discretized with a per-pixel measure (unit by default,
//! optionally cos-latitude). Terms are normalized by their largest attainable
//! value, so `T1..T4` lie in `[0, 1]` and `Tref` in `[0, 4]`:
//!
//! ```text
//! T1   = |sum_all f| / N_all                       neutrality
//! T2   = sum_F f^2 / N_F                           filaments on the zero level
//! T3   = sum_{C\F} |f| / N_{C\F}                   saturation away from filaments
//! T4   = [sum_N (f-pN)^2 + sum_S (f-pS)^2] / (4 (N_N + N_S))   polar caps
//! T5   = sum_F |grad f|^2 / N_F                    gradient norm on filaments
//! Tref = (1/n) sum_i (f(r_i) - p_i)^2              reference points
//!
//! total = l1 T1 + l2 T2 - l3 T3 + l4 T4 + l5 T5 + lref Tref
//! ```

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, ReferencePointSet};
use crate::raster::FilamentMask;

/// Non-negative multipliers on the normalized terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub neutrality: f64,
    pub filament: f64,
    pub bipolarity: f64,
    pub poles: f64,
    pub gradient: f64,
    pub reference: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            neutrality: 1.0,
            filament: 1.0,
            bipolarity: 1.0,
            poles: 1.0,
            gradient: 0.0,
            reference: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.neutrality,
            self.filament,
            self.bipolarity,
            self.poles,
            self.gradient,
            self.reference,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dominant polarity of the polar caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Poles {
    pub north: i8,
    pub south: i8,
}

impl Default for Poles {
    fn default() -> Self {
        Poles {
            north: 1,
            south: -1,
        }
    }
}

impl Poles {
    pub fn new(north: i8, south: i8) -> Result<Self> {
        for p in [north, south] {
            if p != 1 && p != -1 {
                return Err(Error::Domain(format!(
                    "pole polarity must be +1 or -1, got {p}"
                )));
            }
        }
        Ok(Poles { north, south })
    }
}

/// Pixel index sets the loss terms integrate over.
#[derive(Debug, Clone)]
pub struct PixelPartition {
    pub pixel_count: usize,
    pub filament: Vec<usize>,
    pub background: Vec<usize>,
    pub north: Vec<usize>,
    pub south: Vec<usize>,
    pub poles: Poles,
    /// Reference pixel indices with their polarity.
    pub references: Vec<(usize, f64)>,
    /// Optional per-pixel measure; `None` means unit measure.
    pub area: Option<Vec<f64>>,
}

impl PixelPartition {
    pub fn new(
        filaments: &FilamentMask,
        spec: &GridSpec,
        refs: &ReferencePointSet,
        poles: Poles,
    ) -> Result<Self> {
        if !filaments.matches(spec) {
            return Err(Error::Size(format!(
                "filament mask is {}x{}, grid is {}x{}",
                filaments.height(),
                filaments.width(),
                spec.height,
                spec.width
            )));
        }
        let (filament, background): (Vec<usize>, Vec<usize>) =
            (0..filaments.len()).partition(|&i| filaments.data()[i]);
        let bands = spec.band_masks();
        let mut references = Vec::with_capacity(refs.len());
        for p in refs.points() {
            if p.row >= spec.height || p.col >= spec.width {
                return Err(Error::OutOfRange {
                    row: p.row,
                    col: p.col,
                    height: spec.height,
                    width: spec.width,
                });
            }
            references.push((p.row * spec.width + p.col, p.polarity as f64));
        }
        Ok(PixelPartition {
            pixel_count: filaments.len(),
            filament,
            background,
            north: bands.north_pixels(),
            south: bands.south_pixels(),
            poles,
            references,
            area: None,
        })
    }

    /// Switches the pixel measure to cos(latitude), normalized to mean 1.
    pub fn with_cos_latitude_area(mut self, spec: &GridSpec) -> Self {
        let row_w: Vec<f64> = (0..spec.height)
            .map(|r| {
                spec.latitude_of_row(r)
                    .expect("row in range")
                    .to_radians()
                    .cos()
            })
            .collect();
        let mean = row_w.iter().sum::<f64>() / spec.height as f64;
        self.area = Some(
            (0..self.pixel_count)
                .map(|i| row_w[i / spec.width] / mean)
                .collect(),
        );
        self
    }

    pub(crate) fn measure(&self, idx: &[usize]) -> f64 {
        match &self.area {
            Some(a) => idx.iter().map(|&i| a[i]).sum(),
            None => idx.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t4: f64,
    pub t5: f64,
    pub t_ref: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.t1, self.t2, self.t3, self.t4, self.t5, self.t_ref, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Values of one stratum (a sample of, or all of, a pixel set).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stratum<'a> {
    pub f: &'a [f64],
    /// Per-sample measure; `None` is unit measure.
    pub w: Option<&'a [f64]>,
    /// Measure of the whole population the sample stands for.
    pub population: f64,
}

impl Stratum<'_> {
    fn weight(&self, i: usize) -> f64 {
        self.w.map_or(1.0, |w| w[i])
    }

    fn weight_sum(&self) -> f64 {
        self.w.map_or(self.f.len() as f64, |w| w.iter().sum())
    }

    /// Weighted mean of `g(f_i)`, and the scale `w_i / sum w` for each sample.
    fn mean_of(&self, g: impl Fn(f64) -> f64) -> (f64, f64) {
        if self.f.is_empty() {
            return (0.0, 0.0);
        }
        let ws = self.weight_sum();
        let s: f64 = self
            .f
            .iter()
            .enumerate()
            .map(|(i, &x)| self.weight(i) * g(x))
            .sum();
        (s / ws, 1.0 / ws)
    }
}

pub(crate) struct SampleSet<'a> {
    pub filament: Stratum<'a>,
    pub background: Stratum<'a>,
    pub north: Stratum<'a>,
    pub south: Stratum<'a>,
    pub poles: Poles,
    pub ref_f: &'a [f64],
    pub ref_p: &'a [f64],
    /// Spatial gradients aligned with `filament.f`, when the gradient term is active.
    pub filament_grads: Option<&'a [[f64; 3]]>,
}

pub(crate) struct SampleDerivs {
    pub filament: Vec<f64>,
    pub background: Vec<f64>,
    pub north: Vec<f64>,
    pub south: Vec<f64>,
    pub refs: Vec<f64>,
    pub filament_grads: Option<Vec<[f64; 3]>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn evaluate_samples(
    s: &SampleSet<'_>,
    lw: &LossWeights,
) -> (LossBreakdown, SampleDerivs) {
    let mut d = SampleDerivs {
        filament: vec![0.0; s.filament.f.len()],
        background: vec![0.0; s.background.f.len()],
        north: vec![0.0; s.north.f.len()],
        south: vec![0.0; s.south.f.len()],
        refs: vec![0.0; s.ref_f.len()],
        filament_grads: None,
    };

    // T1: area-weighted mean over F and C\F combined.
    let pop_all = s.filament.population + s.background.population;
    let (mf, kf) = s.filament.mean_of(|x| x);
    let (mc, kc) = s.background.mean_of(|x| x);
    let mean_all = if pop_all > 0.0 {
        (s.filament.population * mf + s.background.population * mc) / pop_all
    } else {
        0.0
    };
    let t1 = mean_all.abs();
    if pop_all > 0.0 {
        let sg = lw.neutrality * sign(mean_all);
        let cf = sg * s.filament.population / pop_all * kf;
        let cc = sg * s.background.population / pop_all * kc;
        for (i, dv) in d.filament.iter_mut().enumerate() {
            *dv += cf * s.filament.weight(i);
        }
        for (i, dv) in d.background.iter_mut().enumerate() {
            *dv += cc * s.background.weight(i);
        }
    }

    // T2
    let (t2, k2) = s.filament.mean_of(|x| x * x);
    for (i, dv) in d.filament.iter_mut().enumerate() {
        *dv += lw.filament * 2.0 * s.filament.f[i] * k2 * s.filament.weight(i);
    }

    // T3 enters with a minus sign.
    let (t3, k3) = s.background.mean_of(f64::abs);
    for (i, dv) in d.background.iter_mut().enumerate() {
        *dv -= lw.bipolarity * sign(s.background.f[i]) * k3 * s.background.weight(i);
    }

    // T4
    let pn = s.poles.north as f64;
    let ps = s.poles.south as f64;
    let pop_bands = s.north.population + s.south.population;
    let t4 = if pop_bands > 0.0 {
        let (en, kn) = s.north.mean_of(|x| (x - pn).powi(2));
        let (es, ks) = s.south.mean_of(|x| (x - ps).powi(2));
        let norm = 4.0 * pop_bands;
        let cn = lw.poles * s.north.population / norm * kn;
        let cs = lw.poles * s.south.population / norm * ks;
        for (i, dv) in d.north.iter_mut().enumerate() {
            *dv += cn * 2.0 * (s.north.f[i] - pn) * s.north.weight(i);
        }
        for (i, dv) in d.south.iter_mut().enumerate() {
            *dv += cs * 2.0 * (s.south.f[i] - ps) * s.south.weight(i);
        }
        (s.north.population * en + s.south.population * es) / norm
    } else {
        0.0
    };

    // T5
    let mut t5 = 0.0;
    if let Some(grads) = s.filament_grads {
        if !grads.is_empty() {
            let ws = s.filament.weight_sum();
            let mut dg = Vec::with_capacity(grads.len());
            for (i, g) in grads.iter().enumerate() {
                let w = s.filament.weight(i);
                t5 += w * (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
                let c = lw.gradient * 2.0 * w / ws;
                dg.push([c * g[0], c * g[1], c * g[2]]);
            }
            t5 /= ws;
            d.filament_grads = Some(dg);
        }
    }

    // Tref
    let n = s.ref_f.len();
    let mut t_ref = 0.0;
    if n > 0 {
        for (i, (&f, &p)) in s.ref_f.iter().zip(s.ref_p).enumerate() {
            t_ref += (f - p).powi(2);
            d.refs[i] = lw.reference * 2.0 * (f - p) / n as f64;
        }
        t_ref /= n as f64;
    }

    let total = lw.neutrality * t1 + lw.filament * t2 - lw.bipolarity * t3
        + lw.poles * t4
        + lw.gradient * t5
        + lw.reference * t_ref;
    (
        LossBreakdown {
            t1,
            t2,
            t3,
            t4,
            t5,
            t_ref,
            total,
        },
        d,
    )
}

/// Full-batch loss with per-pixel derivatives.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    /// `dL/df` for every pixel.
    pub d_f: Vec<f64>,
    /// `dL/d(grad f)` for every filament pixel, in `partition.filament` order.
    pub d_grad: Option<Vec<[f64; 3]>>,
}

/// Evaluates every term over the whole map.
///
/// `spatial_grads`, when given, holds `grad f` at each filament pixel in
/// `partition.filament` order and activates the gradient-norm term.
pub fn evaluate(
    f_values: &[f64],
    spatial_grads: Option<&[[f64; 3]]>,
    partition: &PixelPartition,
    weights: &LossWeights,
) -> Result<LossEvaluation> {
    weights.validate()?;
    if f_values.len() != partition.pixel_count {
        return Err(Error::Size(format!(
            "{} field values for {} pixels",
            f_values.len(),
            partition.pixel_count
        )));
    }
    if let Some(i) = f_values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "field value {} at pixel {i}",
            f_values[i]
        )));
    }
    if let Some(i) = f_values.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!(
            "field value {} at pixel {i} outside [-1, 1]",
            f_values[i]
        )));
    }
    if let Some(g) = spatial_grads {
        if g.len() != partition.filament.len() {
            return Err(Error::Size(format!(
                "{} spatial gradients for {} filament pixels",
                g.len(),
                partition.filament.len()
            )));
        }
    }
    let gather = |idx: &[usize]| idx.iter().map(|&i| f_values[i]).collect::<Vec<_>>();
    let gather_w = |idx: &[usize]| {
        partition
            .area
            .as_ref()
            .map(|a| idx.iter().map(|&i| a[i]).collect::<Vec<_>>())
    };
    let (ff, fc, fnn, fs) = (
        gather(&partition.filament),
        gather(&partition.background),
        gather(&partition.north),
        gather(&partition.south),
    );
    let (wf, wc, wn, ws) = (
        gather_w(&partition.filament),
        gather_w(&partition.background),
        gather_w(&partition.north),
        gather_w(&partition.south),
    );
    let ref_f: Vec<f64> = partition
        .references
        .iter()
        .map(|&(i, _)| f_values[i])
        .collect();
    let ref_p: Vec<f64> = partition.references.iter().map(|&(_, p)| p).collect();
    let set = SampleSet {
        filament: Stratum {
            f: &ff,
            w: wf.as_deref(),
            population: partition.measure(&partition.filament),
        },
        background: Stratum {
            f: &fc,
            w: wc.as_deref(),
            population: partition.measure(&partition.background),
        },
        north: Stratum {
            f: &fnn,
            w: wn.as_deref(),
            population: partition.measure(&partition.north),
        },
        south: Stratum {
            f: &fs,
            w: ws.as_deref(),
            population: partition.measure(&partition.south),
        },
        poles: partition.poles,
        ref_f: &ref_f,
        ref_p: &ref_p,
        filament_grads: spatial_grads,
    };
    let (breakdown, d) = evaluate_samples(&set, weights);
    let mut d_f = vec![0.0; partition.pixel_count];
    let scatter = |d_f: &mut [f64], idx: &[usize], vals: &[f64]| {
        for (&i, &v) in idx.iter().zip(vals) {
            d_f[i] += v;
        }
    };
    scatter(&mut d_f, &partition.filament, &d.filament);
    scatter(&mut d_f, &partition.background, &d.background);
    scatter(&mut d_f, &partition.north, &d.north);
    scatter(&mut d_f, &partition.south, &d.south);
    for (&(i, _), &v) in partition.references.iter().zip(&d.refs) {
        d_f[i] += v;
    }
    Ok(LossEvaluation {
        breakdown,
        d_f,
        d_grad: d.filament_grads,
    })
}
