//! Optimization of one field model on one map.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, ReferencePointSet};
use crate::loss::{
    self, evaluate_samples, LossBreakdown, LossWeights, PixelPartition, Poles, SampleSet, Stratum,
};
use crate::net::{adam_step, AdamConfig, AdamState, MlpParams, MlpSpec};
use crate::raster::{ConfidenceMap, FilamentMask};

/// Stop once the mean loss over a window improves on the previous window by
/// less than `rel_tol` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauStop {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for PlateauStop {
    fn default() -> Self {
        PlateauStop {
            window: 2000,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Pixels per step; 0 means the whole map every step.
    pub batch_size: usize,
    pub seed: u64,
    pub warm_start: Option<MlpParams>,
    pub record_every: usize,
    /// Serial, fixed-order gradient accumulation. When off, full-batch
    /// gradients are accumulated over parallel chunks.
    pub determinism: bool,
    pub plateau: Option<PlateauStop>,
    pub mlp: MlpSpec,
    pub cos_latitude_area: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// 3e4 full-batch Adam steps at lr 5e-3, weight decay 1e-4.
    pub fn paper() -> Self {
        TrainConfig {
            iterations: 30_000,
            adam: AdamConfig::default(),
            batch_size: 0,
            seed: 0,
            warm_start: None,
            record_every: 100,
            determinism: true,
            plateau: None,
            mlp: MlpSpec::default(),
            cos_latitude_area: false,
        }
    }

    /// Short runs for interactive refinement at 64x128.
    pub fn interactive() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 8192,
            plateau: Some(PlateauStop {
                window: 300,
                rel_tol: 1e-3,
            }),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 && self.warm_start.is_none() {
            return Err(Error::Config(
                "iterations must be at least 1 without a warm start".into(),
            ));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.learning_rate
            )));
        }
        if !(self.adam.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 {
                return Err(Error::Config("plateau window must be at least 1".into()));
            }
        }
        if let Some(w) = &self.warm_start {
            if w.spec() != &self.mlp {
                return Err(Error::Config(
                    "warm-start parameters do not match the network shape".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    /// Exact full-map loss at the final parameters.
    pub final_breakdown: LossBreakdown,
    /// Loss at recorded iterations (mini-batch estimates in mini-batch mode),
    /// ending with the exact final entry.
    pub history: Vec<(usize, LossBreakdown)>,
    pub iterations_run: usize,
    pub config: TrainConfig,
}

/// Everything about a map that is shared by all models trained on it.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: GridSpec,
    pub coords: Vec<[f64; 3]>,
    pub partition: PixelPartition,
    pub weights: LossWeights,
}

impl Problem {
    pub fn new(
        filaments: &FilamentMask,
        spec: &GridSpec,
        refs: &ReferencePointSet,
        poles: Poles,
        weights: LossWeights,
    ) -> Result<Self> {
        spec.validate()?;
        weights.validate()?;
        let partition = PixelPartition::new(filaments, spec, refs, poles)?;
        Ok(Problem {
            spec: *spec,
            coords: spec.embed_all(),
            partition,
            weights,
        })
    }

    pub fn with_cos_latitude_area(mut self) -> Self {
        self.partition = self.partition.with_cos_latitude_area(&self.spec);
        self
    }

    /// Exact loss over the full map.
    pub fn full_loss(&self, params: &MlpParams) -> Result<LossBreakdown> {
        let f = params.forward_unchecked(&self.coords);
        let grads = self.filament_grads(params)?;
        Ok(loss::evaluate(&f, grads.as_deref(), &self.partition, &self.weights)?.breakdown)
    }

    fn filament_grads(&self, params: &MlpParams) -> Result<Option<Vec<[f64; 3]>>> {
        if self.weights.gradient == 0.0 {
            return Ok(None);
        }
        let pts: Vec<[f64; 3]> = self
            .partition
            .filament
            .iter()
            .map(|&i| self.coords[i])
            .collect();
        params.spatial_gradient(&pts).map(Some)
    }

    fn full_batch_step(
        &self,
        params: &MlpParams,
        cfg: &TrainConfig,
    ) -> Result<(LossBreakdown, MlpParams)> {
        if self.weights.gradient > 0.0 {
            let f = params.forward_unchecked(&self.coords);
            let grads = self.filament_grads(params)?;
            let ev = loss::evaluate(&f, grads.as_deref(), &self.partition, &self.weights)?;
            let mut up_grad = vec![[0.0; 3]; self.coords.len()];
            if let Some(dg) = &ev.d_grad {
                for (&i, g) in self.partition.filament.iter().zip(dg) {
                    up_grad[i] = *g;
                }
            }
            let grad = params.backward_with_spatial(&self.coords, &ev.d_f, &up_grad)?;
            return Ok((ev.breakdown, grad));
        }
        if cfg.determinism {
            let tape = params.tape(&self.coords);
            let f = tape.outputs();
            let ev = loss::evaluate(&f, None, &self.partition, &self.weights)?;
            let mut grad = MlpParams::zeros(params.spec());
            tape.backward(&ev.d_f, grad.values_mut());
            Ok((ev.breakdown, grad))
        } else {
            let f = params.forward_unchecked(&self.coords);
            let ev = loss::evaluate(&f, None, &self.partition, &self.weights)?;
            let grad = params.backward_chunked(&self.coords, &ev.d_f, 4096)?;
            Ok((ev.breakdown, grad))
        }
    }

    fn mini_batch_step(
        &self,
        params: &MlpParams,
        sampler: &StratifiedSampler,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, MlpParams)> {
        let batch = sampler.draw(&self.partition, rng);
        let pts: Vec<[f64; 3]> = batch.indices.iter().map(|&i| self.coords[i]).collect();
        let tape = params.tape(&pts);
        let f = tape.outputs();
        let [rf, rc, rn, rs, rr] = batch.ranges();
        let area = self.partition.area.as_ref();
        let w: Option<Vec<f64>> = area.map(|a| batch.indices.iter().map(|&i| a[i]).collect());
        let ws = |r: &std::ops::Range<usize>| w.as_ref().map(|w| &w[r.clone()]);
        let fil_grads = if self.weights.gradient > 0.0 {
            Some(params.spatial_gradient(&pts[rf.clone()])?)
        } else {
            None
        };
        let set = SampleSet {
            filament: Stratum {
                f: &f[rf.clone()],
                w: ws(&rf),
                population: sampler.population[0],
            },
            background: Stratum {
                f: &f[rc.clone()],
                w: ws(&rc),
                population: sampler.population[1],
            },
            north: Stratum {
                f: &f[rn.clone()],
                w: ws(&rn),
                population: sampler.population[2],
            },
            south: Stratum {
                f: &f[rs.clone()],
                w: ws(&rs),
                population: sampler.population[3],
            },
            poles: self.partition.poles,
            ref_f: &f[rr.clone()],
            ref_p: &sampler.ref_polarity,
            filament_grads: fil_grads.as_deref(),
        };
        let (breakdown, d) = evaluate_samples(&set, &self.weights);
        let upstream: Vec<f64> = d
            .filament
            .iter()
            .chain(&d.background)
            .chain(&d.north)
            .chain(&d.south)
            .chain(&d.refs)
            .copied()
            .collect();
        let grad = match d.filament_grads {
            Some(dg) => {
                let mut up_grad = vec![[0.0; 3]; pts.len()];
                up_grad[rf].copy_from_slice(&dg);
                params.backward_with_spatial(&pts, &upstream, &up_grad)?
            }
            None => {
                let mut grad = MlpParams::zeros(params.spec());
                tape.backward(&upstream, grad.values_mut());
                grad
            }
        };
        Ok((breakdown, grad))
    }

    /// Trains one model; `progress` sees every completed iteration.
    pub fn train(
        &self,
        cfg: &TrainConfig,
        progress: &mut dyn FnMut(usize, &LossBreakdown),
    ) -> Result<TrainedModel> {
        cfg.validate()?;
        let mut params = match &cfg.warm_start {
            Some(p) => p.clone(),
            None => MlpParams::init(&cfg.mlp, cfg.seed),
        };
        let mut state = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let sampler = (cfg.batch_size > 0 && cfg.batch_size < self.coords.len())
            .then(|| StratifiedSampler::new(&self.partition, cfg.batch_size));
        let mut history = Vec::new();
        let mut window_sum = 0.0;
        let mut prev_window: Option<f64> = None;
        let mut iterations_run = 0;
        for it in 0..cfg.iterations {
            let (breakdown, grad) = match &sampler {
                Some(s) => self.mini_batch_step(&params, s, &mut rng),
                None => self.full_batch_step(&params, cfg),
            }
            .map_err(|e| at_iteration(e, it))?;
            if !breakdown.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {it}: {breakdown:?}"
                )));
            }
            if it % cfg.record_every == 0 {
                history.push((it, breakdown));
            }
            adam_step(&mut params, &grad, &mut state, &cfg.adam).map_err(|e| {
                Error::Numeric(format!("iteration {it}: {e}; loss terms {breakdown:?}"))
            })?;
            iterations_run = it + 1;
            progress(iterations_run, &breakdown);

            if let Some(p) = cfg.plateau {
                window_sum += breakdown.total;
                if iterations_run % p.window == 0 {
                    let mean = window_sum / p.window as f64;
                    window_sum = 0.0;
                    if let Some(prev) = prev_window {
                        if (prev - mean) / prev.abs().max(1e-12) < p.rel_tol {
                            break;
                        }
                    }
                    prev_window = Some(mean);
                }
            }
        }
        let final_breakdown = self
            .full_loss(&params)
            .map_err(|e| at_iteration(e, iterations_run))?;
        if !final_breakdown.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite final loss: {final_breakdown:?}"
            )));
        }
        history.push((iterations_run, final_breakdown));
        Ok(TrainedModel {
            params,
            final_breakdown,
            history,
            iterations_run,
            config: cfg.clone(),
        })
    }
}

/// Per-step sample sizes and population measures for F, C\F, North, South.
#[derive(Debug, Clone)]
struct StratifiedSampler {
    sizes: [usize; 4],
    population: [f64; 4],
    ref_idx: Vec<usize>,
    ref_polarity: Vec<f64>,
}

struct Batch {
    indices: Vec<usize>,
    counts: [usize; 5],
}

impl Batch {
    fn ranges(&self) -> [std::ops::Range<usize>; 5] {
        let mut start = 0;
        self.counts.map(|c| {
            let r = start..start + c;
            start += c;
            r
        })
    }
}

impl StratifiedSampler {
    fn new(p: &PixelPartition, batch: usize) -> Self {
        let n = p.pixel_count as f64;
        let share = |len: usize| -> usize {
            if len == 0 {
                0
            } else {
                ((batch as f64 * len as f64 / n).round() as usize).clamp(1, len)
            }
        };
        let nf = share(p.filament.len());
        let nc = batch
            .saturating_sub(nf)
            .clamp(p.background.len().min(1), p.background.len());
        StratifiedSampler {
            sizes: [nf, nc, share(p.north.len()), share(p.south.len())],
            population: [
                p.measure(&p.filament),
                p.measure(&p.background),
                p.measure(&p.north),
                p.measure(&p.south),
            ],
            ref_idx: p.references.iter().map(|&(i, _)| i).collect(),
            ref_polarity: p.references.iter().map(|&(_, v)| v).collect(),
        }
    }

    fn draw(&self, p: &PixelPartition, rng: &mut ChaCha8Rng) -> Batch {
        let pools = [&p.filament, &p.background, &p.north, &p.south];
        let mut indices = Vec::with_capacity(self.sizes.iter().sum::<usize>() + self.ref_idx.len());
        for (pool, &k) in pools.iter().zip(&self.sizes) {
            if k == pool.len() {
                indices.extend_from_slice(pool);
            } else {
                indices.extend(index::sample(rng, pool.len(), k).iter().map(|j| pool[j]));
            }
        }
        indices.extend_from_slice(&self.ref_idx);
        Batch {
            indices,
            counts: [
                self.sizes[0],
                self.sizes[1],
                self.sizes[2],
                self.sizes[3],
                self.ref_idx.len(),
            ],
        }
    }
}

fn at_iteration(e: Error, it: usize) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("iteration {it}: {e}"))
    } else {
        e
    }
}

/// Trains a fresh (or warm-started) model on one map.
pub fn train_single(
    filaments: &FilamentMask,
    spec: &GridSpec,
    refs: &ReferencePointSet,
    poles: Poles,
    weights: LossWeights,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut problem = Problem::new(filaments, spec, refs, poles, weights)?;
    if config.cos_latitude_area {
        problem = problem.with_cos_latitude_area();
    }
    problem.train(config, &mut |_, _| {})
}

/// Field values at every pixel.
pub fn predict_map(params: &MlpParams, spec: &GridSpec) -> Result<ConfidenceMap> {
    let values = params.forward(&spec.embed_all())?;
    ConfidenceMap::new(spec.height, spec.width, values)
}

/// Loss history as text, one `iter T1 T2 T3 T4 T5 Tref total` row per entry.
pub fn format_history(history: &[(usize, LossBreakdown)]) -> String {
    let mut out = String::from("# iter T1 T2 T3 T4 T5 Tref total\n");
    for (it, b) in history {
        writeln!(
            out,
            "{it} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            b.t1, b.t2, b.t3, b.t4, b.t5, b.t_ref, b.total
        )
        .unwrap();
    }
    out
}
