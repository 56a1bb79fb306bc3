//! Independent model ensembles and their aggregation into one polarity map.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::net::{encode_snapshot, MlpParams};
use crate::raster::{encode_confidence, encode_polarity, write_atomic, ConfidenceMap, PolarityMap};
use crate::trainer::{predict_map, Problem, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Strategy {
    /// Average member values per pixel, then threshold at zero.
    #[default]
    MeanThenBinarize,
    /// Threshold each member at zero, then take the majority sign.
    BinarizeThenMajority,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Strategy::MeanThenBinarize),
            "majority" => Ok(Strategy::BinarizeThenMajority),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected mean or majority)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MeanThenBinarize => "mean",
            Strategy::BinarizeThenMajority => "majority",
        })
    }
}

/// Seed of ensemble member `k`.
pub fn member_seed(base_seed: u64, k: usize) -> u64 {
    base_seed ^ k as u64
}

/// Zero threshold with ties going to +1.
pub fn binarize(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub member_maps: Vec<ConfidenceMap>,
    pub mean_map: ConfidenceMap,
    /// Values in {-1, +1}.
    pub binarized: PolarityMap,
    pub strategy: Strategy,
}

impl EnsembleResult {
    pub fn from_members(member_maps: Vec<ConfidenceMap>, strategy: Strategy) -> Result<Self> {
        let (mean_map, mean_bin) = aggregate_mean(&member_maps)?;
        let binarized = match strategy {
            Strategy::MeanThenBinarize => mean_bin,
            Strategy::BinarizeThenMajority => aggregate_majority(&member_maps)?,
        };
        Ok(EnsembleResult {
            member_maps,
            mean_map,
            binarized,
            strategy,
        })
    }
}

fn check_members(maps: &[ConfidenceMap]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Size("no ensemble members".into()))?;
    if let Some(k) = maps.iter().position(|m| !m.same_shape(first)) {
        return Err(Error::Size(format!(
            "member {k} is {}x{}, member 0 is {}x{}",
            maps[k].height(),
            maps[k].width(),
            first.height(),
            first.width()
        )));
    }
    Ok(())
}

/// Per-pixel mean and its zero-threshold binarization.
///
/// Each pixel's values are summed in sorted order, so the result does not
/// depend on member order.
pub fn aggregate_mean(maps: &[ConfidenceMap]) -> Result<(ConfidenceMap, PolarityMap)> {
    check_members(maps)?;
    let (h, w) = (maps[0].height(), maps[0].width());
    let m = maps.len() as f64;
    let mut vals = vec![0.0; maps.len()];
    let mean: Vec<f64> = (0..h * w)
        .map(|i| {
            for (v, map) in vals.iter_mut().zip(maps) {
                *v = map.data()[i];
            }
            vals.sort_by(f64::total_cmp);
            (vals.iter().sum::<f64>() / m).clamp(-1.0, 1.0)
        })
        .collect();
    let bin = mean.iter().map(|&v| binarize(v)).collect();
    Ok((
        ConfidenceMap::new(h, w, mean)?,
        PolarityMap::new(h, w, bin)?,
    ))
}

/// Majority of per-member signs; tied votes go to +1.
pub fn aggregate_majority(maps: &[ConfidenceMap]) -> Result<PolarityMap> {
    check_members(maps)?;
    let (h, w) = (maps[0].height(), maps[0].width());
    let data = (0..h * w)
        .map(|i| {
            let votes: i64 = maps.iter().map(|m| binarize(m.data()[i]) as i64).sum();
            if votes >= 0 {
                1
            } else {
                -1
            }
        })
        .collect();
    PolarityMap::new(h, w, data)
}

/// Trains `members` models on `problem`, member `k` seeded with
/// [`member_seed`]`(base_seed, k)` or warm-started from `warm_starts[k]`.
///
/// Members run on the current rayon pool; the result is ordered by `k`.
/// `progress(k, iteration, loss)` is called as members advance.
pub fn train_ensemble(
    problem: &Problem,
    config: &TrainConfig,
    members: usize,
    base_seed: u64,
    warm_starts: Option<&[Option<MlpParams>]>,
    progress: &(dyn Fn(usize, usize, &LossBreakdown) + Sync),
) -> Result<Vec<TrainedModel>> {
    if members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    if let Some(ws) = warm_starts {
        if ws.len() != members {
            return Err(Error::Config(format!(
                "{} warm starts for {members} members",
                ws.len()
            )));
        }
    }
    (0..members)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.seed = member_seed(base_seed, k);
            if let Some(ws) = warm_starts {
                cfg.warm_start = ws[k].clone();
            }
            problem
                .train(&cfg, &mut |it, b| progress(k, it, b))
                .map_err(|e| Error::Member {
                    member: k,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Predicted maps of trained members, in member order.
pub fn member_maps(models: &[TrainedModel], problem: &Problem) -> Result<Vec<ConfidenceMap>> {
    models
        .iter()
        .map(|m| predict_map(&m.params, &problem.spec))
        .collect()
}

/// Writes the ensemble directory:
///
/// ```text
/// member_000.params      parameter snapshot
/// member_000.conf.pgm    member confidence map
/// mean.conf.pgm          per-pixel mean
/// binarized.pgm          aggregated polarity map
/// manifest               caller-supplied text
/// ```
///
/// Returns the file names written.
pub fn save_ensemble(
    dir: &Path,
    models: &[TrainedModel],
    result: &EnsembleResult,
    manifest: &str,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<()> {
        write_atomic(dir.join(&name), bytes)?;
        written.push(name);
        Ok(())
    };
    for (k, (model, map)) in models.iter().zip(&result.member_maps).enumerate() {
        put(
            format!("member_{k:03}.params"),
            &encode_snapshot(&model.params),
        )?;
        put(format!("member_{k:03}.conf.pgm"), &encode_confidence(map))?;
    }
    put("mean.conf.pgm".into(), &encode_confidence(&result.mean_map))?;
    put("binarized.pgm".into(), &encode_polarity(&result.binarized))?;
    put("manifest".into(), manifest.as_bytes())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::geometry::{reference_grid, GridSpec};
    use crate::loss::{LossWeights, Poles};
    use crate::synth::{generate, SynthSpec};
    use proptest::prelude::*;

    fn maps(values: &[&[f64]]) -> Vec<ConfidenceMap> {
        values
            .iter()
            .map(|v| ConfidenceMap::new(1, v.len(), v.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn mean_strategy_example() {
        let m = maps(&[&[0.2], &[-0.5], &[0.1]]);
        let (mean, bin) = aggregate_mean(&m).unwrap();
        assert!((mean.data()[0] + 0.2 / 3.0).abs() < 1e-15);
        assert_eq!(bin.data(), &[-1]);
        assert_eq!(aggregate_majority(&m).unwrap().data(), &[1]);
    }

    #[test]
    fn ties_go_positive() {
        let m = maps(&[&[0.4, 0.0], &[-0.4, 0.0]]);
        assert_eq!(aggregate_mean(&m).unwrap().1.data(), &[1, 1]);
        assert_eq!(aggregate_majority(&m).unwrap().data(), &[1, 1]);
        let all_pos = maps(&[&[0.1], &[0.9], &[0.3]]);
        assert_eq!(aggregate_majority(&all_pos).unwrap().data(), &[1]);
    }

    #[test]
    fn single_member_strategies_agree() {
        let m = maps(&[&[0.3, -0.2, 0.0, -1.0]]);
        let (mean, bin) = aggregate_mean(&m).unwrap();
        assert_eq!(mean, m[0]);
        assert_eq!(bin.data(), &[1, -1, 1, -1]);
        assert_eq!(aggregate_majority(&m).unwrap(), bin);
    }

    #[test]
    fn shape_mismatch_and_empty() {
        let m = vec![
            ConfidenceMap::filled(2, 2, 0.0).unwrap(),
            ConfidenceMap::filled(2, 3, 0.0).unwrap(),
        ];
        assert!(matches!(aggregate_mean(&m), Err(Error::Size(_))));
        assert!(matches!(aggregate_majority(&m), Err(Error::Size(_))));
        assert!(aggregate_mean(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregates_ignore_member_order(seed in any::<u64>(), m in 1usize..7) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let members: Vec<ConfidenceMap> = (0..m)
                .map(|_| ConfidenceMap::new(3, 5, (0..15).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap())
                .collect();
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let (a, ab) = aggregate_mean(&members).unwrap();
            let (b, bb) = aggregate_mean(&shuffled).unwrap();
            prop_assert_eq!(a.clone(), b);
            prop_assert_eq!(ab, bb);
            prop_assert_eq!(aggregate_majority(&members).unwrap(), aggregate_majority(&shuffled).unwrap());
            for i in 0..15 {
                let max = members.iter().map(|mm| mm.data()[i].abs()).fold(0.0, f64::max);
                prop_assert!(a.data()[i].abs() <= max + 1e-15);
            }
        }
    }

    fn problem(seed: u64) -> Problem {
        let w = generate(&SynthSpec::new(16, 32, seed)).unwrap();
        let spec = GridSpec::new(16, 32).unwrap();
        let refs = reference_grid(&spec, 4, &w.target).unwrap();
        Problem::new(
            &w.filaments,
            &spec,
            &refs,
            Poles::default(),
            LossWeights::default(),
        )
        .unwrap()
    }

    #[test]
    fn ensemble_is_deterministic_and_seeded_per_member() {
        let p = problem(1);
        let cfg = TrainConfig {
            iterations: 20,
            ..TrainConfig::paper()
        };
        let a = train_ensemble(&p, &cfg, 4, 17, None, &|_, _, _| {}).unwrap();
        let b = train_ensemble(&p, &cfg, 4, 17, None, &|_, _, _| {}).unwrap();
        assert_eq!(a, b);
        for (k, m) in a.iter().enumerate() {
            assert_eq!(m.config.seed, 17 ^ k as u64);
        }
        let single = p
            .train(
                &TrainConfig {
                    seed: 17,
                    ..cfg.clone()
                },
                &mut |_, _| {},
            )
            .unwrap();
        let one = train_ensemble(&p, &cfg, 1, 17, None, &|_, _, _| {}).unwrap();
        assert_eq!(one[0], single);
    }

    #[test]
    fn member_failure_carries_index() {
        let p = problem(2);
        let mut cfg = TrainConfig {
            iterations: 3,
            ..TrainConfig::paper()
        };
        cfg.adam.learning_rate = f64::MAX;
        let err = train_ensemble(&p, &cfg, 2, 0, None, &|_, _, _| {}).unwrap_err();
        assert!(matches!(err, Error::Member { member: 0, .. }), "{err}");
        assert!(err.is_numeric());
    }

    #[test]
    fn save_layout() {
        let p = problem(3);
        let cfg = TrainConfig {
            iterations: 2,
            ..TrainConfig::paper()
        };
        let models = train_ensemble(&p, &cfg, 2, 0, None, &|_, _, _| {}).unwrap();
        let result = EnsembleResult::from_members(
            member_maps(&models, &p).unwrap(),
            Strategy::MeanThenBinarize,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let names = save_ensemble(dir.path(), &models, &result, "seeds 0 1\n").unwrap();
        for n in [
            "member_000.params",
            "member_001.params",
            "member_000.conf.pgm",
            "member_001.conf.pgm",
            "mean.conf.pgm",
            "binarized.pgm",
            "manifest",
        ] {
            assert!(names.contains(&n.to_string()));
            assert!(dir.path().join(n).exists());
        }
    }
}
