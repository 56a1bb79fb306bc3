//! Per-map reconstruction pipeline and batch driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pilrecon_core::ensemble::{
    member_maps, member_seed, save_ensemble, train_ensemble, EnsembleResult,
};
use pilrecon_core::geometry::{reference_grid, GridSpec, Provenance, ReferencePointSet};
use pilrecon_core::loss::{LossWeights, Poles};
use pilrecon_core::metrics::{
    error_fractions, format_report, pearson, pil_from_polarity, pixel_counts, ReportRow,
};
use pilrecon_core::net::{decode_snapshot, MlpParams};
use pilrecon_core::raster::{
    decode, downsample_filament, downsample_polarity, parse_reference_points, write_atomic,
    AnyRaster, FilamentMask, PolarityMap, RasterKind,
};
use pilrecon_core::trainer::{format_history, Problem};
use rayon::prelude::*;

use crate::failure::Failure;
use crate::manifest::{read_hashed, InputRecord, RunConfig, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub struct MapInputs {
    pub map_id: String,
    pub filaments: PathBuf,
    pub target: Option<PathBuf>,
    pub pil: Option<PathBuf>,
    pub refs: Option<PathBuf>,
}

#[derive(Debug)]
pub struct MapOutcome {
    pub row: Option<ReportRow>,
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

struct Loaded {
    filaments: FilamentMask,
    target: Option<PolarityMap>,
    pil: Option<FilamentMask>,
    refs_text: Option<String>,
    records: Vec<InputRecord>,
}

fn load(inputs: &MapInputs, factor: usize) -> Result<Loaded, Failure> {
    let mut records = Vec::new();
    let mut read = |role: &str, path: &Path| -> Result<Vec<u8>, Failure> {
        let (bytes, sha256) = read_hashed(path)?;
        records.push(InputRecord {
            role: role.into(),
            path: path.to_path_buf(),
            sha256,
        });
        Ok(bytes)
    };
    fn ctx(path: &Path) -> impl Fn(pilrecon_core::Error) -> Failure + '_ {
        move |e| Failure::Io(format!("{}: {e}", path.display()))
    }

    let bytes = read("filaments", &inputs.filaments)?;
    let AnyRaster::Filament(fil) =
        decode(&bytes, RasterKind::Filament).map_err(ctx(&inputs.filaments))?
    else {
        unreachable!()
    };
    let filaments = downsample_filament(&fil, factor)?;
    let target = match &inputs.target {
        Some(p) => {
            let AnyRaster::Polarity(t) =
                decode(&read("target", p)?, RasterKind::Polarity).map_err(ctx(p))?
            else {
                unreachable!()
            };
            Some(downsample_polarity(&t, factor)?)
        }
        None => None,
    };
    let pil = match &inputs.pil {
        Some(p) => {
            let AnyRaster::Filament(m) =
                decode(&read("pil", p)?, RasterKind::Filament).map_err(ctx(p))?
            else {
                unreachable!()
            };
            Some(downsample_filament(&m, factor)?)
        }
        None => None,
    };
    let refs_text =
        match &inputs.refs {
            Some(p) => Some(String::from_utf8(read("refs", p)?).map_err(|_| {
                Failure::Io(format!("{}: reference file is not UTF-8", p.display()))
            })?),
            None => None,
        };
    let shape = (filaments.height(), filaments.width());
    for (name, s) in [
        ("target", target.as_ref().map(|t| (t.height(), t.width()))),
        ("pil", pil.as_ref().map(|t| (t.height(), t.width()))),
    ] {
        if let Some(s) = s {
            if s != shape {
                return Err(Failure::Io(format!(
                    "{name} is {}x{} but filaments are {}x{}",
                    s.0, s.1, shape.0, shape.1
                )));
            }
        }
    }
    Ok(Loaded {
        filaments,
        target,
        pil,
        refs_text,
        records,
    })
}

/// Majority sign over the non-zero target pixels of each polar band; the
/// conventional +1 North / -1 South fills in when a band is empty or tied.
pub fn estimate_poles(target: &PolarityMap, spec: &GridSpec) -> Poles {
    let bands = spec.band_masks();
    let vote = |pixels: Vec<usize>, default: i8| {
        let s: i64 = pixels.iter().map(|&i| target.data()[i] as i64).sum();
        match s.signum() {
            1 => 1,
            -1 => -1,
            _ => default,
        }
    };
    Poles {
        north: vote(bands.north_pixels(), 1),
        south: vote(bands.south_pixels(), -1),
    }
}

fn load_warm(dir: &Path, members: usize) -> Result<Vec<Option<MlpParams>>, Failure> {
    (0..members)
        .map(|k| {
            let path = dir.join(format!("member_{k:03}.params"));
            match std::fs::read(&path) {
                Ok(bytes) => decode_snapshot(&bytes)
                    .map(Some)
                    .map_err(|e| Failure::Io(format!("{}: {e}", path.display()))),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(Failure::Io(format!("{}: {e}", path.display()))),
            }
        })
        .collect()
}

/// Runs one map end to end and writes its ensemble directory.
///
/// With `expected`, input digests must match the given manifest (replay).
pub fn run_map(
    inputs: &MapInputs,
    cfg: &RunConfig,
    warm_start: Option<(String, PathBuf)>,
    dir: &Path,
    expected: Option<&RunManifest>,
) -> Result<MapOutcome, Failure> {
    if cfg.grid_step.is_some_and(|s| s > 0) && inputs.refs.is_some() {
        return Err(Failure::Usage(
            "--grid-step and --refs are mutually exclusive".into(),
        ));
    }
    let mut timings = Vec::new();
    let t = Instant::now();
    let loaded = load(inputs, cfg.downsample)?;
    if let Some(m) = expected {
        for rec in &loaded.records {
            match m.input(&rec.role) {
                Some(want) if want.sha256 == rec.sha256 => {}
                _ => {
                    return Err(Failure::Io(format!(
                        "input '{}' ({}) does not match the manifest digest",
                        rec.role,
                        rec.path.display()
                    )))
                }
            }
        }
    }
    let fil = &loaded.filaments;
    let spec = GridSpec::new(fil.height(), fil.width())?.with_latitude_mode(cfg.latitude_mode);
    let refs = match (&loaded.refs_text, cfg.grid_step) {
        (Some(text), _) => parse_reference_points(text, &spec)?,
        (None, Some(step)) if step > 0 => {
            let target = loaded.target.as_ref().ok_or_else(|| {
                Failure::Usage("--grid-step needs --target to read polarities from".into())
            })?;
            reference_grid(&spec, step, target)?
        }
        _ => ReferencePointSet::empty(Provenance::Grid),
    };
    let estimated = loaded
        .target
        .as_ref()
        .map(|t| estimate_poles(t, &spec))
        .unwrap_or_default();
    let poles = Poles::new(
        cfg.pole_north.unwrap_or(estimated.north),
        cfg.pole_south.unwrap_or(estimated.south),
    )?;
    let warm = match &warm_start {
        Some((_, d)) => Some(load_warm(d, cfg.members)?),
        None => None,
    };
    timings.push(("load".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let weights = LossWeights {
        gradient: cfg.gradient_weight,
        ..LossWeights::default()
    };
    let mut problem = Problem::new(fil, &spec, &refs, poles, weights)?;
    if cfg.cos_latitude {
        problem = problem.with_cos_latitude_area();
    }
    let log_every = (cfg.iterations / 10).max(1);
    let models = train_ensemble(
        &problem,
        &cfg.train_config(),
        cfg.members,
        cfg.seed,
        warm.as_deref(),
        &|k, it, loss| {
            if it % log_every == 0 {
                log::debug!(
                    "{} member {k} iteration {it} loss {:.6}",
                    inputs.map_id,
                    loss.total
                );
            }
        },
    )?;
    timings.push(("train".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let result = EnsembleResult::from_members(member_maps(&models, &problem)?, cfg.strategy)?;
    timings.push(("aggregate".to_string(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let row = match &loaded.target {
        Some(target) => {
            let errors = error_fractions(&result.binarized, target, &spec)?;
            let pil = match &loaded.pil {
                Some(p) => p.clone(),
                None => pil_from_polarity(target)?,
            };
            Some(ReportRow {
                map_id: inputs.map_id.clone(),
                errors,
                counts: pixel_counts(fil, &pil)?,
            })
        }
        None => None,
    };
    timings.push(("score".to_string(), t.elapsed().as_secs_f64()));

    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let mut outputs = Vec::new();
    for k in 0..cfg.members {
        outputs.push(format!("member_{k:03}.params"));
        outputs.push(format!("member_{k:03}.conf.pgm"));
    }
    outputs.extend([
        "mean.conf.pgm".to_string(),
        "binarized.pgm".to_string(),
        "manifest".to_string(),
    ]);
    for (k, m) in models.iter().enumerate() {
        let name = format!("member_{k:03}.history.txt");
        write_atomic(dir.join(&name), format_history(&m.history).as_bytes())?;
        outputs.push(name);
    }
    if let Some(r) = &row {
        write_atomic(
            dir.join("report.txt"),
            format_report(std::slice::from_ref(r)).as_bytes(),
        )?;
        outputs.push("report.txt".into());
    }
    let manifest = RunManifest {
        map_id: inputs.map_id.clone(),
        config: cfg.clone(),
        inputs: loaded.records,
        poles: (poles.north, poles.south),
        seeds: (0..cfg.members).map(|k| member_seed(cfg.seed, k)).collect(),
        warm_start,
        outputs,
        timings,
    };
    let written = save_ensemble(dir, &models, &result, &manifest.to_text())?;
    debug_assert!(written.iter().all(|w| manifest.outputs.contains(w)));
    Ok(MapOutcome {
        row,
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// Parses a batch list: one `map_id filaments [target [pil]]` line per map,
/// `-` for an absent target, `#` comments. Relative paths are taken relative
/// to the list file's directory.
pub fn parse_list(text: &str, base: &Path) -> Result<Vec<MapInputs>, Failure> {
    let mut maps: Vec<MapInputs> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !(2..=4).contains(&f.len()) {
            return Err(Failure::Usage(format!(
                "list line {}: expected 'map_id filaments [target [pil]]'",
                n + 1
            )));
        }
        if maps.iter().any(|m| m.map_id == f[0]) {
            return Err(Failure::Usage(format!(
                "list line {}: duplicate map id '{}'",
                n + 1,
                f[0]
            )));
        }
        let path = |s: &str| (s != "-").then(|| base.join(s));
        maps.push(MapInputs {
            map_id: f[0].to_string(),
            filaments: base.join(f[1]),
            target: f.get(2).and_then(|s| path(s)),
            pil: f.get(3).and_then(|s| path(s)),
            refs: None,
        });
    }
    if maps.is_empty() {
        return Err(Failure::Usage("batch list names no maps".into()));
    }
    Ok(maps)
}

/// Summary statistics over report rows.
pub fn summarize(rows: &[ReportRow], failures: &[(String, Failure)], total: usize) -> String {
    let mut out = String::from("# pilrecon batch summary\n");
    writeln!(out, "maps = {total}").unwrap();
    writeln!(out, "succeeded = {}", total - failures.len()).unwrap();
    writeln!(out, "failed = {}", failures.len()).unwrap();
    writeln!(out, "scored = {}", rows.len()).unwrap();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            "undefined".to_string()
        } else {
            format!("{:.6}", v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let e_total: Vec<f64> = rows.iter().map(|r| r.errors.e_total).collect();
    let e_band: Vec<f64> = rows.iter().map(|r| r.errors.e_band).collect();
    writeln!(out, "mean_e_total = {}", mean(&e_total)).unwrap();
    writeln!(out, "mean_e_band = {}", mean(&e_band)).unwrap();
    let with_ratio: Vec<&ReportRow> = rows.iter().filter(|r| r.counts.ratio.is_some()).collect();
    let ratio: Vec<f64> = with_ratio.iter().map(|r| r.counts.ratio.unwrap()).collect();
    writeln!(out, "mean_ratio = {}", mean(&ratio)).unwrap();
    for (name, pick) in [
        (
            "e_total",
            (|r: &ReportRow| r.errors.e_total) as fn(&ReportRow) -> f64,
        ),
        ("e_band", |r: &ReportRow| r.errors.e_band),
    ] {
        let ys: Vec<f64> = with_ratio.iter().map(|r| pick(r)).collect();
        let value = match pearson(&ratio, &ys) {
            Ok(Some(r)) => format!("{r:.6}"),
            _ => "undefined".into(),
        };
        writeln!(out, "pearson_ratio_{name} = {value}").unwrap();
    }
    out
}

pub fn run_batch(
    list: &Path,
    outdir: &Path,
    cfg: &RunConfig,
    chain: bool,
) -> Result<String, Failure> {
    let text = std::fs::read_to_string(list)
        .map_err(|e| Failure::Io(format!("{}: {e}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new(""));
    let maps = parse_list(&text, base)?;
    std::fs::create_dir_all(outdir)
        .map_err(|e| Failure::Io(format!("{}: {e}", outdir.display())))?;

    let results: Vec<Result<MapOutcome, Failure>> = if chain {
        let mut donor: Option<(String, PathBuf)> = None;
        maps.iter()
            .map(|m| {
                let r = run_map(m, cfg, donor.clone(), &outdir.join(&m.map_id), None);
                if let Ok(o) = &r {
                    donor = Some((m.map_id.clone(), o.dir.clone()));
                }
                r
            })
            .collect()
    } else {
        maps.par_iter()
            .map(|m| run_map(m, cfg, None, &outdir.join(&m.map_id), None))
            .collect()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (m, r) in maps.iter().zip(results) {
        match r {
            Ok(o) => rows.extend(o.row),
            Err(e) => {
                log::error!("map {}: {e}", m.map_id);
                failures.push((m.map_id.clone(), e));
            }
        }
    }
    write_atomic(outdir.join("report.txt"), format_report(&rows).as_bytes())?;
    let summary = summarize(&rows, &failures, maps.len());
    write_atomic(outdir.join("summary.txt"), summary.as_bytes())?;
    if failures.is_empty() {
        return Ok(summary);
    }
    let listing: String = failures
        .iter()
        .map(|(id, e)| format!("{id} {e}\n"))
        .collect();
    write_atomic(outdir.join("failures.txt"), listing.as_bytes())?;
    print!("{summary}");
    Err(Failure::Batch(format!(
        "{} of {} maps failed: {}",
        failures.len(),
        maps.len(),
        failures
            .iter()
            .map(|(id, _)| id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    )))
}
