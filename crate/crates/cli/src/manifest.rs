//! Run configuration and the text manifest written next to every ensemble.
//!
//! A manifest is a list of `key = value` lines. The resolved configuration
//! lives under `config.*`; its hash covers exactly those lines in key order,
//! so parsing and re-writing a manifest leaves the hash unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pilrecon_core::ensemble::Strategy;
use pilrecon_core::geometry::LatitudeMode;
use pilrecon_core::net::AdamConfig;
use pilrecon_core::trainer::{PlateauStop, TrainConfig};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

/// Every setting that affects the numbers a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub members: usize,
    pub strategy: Strategy,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub gradient_weight: f64,
    pub cos_latitude: bool,
    pub determinism: bool,
    pub plateau: Option<PlateauStop>,
    pub latitude_mode: LatitudeMode,
    pub downsample: usize,
    /// `Some(0)` means explicitly no reference points.
    pub grid_step: Option<usize>,
    pub pole_north: Option<i8>,
    pub pole_south: Option<i8>,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                decoupled_decay: self.decoupled_decay,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            seed: self.seed,
            determinism: self.determinism,
            plateau: self.plateau,
            cos_latitude_area: self.cos_latitude,
            ..TrainConfig::paper()
        }
    }

    /// Canonical `(key, value)` pairs, sorted by key. Floats use Rust's
    /// shortest round-trip formatting.
    pub fn lines(&self) -> Vec<(String, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut m = BTreeMap::new();
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("cos_latitude", self.cos_latitude.to_string());
        m.insert("decoupled_decay", self.decoupled_decay.to_string());
        m.insert("determinism", self.determinism.to_string());
        m.insert("downsample", self.downsample.to_string());
        m.insert("gradient_weight", format!("{:?}", self.gradient_weight));
        m.insert("grid_step", opt(self.grid_step.map(|s| s.to_string())));
        m.insert("iterations", self.iterations.to_string());
        m.insert("latitude_mode", self.latitude_mode.to_string());
        m.insert("learning_rate", format!("{:?}", self.learning_rate));
        m.insert("members", self.members.to_string());
        m.insert(
            "plateau",
            opt(self
                .plateau
                .map(|p| format!("{}:{:?}", p.window, p.rel_tol))),
        );
        m.insert("pole_north", opt(self.pole_north.map(|p| p.to_string())));
        m.insert("pole_south", opt(self.pole_south.map(|p| p.to_string())));
        m.insert("seed", self.seed.to_string());
        m.insert("strategy", self.strategy.to_string());
        m.insert("weight_decay", format!("{:?}", self.weight_decay));
        m.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn hash(&self) -> String {
        let text: String = self
            .lines()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn from_lines(map: &BTreeMap<String, String>) -> Result<Self, Failure> {
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Failure::Usage(format!("manifest lacks config.{k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, Failure> {
            v.parse()
                .map_err(|_| Failure::Usage(format!("manifest config.{k}: cannot parse '{v}'")))
        }
        fn opt<T: std::str::FromStr>(k: &str, v: &str) -> Result<Option<T>, Failure> {
            if v == "none" {
                Ok(None)
            } else {
                num(k, v).map(Some)
            }
        }
        let plateau = match get("plateau")? {
            "none" => None,
            v => {
                let (w, t) = v.split_once(':').ok_or_else(|| {
                    Failure::Usage(format!("manifest config.plateau: bad value '{v}'"))
                })?;
                Some(PlateauStop {
                    window: num("plateau", w)?,
                    rel_tol: num("plateau", t)?,
                })
            }
        };
        Ok(RunConfig {
            members: num("members", get("members")?)?,
            strategy: get("strategy")?.parse()?,
            iterations: num("iterations", get("iterations")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            weight_decay: num("weight_decay", get("weight_decay")?)?,
            decoupled_decay: num("decoupled_decay", get("decoupled_decay")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            seed: num("seed", get("seed")?)?,
            gradient_weight: num("gradient_weight", get("gradient_weight")?)?,
            cos_latitude: num("cos_latitude", get("cos_latitude")?)?,
            determinism: num("determinism", get("determinism")?)?,
            plateau,
            latitude_mode: get("latitude_mode")?.parse()?,
            downsample: num("downsample", get("downsample")?)?,
            grid_step: opt("grid_step", get("grid_step")?)?,
            pole_north: opt("pole_north", get("pole_north")?)?,
            pole_south: opt("pole_south", get("pole_south")?)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub map_id: String,
    pub config: RunConfig,
    pub inputs: Vec<InputRecord>,
    pub poles: (i8, i8),
    pub seeds: Vec<u64>,
    /// Map id and ensemble directory whose members initialized this run.
    pub warm_start: Option<(String, PathBuf)>,
    pub outputs: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# pilrecon run manifest\n");
        writeln!(out, "map_id = {}", self.map_id).unwrap();
        writeln!(out, "config_hash = {}", self.config.hash()).unwrap();
        for (k, v) in self.config.lines() {
            writeln!(out, "config.{k} = {v}").unwrap();
        }
        for i in &self.inputs {
            writeln!(out, "input.{} = {} {}", i.role, i.sha256, i.path.display()).unwrap();
        }
        writeln!(out, "poles = {} {}", self.poles.0, self.poles.1).unwrap();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "seeds = {}", seeds.join(" ")).unwrap();
        match &self.warm_start {
            Some((id, dir)) => writeln!(out, "warm_start = {id} {}", dir.display()).unwrap(),
            None => writeln!(out, "warm_start = none").unwrap(),
        }
        for o in &self.outputs {
            writeln!(out, "output = {o}").unwrap();
        }
        for (stage, secs) in &self.timings {
            writeln!(out, "timing.{stage} = {secs:.3}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut config = BTreeMap::new();
        let mut m = RunManifest {
            map_id: String::new(),
            config: placeholder_config(),
            inputs: Vec::new(),
            poles: (1, -1),
            seeds: Vec::new(),
            warm_start: None,
            outputs: Vec::new(),
            timings: Vec::new(),
        };
        let mut hash = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Failure::Usage(format!("manifest line {}: '{line}'", n + 1));
            let (key, value) = line.split_once(" = ").ok_or_else(bad)?;
            if let Some(k) = key.strip_prefix("config.") {
                config.insert(k.to_string(), value.to_string());
            } else if let Some(role) = key.strip_prefix("input.") {
                let (sha, path) = value.split_once(' ').ok_or_else(bad)?;
                m.inputs.push(InputRecord {
                    role: role.to_string(),
                    path: PathBuf::from(path),
                    sha256: sha.to_string(),
                });
            } else if let Some(stage) = key.strip_prefix("timing.") {
                m.timings
                    .push((stage.to_string(), value.parse().map_err(|_| bad())?));
            } else {
                match key {
                    "map_id" => m.map_id = value.to_string(),
                    "config_hash" => hash = Some(value.to_string()),
                    "poles" => {
                        let v: Vec<i8> = value
                            .split_whitespace()
                            .filter_map(|s| s.parse().ok())
                            .collect();
                        if v.len() != 2 {
                            return Err(bad());
                        }
                        m.poles = (v[0], v[1]);
                    }
                    "seeds" => {
                        m.seeds = value
                            .split_whitespace()
                            .map(|s| s.parse().map_err(|_| bad()))
                            .collect::<Result<_, _>>()?
                    }
                    "warm_start" if value == "none" => m.warm_start = None,
                    "warm_start" => {
                        let (id, dir) = value.split_once(' ').ok_or_else(bad)?;
                        m.warm_start = Some((id.to_string(), PathBuf::from(dir)));
                    }
                    "output" => m.outputs.push(value.to_string()),
                    _ => return Err(bad()),
                }
            }
        }
        m.config = RunConfig::from_lines(&config)?;
        if let Some(h) = hash {
            if h != m.config.hash() {
                return Err(Failure::Usage(format!(
                    "manifest config_hash {h} does not match its config lines ({})",
                    m.config.hash()
                )));
            }
        }
        Ok(m)
    }

    pub fn input(&self, role: &str) -> Option<&InputRecord> {
        self.inputs.iter().find(|i| i.role == role)
    }
}

fn placeholder_config() -> RunConfig {
    RunConfig {
        members: 1,
        strategy: Strategy::default(),
        iterations: 1,
        learning_rate: 5e-3,
        weight_decay: 1e-4,
        decoupled_decay: false,
        batch_size: 0,
        seed: 0,
        gradient_weight: 0.0,
        cos_latitude: false,
        determinism: true,
        plateau: None,
        latitude_mode: LatitudeMode::EqualAngle,
        downsample: 1,
        grid_step: None,
        pole_north: None,
        pole_south: None,
    }
}

/// Reads a file and returns its bytes with their digest.
pub fn read_hashed(path: &Path) -> Result<(Vec<u8>, String), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let h = sha256_hex(&bytes);
    Ok((bytes, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> RunManifest {
        RunManifest {
            map_id: "cr1355".into(),
            config: RunConfig {
                members: 8,
                strategy: Strategy::BinarizeThenMajority,
                iterations: 3000,
                learning_rate: 0.005,
                weight_decay: 1e-4,
                decoupled_decay: false,
                batch_size: 512,
                seed: 42,
                gradient_weight: 0.1,
                cos_latitude: true,
                determinism: true,
                plateau: Some(PlateauStop {
                    window: 300,
                    rel_tol: 1e-3,
                }),
                latitude_mode: LatitudeMode::SineLatitude,
                downsample: 8,
                grid_step: Some(32),
                pole_north: Some(-1),
                pole_south: None,
            },
            inputs: vec![InputRecord {
                role: "filaments".into(),
                path: PathBuf::from("/data/maps/cr 1355.pgm"),
                sha256: sha256_hex(b"x"),
            }],
            poles: (-1, 1),
            seeds: vec![42, 43, 40],
            warm_start: Some(("cr1354".into(), PathBuf::from("out/cr1354"))),
            outputs: vec!["member_000.params".into(), "binarized.pgm".into()],
            timings: vec![("train".into(), 1.5)],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = sample();
        let text = m.to_text();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.config.hash(), m.config.hash());
    }

    #[test]
    fn hash_tracks_config_changes_only() {
        let a = sample();
        let mut b = sample();
        b.timings.push(("load".into(), 9.0));
        b.outputs.clear();
        assert_eq!(a.config.hash(), b.config.hash());
        b.config.learning_rate = 0.0050000001;
        assert_ne!(a.config.hash(), b.config.hash());
    }

    #[test]
    fn tampered_config_is_detected() {
        let text = sample()
            .to_text()
            .replace("config.seed = 42", "config.seed = 43");
        assert!(RunManifest::parse(&text).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
