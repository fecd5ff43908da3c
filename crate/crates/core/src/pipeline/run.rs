//! Stage execution with artifact caching.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::config::{RankMode, RunConfig};
use super::manifest::{hash_file, sha256_hex, Artifact, Failure, RunManifest, StageRecord};
use super::report;
use crate::csvio;
use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec, NeuralField};
use crate::rank::{self, ManifoldCurve, RankReport, ScalarFn};
use crate::symbolic::{self, Binding};
use crate::systems::{SampleBatch, System};
use crate::train;

pub const BATCH_FILE: &str = "batch.csv";
pub const ENSEMBLE_HEADER: &str = "ensemble.json";
pub const ENSEMBLE_BLOB: &str = "ensemble.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_JSON: &str = "loss.json";
pub const RANK_FILE: &str = "rank.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SEARCH_FILE: &str = "search.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Train,
    Rank,
    Sweep,
    Search,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 5] = [Stage::Sample, Stage::Train, Stage::Rank, Stage::Search, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Train => "train",
            Stage::Rank => "rank",
            Stage::Sweep => "sweep",
            Stage::Search => "search",
            Stage::Report => "report",
        }
    }

    fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Sample | Stage::Report => &[],
            Stage::Train | Stage::Sweep | Stage::Search => &[BATCH_FILE],
            Stage::Rank => &[BATCH_FILE, ENSEMBLE_HEADER, ENSEMBLE_BLOB],
        }
    }
}

/// Output of the rank stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOutput {
    pub system: String,
    pub n_nets: usize,
    pub differential: Option<RankReport>,
    pub manifold: Option<ManifoldCurve>,
}

fn stage_key(cfg: &RunConfig, st: Stage) -> Result<String> {
    let mut text = format!("{}|{}|{}|", env!("CARGO_PKG_VERSION"), st.name(), cfg.system);
    let blocks = match st {
        Stage::Sample => serde_json::to_string(&(&cfg.params, &cfg.sample))?,
        Stage::Train => serde_json::to_string(&(&cfg.params, &cfg.model, &cfg.train))?,
        Stage::Rank => serde_json::to_string(&cfg.rank)?,
        Stage::Sweep => serde_json::to_string(&(&cfg.params, &cfg.model, &cfg.train, &cfg.sweep))?,
        Stage::Search => serde_json::to_string(&(&cfg.params, &cfg.search))?,
        Stage::Report => String::new(),
    };
    text.push_str(&blocks);
    for f in st.inputs() {
        text.push_str(&hash_file(&cfg.output.join(f))?);
    }
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_batch(dir: &Path, sys: &System, seed: u64) -> Result<SampleBatch> {
    let p = dir.join(BATCH_FILE);
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    let b = csvio::batch_from_csv(&text, &sys.name(), seed)?;
    if b.labels != sys.labels() {
        return Err(Error::Config(format!("{} was sampled for a different system", p.display())));
    }
    Ok(b)
}

/// The leading base-system columns of a batch.
fn base_batch(b: &SampleBatch, base: &System) -> SampleBatch {
    SampleBatch {
        system: base.name(),
        seed: b.seed,
        labels: base.labels().to_vec(),
        points: b.points.slice(s![.., ..base.s()]).to_owned(),
    }
}

pub fn load_ensemble(dir: &Path) -> Result<Vec<NeuralField>> {
    nn::io::load(&dir.join(ENSEMBLE_HEADER), &dir.join(ENSEMBLE_BLOB))
}

pub fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<T> {
    let p = dir.join(file);
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

/// Compute a stage; returns (file name, contents) pairs.
fn compute(cfg: &RunConfig, st: Stage) -> Result<Vec<(String, Vec<u8>)>> {
    let dir = cfg.output.as_path();
    let sys = cfg.system()?;
    let tsys = cfg.train_system()?;
    let out = match st {
        Stage::Sample => {
            let b = sys.sample(cfg.sample.n_points, cfg.sample.seed)?;
            vec![(BATCH_FILE.into(), csvio::batch_to_csv(&b).into_bytes())]
        }
        Stage::Train => {
            let b = base_batch(&load_batch(dir, &sys, cfg.sample.seed)?, &tsys);
            let arch = ArchSpec::for_system(&tsys, cfg.arch_kind(&tsys), cfg.model.pde_features)?;
            let (nets, rep) = train::train(&tsys, &b, cfg.n_nets(&tsys), &arch, &cfg.train)?;
            let (header, blob) = nn::io::encode(&nets)?;
            vec![
                (ENSEMBLE_HEADER.into(), (header + "\n").into_bytes()),
                (ENSEMBLE_BLOB.into(), blob),
                (LOSS_CSV.into(), rep.to_csv().into_bytes()),
                (LOSS_JSON.into(), json(&rep)?),
            ]
        }
        Stage::Rank => {
            let b = base_batch(&load_batch(dir, &sys, cfg.sample.seed)?, &tsys);
            let nets = load_ensemble(dir)?;
            let fs: Vec<&dyn ScalarFn> = nets.iter().map(|n| n as &dyn ScalarFn).collect();
            let mut ro = RankOutput { system: tsys.name(), n_nets: nets.len(), differential: None, manifold: None };
            if cfg.rank.mode != RankMode::Manifold {
                ro.differential = Some(rank::differential_rank(&fs, b.points.view(), cfg.rank.eps, cfg.rank.seed)?);
            }
            if cfg.rank.mode != RankMode::Differential {
                let rows = b.points.slice(s![..cfg.rank.points.min(b.len()), ..]);
                let mut a = Array2::zeros((rows.nrows(), nets.len()));
                for (j, n) in nets.iter().enumerate() {
                    a.column_mut(j).assign(&n.values(rows)?);
                }
                ro.manifold = Some(rank::manifold_rank(a.view(), &cfg.rank.scales, cfg.rank.seed)?);
            }
            vec![(RANK_FILE.into(), json(&ro)?)]
        }
        Stage::Sweep => {
            let b = base_batch(&load_batch(dir, &sys, cfg.sample.seed)?, &tsys);
            let arch = ArchSpec::for_system(&tsys, cfg.arch_kind(&tsys), cfg.model.pde_features)?;
            let n = cfg.sweep.nets.unwrap_or_else(|| cfg.n_nets(&tsys));
            let res = train::lambda_sweep(&tsys, &b, n, &arch, &cfg.sweep.lambdas, &cfg.train)?;
            vec![(SWEEP_FILE.into(), json(&res)?)]
        }
        Stage::Search => {
            let b = load_batch(dir, &sys, cfg.sample.seed)?;
            let binding = Arc::new(Binding::for_system(&sys, cfg.search.pde_features)?);
            let g = cfg.search.grammar(&binding)?;
            let st = symbolic::search(&sys, &g, binding, b.points.view(), &cfg.search)?;
            vec![(SEARCH_FILE.into(), json(&st)?)]
        }
        Stage::Report => report::emit_report(dir)?,
    };
    Ok(out)
}

fn run_stage(cfg: &RunConfig, man: &mut RunManifest, st: Stage) -> Result<()> {
    let dir = cfg.output.as_path();
    let key = stage_key(cfg, st)?;
    if st != Stage::Report {
        if let Some(rec) = man.stage(st.name()) {
            if rec.key == key && rec.intact(dir) {
                let mut rec = rec.clone();
                rec.cache_hit = true;
                rec.seconds = 0.0;
                man.upsert(rec);
                return Ok(());
            }
        }
    }
    let t = Instant::now();
    let files = compute(cfg, st)?;
    let mut artifacts = Vec::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(&name), &bytes)?;
        artifacts.push(Artifact { path: name, sha256: sha256_hex(&bytes) });
    }
    man.upsert(StageRecord {
        name: st.name().into(),
        key,
        cache_hit: false,
        seconds: t.elapsed().as_secs_f64(),
        artifacts,
    });
    Ok(())
}

/// Run `stages` in order, resuming from intact artifacts. On failure the
/// manifest is still written, with a failure record.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.output.as_path();
    std::fs::create_dir_all(dir)?;
    let t0 = Instant::now();
    let mut man = match RunManifest::load(dir) {
        Ok(m) if m.config.system == cfg.system => {
            let mut m = RunManifest { stages: m.stages, ..RunManifest::new(cfg) };
            m.stages.retain(|s| s.intact(dir));
            m
        }
        _ => RunManifest::new(cfg),
    };
    let searchable = Binding::has_default(&cfg.system()?);
    for &st in stages {
        // A full pipeline on base three-body stops short of the search, which
        // needs the distance-augmented coordinates.
        if st == Stage::Search && stages.len() > 1 && !searchable {
            continue;
        }
        if let Err(e) = run_stage(cfg, &mut man, st) {
            man.failure = Some(Failure { stage: st.name().into(), message: e.to_string(), exit_code: e.exit_code() });
            man.wall_clock_seconds = t0.elapsed().as_secs_f64();
            let _ = man.save(dir);
            return Err(e);
        }
    }
    man.wall_clock_seconds = t0.elapsed().as_secs_f64();
    man.save(dir)?;
    Ok(man)
}
