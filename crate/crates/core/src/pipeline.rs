//! Run configuration and the file-to-file steps behind each CLI subcommand.
//!
//! Every step reads containers, writes its outputs under one directory and
//! drops a snapshot of the fully resolved configuration next to them.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::OpticalConfig;
use crate::container::{write_container, Array, ArrayData, Container, ContainerError};
use crate::dataset::{array_object, import_raw_frames, object_array, object_id, simulate, Dataset};
use crate::error::{CoreError, Result};
use crate::eval::{amp_phase_planes, render_png, report_csv, score, Normalize, PsnrRow};
use crate::illum::{led_positions, plan_patterns, PatternPlan};
use crate::optics::{ObjectModel, Optics};
use crate::phantom::{gen_foam, gen_two_plane_digits, FoamSpec, GlyphSpec};
use crate::pvae::{load_checkpoint, prepare, sample_posterior, train, PvaeArch, TrainHyper, TrainState};
use crate::recon::{reconstruct, ReconParams};
use crate::rng::{object_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Foam,
    Digits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvaeSection {
    pub arch: PvaeArch,
    pub train: TrainHyper,
    /// Posterior samples drawn per object by `pvae-sample`.
    pub samples: usize,
}

impl Default for PvaeSection {
    fn default() -> Self {
        Self {
            arch: PvaeArch::default(),
            train: TrainHyper::default(),
            samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub optics: OpticalConfig,
    pub phantom: PhantomKind,
    pub foam: FoamSpec,
    pub digits: GlyphSpec,
    /// Objects generated by the phantom and simulate steps.
    pub m: usize,
    pub patterns: PatternPlan,
    /// Object slices fitted by the solvers; `None` resolves to 1 for foam, 2 for digits.
    pub slices: Option<usize>,
    pub recon: ReconParams,
    pub pvae: PvaeSection,
    /// Master seed; resolution copies it into every seeded section.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optics: OpticalConfig::default(),
            phantom: PhantomKind::Foam,
            foam: FoamSpec::default(),
            digits: GlyphSpec::default(),
            m: 10,
            patterns: PatternPlan::default(),
            slices: None,
            recon: ReconParams::default(),
            pvae: PvaeSection::default(),
            seed: 0,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub pattern_mode: Option<crate::illum::PatternMode>,
}

fn collect(errs: &mut Vec<String>, prefix: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(CoreError::Config(v)) => errs.extend(v.into_iter().map(|e| format!("{prefix}: {e}"))),
        Err(other) => errs.push(format!("{prefix}: {other}")),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies overrides, spreads the master seed and grid size, fills `slices`,
    /// then validates every section at once.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.m {
            self.m = m;
        }
        if let Some(n) = o.n {
            self.patterns.n = n;
        }
        if let Some(mode) = o.pattern_mode {
            self.patterns.mode = mode;
        }
        let s = self.seed;
        self.foam.seed = s;
        self.digits.seed = s;
        self.patterns.seed = s;
        self.recon.seed = s;
        self.pvae.train.seed = s;
        self.foam.grid_n = self.optics.grid_n;
        self.digits.grid_n = self.optics.grid_n;
        let slices = self.slices.unwrap_or(match self.phantom {
            PhantomKind::Foam => 1,
            PhantomKind::Digits => 2,
        });
        self.slices = Some(slices);
        self.pvae.arch.slices = slices;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        collect(&mut errs, "optics", self.optics.validate());
        collect(&mut errs, "foam", self.foam.validate());
        collect(&mut errs, "digits", self.digits.validate());
        collect(&mut errs, "patterns", self.patterns.validate(self.optics.led_count()));
        collect(&mut errs, "recon", self.recon.validate());
        collect(&mut errs, "pvae.arch", self.pvae.arch.validate(self.optics.grid_n));
        collect(&mut errs, "pvae.train", self.pvae.train.validate());
        if self.m == 0 {
            errs.push("m must be >= 1".into());
        }
        if self.pvae.samples == 0 {
            errs.push("pvae.samples must be >= 1".into());
        }
        match self.slices {
            Some(1 | 2) | None => {}
            Some(s) => errs.push(format!("slices must be 1 or 2 (got {s})")),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errs))
        }
    }

    pub fn object_slices(&self) -> usize {
        self.slices.unwrap_or(1)
    }

    /// Writes `<step>.config.json` into `out`.
    pub fn snapshot(&self, out: &Path, step: &str) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(out.join(format!("{step}.config.json")), text + "\n")?;
        Ok(())
    }
}

pub const PHANTOMS_FILE: &str = "phantoms.ledvae";
pub const DATASET_FILE: &str = "dataset.ledvae";
pub const RECON_FILE: &str = "recon.ledvae";
pub const CHECKPOINT_FILE: &str = "checkpoint.ledvae";
pub const PVAE_FILE: &str = "pvae.ledvae";
pub const REPORT_FILE: &str = "report.csv";

/// Progress sink: `(step, loss, object id or "")`.
pub type Progress<'a> = &'a (dyn Fn(usize, f64, &str) + Sync);

fn objects_from_config(cfg: &RunConfig) -> Result<(Vec<ObjectModel>, serde_json::Value)> {
    Ok(match cfg.phantom {
        PhantomKind::Foam => (gen_foam(&cfg.foam, cfg.m)?, serde_json::json!({ "foam": cfg.foam })),
        PhantomKind::Digits => (
            gen_two_plane_digits(&cfg.digits, cfg.m)?,
            serde_json::json!({ "digits": cfg.digits }),
        ),
    })
}

/// Generates the configured phantoms into `out/phantoms.ledvae`.
pub fn run_phantoms(cfg: &RunConfig, kind: PhantomKind, out: &Path) -> Result<PathBuf> {
    let cfg = RunConfig {
        phantom: kind,
        ..cfg.clone()
    };
    let (objs, spec) = objects_from_config(&cfg)?;
    let ids: Vec<String> = (0..objs.len()).map(object_id).collect();
    let arrays: Vec<Array> = objs
        .iter()
        .zip(&ids)
        .map(|(o, id)| object_array(format!("truth/{id}"), o))
        .collect();
    std::fs::create_dir_all(out)?;
    let path = out.join(PHANTOMS_FILE);
    write_container(
        &path,
        serde_json::json!({ "kind": "phantoms", "object_ids": ids, "phantom": spec }),
        &arrays,
    )?;
    Ok(path)
}

fn kind_of(c: &Container) -> &str {
    c.meta().get("kind").and_then(|k| k.as_str()).unwrap_or("")
}

fn object_ids(c: &Container) -> Result<Vec<String>> {
    let ids = c
        .meta()
        .get("object_ids")
        .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
        .ok_or_else(|| CoreError::Data("container header lists no object_ids".into()))?;
    Ok(ids)
}

/// Reads the truth objects of a phantom container.
pub fn load_phantoms(path: &Path) -> Result<(Vec<ObjectModel>, serde_json::Value)> {
    let c = Container::open(path)?;
    if kind_of(&c) != "phantoms" {
        return Err(CoreError::Data(format!("{} is not a phantom container", path.display())));
    }
    let objs = object_ids(&c)?
        .iter()
        .map(|id| array_object(&c.read(&format!("truth/{id}"))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((objs, c.meta().get("phantom").cloned().unwrap_or_default()))
}

/// Simulates shots of the given phantoms (or freshly generated ones) into `out/dataset.ledvae`.
pub fn run_simulate(cfg: &RunConfig, phantoms: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let (objs, spec) = match phantoms {
        Some(p) => load_phantoms(p)?,
        None => objects_from_config(cfg)?,
    };
    if let Some(o) = objs.iter().find(|o| o.grid_n != cfg.optics.grid_n) {
        return Err(CoreError::Data(format!(
            "phantoms are {0}x{0} but optics.grid_n is {1}",
            o.grid_n, cfg.optics.grid_n
        )));
    }
    let pats = plan_patterns(&cfg.patterns, objs.len(), &led_positions(&cfg.optics))?;
    let ds = simulate(&cfg.optics, objs, pats, Some(cfg.patterns.clone()), Some(spec), cfg.seed)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    Ok(path)
}

pub fn run_import(manifest: &Path, out: &Path) -> Result<PathBuf> {
    let ds = import_raw_frames(manifest)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(DATASET_FILE);
    ds.save(&path)?;
    Ok(path)
}

/// The dataset's own optics govern every solver step; the run config only
/// supplies solver settings.
fn dataset_optics(ds: &Dataset) -> Result<Optics> {
    Optics::new(ds.config())
}

/// Iterative reconstruction of every object into `out/recon.ledvae`.
pub fn run_recon(cfg: &RunConfig, data: &Path, out: &Path, progress: Progress) -> Result<PathBuf> {
    let ds = Dataset::load(data)?;
    let optics = dataset_optics(&ds)?;
    let slices = cfg.object_slices();
    let results = ds
        .stacks
        .par_iter()
        .map(|s| {
            let mut on_step = |k: usize, l: f64| {
                if k % 100 == 0 || k + 1 == cfg.recon.iterations {
                    progress(k, l, &s.id);
                }
            };
            reconstruct(&optics, s, slices, &cfg.recon, &mut on_step)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut arrays = Vec::new();
    for (s, r) in ds.stacks.iter().zip(&results) {
        arrays.push(object_array(format!("recon/{}", s.id), &r.estimate));
        arrays.push(Array::new(
            format!("loss/{}", s.id),
            vec![r.loss_trace.len()],
            ArrayData::F64(r.loss_trace.clone()),
        ));
    }
    let ids: Vec<&str> = ds.stacks.iter().map(|s| s.id.as_str()).collect();
    std::fs::create_dir_all(out)?;
    let path = out.join(RECON_FILE);
    write_container(
        &path,
        serde_json::json!({ "kind": "estimates", "method": "iterative", "object_ids": ids, "recon": cfg.recon }),
        &arrays,
    )?;
    Ok(path)
}

/// Trains (or resumes) a P-VAE on a dataset; the checkpoint lands in `out/checkpoint.ledvae`.
pub fn run_train(cfg: &RunConfig, data: &Path, resume: Option<&Path>, out: &Path, progress: Progress) -> Result<PathBuf> {
    let ds = Dataset::load(data)?;
    let optics = dataset_optics(&ds)?;
    let prepared = ds.stacks.iter().map(|s| prepare(&optics, s)).collect::<Result<Vec<_>>>()?;
    let hyper = &cfg.pvae.train;
    let state = match resume {
        Some(p) => {
            let (st, _) = load_checkpoint(p)?;
            if st.model.arch != cfg.pvae.arch || st.model.grid_n != ds.config().grid_n {
                return Err(CoreError::config("checkpoint architecture or grid differs from the run config"));
            }
            st
        }
        None => TrainState::new(&cfg.pvae.arch, ds.config().grid_n, hyper)?,
    };
    std::fs::create_dir_all(out)?;
    let path = out.join(CHECKPOINT_FILE);
    let mut on_step = |k: usize, l: &crate::pvae::StepLoss| progress(k, l.total, "");
    train(state, &optics, &prepared, hyper, Some(&path), &mut on_step)?;
    Ok(path)
}

/// Posterior summaries of every object into `out/pvae.ledvae`: the point
/// estimate as `recon/<id>` plus amplitude/phase standard deviations.
pub fn run_sample(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let ds = Dataset::load(data)?;
    let optics = dataset_optics(&ds)?;
    let (state, _) = load_checkpoint(checkpoint)?;
    let model = state.model;
    let summaries = ds
        .stacks
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prep = prepare(&optics, s)?;
            let seed: u64 = object_rng(cfg.seed, i, Stream::Sampling).random();
            sample_posterior(&model, &prep, cfg.pvae.samples, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ds.config().grid_n;
    let mut arrays = Vec::new();
    for (s, p) in ds.stacks.iter().zip(&summaries) {
        let k = p.std_amp.len();
        arrays.push(object_array(format!("recon/{}", s.id), &p.point_estimate()));
        arrays.push(Array::new(format!("std_amp/{}", s.id), vec![k, n, n], ArrayData::F64(p.std_amp.concat())));
        arrays.push(Array::new(
            format!("std_phase/{}", s.id),
            vec![k, n, n],
            ArrayData::F64(p.std_phase.concat()),
        ));
    }
    let ids: Vec<&str> = ds.stacks.iter().map(|s| s.id.as_str()).collect();
    std::fs::create_dir_all(out)?;
    let path = out.join(PVAE_FILE);
    write_container(
        &path,
        serde_json::json!({ "kind": "estimates", "method": "pvae", "object_ids": ids, "samples": cfg.pvae.samples }),
        &arrays,
    )?;
    Ok(path)
}

/// Scores estimates against the dataset's ground truth into `out/report.csv`;
/// with `png`, also renders amplitude and phase images of truth and estimate.
pub fn run_eval(truth: &Path, estimates: &Path, out: &Path, png: bool) -> Result<(PathBuf, Vec<PsnrRow>)> {
    let ds = Dataset::load(truth)?;
    let est = Container::open(estimates)?;
    if kind_of(&est) != "estimates" {
        return Err(CoreError::Data(format!("{} holds no estimates", estimates.display())));
    }
    let method = est.meta().get("method").and_then(|m| m.as_str()).unwrap_or("unknown").to_string();
    let mode = match &ds.meta.plan {
        Some(p) => serde_json::to_value(p.mode).unwrap().as_str().unwrap_or("").to_string(),
        None => "imported".into(),
    };
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for s in &ds.stacks {
        let truth = s
            .truth
            .as_ref()
            .ok_or_else(|| CoreError::Data(format!("object {} has no ground truth", s.id)))?;
        let e = match est.read(&format!("recon/{}", s.id)) {
            Ok(a) => array_object(&a)?,
            Err(ContainerError::Missing(_)) => {
                return Err(CoreError::Data(format!("no estimate for object {}", s.id)));
            }
            Err(e) => return Err(e.into()),
        };
        let (c, a, p) = score(&e, truth)?;
        rows.push(PsnrRow {
            method: method.clone(),
            m: ds.len(),
            n: s.n_shots(),
            pattern_mode: mode.clone(),
            object_id: s.id.clone(),
            psnr_complex: c,
            psnr_amp: a,
            psnr_phase: p,
        });
        if png {
            let n = truth.grid_n;
            let aligned = crate::eval::align_global_phase(&e, truth)?;
            for (tag, obj) in [("truth", truth), (method.as_str(), &aligned)] {
                for (plane, v) in amp_phase_planes(obj) {
                    let norm = if plane.starts_with("phase") {
                        Normalize::Fixed(-std::f64::consts::PI, std::f64::consts::PI)
                    } else {
                        Normalize::MinMax
                    };
                    render_png(&v, n, n, &out.join(format!("{}_{tag}_{plane}.png", s.id)), norm)?;
                }
            }
        }
    }
    let path = out.join(REPORT_FILE);
    report_csv(&rows, &path)?;
    Ok((path, rows))
}
