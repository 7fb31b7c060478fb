//! Measurement datasets: per-object pattern/count stacks with optional ground
//! truth, simulation from phantoms, persistence, and raw-frame import.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ledvae_autodiff::{Complex64, Graph};
use num_complex::Complex32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::OpticalConfig;
use crate::container::{write_container, Array, ArrayData, Container, ContainerError};
use crate::error::{CoreError, Result};
use crate::illum::PatternPlan;
use crate::optics::{ObjectModel, Optics};
use crate::poisson::poisson_sample;
use crate::rng::{object_rng, Stream};

/// Shots recorded on one object.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStack {
    pub id: String,
    /// `n x l` LED weights.
    pub patterns: Vec<Vec<f64>>,
    /// `n` count images of `N x N` pixels.
    pub counts: Vec<Vec<u32>>,
    pub truth: Option<ObjectModel>,
}

impl MeasurementStack {
    pub fn n_shots(&self) -> usize {
        self.patterns.len()
    }

    /// Counts as one flat `f64` buffer `[n, N, N]`.
    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().flatten().map(|&c| c as f64).collect()
    }

    pub fn check(&self, cfg: &OpticalConfig) -> Result<()> {
        let nn = cfg.grid_n * cfg.grid_n;
        if self.patterns.is_empty() || self.patterns.len() != self.counts.len() {
            return Err(CoreError::Data(format!(
                "object {}: {} patterns vs {} count images",
                self.id,
                self.patterns.len(),
                self.counts.len()
            )));
        }
        if self.patterns.iter().any(|p| p.len() != cfg.led_count()) {
            return Err(CoreError::Data(format!(
                "object {}: pattern length differs from LED count {}",
                self.id,
                cfg.led_count()
            )));
        }
        if self.counts.iter().any(|c| c.len() != nn) {
            return Err(CoreError::Data(format!(
                "object {}: count image size differs from {}x{}",
                self.id, cfg.grid_n, cfg.grid_n
            )));
        }
        Ok(())
    }
}

/// Header description of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub config: OpticalConfig,
    /// Pattern plan that produced the shots; absent for imported data.
    pub plan: Option<PatternPlan>,
    /// Phantom generator settings, when synthetic.
    pub phantom: Option<serde_json::Value>,
    pub seed: Option<u64>,
    /// Object ids in storage order.
    pub object_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub stacks: Vec<MeasurementStack>,
}

pub fn object_id(i: usize) -> String {
    format!("{i:05}")
}

pub fn complex_to_c64(v: &[Complex64]) -> Vec<Complex32> {
    v.iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect()
}

pub fn c64_to_complex(v: &[Complex32]) -> Vec<Complex64> {
    v.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect()
}

pub fn object_array(name: String, obj: &ObjectModel) -> Array {
    Array::new(
        name,
        vec![obj.n_slices(), obj.grid_n, obj.grid_n],
        ArrayData::C64(complex_to_c64(&obj.slices.concat())),
    )
}

pub fn array_object(a: &Array) -> Result<ObjectModel> {
    match (&a.data, a.shape.as_slice()) {
        (ArrayData::C64(v), &[s, n, n2]) if n == n2 => {
            let all = c64_to_complex(v);
            ObjectModel::new(n, all.chunks(n * n).take(s).map(|c| c.to_vec()).collect())
        }
        _ => Err(CoreError::Data(format!(
            "array {} is not a c64 [slices, N, N] object",
            a.name
        ))),
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains('/') && id.chars().all(|c| !c.is_control())
}

impl Dataset {
    pub fn new(meta: DatasetMeta, stacks: Vec<MeasurementStack>) -> Result<Self> {
        let ds = Self { meta, stacks };
        ds.check()?;
        Ok(ds)
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.meta.config
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        self.meta.config.validate()?;
        let ids: Vec<&str> = self.stacks.iter().map(|s| s.id.as_str()).collect();
        if ids != self.meta.object_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return Err(CoreError::Data("object_ids does not match the stored stacks".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.stacks {
            if !valid_id(&s.id) || !seen.insert(s.id.as_str()) {
                return Err(CoreError::Data(format!("object id {:?} is empty, duplicated or contains '/'", s.id)));
            }
            s.check(&self.meta.config)?;
        }
        Ok(())
    }

    pub fn arrays(&self) -> Vec<Array> {
        let n = self.meta.config.grid_n;
        let mut out = Vec::new();
        for s in &self.stacks {
            if let Some(t) = &s.truth {
                out.push(object_array(format!("truth/{}", s.id), t));
            }
            out.push(Array::new(
                format!("patterns/{}", s.id),
                vec![s.n_shots(), s.patterns[0].len()],
                ArrayData::F64(s.patterns.concat()),
            ));
            out.push(Array::new(
                format!("counts/{}", s.id),
                vec![s.n_shots(), n, n],
                ArrayData::U32(s.counts.concat()),
            ));
        }
        out
    }

    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "dataset", "dataset": self.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, self.meta_json(), &self.arrays())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::open(path)?;
        Self::from_container(&c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = dataset_meta(c.meta())?;
        let n = meta.config.grid_n;
        let mut stacks = Vec::with_capacity(meta.object_ids.len());
        for id in &meta.object_ids {
            let p = c.read(&format!("patterns/{id}"))?;
            let k = c.read(&format!("counts/{id}"))?;
            let (ArrayData::F64(pv), [shots, l]) = (&p.data, p.shape.as_slice()) else {
                return Err(CoreError::Data(format!("patterns/{id} must be f64 [n, l]")));
            };
            let ArrayData::U32(kv) = &k.data else {
                return Err(CoreError::Data(format!("counts/{id} must be u32")));
            };
            if k.shape != [*shots, n, n] {
                return Err(CoreError::Data(format!("counts/{id} has shape {:?}", k.shape)));
            }
            let truth = match c.read(&format!("truth/{id}")) {
                Ok(a) => Some(array_object(&a)?),
                Err(ContainerError::Missing(_)) => None,
                Err(e) => return Err(e.into()),
            };
            stacks.push(MeasurementStack {
                id: id.clone(),
                patterns: pv.chunks(*l).map(|c| c.to_vec()).collect(),
                counts: kv.chunks(n * n).map(|c| c.to_vec()).collect(),
                truth,
            });
        }
        Self::new(meta, stacks)
    }
}

pub fn dataset_meta(meta: &serde_json::Value) -> Result<DatasetMeta> {
    let d = meta
        .get("dataset")
        .ok_or_else(|| CoreError::Data("container holds no dataset description".into()))?;
    serde_json::from_value(d.clone()).map_err(|e| CoreError::Data(format!("dataset header: {e}")))
}

/// Expected intensities for all of an object's shots, `n x (N*N)`.
pub fn expected_intensities(optics: &Optics, obj: &ObjectModel, patterns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<_> = obj.slice_tensors().into_iter().map(|t| g.constant(t)).collect();
    let out = optics.multiplexed(&mut g, &vars, patterns)?;
    let nn = obj.grid_n * obj.grid_n;
    Ok(g.value(out).as_real().unwrap().chunks(nn).map(|c| c.to_vec()).collect())
}

/// Simulates noisy shots of every object. Noise for object `i` comes from its
/// own generator, so the result does not depend on `jobs`.
pub fn simulate(
    cfg: &OpticalConfig,
    objects: Vec<ObjectModel>,
    patterns: Vec<Vec<Vec<f64>>>,
    plan: Option<PatternPlan>,
    phantom: Option<serde_json::Value>,
    seed: u64,
) -> Result<Dataset> {
    if objects.len() != patterns.len() {
        return Err(CoreError::Data(format!(
            "{} objects but {} pattern lists",
            objects.len(),
            patterns.len()
        )));
    }
    let optics = Optics::new(cfg)?;
    let stacks = objects
        .into_par_iter()
        .zip(patterns)
        .enumerate()
        .map(|(i, (obj, pats))| {
            let mut rng = object_rng(seed, i, Stream::Noise);
            let counts = expected_intensities(&optics, &obj, &pats)?
                .iter()
                .map(|img| poisson_sample(img, cfg.photon_budget, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(MeasurementStack {
                id: object_id(i),
                patterns: pats,
                counts,
                truth: Some(obj),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        config: cfg.clone(),
        plan,
        phantom,
        seed: Some(seed),
        object_ids: stacks.iter().map(|s| s.id.clone()).collect(),
    };
    Dataset::new(meta, stacks)
}

// ---- raw frame import --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportManifest {
    pub config: OpticalConfig,
    /// Sensor frame size; frames are raw little-endian u16, row-major.
    pub frame_width: usize,
    pub frame_height: usize,
    pub objects: Vec<ImportObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportObject {
    pub id: String,
    pub shots: Vec<ImportShot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportShot {
    pub weights: Vec<f64>,
    /// Relative paths resolve against the manifest's directory.
    pub frame: PathBuf,
    /// `[x, y, w, h]`; defaults to the full frame.
    #[serde(default)]
    pub crop: Option<[usize; 4]>,
    #[serde(default)]
    pub dark: f64,
}

fn import_shot(shot: &ImportShot, base: &Path, m: &ImportManifest) -> Result<Vec<u32>> {
    let path = base.join(&shot.frame);
    let bytes = std::fs::read(&path).map_err(|e| CoreError::Data(format!("frame {}: {e}", path.display())))?;
    let (fw, fh) = (m.frame_width, m.frame_height);
    if bytes.len() != fw * fh * 2 {
        return Err(CoreError::Data(format!(
            "frame {} has {} bytes, expected {} for {fw}x{fh} u16",
            path.display(),
            bytes.len(),
            fw * fh * 2
        )));
    }
    let [x, y, w, h] = shot.crop.unwrap_or([0, 0, fw, fh]);
    let n = m.config.grid_n;
    if x + w > fw || y + h > fh || w != n || h != n {
        return Err(CoreError::Data(format!(
            "crop [{x}, {y}, {w}, {h}] of frame {} must lie inside {fw}x{fh} and be {n}x{n} (grid_n)",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(w * h);
    for r in y..y + h {
        for c in x..x + w {
            let i = 2 * (r * fw + c);
            let v = u16::from_le_bytes([bytes[i], bytes[i + 1]]) as f64;
            out.push((v - shot.dark).max(0.0).round() as u32);
        }
    }
    Ok(out)
}

pub fn import_raw_frames(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| CoreError::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    let m: ImportManifest = serde_json::from_str(&text).map_err(|e| CoreError::config(format!("manifest: {e}")))?;
    m.config.validate()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut stacks = Vec::with_capacity(m.objects.len());
    for o in &m.objects {
        let counts = o
            .shots
            .iter()
            .map(|s| import_shot(s, base, &m))
            .collect::<Result<Vec<_>>>()?;
        stacks.push(MeasurementStack {
            id: o.id.clone(),
            patterns: o.shots.iter().map(|s| s.weights.clone()).collect(),
            counts,
            truth: None,
        });
    }
    let meta = DatasetMeta {
        config: m.config.clone(),
        plan: None,
        phantom: None,
        seed: None,
        object_ids: stacks.iter().map(|s| s.id.clone()).collect(),
    };
    Dataset::new(meta, stacks)
}
