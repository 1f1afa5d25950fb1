//! Batch scoring of predicted environment maps against ground truth by
//! rendering probe spheres under each and comparing the renders.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_image_auto, ImageKind};
use crate::metrics::{angular_error_deg, normalized_rmse, si_rmse, ScorePair};
use crate::probe::{
    render_sphere, render_sphere_array, sphere_array_footprint, sphere_footprint, EnvMap,
    SphereMaterial,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Mirror, matte-silver and gray-diffuse spheres rendered separately.
    ThreeSpheres,
    /// One frame holding a grid of gray-diffuse spheres.
    SphereArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub sphere_size: usize,
    pub array_grid: (usize, usize),
    pub array_size: (usize, usize),
    /// Azimuthal rotation applied to every prediction before rendering.
    pub rotate_deg: f64,
    /// Drop pixels that are black in the ground-truth render.
    pub mask_black: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::ThreeSpheres,
            sphere_size: 128,
            array_grid: (3, 8),
            array_size: (192, 512),
            rotate_deg: 0.0,
            mask_black: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub stem: String,
    pub material: String,
    pub si_rmse: f64,
    pub angular_deg: f64,
    pub norm_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub material: String,
    pub count: usize,
    pub si_rmse: f64,
    pub angular_deg: f64,
    pub norm_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalOptions,
    pub entries: Vec<EvalEntry>,
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    fn from_entries(config: EvalOptions, entries: Vec<EvalEntry>) -> Self {
        let mut groups: BTreeMap<&str, Vec<&EvalEntry>> = BTreeMap::new();
        for e in &entries {
            groups.entry(e.material.as_str()).or_default().push(e);
        }
        let aggregates = groups
            .into_iter()
            .map(|(material, es)| {
                let n = es.len() as f64;
                Aggregate {
                    material: material.to_string(),
                    count: es.len(),
                    si_rmse: es.iter().map(|e| e.si_rmse).sum::<f64>() / n,
                    angular_deg: es.iter().map(|e| e.angular_deg).sum::<f64>() / n,
                    norm_rmse: es.iter().map(|e| e.norm_rmse).sum::<f64>() / n,
                }
            })
            .collect();
        Self {
            config,
            entries,
            aggregates,
        }
    }

    /// One row per entry: stem, material, si_rmse, angular_deg, norm_rmse.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes `report.json` style JSON to `json_path` and the CSV alongside it.
    pub fn write(&self, json_path: &Path) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        Ok(csv_path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// HDR files in `dir`, keyed by file stem.
fn list_maps(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if !matches!(ImageKind::from_path(&path), Ok(k) if k.is_hdr()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn load_env(path: &Path) -> Result<EnvMap> {
    let t = read_image_auto(path)?;
    EnvMap::new(t).map_err(|e| Error::format(path, e.to_string()))
}

/// Keeps the pixels selected by `mask` as a `3×1×n` tensor.
fn gather(img: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::Numerical("no pixels left to score".into()));
    }
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        data.extend(
            img.plane(c)
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v),
        );
    }
    Tensor::new([3, 1, n], data)
}

fn score(
    stem: &str,
    material: &str,
    pred: &Tensor,
    gt: &Tensor,
    footprint: &Tensor,
    mask_black: bool,
) -> Result<EvalEntry> {
    let keep: Vec<bool> = (0..footprint.len())
        .map(|k| {
            footprint.data()[k] == 1.0 && (!mask_black || (0..3).any(|c| gt.plane(c)[k] != 0.0))
        })
        .collect();
    let (p, g) = (gather(pred, &keep)?, gather(gt, &keep)?);
    let pair = ScorePair::new(&p, &g)?;
    let tag = |e: Error| Error::Numerical(format!("{stem}/{material}: {e}"));
    Ok(EvalEntry {
        stem: stem.to_string(),
        material: material.to_string(),
        si_rmse: si_rmse(&pair).map_err(tag)?,
        angular_deg: angular_error_deg(&pair).map_err(tag)?,
        norm_rmse: normalized_rmse(&pair).map_err(tag)?,
    })
}

fn evaluate_pair(
    stem: &str,
    pred: &EnvMap,
    gt: &EnvMap,
    opts: &EvalOptions,
) -> Result<Vec<EvalEntry>> {
    match opts.protocol {
        Protocol::ThreeSpheres => {
            let footprint = sphere_footprint(opts.sphere_size);
            [
                ("mirror", SphereMaterial::mirror()),
                ("matte", SphereMaterial::matte_silver()),
                ("diffuse", SphereMaterial::gray_diffuse()),
            ]
            .iter()
            .map(|(name, mat)| {
                let p = render_sphere(pred, mat, opts.sphere_size)?;
                let g = render_sphere(gt, mat, opts.sphere_size)?;
                score(stem, name, &p, &g, &footprint, opts.mask_black)
            })
            .collect()
        }
        Protocol::SphereArray => {
            let footprint = sphere_array_footprint(opts.array_grid, opts.array_size)?;
            let p = render_sphere_array(pred, opts.array_grid, opts.array_size)?;
            let g = render_sphere_array(gt, opts.array_grid, opts.array_size)?;
            Ok(vec![score(
                stem,
                "array",
                &p,
                &g,
                &footprint,
                opts.mask_black,
            )?])
        }
    }
}

/// Scores every environment map in `gt_dir` against the file with the same
/// stem in `pred_dir`.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = list_maps(pred_dir)?;
    let gts = list_maps(gt_dir)?;
    let mut missing: Vec<String> = gts
        .keys()
        .filter(|s| !preds.contains_key(*s))
        .map(|s| format!("{} (no prediction)", s))
        .collect();
    missing.extend(
        preds
            .keys()
            .filter(|s| !gts.contains_key(*s))
            .map(|s| format!("{} (no ground truth)", s)),
    );
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if gts.is_empty() {
        return Err(Error::invalid(format!(
            "no environment maps in {}",
            gt_dir.display()
        )));
    }
    let per_image: Vec<Vec<EvalEntry>> = gts
        .par_iter()
        .map(|(stem, gt_path)| {
            let gt = load_env(gt_path)?;
            let mut pred = load_env(&preds[stem])?;
            if opts.rotate_deg != 0.0 {
                pred = pred.rotate_azimuth(opts.rotate_deg);
            }
            evaluate_pair(stem, &pred, &gt, opts)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_entries(
        opts.clone(),
        per_image.into_iter().flatten().collect(),
    ))
}
