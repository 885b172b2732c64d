//! Agreement metrics between predicted and simulated tumor densities.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{Anatomy, ScalarField3D};

/// Density above which a simulated voxel counts as tumor for the MAE mask.
pub const TUMOR_EPS: f64 = 1e-5;
pub const DICE_THRESHOLDS: [f64; 3] = [0.2, 0.4, 0.8];
pub const HISTOGRAM_BIN: f64 = 0.02;
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `2|X∩Y| / (|X|+|Y|)` with `X = {a > u_c}`, `Y = {b > u_c}`; 1 when both
/// sets are empty.
pub fn dice(a: &ScalarField3D, b: &ScalarField3D, u_c: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x > u_c, y > u_c);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean absolute difference over the voxels where `mask` is set.
pub fn mae_masked(pred: &ScalarField3D, sim: &ScalarField3D, mask: &[bool]) -> Result<f64> {
    pred.same_shape(sim)?;
    if mask.len() != pred.len() {
        return Err(Error::InvalidDims(format!("mask has {} voxels, field has {}", mask.len(), pred.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let s = compensated_sum(
        pred.data()
            .iter()
            .zip(sim.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, s), _)| (p - s).abs()),
    );
    Ok(s / n as f64)
}

pub fn tumor_mask(sim: &ScalarField3D) -> Vec<bool> {
    sim.data().iter().map(|&v| v > TUMOR_EPS).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Wm,
    Gm,
    Csf,
}

/// Dominant tissue class per voxel; ties go to WM, then GM.
pub fn dominant_tissue(anatomy: &Anatomy) -> Vec<Tissue> {
    let (w, g, c) = (anatomy.wm.data(), anatomy.gm.data(), anatomy.csf.data());
    (0..w.len())
        .map(|i| {
            if w[i] >= g[i] && w[i] >= c[i] {
                Tissue::Wm
            } else if g[i] >= c[i] {
                Tissue::Gm
            } else {
                Tissue::Csf
            }
        })
        .collect()
}

/// MAE restricted to each dominant-tissue class. `None` marks a class with no
/// voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueMae {
    pub wm: Option<f64>,
    pub gm: Option<f64>,
    pub csf: Option<f64>,
}

pub fn per_tissue_mae(pred: &ScalarField3D, sim: &ScalarField3D, anatomy: &Anatomy) -> Result<TissueMae> {
    pred.same_shape(&anatomy.wm)?;
    let classes = dominant_tissue(anatomy);
    let class_mae = |t: Tissue| -> Result<Option<f64>> {
        let mask: Vec<bool> = classes.iter().map(|&c| c == t).collect();
        match mae_masked(pred, sim, &mask) {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyMask) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(TissueMae {
        wm: class_mae(Tissue::Wm)?,
        gm: class_mae(Tissue::Gm)?,
        csf: class_mae(Tissue::Csf)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    /// One entry per threshold in [`DICE_THRESHOLDS`].
    pub dice: [f64; 3],
    pub mae_tumor: f64,
    pub mae_tissue: TissueMae,
}

/// Mean and population standard deviation over the samples that have the
/// metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = compensated_sum(values.iter().copied()) / n;
        let var = compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
        Some(Self {
            n: values.len(),
            mean,
            sd: var.sqrt(),
        })
    }
}

/// Counts per bin of width [`HISTOGRAM_BIN`] on `[0, 1]`; values of exactly 1
/// land in the last bin, values outside are clamped.
pub fn histogram(values: &[f64]) -> Vec<usize> {
    let bins = (1.0 / HISTOGRAM_BIN).round() as usize;
    let mut h = vec![0; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) / HISTOGRAM_BIN).floor() as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: [Aggregate; 3],
    pub mae_tumor: Aggregate,
    pub mae_wm: Option<Aggregate>,
    pub mae_gm: Option<Aggregate>,
    pub mae_csf: Option<Aggregate>,
    pub dice_histograms: [Vec<usize>; 3],
    pub mae_tumor_histogram: Vec<usize>,
}

/// One prediction/simulation pair on a given anatomy.
#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub id: &'a str,
    pub pred: &'a ScalarField3D,
    pub sim: &'a ScalarField3D,
    pub anatomy: &'a Anatomy,
}

pub fn evaluate_case(case: &EvalCase<'_>) -> Result<SampleMetrics> {
    let mut d = [0.0; 3];
    for (slot, &t) in d.iter_mut().zip(&DICE_THRESHOLDS) {
        *slot = dice(case.pred, case.sim, t)?;
    }
    Ok(SampleMetrics {
        id: case.id.to_string(),
        dice: d,
        mae_tumor: mae_masked(case.pred, case.sim, &tumor_mask(case.sim))?,
        mae_tissue: per_tissue_mae(case.pred, case.sim, case.anatomy)?,
    })
}

pub fn evaluate_set(cases: &[EvalCase<'_>]) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::InvalidParam("evaluation set is empty".into()));
    }
    let samples = cases.iter().map(evaluate_case).collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| samples.iter().filter_map(f).collect::<Vec<f64>>();
    let dice_cols = [0, 1, 2].map(|k| col(&|s| Some(s.dice[k])));
    let mae = col(&|s| Some(s.mae_tumor));
    Ok(MetricReport {
        dice: [0, 1, 2].map(|k| Aggregate::of(&dice_cols[k]).expect("nonempty")),
        mae_tumor: Aggregate::of(&mae).expect("nonempty"),
        mae_wm: Aggregate::of(&col(&|s| s.mae_tissue.wm)),
        mae_gm: Aggregate::of(&col(&|s| s.mae_tissue.gm)),
        mae_csf: Aggregate::of(&col(&|s| s.mae_tissue.csf)),
        dice_histograms: [0, 1, 2].map(|k| histogram(&dice_cols[k])),
        mae_tumor_histogram: histogram(&mae),
        samples,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    /// One row per sample; an absent tissue class leaves its cell empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice_0.2,dice_0.4,dice_0.8,mae_tumor,mae_wm,mae_gm,mae_csf\n");
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.id,
                s.dice[0],
                s.dice[1],
                s.dice[2],
                s.mae_tumor,
                opt(s.mae_tissue.wm),
                opt(s.mae_tissue.gm),
                opt(s.mae_tissue.csf)
            )
            .unwrap();
        }
        out
    }

    /// Writes `report.csv` and `report.json` (with the config echo) into `dir`.
    pub fn write(&self, dir: &Path, config: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(REPORT_CSV);
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let doc = serde_json::json!({
            "tool_version": env!("CARGO_PKG_VERSION"),
            "dice_thresholds": DICE_THRESHOLDS,
            "histogram_bin": HISTOGRAM_BIN,
            "report": self,
            "config": config,
        });
        let json = dir.join(REPORT_JSON);
        fs::write(&json, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&json, e))
    }
}
