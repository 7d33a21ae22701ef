use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sensitivity::{CalibrationSet, Sensitivity};
use crate::error::{HolaError, Result};
use crate::model::ModelWeights;
use crate::quant::{Precision, BLOCK_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorPrecisions {
    pub block_size: usize,
    pub precisions: Vec<Precision>,
    /// Measured error of every block at every candidate precision.
    pub errors: BTreeMap<Precision, Vec<f64>>,
}

impl TensorPrecisions {
    /// Narrowest candidate whose error is within `tolerance` of the block's
    /// minimum; `tolerance = 0` is the exact argmin with ties to the
    /// narrowest width.
    pub fn choose(&self, block: usize, tolerance: f64) -> Precision {
        let min = self
            .errors
            .values()
            .map(|e| e[block])
            .fold(f64::INFINITY, f64::min);
        *self
            .errors
            .iter()
            .find(|(_, e)| e[block] <= min + tolerance)
            .map(|(p, _)| p)
            .expect("at least one candidate")
    }

    pub fn packed_bytes(&self) -> usize {
        self.precisions
            .iter()
            .map(|p| p.packed_len(self.block_size) + std::mem::size_of::<f32>())
            .sum()
    }
}

/// Per-tensor block precisions, keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionMap {
    pub tensors: BTreeMap<String, TensorPrecisions>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignOptions {
    pub candidates: Vec<Precision>,
    pub block_size: usize,
    /// Absolute error slack accepted in exchange for a narrower width.
    pub tie_tolerance: f64,
    /// Further slack as a fraction of the mean calibration logit norm.
    pub relative_tolerance: f64,
}

impl Default for AssignOptions {
    fn default() -> Self {
        Self {
            candidates: Precision::ALL.to_vec(),
            block_size: BLOCK_SIZE,
            tie_tolerance: 0.0,
            relative_tolerance: 0.0,
        }
    }
}

impl PrecisionMap {
    pub fn get(&self, tensor: &str) -> Option<&TensorPrecisions> {
        self.tensors.get(tensor)
    }

    pub fn block_count(&self) -> usize {
        self.tensors.values().map(|t| t.precisions.len()).sum()
    }

    pub fn count_at(&self, p: Precision) -> usize {
        self.tensors
            .values()
            .flat_map(|t| &t.precisions)
            .filter(|&&q| q == p)
            .count()
    }

    pub fn fraction_at(&self, p: Precision) -> f64 {
        self.count_at(p) as f64 / self.block_count().max(1) as f64
    }

    pub fn fraction_at_most(&self, bits: u8) -> f64 {
        let n = Precision::ALL
            .iter()
            .filter(|p| p.bits() <= bits)
            .map(|&p| self.count_at(p))
            .sum::<usize>();
        n as f64 / self.block_count().max(1) as f64
    }

    /// Packed codes plus per-block scales over all mapped tensors.
    pub fn packed_bytes(&self) -> usize {
        self.tensors.values().map(TensorPrecisions::packed_bytes).sum()
    }

    /// The same measurements re-decided with another tolerance.
    pub fn with_tolerance(&self, tolerance: f64) -> PrecisionMap {
        let mut out = self.clone();
        for t in out.tensors.values_mut() {
            t.precisions = (0..t.precisions.len()).map(|b| t.choose(b, tolerance)).collect();
        }
        out
    }

    /// Every recorded choice is the decision rule applied to the retained errors.
    pub fn check_consistency(&self, tolerance: f64) -> Result<()> {
        for (name, t) in &self.tensors {
            for (b, &p) in t.precisions.iter().enumerate() {
                let expect = t.choose(b, tolerance);
                if p != expect {
                    return Err(HolaError::Validation(format!(
                        "{name} block {b}: recorded {p}-bit, errors select {expect}-bit"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Covers every quantizable tensor of `weights` with consistent lengths
    /// and one shared block size; returns that block size.
    pub fn validate_for(&self, weights: &ModelWeights) -> Result<usize> {
        let cfg = &weights.config;
        let names = cfg.quantizable_names();
        let mut block_size = None;
        for name in &names {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| HolaError::Validation(format!("precision map misses {name}")))?;
            if *block_size.get_or_insert(t.block_size) != t.block_size {
                return Err(HolaError::Validation("precision map mixes block sizes".into()));
            }
            crate::quant::check_block_size(t.block_size)?;
            let len = weights.tensor(name).expect("canonical name").len();
            let blocks = len.div_ceil(t.block_size);
            if t.precisions.len() != blocks || t.errors.values().any(|e| e.len() != blocks) {
                return Err(HolaError::Validation(format!(
                    "{name}: map has {} blocks, tensor has {blocks}",
                    t.precisions.len()
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !cfg.is_quantizable(k)) {
            return Err(HolaError::Validation(format!(
                "precision map names non-quantizable tensor {extra}"
            )));
        }
        Ok(block_size.unwrap_or(BLOCK_SIZE))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("maps serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HolaError::Format(format!("precision map: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| HolaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| HolaError::io(path, e))?)
    }
}

/// Measures every (block, candidate) error over `calib` and picks a
/// precision per block. Blocks are evaluated in parallel; the result does
/// not depend on scheduling.
pub fn assign_precisions(weights: &ModelWeights, calib: &CalibrationSet, opts: &AssignOptions) -> Result<PrecisionMap> {
    let mut candidates = opts.candidates.clone();
    candidates.sort();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(HolaError::Config("no candidate precisions".into()));
    }
    if !(opts.tie_tolerance >= 0.0 && opts.relative_tolerance >= 0.0) {
        return Err(HolaError::Config("tie tolerances must be >= 0".into()));
    }
    let sens = Sensitivity::new(weights, calib, opts.block_size)?;
    let tolerance = opts.tie_tolerance + opts.relative_tolerance * sens.mean_logit_norm();
    let names = weights.config.quantizable_names();
    let jobs: Vec<(usize, usize)> = names
        .iter()
        .enumerate()
        .map(|(i, name)| sens.block_count(name).map(|n| (0..n).map(move |b| (i, b))))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let errors: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(i, b)| sens.block_errors(&names[i], b, &candidates))
        .collect::<Result<_>>()?;

    let mut map = PrecisionMap::default();
    for (&(i, _), errs) in jobs.iter().zip(errors) {
        let entry = map.tensors.entry(names[i].clone()).or_insert_with(|| TensorPrecisions {
            block_size: opts.block_size,
            precisions: Vec::new(),
            errors: candidates.iter().map(|&p| (p, Vec::new())).collect(),
        });
        for (p, e) in candidates.iter().zip(errs) {
            entry.errors.get_mut(p).expect("candidate key").push(e);
        }
        entry.precisions.push(Precision::Int4); // decided below
    }
    Ok(map.with_tolerance(tolerance))
}
