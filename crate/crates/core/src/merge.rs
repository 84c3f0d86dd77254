//! Merging trained source models back into one parameter set.
//!
//! The main strategy trims each source's update vector with one global
//! magnitude threshold, then averages every coordinate over only the sources
//! that kept it ("disjoint mean") and adds the result to `theta0`.

use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};
use crate::params::{apply_mask, flatten, magnitude_percentile, mask_above, split, update_vector, BitMask, FlatVec, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Global trim + disjoint mean.
    #[default]
    Rhm,
    /// Plain mean of update vectors.
    Avg,
    /// Per-layer trim + disjoint mean.
    LayerTrim,
    /// Pick the single candidate with the best validation accuracy.
    BestModel,
}

impl MergeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Rhm => "rhm",
            MergeStrategy::Avg => "avg",
            MergeStrategy::LayerTrim => "layer_trim",
            MergeStrategy::BestModel => "best_model",
        }
    }
}

impl std::str::FromStr for MergeStrategy {
    type Err = HamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rhm" => Ok(MergeStrategy::Rhm),
            "avg" => Ok(MergeStrategy::Avg),
            "layer_trim" => Ok(MergeStrategy::LayerTrim),
            "best_model" => Ok(MergeStrategy::BestModel),
            other => Err(HamError::config(
                "merge.strategy",
                format!("unknown strategy `{other}` (expected rhm, avg, layer_trim or best_model)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrimLevel {
    /// One threshold over the whole flattened update.
    Model,
    /// An independent threshold per layer.
    Layer,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeInput<'a> {
    pub theta0: &'a ParamSet,
    pub sources: &'a [ParamSet],
    pub trim_ratio: f64,
    pub strategy: MergeStrategy,
    /// Required by [`MergeStrategy::BestModel`].
    pub val_accuracies: Option<&'a [f64]>,
    /// Estimate thresholds from a seeded sample of this many magnitudes.
    pub percentile_sample: Option<(usize, u64)>,
}

impl<'a> MergeInput<'a> {
    pub fn new(theta0: &'a ParamSet, sources: &'a [ParamSet], strategy: MergeStrategy, trim_ratio: f64) -> Self {
        Self {
            theta0,
            sources,
            trim_ratio,
            strategy,
            val_accuracies: None,
            percentile_sample: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(HamError::Domain("merging needs at least one source".into()));
        }
        if !(0.0..1.0).contains(&self.trim_ratio) {
            return Err(HamError::config("merge.trim_ratio", "must lie in [0, 1)"));
        }
        for s in self.sources {
            self.theta0.check_congruent(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKept {
    pub source: usize,
    pub layer: String,
    pub kept: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub strategy: MergeStrategy,
    pub trim_ratio: f64,
    pub kept_fraction: Vec<f64>,
    pub layer_kept: Vec<LayerKept>,
    /// Coordinates no source kept (these stay at `theta0`).
    pub all_zero_coords: usize,
    pub num_coords: usize,
    /// Index of the chosen candidate for `best_model`.
    pub selected: Option<usize>,
}

impl MergeReport {
    fn untrimmed(strategy: MergeStrategy, input: &MergeInput<'_>) -> Self {
        let layout = flatten(input.theta0);
        Self {
            strategy,
            trim_ratio: input.trim_ratio,
            kept_fraction: vec![1.0; input.sources.len()],
            layer_kept: Vec::new(),
            all_zero_coords: 0,
            num_coords: layout.len(),
            selected: None,
        }
    }
}

/// Mean of the update vectors added back to `theta0`.
pub fn avg_merge(input: &MergeInput<'_>) -> Result<ParamSet> {
    input.validate()?;
    let mut sum = input.theta0.zeros_like();
    for s in input.sources {
        sum.axpy(1.0, &update_vector(s, input.theta0)?)?;
    }
    let n = input.sources.len() as f64;
    let merged = sum.zip_map(input.theta0, |v, base| base + v / n)?;
    Ok(merged)
}

/// Trimmed update vector of one source and the mask that produced it.
pub fn trim_source(
    theta: &ParamSet,
    theta0: &ParamSet,
    trim_ratio: f64,
    level: TrimLevel,
    sample: Option<(usize, u64)>,
) -> Result<(ParamSet, BitMask)> {
    let update = flatten(&update_vector(theta, theta0)?);
    if update.is_empty() {
        return Ok((split(&update)?, BitMask::filled(update.layout().clone(), true)));
    }
    let (size, seed) = (sample.map(|s| s.0), sample.map(|s| s.1));
    let mask = match level {
        TrimLevel::Model => {
            let sigma = magnitude_percentile(&update, trim_ratio, size, seed)?;
            mask_above(&update, sigma)
        }
        TrimLevel::Layer => {
            let mut bits = Vec::with_capacity(update.len());
            for seg in update.layout().segments() {
                let seg_layout = crate::params::FlatLayout::from_segments(vec![crate::params::Segment {
                    offset: 0,
                    ..seg.clone()
                }])?;
                let seg_vec = FlatVec::new(update.segment_values(seg).to_vec(), seg_layout)?;
                let sigma = magnitude_percentile(&seg_vec, trim_ratio, size, seed)?;
                bits.extend(mask_above(&seg_vec, sigma).bits());
            }
            BitMask::new(bits, update.layout().clone())?
        }
    };
    let trimmed = apply_mask(&update, &mask)?;
    Ok((split(&trimmed)?, mask))
}

/// Per coordinate: sum of kept values over the number of sources that kept
/// it, or 0 when none did; added to `theta0`. Also returns the count of
/// coordinates no source kept.
pub fn disjoint_mean_merge(theta0: &ParamSet, trimmed: &[(ParamSet, BitMask)]) -> Result<(ParamSet, usize)> {
    if trimmed.is_empty() {
        return Err(HamError::Domain("merging needs at least one source".into()));
    }
    let base = flatten(theta0);
    let n = base.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    for (update, mask) in trimmed {
        theta0.check_congruent(update)?;
        if mask.layout() != base.layout() {
            return Err(HamError::Structural("mask layout differs from theta0".into()));
        }
        let flat = flatten(update);
        for j in 0..n {
            if mask.bits()[j] {
                sum[j] += flat.values()[j];
                count[j] += 1;
            }
        }
    }
    let mut all_zero = 0;
    let merged: Vec<f64> = (0..n)
        .map(|j| {
            if count[j] > 0 {
                base.values()[j] + sum[j] / f64::from(count[j])
            } else {
                all_zero += 1;
                base.values()[j]
            }
        })
        .collect();
    Ok((split(&FlatVec::new(merged, base.layout().clone())?)?, all_zero))
}

fn trimmed_merge(input: &MergeInput<'_>, level: TrimLevel) -> Result<(ParamSet, MergeReport)> {
    input.validate()?;
    let trimmed = input
        .sources
        .iter()
        .map(|s| trim_source(s, input.theta0, input.trim_ratio, level, input.percentile_sample))
        .collect::<Result<Vec<_>>>()?;
    let (merged, all_zero) = disjoint_mean_merge(input.theta0, &trimmed)?;
    let mut report = MergeReport::untrimmed(input.strategy, input);
    report.all_zero_coords = all_zero;
    report.kept_fraction = trimmed
        .iter()
        .map(|(_, m)| if m.is_empty() { 1.0 } else { m.count_ones() as f64 / m.len() as f64 })
        .collect();
    for (i, (_, m)) in trimmed.iter().enumerate() {
        for (seg, (layer, kept)) in m.layout().segments().iter().zip(m.segment_counts()) {
            report.layer_kept.push(LayerKept {
                source: i,
                layer,
                kept,
                total: seg.length,
            });
        }
    }
    Ok((merged, report))
}

/// Global-threshold trim of every source followed by the disjoint mean.
pub fn rhm(input: &MergeInput<'_>) -> Result<(ParamSet, MergeReport)> {
    trimmed_merge(input, TrimLevel::Model)
}

/// Index of the highest accuracy, earliest on ties.
pub fn best_model_select(val_accuracies: &[f64]) -> Result<usize> {
    if val_accuracies.is_empty() {
        return Err(HamError::Domain("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, &a) in val_accuracies.iter().enumerate().skip(1) {
        if a > val_accuracies[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Dispatches on `input.strategy`.
pub fn merge(input: &MergeInput<'_>) -> Result<(ParamSet, MergeReport)> {
    match input.strategy {
        MergeStrategy::Rhm => rhm(input),
        MergeStrategy::LayerTrim => trimmed_merge(input, TrimLevel::Layer),
        MergeStrategy::Avg => Ok((avg_merge(input)?, MergeReport::untrimmed(MergeStrategy::Avg, input))),
        MergeStrategy::BestModel => {
            input.validate()?;
            let accs = input.val_accuracies.ok_or_else(|| {
                HamError::config("merge.strategy", "best_model needs validation accuracies for every candidate")
            })?;
            if accs.len() != input.sources.len() {
                return Err(HamError::Structural(format!(
                    "{} accuracies for {} candidates",
                    accs.len(),
                    input.sources.len()
                )));
            }
            let idx = best_model_select(accs)?;
            let mut report = MergeReport::untrimmed(MergeStrategy::BestModel, input);
            report.selected = Some(idx);
            Ok((input.sources[idx].clone(), report))
        }
    }
}
