//! Leave-one-domain-out evaluation, ablation rows and sensitivity sweeps.
//!
//! A *cell* is one `(held-out domain, seed)` pair. Each cell trains every
//! training variant its requested rows need, builds each row's model, and
//! scores it on the full held-out domain and on the pooled validation splits of
//! the training domains. Cells are independent and may run in parallel;
//! results are always collected in `(held_out, seed)` order.

mod plot;

pub use plot::{line_chart_svg, Series};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{split_train_val, Dataset, SplitPair};
use crate::error::{HamError, Result};
use crate::merge::{merge, MergeInput, MergeReport, MergeStrategy};
use crate::model::{init_prototypes, CosineClassifier};
use crate::params::ParamSet;
use crate::train::{train_all, HarmonyConfig, TrainOptions, TrainOutput};

/// Fraction of `ds` that `params` classifies correctly.
pub fn accuracy(clf: &CosineClassifier, params: &ParamSet, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(HamError::Domain("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in ds.samples() {
        if clf.predict(params, &s.x)? == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Among coordinates where both vectors are nonzero, the fraction with
/// opposite signs; 0 when there are no such coordinates.
pub fn sign_conflict_rate(v_i: &ParamSet, v_bar: &ParamSet) -> Result<f64> {
    v_i.check_congruent(v_bar)?;
    let mut both = 0usize;
    let mut conflicts = 0usize;
    for (a, b) in v_i.tensors().zip(v_bar.tensors()) {
        for (&x, &y) in a.values().iter().zip(b.values()) {
            if x != 0.0 && y != 0.0 {
                both += 1;
                if (x > 0.0) != (y > 0.0) {
                    conflicts += 1;
                }
            }
        }
    }
    Ok(if both == 0 { 0.0 } else { conflicts as f64 / both as f64 })
}

/// One line of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Row {
    /// The untrained shared initialization.
    #[serde(rename = "zs")]
    ZeroShot,
    /// One model trained on the union of all source training splits.
    #[serde(rename = "erm")]
    ErmPooled,
    /// Best un-merged source model (plain training), chosen on validation.
    #[serde(rename = "single_best")]
    SingleBest,
    #[serde(rename = "avg")]
    Avg,
    #[serde(rename = "avg+opa")]
    AvgOpa,
    #[serde(rename = "layer_trim+opa")]
    LayerTrimOpa,
    #[serde(rename = "rhm")]
    Rhm,
    #[serde(rename = "rhm+opa")]
    RhmOpa,
    /// The full method: enrichment, sign alignment, historical average, trim.
    #[serde(rename = "rhm+opa+sae")]
    Ham,
    /// As `Ham` but each source contributes its best trajectory snapshot
    /// (by its own validation split) instead of the historical average.
    #[serde(rename = "best_model+opa+sae")]
    BestModel,
}

impl Row {
    pub const ALL: [Row; 10] = [
        Row::ZeroShot,
        Row::ErmPooled,
        Row::SingleBest,
        Row::Avg,
        Row::AvgOpa,
        Row::LayerTrimOpa,
        Row::Rhm,
        Row::RhmOpa,
        Row::Ham,
        Row::BestModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Row::ZeroShot => "zs",
            Row::ErmPooled => "erm",
            Row::SingleBest => "single_best",
            Row::Avg => "avg",
            Row::AvgOpa => "avg+opa",
            Row::LayerTrimOpa => "layer_trim+opa",
            Row::Rhm => "rhm",
            Row::RhmOpa => "rhm+opa",
            Row::Ham => "rhm+opa+sae",
            Row::BestModel => "best_model+opa+sae",
        }
    }

    /// Rows whose training has enrichment enabled.
    pub fn uses_sae(self) -> bool {
        matches!(self, Row::Ham | Row::BestModel)
    }

    fn variant(self) -> Option<Variant> {
        match self {
            Row::ZeroShot => None,
            Row::ErmPooled => Some(Variant::Pooled),
            Row::SingleBest | Row::Avg | Row::Rhm => Some(Variant::Plain),
            Row::AvgOpa | Row::LayerTrimOpa | Row::RhmOpa => Some(Variant::Opa),
            Row::Ham | Row::BestModel => Some(Variant::Ham),
        }
    }

    fn merge_strategy(self) -> Option<MergeStrategy> {
        match self {
            Row::Avg | Row::AvgOpa => Some(MergeStrategy::Avg),
            Row::LayerTrimOpa => Some(MergeStrategy::LayerTrim),
            Row::Rhm | Row::RhmOpa | Row::Ham | Row::BestModel => Some(MergeStrategy::Rhm),
            _ => None,
        }
    }
}

impl std::str::FromStr for Row {
    type Err = HamError;

    fn from_str(s: &str) -> Result<Self> {
        Row::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| HamError::config("eval.strategies", format!("unknown row `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Plain,
    Opa,
    Ham,
    Pooled,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Opa => "opa",
            Variant::Ham => "opa+sae",
            Variant::Pooled => "pooled",
        }
    }

    fn harmony(self, base: &HarmonyConfig, seed: u64) -> HarmonyConfig {
        let (lambda, sae) = match self {
            Variant::Plain | Variant::Pooled => (0.0, false),
            Variant::Opa => (base.lambda, false),
            Variant::Ham => (base.lambda, base.sae),
        };
        HarmonyConfig {
            lambda,
            sae,
            seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Row>,
    /// Held-out domains to run (all domains when absent).
    pub held_out: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![41, 42, 43],
            strategies: Row::ALL.to_vec(),
            held_out: None,
        }
    }
}

/// Everything a cell trains and tests on.
#[derive(Debug, Clone)]
pub struct CellInputs {
    pub source_domains: Vec<usize>,
    pub sources: Vec<SplitPair>,
    /// The whole held-out domain.
    pub test: Dataset,
    /// Union of the sources' validation splits.
    pub val: Dataset,
}

/// Splits the training domains of one cell. The held-out domain is removed
/// before anything else touches the data.
pub fn cell_inputs(ds: &Dataset, held_out: usize, seed: u64) -> Result<CellInputs> {
    let domains = ds.domain_ids();
    if !domains.contains(&held_out) {
        return Err(HamError::config("eval.held_out", format!("domain {held_out} is not in the dataset")));
    }
    let training = ds.filter_domains(|d| d != held_out);
    let split = split_train_val(&training, seed)?;
    let source_domains: Vec<usize> = domains.into_iter().filter(|&d| d != held_out).collect();
    let sources = source_domains
        .iter()
        .map(|&d| SplitPair {
            train: split.train.domain(d),
            val: split.val.domain(d),
        })
        .collect();
    Ok(CellInputs {
        source_domains,
        sources,
        test: ds.domain(held_out),
        val: split.val,
    })
}

/// Shared frozen prototypes plus the encoder architecture of a run.
pub fn classifier(cfg: &RunConfig) -> Result<CosineClassifier> {
    let proto = init_prototypes(cfg.data.num_classes, cfg.model.embed_dim, cfg.model.seed.wrapping_add(1))?;
    CosineClassifier::new(cfg.encoder(), proto)
}

/// The shared initialization every source starts from.
pub fn initial_params(cfg: &RunConfig) -> Result<ParamSet> {
    cfg.encoder().init_params(cfg.model.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub strategy: Row,
    pub test_acc: f64,
    pub val_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_report: Option<MergeReport>,
}

/// Per-step training diagnostics of one training variant, averaged over
/// sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDiagnostics {
    pub variant: String,
    pub sign_conflict_rate: Vec<f64>,
    pub ce_loss: Vec<f64>,
    pub sign_loss: Vec<f64>,
    pub admitted_clean: usize,
    pub admitted_corrupted: usize,
    pub offered_clean: usize,
    pub offered_corrupted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub held_out: usize,
    pub seed: u64,
    pub source_domains: Vec<usize>,
    pub zero_shot_acc: f64,
    pub rows: Vec<RowResult>,
    pub diagnostics: Vec<VariantDiagnostics>,
}

impl CellResult {
    pub fn row(&self, row: Row) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.strategy == row)
    }
}

fn diagnostics(variant: Variant, out: &TrainOutput, steps: usize) -> VariantDiagnostics {
    let mut d = VariantDiagnostics {
        variant: variant.name().to_string(),
        sign_conflict_rate: vec![0.0; steps],
        ce_loss: vec![0.0; steps],
        sign_loss: vec![0.0; steps],
        admitted_clean: 0,
        admitted_corrupted: 0,
        offered_clean: 0,
        offered_corrupted: 0,
    };
    let n_sources = out.finals.len() as f64;
    for r in &out.log {
        let t = r.step - 1;
        d.sign_conflict_rate[t] += r.sign_conflict_rate / n_sources;
        d.ce_loss[t] += r.ce_loss / n_sources;
        d.sign_loss[t] += r.sign_loss / n_sources;
        d.admitted_corrupted += r.admitted_corrupted;
        d.admitted_clean += r.admitted - r.admitted_corrupted;
        d.offered_corrupted += r.foreign_corrupted_offered;
        d.offered_clean += r.foreign_offered - r.foreign_corrupted_offered;
    }
    d
}

/// Trains what the requested rows need and scores every row for one
/// `(held_out, seed)` cell.
pub fn run_cell(ds: &Dataset, cfg: &RunConfig, held_out: usize, seed: u64) -> Result<CellResult> {
    let inputs = cell_inputs(ds, held_out, seed)?;
    let clf = classifier(cfg)?;
    let theta0 = initial_params(cfg)?;
    let zero_shot_acc = accuracy(&clf, &theta0, &inputs.test)?;

    // train each distinct variant once
    let mut trained: Vec<(Variant, HarmonyConfig, TrainOutput)> = Vec::new();
    let mut by_variant: Vec<(Variant, usize)> = Vec::new();
    for row in &cfg.eval.strategies {
        let Some(variant) = row.variant() else { continue };
        if by_variant.iter().any(|(v, _)| *v == variant) {
            continue;
        }
        let harmony = variant.harmony(&cfg.train, seed);
        let pooled = variant == Variant::Pooled;
        let existing = trained.iter().position(|(v, h, _)| *h == harmony && (*v == Variant::Pooled) == pooled);
        let idx = match existing {
            Some(i) => i,
            None => {
                let pooled_train;
                let sources: Vec<&Dataset> = if pooled {
                    let parts: Vec<&Dataset> = inputs.sources.iter().map(|s| &s.train).collect();
                    pooled_train = Dataset::concat(&parts)?;
                    vec![&pooled_train]
                } else {
                    inputs.sources.iter().map(|s| &s.train).collect()
                };
                let out = train_all(&clf, &theta0, &sources, &harmony, &TrainOptions::default())?;
                trained.push((variant, harmony, out));
                trained.len() - 1
            }
        };
        by_variant.push((variant, idx));
    }
    let output = |v: Variant| -> &TrainOutput {
        let idx = by_variant.iter().find(|(x, _)| *x == v).expect("variant trained").1;
        &trained[idx].2
    };

    let merge_sources = |sources: &[ParamSet], strategy: MergeStrategy| -> Result<(ParamSet, MergeReport)> {
        let mut input = MergeInput::new(&theta0, sources, strategy, cfg.merge.trim_ratio);
        input.percentile_sample = cfg.merge.percentile_sample.map(|n| (n, seed));
        merge(&input)
    };

    let mut rows = Vec::with_capacity(cfg.eval.strategies.len());
    for &row in &cfg.eval.strategies {
        let (params, report) = match row {
            Row::ZeroShot => (theta0.clone(), None),
            Row::ErmPooled => (output(Variant::Pooled).finals[0].clone(), None),
            Row::SingleBest => {
                let finals = &output(Variant::Plain).finals;
                let accs = finals
                    .iter()
                    .map(|p| accuracy(&clf, p, &inputs.val))
                    .collect::<Result<Vec<_>>>()?;
                let mut input = MergeInput::new(&theta0, finals, MergeStrategy::BestModel, 0.0);
                input.val_accuracies = Some(&accs);
                let (p, r) = merge(&input)?;
                (p, Some(r))
            }
            Row::BestModel => {
                let out = output(Variant::Ham);
                let mut chosen = Vec::with_capacity(out.snapshots.len());
                for (snaps, split) in out.snapshots.iter().zip(&inputs.sources) {
                    let accs = snaps
                        .iter()
                        .map(|(_, p)| accuracy(&clf, p, &split.val))
                        .collect::<Result<Vec<_>>>()?;
                    let best = crate::merge::best_model_select(&accs)?;
                    chosen.push(snaps[best].1.clone());
                }
                let (p, r) = merge_sources(&chosen, MergeStrategy::Rhm)?;
                (p, Some(r))
            }
            _ => {
                let variant = row.variant().expect("merge rows train");
                let strategy = row.merge_strategy().expect("merge rows merge");
                let (p, r) = merge_sources(&output(variant).averaged, strategy)?;
                (p, Some(r))
            }
        };
        rows.push(RowResult {
            strategy: row,
            test_acc: accuracy(&clf, &params, &inputs.test)?,
            val_acc: accuracy(&clf, &params, &inputs.val)?,
            merge_report: report,
        });
    }

    let diagnostics = by_variant
        .iter()
        .map(|&(v, idx)| diagnostics(v, &trained[idx].2, trained[idx].1.steps))
        .collect();
    Ok(CellResult {
        held_out,
        seed,
        source_domains: inputs.source_domains,
        zero_shot_acc,
        rows,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub held_out: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub strategy: Row,
    pub per_domain: Vec<DomainSummary>,
    /// Mean over all cells.
    pub mean: f64,
    /// Sample standard deviation over seeds of the domain-averaged accuracy.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub held_out_domains: Vec<usize>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<RowSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, row: Row) -> Option<&RowSummary> {
        self.summary.iter().find(|s| s.strategy == row)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per row: `strategy, <acc per held-out domain>, mean, std`.
    pub fn ablation_csv(&self) -> String {
        let mut out = String::from("strategy");
        for d in &self.held_out_domains {
            let _ = write!(out, ",domain_{d}");
        }
        out.push_str(",mean,std\n");
        for s in &self.summary {
            out.push_str(s.strategy.name());
            for d in &s.per_domain {
                let _ = write!(out, ",{:.6}", d.mean);
            }
            let _ = writeln!(out, ",{:.6},{:.6}", s.mean, s.std);
        }
        out
    }

    /// Flat per-cell accuracies.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("held_out,seed,strategy,test_acc,val_acc\n");
        for c in &self.cells {
            for r in &c.rows {
                let _ = writeln!(out, "{},{},{},{:.6},{:.6}", c.held_out, c.seed, r.strategy.name(), r.test_acc, r.val_acc);
            }
        }
        out
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn summarize(cells: &[CellResult], rows: &[Row], held: &[usize], seeds: &[u64]) -> Vec<RowSummary> {
    rows.iter()
        .map(|&row| {
            let acc = |d: usize, s: u64| {
                cells
                    .iter()
                    .find(|c| c.held_out == d && c.seed == s)
                    .and_then(|c| c.row(row))
                    .map(|r| r.test_acc)
                    .expect("every cell has every row")
            };
            let per_domain = held
                .iter()
                .map(|&d| {
                    let v: Vec<f64> = seeds.iter().map(|&s| acc(d, s)).collect();
                    DomainSummary {
                        held_out: d,
                        mean: mean(&v),
                        std: sample_std(&v),
                    }
                })
                .collect();
            let all: Vec<f64> = held.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).map(|(d, s)| acc(d, s)).collect();
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| mean(&held.iter().map(|&d| acc(d, s)).collect::<Vec<_>>()))
                .collect();
            RowSummary {
                strategy: row,
                per_domain,
                mean: mean(&all),
                std: sample_std(&per_seed),
            }
        })
        .collect()
}

fn run_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HamError::config("jobs", e.to_string()))?;
    Ok(pool.install(work))
}

/// Runs every `(held-out domain, seed)` cell. With `jobs > 1` cells run
/// concurrently; the report is identical either way.
pub fn leave_one_out_run(ds: &Dataset, cfg: &RunConfig, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let domains = ds.domain_ids();
    if domains.len() < 3 {
        return Err(HamError::config(
            "data.domains",
            format!("leave-one-domain-out needs >= 3 domains, found {}", domains.len()),
        ));
    }
    let held: Vec<usize> = cfg.eval.held_out.clone().unwrap_or_else(|| domains.clone());
    let seeds = cfg.eval.seeds.clone();
    let grid: Vec<(usize, u64)> = held.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();
    let cells: Vec<CellResult> = if jobs <= 1 {
        grid.iter().map(|&(d, s)| run_cell(ds, cfg, d, s)).collect::<Result<_>>()?
    } else {
        run_pool(jobs, || grid.par_iter().map(|&(d, s)| run_cell(ds, cfg, d, s)).collect::<Result<Vec<_>>>())??
    };
    let summary = summarize(&cells, &cfg.eval.strategies, &held, &seeds);
    Ok(ExperimentReport {
        config: cfg.to_json_value(),
        seeds,
        held_out_domains: held,
        cells,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    Lambda,
    #[serde(rename = "r")]
    TrimRatio,
    Beta,
    LogitScale,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::Lambda => "lambda",
            Knob::TrimRatio => "r",
            Knob::Beta => "beta",
            Knob::LogitScale => "logit_scale",
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Knob::Lambda => cfg.train.lambda = value,
            Knob::TrimRatio => cfg.merge.trim_ratio = value,
            Knob::Beta => cfg.train.beta = value,
            Knob::LogitScale => cfg.model.logit_scale = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl std::str::FromStr for Knob {
    type Err = HamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Knob::Lambda),
            "r" | "trim_ratio" => Ok(Knob::TrimRatio),
            "beta" => Ok(Knob::Beta),
            "logit_scale" => Ok(Knob::LogitScale),
            other => Err(HamError::config("sweep.parameter", format!("unknown knob `{other}`"))),
        }
    }
}

/// One un-aggregated sweep line: a `(value, held_out, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub held_out: usize,
    pub seed: u64,
    pub accuracies: Vec<(Row, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub strategy: Row,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: Knob,
    pub values: Vec<f64>,
    pub config: serde_json::Value,
    pub cells: Vec<SweepCell>,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},strategy,mean,std\n", self.parameter.name());
        for p in &self.points {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", p.value, p.strategy.name(), p.mean, p.std);
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let mut series: Vec<Series> = Vec::new();
        for p in &self.points {
            match series.iter_mut().find(|s| s.name == p.strategy.name()) {
                Some(s) => s.points.push((p.value, p.mean)),
                None => series.push(Series {
                    name: p.strategy.name().to_string(),
                    points: vec![(p.value, p.mean)],
                }),
            }
        }
        line_chart_svg(
            &format!("held-out accuracy vs {}", self.parameter.name()),
            self.parameter.name(),
            "accuracy",
            &series,
        )
    }
}

/// Repeats the leave-one-domain-out protocol once per value of `knob`.
pub fn sweep(ds: &Dataset, base: &RunConfig, knob: Knob, values: &[f64], jobs: usize) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(HamError::config("sweep.values", "at least one value is required"));
    }
    let mut cells = Vec::new();
    let mut points = Vec::new();
    for &value in values {
        let cfg = knob.apply(base, value)?;
        let report = leave_one_out_run(ds, &cfg, jobs)?;
        for c in &report.cells {
            cells.push(SweepCell {
                value,
                held_out: c.held_out,
                seed: c.seed,
                accuracies: c.rows.iter().map(|r| (r.strategy, r.test_acc)).collect(),
            });
        }
        for s in &report.summary {
            points.push(SweepPoint {
                value,
                strategy: s.strategy,
                mean: s.mean,
                std: s.std,
            });
        }
    }
    Ok(SweepReport {
        parameter: knob,
        values: values.to_vec(),
        config: base.to_json_value(),
        cells,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataConfig, Sample};
    use crate::model::{EncoderConfig, Prototypes};
    use crate::params::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[f64]) -> ParamSet {
        ParamSet::from_entries(vec![("l".into(), Tensor::vector(v.to_vec()).unwrap())]).unwrap()
    }

    #[test]
    fn sign_conflict_examples() {
        let v = set(&[1.0, -2.0, 3.0]);
        assert_eq!(sign_conflict_rate(&v, &v).unwrap(), 0.0);
        let neg = set(&[-1.0, 2.0, -3.0]);
        assert_eq!(sign_conflict_rate(&v, &neg).unwrap(), 1.0);
        assert_eq!(sign_conflict_rate(&set(&[1.0, -1.0, 0.0]), &set(&[1.0, 1.0, 5.0])).unwrap(), 0.5);
        assert_eq!(sign_conflict_rate(&set(&[0.0]), &set(&[1.0])).unwrap(), 0.0);
        assert!(sign_conflict_rate(&set(&[0.0]), &set(&[1.0, 2.0])).is_err());
    }

    /// Two-class classifier predicting class 0 iff `x[0] > x[1]`.
    fn axis_classifier() -> (CosineClassifier, ParamSet) {
        let cfg = EncoderConfig { input_dim: 2, hidden_dims: vec![], embed_dim: 2, logit_scale: 10.0 };
        let proto = Prototypes::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut params = cfg.param_template();
        params.layer_mut(0).values_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        (CosineClassifier::new(cfg, proto).unwrap(), params)
    }

    fn labeled(points: &[([f64; 2], usize)]) -> Dataset {
        Dataset::new(
            2,
            2,
            points.iter().map(|(x, y)| Sample { x: x.to_vec(), y: *y, domain_id: 0, corrupted: false }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let (clf, params) = axis_classifier();
        let ds = labeled(&[([2.0, 1.0], 0), ([1.0, 3.0], 1), ([0.5, 0.1], 0), ([0.0, 1.0], 1)]);
        assert_eq!(accuracy(&clf, &params, &ds).unwrap(), 1.0);
        let partial = labeled(&[([2.0, 1.0], 0), ([1.0, 3.0], 0), ([0.5, 0.1], 0), ([0.0, 1.0], 0)]);
        let flipped = labeled(&[([2.0, 1.0], 1), ([1.0, 3.0], 1), ([0.5, 0.1], 1), ([0.0, 1.0], 1)]);
        let a = accuracy(&clf, &params, &partial).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(accuracy(&clf, &params, &flipped).unwrap(), 1.0 - a);
        assert!(accuracy(&clf, &params, &labeled(&[])).is_err());
    }

    #[test]
    fn random_predictor_is_at_chance() {
        let cfg = EncoderConfig { input_dim: 4, hidden_dims: vec![8], embed_dim: 6, logit_scale: 10.0 };
        let clf = CosineClassifier::new(cfg.clone(), init_prototypes(5, 6, 1).unwrap()).unwrap();
        let params = cfg.init_params(2).unwrap();
        // labels independent of inputs: any fixed predictor scores 1/5 in expectation
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = (0..10_000)
            .map(|i| Sample {
                x: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                y: i % 5,
                domain_id: 0,
                corrupted: false,
            })
            .collect();
        let ds = Dataset::new(5, 4, samples).unwrap();
        let acc = accuracy(&clf, &params, &ds).unwrap();
        // binomial sd = sqrt(.2 * .8 / 1e4) = 0.004; 5 sd = 0.02
        assert!((acc - 0.2).abs() < 0.02, "{acc}");
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.n_per_domain = 60;
        cfg.model.hidden_dims = vec![8];
        cfg.model.embed_dim = 4;
        cfg.train.steps = 20;
        cfg.train.snapshot_every = 5;
        cfg.eval.seeds = vec![1, 2];
        cfg
    }

    #[test]
    fn cell_inputs_isolate_held_out_domain() {
        let cfg = tiny_config();
        let ds = generate(&cfg.data).unwrap();
        for held in ds.domain_ids() {
            let inputs = cell_inputs(&ds, held, 5).unwrap();
            assert!(!inputs.source_domains.contains(&held));
            for s in &inputs.sources {
                assert!(s.train.samples().iter().chain(s.val.samples()).all(|x| x.domain_id != held));
            }
            assert!(inputs.val.samples().iter().all(|x| x.domain_id != held));
            assert!(inputs.test.samples().iter().all(|x| x.domain_id == held));
            assert_eq!(inputs.test.len(), 60);
        }
        assert!(cell_inputs(&ds, 99, 0).is_err());
    }

    #[test]
    fn zero_steps_every_row_matches_zero_shot() {
        let mut cfg = tiny_config();
        cfg.train.steps = 0;
        let ds = generate(&cfg.data).unwrap();
        let report = leave_one_out_run(&ds, &cfg, 1).unwrap();
        for c in &report.cells {
            for r in &c.rows {
                assert_eq!(r.test_acc, c.zero_shot_acc, "{:?}", r.strategy);
            }
        }
        // zero-shot is identical across seeds for a given held-out domain
        for d in &report.held_out_domains {
            let zs: Vec<f64> = report.cells.iter().filter(|c| c.held_out == *d).map(|c| c.zero_shot_acc).collect();
            assert!(zs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn report_means_match_hand_average() {
        let mut cfg = tiny_config();
        cfg.eval.strategies = vec![Row::Avg, Row::Ham];
        cfg.eval.held_out = Some(vec![0, 2]);
        let ds = generate(&cfg.data).unwrap();
        let report = leave_one_out_run(&ds, &cfg, 1).unwrap();
        assert_eq!(report.cells.len(), 4);
        for s in &report.summary {
            let mut total = 0.0;
            for c in &report.cells {
                total += c.row(s.strategy).unwrap().test_acc;
            }
            assert!((s.mean - total / 4.0).abs() < 1e-15);
            for d in &s.per_domain {
                let v: Vec<f64> = report.cells.iter().filter(|c| c.held_out == d.held_out).map(|c| c.row(s.strategy).unwrap().test_acc).collect();
                assert!((d.mean - (v[0] + v[1]) / 2.0).abs() < 1e-15);
                assert!((d.std - (v[0] - v[1]).abs() / 2f64.sqrt()).abs() < 1e-12);
            }
        }
        let csv = report.ablation_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("strategy,domain_0,domain_2,mean,std\n"));
    }

    #[test]
    fn duplicate_seeds_duplicate_rows() {
        let mut cfg = tiny_config();
        cfg.eval.seeds = vec![3, 3];
        cfg.eval.strategies = vec![Row::Rhm];
        cfg.eval.held_out = Some(vec![1]);
        let ds = generate(&cfg.data).unwrap();
        let report = leave_one_out_run(&ds, &cfg, 1).unwrap();
        assert_eq!(report.cells[0], report.cells[1]);
    }

    #[test]
    fn parallel_cells_match_serial() {
        let mut cfg = tiny_config();
        cfg.eval.strategies = vec![Row::Avg, Row::Rhm, Row::SingleBest];
        let ds = generate(&cfg.data).unwrap();
        let a = leave_one_out_run(&ds, &cfg, 1).unwrap();
        let b = leave_one_out_run(&ds, &cfg, 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn sae_toggle_only_moves_sae_rows() {
        let mut cfg = tiny_config();
        cfg.eval.strategies = Row::ALL.to_vec();
        cfg.eval.seeds = vec![1];
        cfg.eval.held_out = Some(vec![3]);
        let ds = generate(&cfg.data).unwrap();
        let on = leave_one_out_run(&ds, &cfg, 1).unwrap();
        cfg.train.sae = false;
        let off = leave_one_out_run(&ds, &cfg, 1).unwrap();
        for (a, b) in on.cells[0].rows.iter().zip(&off.cells[0].rows) {
            if !a.strategy.uses_sae() {
                assert_eq!(a, b, "{:?}", a.strategy);
            }
        }
        // with SAE off the full row collapses onto rhm+opa
        let off_cell = &off.cells[0];
        assert_eq!(off_cell.row(Row::Ham).unwrap().test_acc, off_cell.row(Row::RhmOpa).unwrap().test_acc);
    }

    #[test]
    fn sweep_shapes_and_reductions() {
        let mut cfg = tiny_config();
        cfg.eval.strategies = vec![Row::Avg, Row::Rhm];
        cfg.eval.held_out = Some(vec![0, 1]);
        let ds = generate(&cfg.data).unwrap();
        let sw = sweep(&ds, &cfg, Knob::TrimRatio, &[0.0, 0.5], 1).unwrap();
        assert_eq!(sw.cells.len(), 2 * 2 * 2);
        for c in sw.cells.iter().filter(|c| c.value == 0.0) {
            assert_eq!(c.accuracies[0].1, c.accuracies[1].1);
        }
        assert_eq!(sw.to_csv().lines().count(), 1 + 2 * 2);
        assert!(sw.to_svg().starts_with("<svg"));

        let mut zero = cfg.clone();
        zero.train.lambda = 0.0;
        let single = sweep(&ds, &cfg, Knob::Lambda, &[0.0], 1).unwrap();
        let plain = leave_one_out_run(&ds, &zero, 1).unwrap();
        for (sc, pc) in single.cells.iter().zip(&plain.cells) {
            for ((row, acc), r) in sc.accuracies.iter().zip(&pc.rows) {
                assert_eq!(*row, r.strategy);
                assert_eq!(*acc, r.test_acc);
            }
        }
        assert!(sweep(&ds, &cfg, Knob::Lambda, &[], 1).is_err());
        assert!(sweep(&ds, &cfg, Knob::TrimRatio, &[1.0], 1).is_err());
    }

    #[test]
    fn needs_three_domains() {
        let mut cfg = tiny_config();
        cfg.data.domains.truncate(2);
        let ds = generate(&cfg.data).unwrap();
        assert!(leave_one_out_run(&ds, &cfg, 1).is_err());
    }

    #[test]
    fn row_names_round_trip() {
        for r in Row::ALL {
            assert_eq!(r.name().parse::<Row>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.name()));
        }
        let cfg: EvalConfig = serde_json::from_str(r#"{"strategies": ["avg", "rhm+opa+sae"]}"#).unwrap();
        assert_eq!(cfg.strategies, vec![Row::Avg, Row::Ham]);
        let _ = DataConfig::default();
    }
}
