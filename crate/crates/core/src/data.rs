//! Synthetic multi-domain classification data.
//!
//! Every domain shares one set of class means; a domain applies its own
//! rotation (first two coordinates), scale and offset to `mean + noise`, and may
//! flip labels. Flipped samples carry a `corrupted` flag that only evaluation
//! code reads.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Radians, applied to input coordinates 0 and 1.
    pub rotation_angle: f64,
    pub scale: f64,
    /// Empty means the zero vector.
    pub offset: Vec<f64>,
    pub feature_noise_std: f64,
    pub label_noise_rate: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            domain_id: 0,
            rotation_angle: 0.0,
            scale: 1.0,
            offset: Vec::new(),
            feature_noise_std: 1.0,
            label_noise_rate: 0.0,
        }
    }
}

impl DomainSpec {
    fn validate(&self, idx: usize, input_dim: usize) -> Result<()> {
        let field = |name: &str| format!("data.domains[{idx}].{name}");
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(HamError::config(field("scale"), "must be positive"));
        }
        if !self.rotation_angle.is_finite() {
            return Err(HamError::config(field("rotation_angle"), "must be finite"));
        }
        if !(self.feature_noise_std >= 0.0) || !self.feature_noise_std.is_finite() {
            return Err(HamError::config(field("feature_noise_std"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(HamError::config(field("label_noise_rate"), "must lie in [0, 1)"));
        }
        if !self.offset.is_empty() && self.offset.len() != input_dim {
            return Err(HamError::config(
                field("offset"),
                format!("has {} entries, input_dim is {input_dim}", self.offset.len()),
            ));
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            return Err(HamError::config(field("offset"), "must be finite"));
        }
        Ok(())
    }
}

/// Generation parameters; the `data` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_domain: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let offset = |scale: f64| -> Vec<f64> { (0..8).map(|j| scale * if j % 2 == 0 { 1.0 } else { -0.5 }).collect() };
        Self {
            num_classes: 5,
            input_dim: 8,
            n_per_domain: 500,
            seed: 7,
            domains: vec![
                DomainSpec {
                    domain_id: 0,
                    ..DomainSpec::default()
                },
                DomainSpec {
                    domain_id: 1,
                    rotation_angle: PI / 4.0,
                    scale: 1.3,
                    offset: offset(0.5),
                    ..DomainSpec::default()
                },
                DomainSpec {
                    domain_id: 2,
                    rotation_angle: PI / 2.0,
                    scale: 0.8,
                    offset: offset(-0.5),
                    feature_noise_std: 1.2,
                    ..DomainSpec::default()
                },
                DomainSpec {
                    domain_id: 3,
                    rotation_angle: 3.0 * PI / 4.0,
                    scale: 1.1,
                    offset: offset(0.25),
                    feature_noise_std: 1.4,
                    label_noise_rate: 0.1,
                },
            ],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HamError::config("data.num_classes", "must be >= 2"));
        }
        if self.input_dim == 0 {
            return Err(HamError::config("data.input_dim", "must be >= 1"));
        }
        if self.n_per_domain < self.num_classes {
            return Err(HamError::config(
                "data.n_per_domain",
                format!("must be >= num_classes ({})", self.num_classes),
            ));
        }
        if self.domains.is_empty() {
            return Err(HamError::config("data.domains", "at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate(i, self.input_dim)?;
            if self.domains[..i].iter().any(|o| o.domain_id == d.domain_id) {
                return Err(HamError::config(
                    format!("data.domains[{i}].domain_id"),
                    format!("duplicate domain id {}", d.domain_id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain_id: usize,
    /// The stored label was flipped away from the generating class.
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    input_dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_classes: usize, input_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != input_dim {
                return Err(HamError::Structural(format!(
                    "sample {i} has {} features, expected {input_dim}",
                    s.x.len()
                )));
            }
            if s.y >= num_classes {
                return Err(HamError::Structural(format!(
                    "sample {i} has label {} outside [0, {num_classes})",
                    s.y
                )));
            }
        }
        Ok(Self {
            num_classes,
            input_dim,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct domain ids in ascending order.
    pub fn domain_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Samples whose domain satisfies `keep`, original order preserved.
    pub fn filter_domains(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            samples: self.samples.iter().filter(|s| keep(s.domain_id)).cloned().collect(),
        }
    }

    pub fn domain(&self, id: usize) -> Dataset {
        self.filter_domains(|d| d == id)
    }

    /// `(features, label)` pairs for the loss functions.
    pub fn examples(&self) -> Vec<(&[f64], usize)> {
        self.samples.iter().map(|s| (s.x.as_slice(), s.y)).collect()
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| HamError::Domain("concatenating zero datasets".into()))?;
        let mut samples = Vec::new();
        for p in parts {
            if p.num_classes != first.num_classes || p.input_dim != first.input_dim {
                return Err(HamError::Structural("concatenating incompatible datasets".into()));
            }
            samples.extend_from_slice(&p.samples);
        }
        Ok(Dataset {
            num_classes: first.num_classes,
            input_dim: first.input_dim,
            samples,
        })
    }
}

/// Shared class means: seeded standard normal draws, scaled up if needed so
/// that every pair is at least distance 2 apart.
fn class_means(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let dist = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    if min_dist < 2.0 {
        let factor = 2.0 / min_dist.max(1e-12);
        for m in &mut means {
            m.iter_mut().for_each(|v| *v *= factor);
        }
    }
    means
}

fn apply_domain(spec: &DomainSpec, mut v: Vec<f64>) -> Vec<f64> {
    if v.len() >= 2 {
        let (s, c) = spec.rotation_angle.sin_cos();
        let (a, b) = (v[0], v[1]);
        v[0] = c * a - s * b;
        v[1] = s * a + c * b;
    }
    for (j, x) in v.iter_mut().enumerate() {
        *x = *x * spec.scale + spec.offset.get(j).copied().unwrap_or(0.0);
    }
    v
}

/// Classes cycle `0, 1, .., K-1, 0, ..` within each domain, so every domain
/// is class balanced up to one sample.
pub fn generate(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let (k, d) = (config.num_classes, config.input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means = class_means(&mut rng, k, d);
    let mut samples = Vec::with_capacity(config.n_per_domain * config.domains.len());
    for spec in &config.domains {
        for i in 0..config.n_per_domain {
            let class = i % k;
            let raw: Vec<f64> = means[class]
                .iter()
                .map(|m| m + spec.feature_noise_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let x = apply_domain(spec, raw);
            let flip = rng.random::<f64>() < spec.label_noise_rate;
            let y = if flip {
                // uniform over the other K-1 classes
                let r = rng.random_range(0..k - 1);
                if r >= class {
                    r + 1
                } else {
                    r
                }
            } else {
                class
            };
            samples.push(Sample {
                x,
                y,
                domain_id: spec.domain_id,
                corrupted: flip,
            });
        }
    }
    Dataset::new(k, d, samples)
}

pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub val: Dataset,
}

/// Per-domain stratified 80/20 split. Within each part, samples keep their
/// original relative order.
pub fn split_train_val(ds: &Dataset, seed: u64) -> Result<SplitPair> {
    let mut in_val = vec![false; ds.len()];
    for id in ds.domain_ids() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].domain_id == id).collect();
        if idx.len() < 5 {
            return Err(HamError::config(
                "data.n_per_domain",
                format!("domain {id} has {} samples; a split needs at least 5", idx.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * VALIDATION_FRACTION).round() as usize;
        for &i in &idx[..n_val] {
            in_val[i] = true;
        }
    }
    let pick = |want: bool| Dataset {
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
        samples: ds
            .samples
            .iter()
            .zip(&in_val)
            .filter(|(_, &v)| v == want)
            .map(|(s, _)| s.clone())
            .collect(),
    };
    Ok(SplitPair {
        train: pick(false),
        val: pick(true),
    })
}

/// Index batches for one epoch over `n` samples: a seeded shuffle that
/// depends on `(seed, epoch)`, chunked with the short tail batch kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Endless batch source cycling through epochs.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(HamError::Domain("batch stream over an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(HamError::config("train.batch_size", "must be >= 1"));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            pending: batch_iter(n, batch_size, seed, 0).into_iter(),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            self.epoch += 1;
            self.pending = batch_iter(self.n, self.batch_size, self.seed, self.epoch).into_iter();
        }
    }
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `x_0..x_{d-1},y,domain_id,corrupted`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => HamError::io(path, e),
        other => HamError::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..ds.input_dim).map(|j| format!("x_{j}")).collect();
    header.extend(["y", "domain_id", "corrupted"].map(String::from));
    w.write_record(&header).map_err(io)?;
    for s in &ds.samples {
        let mut row: Vec<String> = s.x.iter().map(|&v| format_float(v)).collect();
        row.push(s.y.to_string());
        row.push(s.domain_id.to_string());
        row.push(if s.corrupted { "1" } else { "0" }.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| HamError::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HamError::io(path, e))?;
    read_csv(file, num_classes)
}

pub fn read_csv(reader: impl std::io::Read, num_classes: usize) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: u64, message: String| HamError::Parse { line, message };
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let n = header.len();
    if n < 4 {
        return Err(parse_err(1, format!("expected at least 4 columns, found {n}")));
    }
    let d = n - 3;
    for j in 0..d {
        if header[j] != format!("x_{j}") {
            return Err(parse_err(1, format!("column {j} should be `x_{j}`, found `{}`", &header[j])));
        }
    }
    for (j, name) in ["y", "domain_id", "corrupted"].iter().enumerate() {
        if &header[d + j] != *name {
            return Err(parse_err(1, format!("missing column `{name}` (found `{}`)", &header[d + j])));
        }
    }
    let mut samples = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n {
            return Err(parse_err(line, format!("expected {n} fields, found {}", record.len())));
        }
        let x = (0..d)
            .map(|j| {
                let v: f64 = record[j]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad float `{}` in x_{j}", &record[j])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite feature in x_{j}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let y: usize = record[d]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", &record[d])))?;
        if y >= num_classes {
            return Err(parse_err(line, format!("label {y} outside [0, {num_classes})")));
        }
        let domain_id: usize = record[d + 1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad domain_id `{}`", &record[d + 1])))?;
        let corrupted = match record[d + 2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(parse_err(line, format!("bad corrupted flag `{other}`"))),
        };
        samples.push(Sample {
            x,
            y,
            domain_id,
            corrupted,
        });
    }
    Dataset::new(num_classes, d, samples)
}
