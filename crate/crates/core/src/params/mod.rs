//! Named parameter storage and the vector arithmetic behind update vectors,
//! flattening, magnitude trimming and merging.
//!
//! Every model parameter vector and every update vector (`theta - theta0`) is a
//! [`ParamSet`]: an ordered list of named row-major `f64` tensors. Binary
//! operations require the operands to be *congruent* (same names, same order,
//! same shapes).

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, render_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION,
};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HamError, Result};

/// Dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(HamError::Structural(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(HamError::Structural(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(HamError::Domain(format!(
                "non-finite value {} at index {pos}",
                values[pos]
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// 1-D tensor.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered, uniquely named collection of tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut ps = Self::new();
        for (name, tensor) in entries {
            ps.push(name, tensor)?;
        }
        Ok(ps)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(HamError::Structural(format!("duplicate layer name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn layer(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Number of layers.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Errors with the first mismatching layer unless `other` has the same
    /// names, order and shapes.
    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        for (i, ((na, ta), (nb, tb))) in self.entries.iter().zip(&other.entries).enumerate() {
            if na != nb {
                return Err(HamError::Congruence {
                    layer: na.clone(),
                    detail: format!("layer {i} is named `{na}` on one side and `{nb}` on the other"),
                });
            }
            if ta.shape != tb.shape {
                return Err(HamError::Congruence {
                    layer: na.clone(),
                    detail: format!("shapes {:?} vs {:?}", ta.shape, tb.shape),
                });
            }
        }
        if self.len() != other.len() {
            let (longer, shorter) = if self.len() > other.len() {
                (self, other)
            } else {
                (other, self)
            };
            return Err(HamError::Congruence {
                layer: longer.entries[shorter.len()].0.clone(),
                detail: format!("layer counts differ ({} vs {})", self.len(), other.len()),
            });
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for x in &mut t.values {
                *x *= alpha;
            }
        }
    }

    /// Elementwise `f(a, b)` into a new set.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((name, a), (_, b))| {
                let values = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        values,
                    },
                )
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

/// `theta - theta0`, layer by layer.
pub fn update_vector(theta: &ParamSet, theta0: &ParamSet) -> Result<ParamSet> {
    theta.zip_map(theta0, |a, b| a - b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// Layer boundaries of a flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatLayout {
    segments: Vec<Segment>,
}

impl FlatLayout {
    pub fn of(ps: &ParamSet) -> Self {
        let mut offset = 0;
        let segments = ps
            .iter()
            .map(|(name, t)| {
                let seg = Segment {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    offset,
                    length: t.len(),
                };
                offset += t.len();
                seg
            })
            .collect();
        Self { segments }
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut expected = 0;
        for seg in &segments {
            if seg.offset != expected {
                return Err(HamError::Structural(format!(
                    "segment `{}` starts at {} but previous segment ends at {expected}",
                    seg.name, seg.offset
                )));
            }
            if seg.length == 0 || seg.shape.iter().product::<usize>() != seg.length {
                return Err(HamError::Structural(format!(
                    "segment `{}` length {} disagrees with shape {:?}",
                    seg.name, seg.length, seg.shape
                )));
            }
            expected += seg.length;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.length)
    }
}

/// Concatenation of every layer of a [`ParamSet`] in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVec {
    values: Vec<f64>,
    layout: FlatLayout,
}

impl FlatVec {
    pub fn new(values: Vec<f64>, layout: FlatLayout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(HamError::Structural(format!(
                "flat vector has {} values but layout covers {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &FlatLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of one layout segment.
    pub fn segment_values(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.offset..seg.offset + seg.length]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    bits: Vec<bool>,
    layout: FlatLayout,
}

impl BitMask {
    pub fn new(bits: Vec<bool>, layout: FlatLayout) -> Result<Self> {
        if bits.len() != layout.total_len() {
            return Err(HamError::Structural(format!(
                "mask has {} bits but layout covers {}",
                bits.len(),
                layout.total_len()
            )));
        }
        Ok(Self { bits, layout })
    }

    pub fn filled(layout: FlatLayout, value: bool) -> Self {
        Self {
            bits: vec![value; layout.total_len()],
            layout,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn layout(&self) -> &FlatLayout {
        &self.layout
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Kept count per layout segment.
    pub fn segment_counts(&self) -> Vec<(String, usize)> {
        self.layout
            .segments
            .iter()
            .map(|s| {
                let n = self.bits[s.offset..s.offset + s.length].iter().filter(|&&b| b).count();
                (s.name.clone(), n)
            })
            .collect()
    }
}

pub fn flatten(ps: &ParamSet) -> FlatVec {
    let layout = FlatLayout::of(ps);
    let mut values = Vec::with_capacity(layout.total_len());
    for t in ps.tensors() {
        values.extend_from_slice(&t.values);
    }
    FlatVec { values, layout }
}

pub fn split(fv: &FlatVec) -> Result<ParamSet> {
    if fv.values.len() != fv.layout.total_len() {
        return Err(HamError::Structural(format!(
            "flat vector has {} values but layout covers {}",
            fv.values.len(),
            fv.layout.total_len()
        )));
    }
    let entries = fv
        .layout
        .segments
        .iter()
        .map(|seg| {
            let tensor = Tensor::new(seg.shape.clone(), fv.segment_values(seg).to_vec())?;
            Ok((seg.name.clone(), tensor))
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::from_entries(entries)
}

/// Nearest rank `ceil(r * n)` used by the trimming threshold. A relative slack
/// of 1e-9 absorbs binary rounding of `r` (so `0.3 * 10` ranks 3, not 4).
pub fn trim_rank(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Magnitude threshold below or at which entries are trimmed.
///
/// Returns the `ceil(r * N)`-th smallest `|v|` (nearest rank). When that rank
/// is zero the sentinel `-1.0` is returned so a strict `|v| > sigma` keeps
/// everything. With `sample_size` the rank is taken over a seeded uniform
/// sample instead of the full vector (without replacement when
/// `sample_size <= N`).
pub fn magnitude_percentile(
    fv: &FlatVec,
    r: f64,
    sample_size: Option<usize>,
    rng_seed: Option<u64>,
) -> Result<f64> {
    if fv.is_empty() {
        return Err(HamError::Domain("percentile of an empty vector".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(HamError::Domain(format!("trim ratio {r} outside [0, 1]")));
    }
    let n = fv.len();
    let mut mags: Vec<f64> = match sample_size {
        None => fv.values.iter().map(|v| v.abs()).collect(),
        Some(0) => return Err(HamError::Domain("sample size must be at least 1".into())),
        Some(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.unwrap_or(0));
            if m <= n {
                index::sample(&mut rng, n, m)
                    .into_iter()
                    .map(|j| fv.values[j].abs())
                    .collect()
            } else {
                (0..m).map(|_| fv.values[rng.random_range(0..n)].abs()).collect()
            }
        }
    };
    let k = trim_rank(r, mags.len());
    if k == 0 {
        return Ok(-1.0);
    }
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// `bits[j] = |v[j]| > sigma`.
pub fn mask_above(fv: &FlatVec, sigma: f64) -> BitMask {
    BitMask {
        bits: fv.values.iter().map(|v| v.abs() > sigma).collect(),
        layout: fv.layout.clone(),
    }
}

pub fn apply_mask(fv: &FlatVec, m: &BitMask) -> Result<FlatVec> {
    if fv.layout != m.layout {
        return Err(HamError::Structural(
            "mask layout differs from vector layout".into(),
        ));
    }
    let values = fv
        .values
        .iter()
        .zip(&m.bits)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(FlatVec {
        values,
        layout: fv.layout.clone(),
    })
}

/// Inner product of each pair of corresponding layers.
pub fn per_layer_dot(a: &ParamSet, b: &ParamSet) -> Result<Vec<(String, f64)>> {
    a.check_congruent(b)?;
    Ok(a.iter()
        .zip(b.tensors())
        .map(|((name, ta), tb)| {
            let dot = ta.values.iter().zip(&tb.values).map(|(x, y)| x * y).sum();
            (name.to_string(), dot)
        })
        .collect())
}

/// Elementwise `sum_i coeffs[i] * sets[i]`, accumulated in list order.
pub fn lin_comb(coeffs: &[f64], sets: &[&ParamSet]) -> Result<ParamSet> {
    if coeffs.len() != sets.len() {
        return Err(HamError::Structural(format!(
            "{} coefficients for {} parameter sets",
            coeffs.len(),
            sets.len()
        )));
    }
    let Some(first) = sets.first() else {
        return Err(HamError::Domain("linear combination of zero sets".into()));
    };
    let mut out = first.zeros_like();
    for (&c, set) in coeffs.iter().zip(sets) {
        out.axpy(c, set)?;
    }
    Ok(out)
}
