//! Cosine-prototype classifier: a trainable tanh MLP encoder whose embedding is
//! compared by cosine similarity against a frozen matrix of unit-norm class
//! prototypes, with a fixed logit scale in front of the softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};
use crate::params::{ParamSet, Tensor};
use crate::train::{total_loss_and_grad, SignTerm};

/// Guard added inside the square root of the embedding norm.
pub const NORM_EPS: f64 = 1e-12;

pub const PROTOTYPE_LAYER: &str = "prototypes";

/// Frozen class embeddings, one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    num_classes: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl Prototypes {
    /// Rows are normalized on construction.
    pub fn from_rows(num_classes: usize, dim: usize, mut rows: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(HamError::config(
                "num_classes/embed_dim",
                format!("need K >= 2 and D >= 2, got K={num_classes}, D={dim}"),
            ));
        }
        if rows.len() != num_classes * dim {
            return Err(HamError::Structural(format!(
                "prototype matrix needs {} values, got {}",
                num_classes * dim,
                rows.len()
            )));
        }
        for row in rows.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(HamError::Domain("prototype row has zero or non-finite norm".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            num_classes,
            dim,
            rows,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    /// Smallest angle (radians) between any two prototype rows.
    pub fn min_pairwise_angle(&self) -> f64 {
        let mut min = std::f64::consts::PI;
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let cos: f64 = self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum();
                min = min.min(cos.clamp(-1.0, 1.0).acos());
            }
        }
        min
    }

    pub fn to_param_set(&self) -> ParamSet {
        let tensor = Tensor::new(vec![self.num_classes, self.dim], self.rows.clone())
            .expect("prototype matrix is finite and well shaped");
        ParamSet::from_entries(vec![(PROTOTYPE_LAYER.to_string(), tensor)]).expect("single layer")
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let t = ps.get(PROTOTYPE_LAYER).ok_or_else(|| {
            HamError::Structural(format!("checkpoint has no `{PROTOTYPE_LAYER}` layer"))
        })?;
        match t.shape() {
            &[k, d] => Self::from_rows(k, d, t.values().to_vec()),
            other => Err(HamError::Structural(format!(
                "prototype layer must be 2-D, got shape {other:?}"
            ))),
        }
    }
}

/// Seeded standard-normal rows, normalized to unit length.
pub fn init_prototypes(num_classes: usize, dim: usize, seed: u64) -> Result<Prototypes> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..num_classes * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Prototypes::from_rows(num_classes, dim, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub logit_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dims: vec![32, 32],
            embed_dim: 16,
            logit_scale: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(HamError::config("model.input_dim", "must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(HamError::config("model.hidden_dims", "every width must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(HamError::config("model.embed_dim", "must be >= 1"));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(HamError::config("model.logit_scale", "must be a positive finite number"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer, hidden layers first.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.embed_dim));
        dims
    }

    fn layer_names(&self) -> Vec<(String, String)> {
        let n = self.hidden_dims.len();
        (0..=n)
            .map(|i| {
                if i == n {
                    ("W_out".to_string(), "b_out".to_string())
                } else {
                    (format!("W{}", i + 1), format!("b{}", i + 1))
                }
            })
            .collect()
    }

    /// Weights `~ N(0, 1/fan_in)` stored `[fan_out, fan_in]` row-major; zero
    /// biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        for ((fan_in, fan_out), (w, b)) in self.layer_dims().into_iter().zip(self.layer_names()) {
            let std = (1.0 / fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            ps.push(w, Tensor::new(vec![fan_out, fan_in], weights)?)?;
            ps.push(b, Tensor::zeros(vec![fan_out]))?;
        }
        Ok(ps)
    }

    /// Zero-valued parameter set with the encoder's layout.
    pub fn param_template(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for ((fan_in, fan_out), (w, b)) in self.layer_dims().into_iter().zip(self.layer_names()) {
            ps.push(w, Tensor::zeros(vec![fan_out, fan_in])).expect("unique names");
            ps.push(b, Tensor::zeros(vec![fan_out])).expect("unique names");
        }
        ps
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.param_template().check_congruent(params)
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` the output of hidden
    /// layer `l` (post-tanh).
    pub activations: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    /// Guarded norm `sqrt(|e|^2 + eps)`.
    pub norm: f64,
    pub cosines: Vec<f64>,
    pub probs: Vec<f64>,
    /// Set when the raw embedding norm is at or below the guard.
    pub degenerate_norm: bool,
}

impl ForwardCache {
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Argmax of the cosine row, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.cosines)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The classifier: encoder architecture plus the frozen prototypes it scores
/// against. Encoder parameters are passed separately so many parameter sets
/// can share one classifier.
#[derive(Debug, Clone)]
pub struct CosineClassifier {
    config: EncoderConfig,
    prototypes: Prototypes,
}

impl CosineClassifier {
    pub fn new(config: EncoderConfig, prototypes: Prototypes) -> Result<Self> {
        config.validate()?;
        if prototypes.dim() != config.embed_dim {
            return Err(HamError::config(
                "model.embed_dim",
                format!(
                    "prototypes have dimension {} but the encoder embeds into {}",
                    prototypes.dim(),
                    config.embed_dim
                ),
            ));
        }
        Ok(Self { config, prototypes })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &Prototypes {
        &self.prototypes
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.num_classes()
    }

    /// Same prototypes and architecture, different logit scale.
    pub fn with_logit_scale(&self, logit_scale: f64) -> Result<Self> {
        let config = EncoderConfig {
            logit_scale,
            ..self.config.clone()
        };
        Self::new(config, self.prototypes.clone())
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.config.input_dim {
            return Err(HamError::Structural(format!(
                "input has {} features, encoder expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if params.len() != 2 * (self.config.hidden_dims.len() + 1) {
            self.config.check_params(params)?;
        }
        let n_hidden = self.config.hidden_dims.len();
        let mut activations = Vec::with_capacity(n_hidden + 1);
        activations.push(x.to_vec());
        for l in 0..n_hidden {
            let z = affine(params.layer(2 * l), params.layer(2 * l + 1), &activations[l])?;
            activations.push(z.into_iter().map(f64::tanh).collect());
        }
        let embedding = affine(
            params.layer(2 * n_hidden),
            params.layer(2 * n_hidden + 1),
            &activations[n_hidden],
        )?;
        let sq: f64 = embedding.iter().map(|v| v * v).sum();
        let norm = (sq + NORM_EPS).sqrt();
        let cosines: Vec<f64> = (0..self.num_classes())
            .map(|k| {
                self.prototypes
                    .row(k)
                    .iter()
                    .zip(&embedding)
                    .map(|(p, e)| p * e)
                    .sum::<f64>()
                    / norm
            })
            .collect();
        let logits: Vec<f64> = cosines.iter().map(|c| self.config.logit_scale * c).collect();
        Ok(ForwardCache {
            activations,
            embedding,
            norm,
            cosines,
            probs: softmax(&logits),
            degenerate_norm: sq <= NORM_EPS,
        })
    }

    pub fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<usize> {
        Ok(self.forward(params, x)?.predicted_class())
    }

    /// Maximum class probability.
    pub fn confidence(&self, params: &ParamSet, x: &[f64]) -> Result<f64> {
        Ok(self.forward(params, x)?.confidence())
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to the
    /// encoder parameters.
    pub fn ce_loss_and_grad(&self, params: &ParamSet, batch: &[(&[f64], usize)]) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(HamError::Domain("cross-entropy of an empty batch".into()));
        }
        let k_classes = self.num_classes();
        let n_hidden = self.config.hidden_dims.len();
        let inv_n = 1.0 / batch.len() as f64;
        let s = self.config.logit_scale;
        let mut grads = params.zeros_like();
        let mut loss = 0.0;

        for &(x, y) in batch {
            if y >= k_classes {
                return Err(HamError::Domain(format!("label {y} outside [0, {k_classes})")));
            }
            let cache = self.forward(params, x)?;
            loss -= cache.probs[y].max(f64::MIN_POSITIVE).ln();

            // d loss / d cos_k = s * (p_k - [k == y]) / n
            let d_cos: Vec<f64> = cache
                .probs
                .iter()
                .enumerate()
                .map(|(k, &p)| s * inv_n * (p - if k == y { 1.0 } else { 0.0 }))
                .collect();
            // cos_k = <proto_k, u>, u = e / norm
            let dim = self.prototypes.dim();
            let mut d_u = vec![0.0; dim];
            for (k, &g) in d_cos.iter().enumerate() {
                for (du, p) in d_u.iter_mut().zip(self.prototypes.row(k)) {
                    *du += g * p;
                }
            }
            // d u / d e = (I - u u^T) / norm
            let u: Vec<f64> = cache.embedding.iter().map(|e| e / cache.norm).collect();
            let u_dot: f64 = u.iter().zip(&d_u).map(|(a, b)| a * b).sum();
            let mut delta: Vec<f64> = d_u
                .iter()
                .zip(&u)
                .map(|(du, ui)| (du - ui * u_dot) / cache.norm)
                .collect();

            for l in (0..=n_hidden).rev() {
                let input = &cache.activations[l];
                let w_idx = 2 * l;
                {
                    let gw = grads.layer_mut(w_idx).values_mut();
                    let fan_in = input.len();
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (g, a) in row.iter_mut().zip(input) {
                            *g += d * a;
                        }
                    }
                }
                for (g, d) in grads.layer_mut(w_idx + 1).values_mut().iter_mut().zip(&delta) {
                    *g += d;
                }
                if l == 0 {
                    break;
                }
                // back through W then tanh of the previous layer
                let w = params.layer(w_idx).values();
                let fan_in = input.len();
                let mut d_in = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    for (di, wv) in d_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *di += d * wv;
                    }
                }
                delta = d_in
                    .into_iter()
                    .zip(input)
                    .map(|(d, h)| d * (1.0 - h * h))
                    .collect();
            }
        }
        Ok((loss * inv_n, grads))
    }
}

fn affine(w: &Tensor, b: &Tensor, input: &[f64]) -> Result<Vec<f64>> {
    let (fan_out, fan_in) = match w.shape() {
        &[o, i] => (o, i),
        other => {
            return Err(HamError::Structural(format!("weight must be 2-D, got {other:?}")));
        }
    };
    if fan_in != input.len() || b.len() != fan_out {
        return Err(HamError::Structural(format!(
            "affine layer {fan_out}x{fan_in} applied to input of {} with bias of {}",
            input.len(),
            b.len()
        )));
    }
    let wv = w.values();
    Ok(b.values()
        .iter()
        .enumerate()
        .map(|(o, &bias)| {
            bias + wv[o * fan_in..(o + 1) * fan_in]
                .iter()
                .zip(input)
                .map(|(a, x)| a * x)
                .sum::<f64>()
        })
        .collect())
}

/// Compares the analytic gradient of the total objective (cross-entropy plus
/// the optional weighted sign term) against central differences on
/// `n_coords` coordinates sampled per layer. Returns the largest relative
/// error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    classifier: &CosineClassifier,
    params: &ParamSet,
    batch: &[(&[f64], usize)],
    sign: Option<&SignTerm<'_>>,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if n_coords == 0 {
        return Err(HamError::Domain("grad_check needs at least one coordinate".into()));
    }
    let total = |p: &ParamSet| -> Result<f64> {
        let parts = total_loss_and_grad(classifier, p, batch, sign)?;
        Ok(parts.total())
    };
    let analytic = total_loss_and_grad(classifier, params, batch, sign)?.grads;
    let coords = sample_coordinates(params, n_coords, seed);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (layer, j) in coords {
        let orig = params.layer(layer).values()[j];
        probe.layer_mut(layer).values_mut()[j] = orig + h;
        let plus = total(&probe)?;
        probe.layer_mut(layer).values_mut()[j] = orig - h;
        let minus = total(&probe)?;
        probe.layer_mut(layer).values_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.layer(layer).values()[j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Up to `n_coords` distinct coordinates per layer, uniformly at random.
pub fn sample_coordinates(params: &ParamSet, n_coords: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (layer, t) in params.tensors().enumerate() {
        let take = n_coords.min(t.len());
        let picked = rand::seq::index::sample(&mut rng, t.len(), take);
        out.extend(picked.into_iter().map(|j| (layer, j)));
    }
    out
}
