//! Fixed multi-label MLP: mean-pooled activity embeddings spliced into the
//! dense context vector, then `linear -> batch norm -> ReLU` blocks and a
//! sigmoid head with one output per activity.
//!
//! Everything runs in `f64` with hand-written backpropagation.

mod adam;
mod gradcheck;
mod loss;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, random_problem, GradCheckReport};
pub use loss::{focal_loss, focal_term, FocalLossConfig, PROB_EPS};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::PAD_ID;
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, InputLayout};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];

/// Row-stacked model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dense: Array2<f64>,
    pub ids: Option<Array2<usize>>,
}

impl Batch {
    pub fn from_bundles<'a, I>(bundles: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureBundle>,
    {
        let bundles: Vec<&FeatureBundle> = bundles.into_iter().collect();
        let first = bundles
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let width = first.dense.len();
        let k = first.ids.as_ref().map(Vec::len);
        let mut dense = Array2::zeros((bundles.len(), width));
        let mut ids = k.map(|k| Array2::zeros((bundles.len(), k)));
        for (r, b) in bundles.iter().enumerate() {
            if b.dense.len() != width || b.ids.as_ref().map(Vec::len) != k {
                return Err(Error::Shape(format!("row {r} has a different width")));
            }
            dense.row_mut(r).assign(&ArrayView1::from(&b.dense));
            if let (Some(ids), Some(row)) = (ids.as_mut(), b.ids.as_ref()) {
                ids.row_mut(r).assign(&ArrayView1::from(row));
            }
        }
        Ok(Self { dense, ids })
    }

    pub fn len(&self) -> usize {
        self.dense.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            dense: self.dense.select(Axis(0), indices),
            ids: self.ids.as_ref().map(|ids| ids.select(Axis(0), indices)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Batch-norm output, before ReLU.
    normed: Array2<f64>,
}

/// Intermediates of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Option<Array2<usize>>,
    layers: Vec<LayerCache>,
    head_input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
}

/// Parameter gradients, shaped like the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embedding: Array2<f64>,
    pub hidden: Vec<LayerGrads>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

impl Gradients {
    /// Flat views in [`PredictorModel::params_mut`] order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("embedding".to_string(), slice(&self.embedding))];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.weight"), slice(&l.weight)));
            out.push((format!("hidden.{i}.bias"), slice1(&l.bias)));
            out.push((format!("hidden.{i}.bn_scale"), slice1(&l.bn_scale)));
            out.push((format!("hidden.{i}.bn_shift"), slice1(&l.bn_shift)));
        }
        out.push(("output.weight".into(), slice(&self.output_weight)));
        out.push(("output.bias".into(), slice1(&self.output_bias)));
        out
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep outputs strictly inside (0, 1) even for saturated logits.
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub layout: InputLayout,
    /// `(n + 1) × embed_dim`; row [`PAD_ID`] stays zero.
    pub embedding: Array2<f64>,
    pub hidden: Vec<HiddenLayer>,
    pub output: Linear,
    pub mode: Mode,
    cache: Option<ForwardCache>,
}

impl PredictorModel {
    /// Randomly initialized model: He-uniform weights, zero biases,
    /// `N(0, 0.01²)` embeddings, identity batch norm.
    pub fn new(layout: InputLayout, hidden: &[usize], seed: u64) -> Result<Self> {
        if layout.n_labels == 0 || layout.input_width() == 0 {
            return Err(Error::Shape("model needs inputs and labels".into()));
        }
        if hidden.contains(&0) {
            return Err(Error::Shape("hidden widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let mut embedding = Array2::zeros((layout.n_labels + 1, layout.embed_dim));
        for r in 1..=layout.n_labels {
            for c in 0..layout.embed_dim {
                embedding[[r, c]] = normal.sample(&mut rng);
            }
        }
        let mut fan_in = layout.input_width();
        let mut layers = Vec::with_capacity(hidden.len());
        for &width in hidden {
            layers.push(HiddenLayer {
                linear: Linear::he_uniform(fan_in, width, &mut rng),
                bn_scale: Array1::ones(width),
                bn_shift: Array1::zeros(width),
                running_mean: Array1::zeros(width),
                running_var: Array1::ones(width),
            });
            fan_in = width;
        }
        let output = Linear::he_uniform(fan_in, layout.n_labels, &mut rng);
        Ok(Self {
            layout,
            embedding,
            hidden: layers,
            output,
            mode: Mode::Train,
            cache: None,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.layout.n_labels
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.bn_scale.len()).collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.cache = None;
    }

    /// Mean of the non-PAD embedding rows; all-PAD pools to zero.
    pub fn embed_mean_pool(&self, ids: &[usize]) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.layout.embed_dim);
        let mut count = 0usize;
        for &id in ids {
            if id >= self.embedding.nrows() {
                return Err(Error::Shape(format!("embedding id {id} out of range")));
            }
            if id != PAD_ID {
                out += &self.embedding.row(id);
                count += 1;
            }
        }
        if count > 0 {
            out /= count as f64;
        }
        Ok(out)
    }

    fn input_matrix(&self, batch: &Batch) -> Result<Array2<f64>> {
        let layout = &self.layout;
        if batch.dense.ncols() != layout.dense_width {
            return Err(Error::Shape(format!(
                "dense width {} but model expects {}",
                batch.dense.ncols(),
                layout.dense_width
            )));
        }
        let Some(ids) = batch.ids.as_ref().filter(|_| layout.uses_ids()) else {
            if layout.uses_ids() {
                return Err(Error::Shape("model expects activity ids".into()));
            }
            return Ok(batch.dense.clone());
        };
        if ids.nrows() != batch.len() {
            return Err(Error::Shape("ids and dense rows differ".into()));
        }
        let (at, e) = (layout.embed_at, layout.embed_dim);
        let mut x = Array2::zeros((batch.len(), layout.input_width()));
        x.slice_mut(s![.., ..at])
            .assign(&batch.dense.slice(s![.., ..at]));
        x.slice_mut(s![.., at + e..])
            .assign(&batch.dense.slice(s![.., at..]));
        for (r, row) in ids.rows().into_iter().enumerate() {
            let pooled = self.embed_mean_pool(row.as_slice().expect("row-major ids"))?;
            x.slice_mut(s![r, at..at + e]).assign(&pooled);
        }
        Ok(x)
    }

    /// Probabilities `b × n`. In train mode this uses batch statistics,
    /// updates the running statistics and caches intermediates for
    /// [`PredictorModel::backward`].
    pub fn forward(&mut self, batch: &Batch) -> Result<Array2<f64>> {
        match self.mode {
            Mode::Eval => self.predict(batch),
            Mode::Train => self.forward_train(batch),
        }
    }

    /// Eval-mode forward pass; a pure function of parameters and input.
    pub fn predict(&self, batch: &Batch) -> Result<Array2<f64>> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut a = self.input_matrix(batch)?;
        for layer in &self.hidden {
            let z = layer.linear.apply(&a);
            let inv_std = layer.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = (z - &layer.running_mean) * &inv_std;
            a = (xhat * &layer.bn_scale + &layer.bn_shift).mapv(|v| v.max(0.0));
        }
        Ok(self.output.apply(&a).mapv(sigmoid))
    }

    fn forward_train(&mut self, batch: &Batch) -> Result<Array2<f64>> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::Shape(format!(
                "train-mode batch norm needs at least 2 rows, got {b}"
            )));
        }
        let mut a = self.input_matrix(batch)?;
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &mut self.hidden {
            let z = layer.linear.apply(&a);
            let mean = z.mean_axis(Axis(0)).expect("non-empty");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = centered * &inv_std;
            let normed = &xhat * &layer.bn_scale + &layer.bn_shift;
            let unbiased = b as f64 / (b - 1) as f64;
            layer.running_mean = &layer.running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            layer.running_var =
                &layer.running_var * (1.0 - BN_MOMENTUM) + &var * (BN_MOMENTUM * unbiased);
            let next = normed.mapv(|v| v.max(0.0));
            caches.push(LayerCache {
                input: a,
                xhat,
                inv_std,
                normed,
            });
            a = next;
        }
        let probs = self.output.apply(&a).mapv(sigmoid);
        self.cache = Some(ForwardCache {
            ids: batch.ids.clone().filter(|_| self.layout.uses_ids()),
            layers: caches,
            head_input: a,
        });
        Ok(probs)
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the pre-sigmoid
    /// logits) through the last train-mode forward pass. Consumes the cache.
    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let b = cache.head_input.nrows();
        if dlogits.dim() != (b, self.n_labels()) {
            return Err(Error::Shape(format!(
                "loss gradient {:?} does not match batch {b} × {}",
                dlogits.dim(),
                self.n_labels()
            )));
        }
        let output_weight = cache.head_input.t().dot(dlogits);
        let output_bias = dlogits.sum_axis(Axis(0));
        let mut upstream = dlogits.dot(&self.output.weight.t());

        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (layer, lc) in self.hidden.iter().zip(&cache.layers).rev() {
            let mut dy = upstream;
            dy.zip_mut_with(&lc.normed, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
            let bn_scale = (&dy * &lc.xhat).sum_axis(Axis(0));
            let bn_shift = dy.sum_axis(Axis(0));
            let dxhat = dy * &layer.bn_scale;
            let mean_dxhat = dxhat.mean_axis(Axis(0)).expect("non-empty");
            let mean_dxhat_xhat = (&dxhat * &lc.xhat).mean_axis(Axis(0)).expect("non-empty");
            let dz = (dxhat - &mean_dxhat - &lc.xhat * &mean_dxhat_xhat) * &lc.inv_std;
            let weight = lc.input.t().dot(&dz);
            let bias = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layer.linear.weight.t());
            hidden.push(LayerGrads {
                weight,
                bias,
                bn_scale,
                bn_shift,
            });
        }
        hidden.reverse();

        let mut embedding = Array2::zeros(self.embedding.raw_dim());
        if let Some(ids) = &cache.ids {
            let (at, e) = (self.layout.embed_at, self.layout.embed_dim);
            for (r, row) in ids.rows().into_iter().enumerate() {
                let count = row.iter().filter(|&&id| id != PAD_ID).count();
                if count == 0 {
                    continue;
                }
                let share = upstream.slice(s![r, at..at + e]).mapv(|g| g / count as f64);
                for &id in row.iter().filter(|&&id| id != PAD_ID) {
                    let mut dst = embedding.row_mut(id);
                    dst += &share;
                }
            }
        }
        embedding.row_mut(PAD_ID).fill(0.0);

        Ok(Gradients {
            embedding,
            hidden,
            output_weight,
            output_bias,
        })
    }

    /// Trainable parameters as flat mutable slices, in a fixed order shared
    /// with [`Gradients::tensors`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![(
            "embedding".to_string(),
            self.embedding.as_slice_mut().expect("standard layout"),
        )];
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((
                format!("hidden.{i}.weight"),
                l.linear.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("hidden.{i}.bias"),
                l.linear.bias.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("hidden.{i}.bn_scale"),
                l.bn_scale.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("hidden.{i}.bn_shift"),
                l.bn_shift.as_slice_mut().expect("standard layout"),
            ));
        }
        out.push((
            "output.weight".into(),
            self.output.weight.as_slice_mut().expect("standard layout"),
        ));
        out.push((
            "output.bias".into(),
            self.output.bias.as_slice_mut().expect("standard layout"),
        ));
        out
    }

    /// Every stored value (trainable parameters, then running statistics),
    /// flattened in a fixed order.
    pub fn flat_state(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.embedding.iter().copied().collect();
        for l in &self.hidden {
            out.extend(l.linear.weight.iter());
            out.extend(l.linear.bias.iter());
            out.extend(l.bn_scale.iter());
            out.extend(l.bn_shift.iter());
        }
        out.extend(self.output.weight.iter());
        out.extend(self.output.bias.iter());
        for l in &self.hidden {
            out.extend(l.running_mean.iter());
            out.extend(l.running_var.iter());
        }
        out
    }

    /// Inverse of [`PredictorModel::flat_state`] for a model of the same shape.
    pub fn load_flat_state(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flat_state().len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} stored values, got {}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            for d in dst {
                *d = it.next().expect("length checked");
            }
        };
        for (_, p) in self.params_mut() {
            fill(p);
        }
        for l in &mut self.hidden {
            fill(l.running_mean.as_slice_mut().expect("standard layout"));
            fill(l.running_var.as_slice_mut().expect("standard layout"));
        }
        if self.hidden.iter().any(|l| l.running_var.iter().any(|&v| v < 0.0)) {
            return Err(Error::Shape("negative running variance".into()));
        }
        Ok(())
    }

    /// Restores the PAD row to zero.
    pub(crate) fn zero_pad_row(&mut self) {
        self.embedding.row_mut(PAD_ID).fill(0.0);
    }
}
