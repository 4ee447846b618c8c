//! 1-D convolutional SNR₉₀ regressor.
//!
//! Convolutions run along time only: a layer of width `w` sees `w` consecutive
//! frames across all input channels, stride 1, no padding. Conv layers use
//! ReLU, the last conv output is averaged over time, then goes through a ReLU
//! hidden layer (with inverted dropout while training) and a linear output.
//!
//! Every item in a batch is processed by stacking its frames into one matrix,
//! so each layer is a single GEMM regardless of batch composition. Items may
//! have different lengths.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::ops::{AddAssign, MulAssign};
use std::path::Path;

use ndarray::{
    concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar,
    ScalarOperand, Zip,
};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Consonant;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, N_BINS};

/// Scalar type for the network: `f32` for training, `f64` for gradient checks.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + MulAssign
    + fmt::Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: LinalgScalar
        + Float
        + FromPrimitive
        + ToPrimitive
        + ScalarOperand
        + AddAssign
        + MulAssign
        + fmt::Debug
        + Send
        + Sync
        + 'static
{
}

fn real<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

/// Conv channel plan of the reference network; layers past the third keep 512.
pub const TABLE5_CHANNELS: [usize; 3] = [128, 256, 512];
pub const TABLE5_FC_HIDDEN: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub n_conv: usize,
    /// Widths of the first three layers; deeper layers reuse the third.
    pub kernel_widths: [usize; 3],
    pub input_bins: usize,
    pub conv_channels: Vec<usize>,
    pub fc_hidden: usize,
}

impl CnnArchitecture {
    /// The reference channel plan 320→128→256→512(→512…) with a 1024-unit FC layer.
    pub fn table5(n_conv: usize, kernel_widths: [usize; 3]) -> Result<Self> {
        let arch = Self {
            n_conv,
            kernel_widths,
            input_bins: N_BINS,
            conv_channels: (0..n_conv)
                .map(|i| TABLE5_CHANNELS.get(i).copied().unwrap_or(512))
                .collect(),
            fc_hidden: TABLE5_FC_HIDDEN,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn is_table5(&self) -> bool {
        Self::table5(self.n_conv, self.kernel_widths).is_ok_and(|t| &t == self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(3..=7).contains(&self.n_conv) {
            return bad(format!("{} conv layers; 3 to 7 supported", self.n_conv));
        }
        if self.kernel_widths.contains(&0) {
            return bad("kernel width 0".into());
        }
        if self.conv_channels.len() != self.n_conv {
            return bad(format!(
                "{} channel counts for {} conv layers",
                self.conv_channels.len(),
                self.n_conv
            ));
        }
        if self.input_bins == 0 || self.fc_hidden == 0 || self.conv_channels.contains(&0) {
            return bad("zero-sized layer".into());
        }
        Ok(())
    }

    pub fn width(&self, layer: usize) -> usize {
        self.kernel_widths[layer.min(2)]
    }

    pub fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_bins
        } else {
            self.conv_channels[layer - 1]
        }
    }

    pub fn last_channels(&self) -> usize {
        self.conv_channels[self.n_conv - 1]
    }

    /// Minimum input length that leaves one frame after every conv layer.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.n_conv).map(|l| self.width(l) - 1).sum::<usize>()
    }

    /// Output frame count of every conv layer for an input of `t` frames.
    pub fn conv_output_frames(&self, t: usize) -> Result<Vec<usize>> {
        if t < self.receptive_field() {
            return Err(Error::InputTooShort {
                frames: t,
                required: self.receptive_field(),
            });
        }
        let mut frames = Vec::with_capacity(self.n_conv);
        let mut cur = t;
        for l in 0..self.n_conv {
            cur = cur + 1 - self.width(l);
            frames.push(cur);
        }
        Ok(frames)
    }

    pub fn n_parameters(&self) -> usize {
        let conv: usize = (0..self.n_conv)
            .map(|l| self.conv_channels[l] * (self.width(l) * self.in_channels(l) + 1))
            .sum();
        conv + self.fc_hidden * (self.last_channels() + 1) + self.fc_hidden + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_p: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_max_epochs() -> usize {
    100
}

fn default_patience() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "max_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-consonant hyper-parameters of the published models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table6Row {
    pub consonant: Consonant,
    pub n_conv: usize,
    pub kernel_widths: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_p: f64,
}

pub const TABLE6: [Table6Row; 6] = [
    Table6Row {
        consonant: Consonant::P,
        n_conv: 3,
        kernel_widths: [5, 7, 7],
        batch_size: 8,
        learning_rate: 1e-4,
        dropout_p: 0.50,
    },
    Table6Row {
        consonant: Consonant::T,
        n_conv: 7,
        kernel_widths: [7, 3, 3],
        batch_size: 4,
        learning_rate: 1e-4,
        dropout_p: 0.17,
    },
    Table6Row {
        consonant: Consonant::K,
        n_conv: 3,
        kernel_widths: [7, 5, 7],
        batch_size: 4,
        learning_rate: 1e-5,
        dropout_p: 0.38,
    },
    Table6Row {
        consonant: Consonant::B,
        n_conv: 3,
        kernel_widths: [3, 3, 3],
        batch_size: 16,
        learning_rate: 1e-4,
        dropout_p: 0.10,
    },
    Table6Row {
        consonant: Consonant::D,
        n_conv: 7,
        kernel_widths: [5, 5, 3],
        batch_size: 8,
        learning_rate: 1e-6,
        dropout_p: 0.33,
    },
    Table6Row {
        consonant: Consonant::G,
        n_conv: 3,
        kernel_widths: [5, 3, 7],
        batch_size: 4,
        learning_rate: 1e-6,
        dropout_p: 0.08,
    },
];

impl Table6Row {
    pub fn for_consonant(consonant: Consonant) -> Table6Row {
        *TABLE6
            .iter()
            .find(|r| r.consonant == consonant)
            .expect("every consonant has a row")
    }

    pub fn architecture(&self) -> CnnArchitecture {
        CnnArchitecture::table5(self.n_conv, self.kernel_widths).expect("table rows are valid")
    }

    pub fn train_config(&self, seed: u64, max_epochs: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            dropout_p: self.dropout_p,
            max_epochs,
            seed,
            patience,
        }
    }
}

/// All trainable tensors. Conv weights are `[c_out, w * c_in]` with the
/// column index `k * c_in + c` (frame offset major).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub conv_w: Vec<Array2<F>>,
    pub conv_b: Vec<Array1<F>>,
    pub fc_w: Array2<F>,
    pub fc_b: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

impl<F: Real> Weights<F> {
    pub fn zeros(arch: &CnnArchitecture) -> Self {
        Self {
            conv_w: (0..arch.n_conv)
                .map(|l| {
                    Array2::zeros((arch.conv_channels[l], arch.width(l) * arch.in_channels(l)))
                })
                .collect(),
            conv_b: arch
                .conv_channels
                .iter()
                .map(|&c| Array1::zeros(c))
                .collect(),
            fc_w: Array2::zeros((arch.fc_hidden, arch.last_channels())),
            fc_b: Array1::zeros(arch.fc_hidden),
            out_w: Array2::zeros((1, arch.fc_hidden)),
            out_b: Array1::zeros(1),
        }
    }

    /// He-uniform for ReLU layers, LeCun-uniform for the linear output, zero biases.
    pub fn he_uniform(arch: &CnnArchitecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(arch);
        let mut fill = |a: &mut Array2<F>, gain: f64| {
            let bound = (gain / a.ncols() as f64).sqrt();
            a.mapv_inplace(|_| real(rng.gen_range(-bound..bound)));
        };
        for cw in &mut w.conv_w {
            fill(cw, 6.0);
        }
        fill(&mut w.fc_w, 6.0);
        fill(&mut w.out_w, 3.0);
        w
    }

    pub fn shapes_match(&self, arch: &CnnArchitecture) -> bool {
        let reference = Self::zeros(arch);
        self.views()
            .iter()
            .zip(reference.views())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
            && self.conv_w.len() == arch.n_conv
    }

    /// Tensors in a fixed order with stable names.
    pub fn views(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v = Vec::new();
        for (l, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            v.push((format!("conv{}.weight", l + 1), w.view().into_dyn()));
            v.push((format!("conv{}.bias", l + 1), b.view().into_dyn()));
        }
        v.push(("fc.weight".into(), self.fc_w.view().into_dyn()));
        v.push(("fc.bias".into(), self.fc_b.view().into_dyn()));
        v.push(("out.weight".into(), self.out_w.view().into_dyn()));
        v.push(("out.bias".into(), self.out_b.view().into_dyn()));
        v
    }

    pub fn views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut v = Vec::new();
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            v.push(w.view_mut().into_dyn());
            v.push(b.view_mut().into_dyn());
        }
        v.push(self.fc_w.view_mut().into_dyn());
        v.push(self.fc_b.view_mut().into_dyn());
        v.push(self.out_w.view_mut().into_dyn());
        v.push(self.out_b.view_mut().into_dyn());
        v
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: F, other: &Weights<F>) {
        for (mut a, (_, b)) in self.views_mut().into_iter().zip(other.views()) {
            a.scaled_add(alpha, &b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.views()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        Weights {
            conv_w: self.conv_w.iter().map(c2).collect(),
            conv_b: self.conv_b.iter().map(c1).collect(),
            fc_w: c2(&self.fc_w),
            fc_b: c1(&self.fc_b),
            out_w: c2(&self.out_w),
            out_b: c1(&self.out_b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub consonant: Option<Consonant>,
    pub config: TrainConfig,
    /// Epoch of the retained (best dev) weights.
    pub epoch: usize,
    pub dev_mse: f64,
    /// Hash of the run configuration that produced the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<F = f32> {
    pub architecture: CnnArchitecture,
    pub weights: Weights<F>,
    pub meta: Option<TrainingMeta>,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Per-layer frame counts of each item; index 0 is the input.
    frames: Vec<Vec<usize>>,
    /// Stacked activations; index 0 is the input, `l + 1` the output of conv `l`.
    acts: Vec<Array2<F>>,
    cols: Vec<Array2<F>>,
    pooled: Array2<F>,
    hidden: Array2<F>,
    dropped: Array2<F>,
    mask: Option<Array2<F>>,
    pub output: Array1<F>,
}

impl<F> ForwardCache<F> {
    pub fn pooled_dim(&self) -> usize {
        self.pooled.ncols()
    }

    /// Frame counts after each conv layer for batch item `i`.
    pub fn conv_frames(&self, i: usize) -> Vec<usize> {
        self.frames[1..].iter().map(|f| f[i]).collect()
    }
}

/// Inverted-dropout mask: 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Array2<F> {
    let keep = 1.0 - p;
    let scale: F = real(1.0 / keep);
    Array2::from_shape_simple_fn((rows, cols), || {
        if p == 0.0 || rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    })
}

/// Mean squared error.
pub fn mse(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / predictions.len() as f64
}

fn im2col<F: Real>(a: &Array2<F>, frames: &[usize], w: usize) -> Array2<F> {
    let c = a.ncols();
    let rows: usize = frames.iter().map(|t| t + 1 - w).sum();
    let src = a.as_slice().expect("activations are contiguous");
    let mut cols = Array2::zeros((rows, w * c));
    let dst = cols.as_slice_mut().unwrap();
    let (mut r, mut off) = (0, 0);
    for &t in frames {
        for k in 0..t + 1 - w {
            dst[r * w * c..(r + 1) * w * c].copy_from_slice(&src[(off + k) * c..(off + k + w) * c]);
            r += 1;
        }
        off += t;
    }
    cols
}

fn col2im<F: Real>(dcols: &Array2<F>, frames: &[usize], w: usize, c: usize) -> Array2<F> {
    let rows_in: usize = frames.iter().sum();
    let mut out = Array2::zeros((rows_in, c));
    let dst = out.as_slice_mut().unwrap();
    let src = dcols.as_slice().expect("gradients are contiguous");
    let (mut r, mut off) = (0, 0);
    for &t in frames {
        for k in 0..t + 1 - w {
            let row = &src[r * w * c..(r + 1) * w * c];
            for (d, &s) in dst[(off + k) * c..(off + k + w) * c].iter_mut().zip(row) {
                *d += s;
            }
            r += 1;
        }
        off += t;
    }
    out
}

fn relu_inplace<F: Real>(a: &mut Array2<F>) {
    a.mapv_inplace(|v| v.max(F::zero()));
}

/// Zero the gradient wherever the ReLU output was not positive.
fn relu_backward<F: Real>(grad: &mut Array2<F>, activation: &Array2<F>) {
    Zip::from(grad).and(activation).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

impl<F: Real> CnnModel<F> {
    pub fn new(architecture: CnnArchitecture, weights: Weights<F>) -> Result<Self> {
        architecture.validate()?;
        if !weights.shapes_match(&architecture) {
            return Err(Error::InvalidParameter(
                "weight shapes do not match the architecture".into(),
            ));
        }
        Ok(Self {
            architecture,
            weights,
            meta: None,
        })
    }

    pub fn init(architecture: CnnArchitecture, seed: u64) -> Result<Self> {
        let weights = Weights::he_uniform(&architecture, seed);
        Self::new(architecture, weights)
    }

    /// Batched forward pass. `mask` enables train-mode dropout on the hidden layer.
    pub fn forward_batch(
        &self,
        items: &[ArrayView2<'_, F>],
        mask: Option<Array2<F>>,
    ) -> Result<ForwardCache<F>> {
        let arch = &self.architecture;
        if items.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        for x in items {
            if x.ncols() != arch.input_bins {
                return Err(Error::InvalidParameter(format!(
                    "input has {} bins, network expects {}",
                    x.ncols(),
                    arch.input_bins
                )));
            }
            arch.conv_output_frames(x.nrows())?;
        }
        if let Some(m) = &mask {
            if m.dim() != (items.len(), arch.fc_hidden) {
                return Err(Error::InvalidParameter(
                    "dropout mask shape mismatch".into(),
                ));
            }
        }
        let input = concatenate(Axis(0), items)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .as_standard_layout()
            .into_owned();
        let mut frames = vec![items.iter().map(|x| x.nrows()).collect::<Vec<_>>()];
        let mut acts = vec![input];
        let mut cols = Vec::with_capacity(arch.n_conv);
        for l in 0..arch.n_conv {
            let w = arch.width(l);
            let c = im2col(&acts[l], &frames[l], w);
            let mut z = c.dot(&self.weights.conv_w[l].t());
            z += &self.weights.conv_b[l];
            relu_inplace(&mut z);
            frames.push(frames[l].iter().map(|t| t + 1 - w).collect());
            acts.push(z);
            cols.push(c);
        }
        let last = &acts[arch.n_conv];
        let mut pooled = Array2::zeros((items.len(), arch.last_channels()));
        let mut off = 0;
        for (i, &t) in frames[arch.n_conv].iter().enumerate() {
            pooled
                .row_mut(i)
                .assign(&last.slice(s![off..off + t, ..]).mean_axis(Axis(0)).unwrap());
            off += t;
        }
        let mut hidden = pooled.dot(&self.weights.fc_w.t());
        hidden += &self.weights.fc_b;
        relu_inplace(&mut hidden);
        let dropped = match &mask {
            Some(m) => &hidden * m,
            None => hidden.clone(),
        };
        let output = dropped.dot(&self.weights.out_w.row(0)) + self.weights.out_b[0];
        Ok(ForwardCache {
            frames,
            acts,
            cols,
            pooled,
            hidden,
            dropped,
            mask,
            output,
        })
    }

    /// Mean squared error of the cached batch and the gradient of every weight.
    pub fn backward(&self, cache: &ForwardCache<F>, labels: &[F]) -> Result<(F, Weights<F>)> {
        let arch = &self.architecture;
        let b = labels.len();
        if b != cache.output.len() {
            return Err(Error::InvalidParameter(format!(
                "{b} labels for a batch of {}",
                cache.output.len()
            )));
        }
        let w = &self.weights;
        let diff = &cache.output - &Array1::from(labels.to_vec());
        let bf: F = real(b as f64);
        let loss = diff.mapv(|d| d * d).sum() / bf;
        let dout = diff.mapv(|d| d * real::<F>(2.0) / bf).insert_axis(Axis(1));

        let mut g = Weights::zeros(arch);
        g.out_w = dout.t().dot(&cache.dropped);
        g.out_b[0] = dout.sum();
        let mut dh = dout.dot(&w.out_w);
        if let Some(m) = &cache.mask {
            dh *= m;
        }
        relu_backward(&mut dh, &cache.hidden);
        g.fc_w = dh.t().dot(&cache.pooled);
        g.fc_b = dh.sum_axis(Axis(0));
        let dp = dh.dot(&w.fc_w);

        let n = arch.n_conv;
        let mut da = Array2::zeros(cache.acts[n].raw_dim());
        let mut off = 0;
        for (i, &t) in cache.frames[n].iter().enumerate() {
            let row = dp.row(i).mapv(|v| v / real::<F>(t as f64));
            da.slice_mut(s![off..off + t, ..]).assign(&row);
            off += t;
        }
        for l in (0..n).rev() {
            relu_backward(&mut da, &cache.acts[l + 1]);
            g.conv_w[l] = da.t().dot(&cache.cols[l]);
            g.conv_b[l] = da.sum_axis(Axis(0));
            if l > 0 {
                let dcols = da.dot(&w.conv_w[l]);
                da = col2im(&dcols, &cache.frames[l], arch.width(l), arch.in_channels(l));
            }
        }
        Ok((loss, g))
    }

    /// Eval-mode predictions, one per feature matrix.
    pub fn predict_batch(&self, features: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        let owned: Vec<Array2<F>> = features.iter().map(|f| to_array(f)).collect();
        let views: Vec<ArrayView2<F>> = owned.iter().map(|a| a.view()).collect();
        let cache = self.forward_batch(&views, None)?;
        Ok(cache.output.iter().map(|v| v.to_f64().unwrap()).collect())
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<f64> {
        Ok(self.predict_batch(&[features])?[0])
    }
}

fn to_array<F: Real>(f: &FeatureMatrix) -> Array2<F> {
    Array2::from_shape_vec(
        (f.n_frames(), N_BINS),
        f.as_slice()
            .iter()
            .map(|&v| F::from_f32(v).unwrap())
            .collect(),
    )
    .expect("feature matrix shape")
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub n_parameters: usize,
    pub max_relative_error: f64,
    /// Parameter with the largest error, as `tensor[index]`.
    pub worst: String,
}

/// Compare every analytic gradient with a central difference of step `h`.
///
/// The relative error is `|a - n| / max(|a|, |n|)`; a parameter whose analytic
/// and numeric gradients both vanish (below 1e-10) counts as exact.
pub fn gradient_check(
    model: &CnnModel<f64>,
    items: &[ArrayView2<'_, f64>],
    labels: &[f64],
    mask: Option<&Array2<f64>>,
    h: f64,
) -> Result<GradientCheck> {
    let cache = model.forward_batch(items, mask.cloned())?;
    let (_, analytic) = model.backward(&cache, labels)?;
    let loss_at = |m: &CnnModel<f64>| -> Result<f64> {
        let c = m.forward_batch(items, mask.cloned())?;
        Ok(mse(c.output.as_slice().unwrap(), labels))
    };
    let mut probe = model.clone();
    let names: Vec<String> = analytic.views().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .views()
        .into_iter()
        .map(|(_, t)| t.iter().copied().collect())
        .collect();
    let mut report = GradientCheck {
        n_parameters: 0,
        max_relative_error: 0.0,
        worst: String::new(),
    };
    for (ti, name) in names.iter().enumerate() {
        for (pi, &a) in grads[ti].iter().enumerate() {
            let original = {
                let mut views = probe.weights.views_mut();
                let p = views[ti].iter_mut().nth(pi).unwrap();
                let o = *p;
                *p = o + h;
                o
            };
            let plus = loss_at(&probe)?;
            if let Some(p) = probe.weights.views_mut()[ti].iter_mut().nth(pi) {
                *p = original - h;
            }
            let minus = loss_at(&probe)?;
            if let Some(p) = probe.weights.views_mut()[ti].iter_mut().nth(pi) {
                *p = original;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-10 {
                0.0
            } else {
                (a - numeric).abs() / scale
            };
            report.n_parameters += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = format!("{name}[{pi}]");
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Data, training, evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: FeatureMatrix,
    pub label_snr90_db: f64,
    pub talker: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Vec<LabeledFeatures>,
    pub dev: Vec<LabeledFeatures>,
    pub test: Vec<LabeledFeatures>,
}

fn talkers(items: &[LabeledFeatures]) -> BTreeSet<&str> {
    items.iter().map(|i| i.talker.as_str()).collect()
}

impl DataSplit {
    pub fn new(
        train: Vec<LabeledFeatures>,
        dev: Vec<LabeledFeatures>,
        test: Vec<LabeledFeatures>,
    ) -> Result<Self> {
        let split = Self { train, dev, test };
        split.validate()?;
        Ok(split)
    }

    /// Every partition is nonempty and no talker appears in two partitions.
    pub fn validate(&self) -> Result<()> {
        for (name, part) in [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ] {
            if part.is_empty() {
                return Err(Error::InvalidSplit(format!("{name} partition is empty")));
            }
        }
        let (a, b, c) = (
            talkers(&self.train),
            talkers(&self.dev),
            talkers(&self.test),
        );
        for (x, y, names) in [
            (&a, &b, "train/dev"),
            (&a, &c, "train/test"),
            (&b, &c, "dev/test"),
        ] {
            if let Some(t) = x.intersection(y).next() {
                return Err(Error::InvalidSplit(format!(
                    "talker '{t}' appears in both {names}"
                )));
            }
        }
        Ok(())
    }

    /// Assign whole talkers to partitions in shuffled order. At least one
    /// talker goes to each partition.
    pub fn by_talker(
        items: Vec<LabeledFeatures>,
        dev_fraction: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut names: Vec<String> = talkers(&items).into_iter().map(String::from).collect();
        if names.len() < 3 {
            return Err(Error::InvalidSplit(format!(
                "{} talkers; a talker-disjoint split needs at least 3",
                names.len()
            )));
        }
        names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = names.len() as f64;
        let n_dev = ((n * dev_fraction).round() as usize).max(1);
        let n_test = ((n * test_fraction).round() as usize).max(1);
        if n_dev + n_test >= names.len() {
            return Err(Error::InvalidSplit("no talkers left for training".into()));
        }
        let dev: BTreeSet<&str> = names[..n_dev].iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = names[n_dev..n_dev + n_test]
            .iter()
            .map(String::as_str)
            .collect();
        let (mut tr, mut dv, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for item in items {
            if dev.contains(item.talker.as_str()) {
                dv.push(item);
            } else if test.contains(item.talker.as_str()) {
                te.push(item);
            } else {
                tr.push(item);
            }
        }
        Self::new(tr, dv, te)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub token_id: String,
    pub label: f64,
    pub prediction: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub residuals: Vec<Residual>,
}

const EVAL_CHUNK: usize = 32;

pub fn evaluate<F: Real>(model: &CnnModel<F>, items: &[LabeledFeatures]) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::InsufficientData(
            "cannot evaluate on an empty partition".into(),
        ));
    }
    let mut residuals = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let feats: Vec<&FeatureMatrix> = chunk.iter().map(|i| &i.features).collect();
        for (item, p) in chunk.iter().zip(model.predict_batch(&feats)?) {
            residuals.push(Residual {
                token_id: item.features.token_id.clone(),
                label: item.label_snr90_db,
                prediction: p,
                residual: p - item.label_snr90_db,
            });
        }
    }
    let mse = residuals.iter().map(|r| r.residual.powi(2)).sum::<f64>() / residuals.len() as f64;
    Ok(Evaluation { mse, residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches (dropout active).
    pub train_mse: f64,
    pub dev_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest dev MSE.
    pub model: CnnModel<f32>,
    pub log: Vec<EpochLog>,
}

/// Plain minibatch SGD on MSE with early stopping on dev MSE.
///
/// The output bias starts at the mean training label so the network only has
/// to learn deviations from it.
pub fn train(
    split: &DataSplit,
    consonant: Option<Consonant>,
    arch: &CnnArchitecture,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    split.validate()?;
    config.validate()?;
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CnnModel::<f32>::init(arch.clone(), rng.gen())?;
    let mean_label =
        split.train.iter().map(|i| i.label_snr90_db).sum::<f64>() / split.train.len() as f64;
    model.weights.out_b[0] = mean_label as f32;

    let inputs: Vec<Array2<f32>> = split.train.iter().map(|i| to_array(&i.features)).collect();
    let lr = config.learning_rate as f32;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Weights<f32>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let views: Vec<ArrayView2<f32>> = batch.iter().map(|&i| inputs[i].view()).collect();
            let labels: Vec<f32> = batch
                .iter()
                .map(|&i| split.train[i].label_snr90_db as f32)
                .collect();
            let mask = dropout_mask(&mut rng, batch.len(), arch.fc_hidden, config.dropout_p);
            let cache = model.forward_batch(&views, Some(mask))?;
            let (loss, grads) = model.backward(&cache, &labels)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "loss {loss}; try a smaller learning rate than {}",
                        config.learning_rate
                    ),
                });
            }
            model.weights.scaled_add(-lr, &grads);
            loss_sum += loss as f64 * batch.len() as f64;
        }
        let train_mse = loss_sum / split.train.len() as f64;
        let dev_mse = evaluate(&model, &split.dev)?.mse;
        if !dev_mse.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                detail: "dev MSE is not finite".into(),
            });
        }
        log::info!("epoch {epoch}: train MSE {train_mse:.4}, dev MSE {dev_mse:.4}");
        log.push(EpochLog {
            epoch,
            train_mse,
            dev_mse,
        });
        if best.as_ref().is_none_or(|(b, _, _)| dev_mse < *b) {
            best = Some((dev_mse, epoch, model.weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (dev_mse, epoch, weights) = best.expect("at least one epoch ran");
    model.weights = weights;
    model.meta = Some(TrainingMeta {
        consonant,
        config: config.clone(),
        epoch,
        dev_mse,
        config_hash: None,
    });
    Ok(TrainOutcome { model, log })
}

pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,train_mse,dev_mse\n");
    for e in log {
        text.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.dev_mse));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SNR90CNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    architecture: CnnArchitecture,
    tensors: Vec<TensorInfo>,
    meta: Option<TrainingMeta>,
}

/// Container: magic, version, JSON header length and header, then every
/// tensor as little-endian f32 in header order.
pub fn save_checkpoint(model: &CnnModel<f32>, path: &Path) -> Result<()> {
    let views = model.weights.views();
    let header = CheckpointHeader {
        architecture: model.architecture.clone(),
        tensors: views
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &views {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CnnModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(20..20 + header_len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::json("checkpoint header", e))?;
    header.architecture.validate()?;
    let mut weights = Weights::<f32>::zeros(&header.architecture);
    let expected: Vec<(String, Vec<usize>)> = weights
        .views()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), t)| n != &t.name || s != &t.shape)
    {
        return Err(bad("tensor list does not match the architecture"));
    }
    let mut payload = bytes[20 + header_len..].chunks_exact(4);
    for mut t in weights.views_mut() {
        for v in t.iter_mut() {
            let chunk = payload.next().ok_or_else(|| bad("truncated tensor data"))?;
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if payload.next().is_some() {
        return Err(bad("trailing data"));
    }
    if !weights.all_finite() {
        return Err(bad("non-finite weight"));
    }
    let mut model = CnnModel::new(header.architecture, weights)?;
    model.meta = header.meta;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn tiny_arch() -> CnnArchitecture {
        CnnArchitecture {
            n_conv: 3,
            kernel_widths: [3, 3, 3],
            input_bins: N_BINS,
            conv_channels: vec![4, 4, 4],
            fc_hidden: 8,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, t: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((t, N_BINS), || rng.gen_range(-1.0..1.0))
    }

    fn features(id: &str, t: usize, value: f32) -> FeatureMatrix {
        FeatureMatrix::new(id, t, vec![value; t * N_BINS]).unwrap()
    }

    #[test]
    fn conv_frame_arithmetic() {
        let arch = CnnArchitecture::table5(3, [5, 7, 7]).unwrap();
        assert_eq!(arch.conv_output_frames(40).unwrap(), vec![36, 30, 24]);
        let model = CnnModel::<f32>::new(arch.clone(), Weights::zeros(&arch)).unwrap();
        let x = Array2::<f32>::ones((40, N_BINS));
        let cache = model.forward_batch(&[x.view()], None).unwrap();
        assert_eq!(cache.pooled_dim(), 512);
        assert_eq!(cache.conv_frames(0), vec![36, 30, 24]);
        assert_eq!(cache.output[0], 0.0);

        let deep = CnnArchitecture::table5(7, [7, 3, 3]).unwrap();
        assert_eq!(deep.receptive_field(), 19);
        assert!(matches!(
            deep.conv_output_frames(10),
            Err(Error::InputTooShort {
                frames: 10,
                required: 19
            })
        ));
    }

    #[test]
    fn table5_shapes() {
        let arch = CnnArchitecture::table5(5, [5, 5, 3]).unwrap();
        assert_eq!(arch.conv_channels, vec![128, 256, 512, 512, 512]);
        let w = Weights::<f32>::zeros(&arch);
        assert_eq!(w.conv_w[0].dim(), (128, 5 * 320));
        assert_eq!(w.conv_w[4].dim(), (512, 3 * 512));
        assert_eq!(w.fc_w.dim(), (1024, 512));
        assert_eq!(w.out_w.dim(), (1, 1024));
        assert!(arch.is_table5());
        assert!(!tiny_arch().is_table5());
        assert!(CnnArchitecture::table5(8, [3, 3, 3]).is_err());
    }

    #[test]
    fn table6_rows() {
        let p = Table6Row::for_consonant(Consonant::P);
        assert_eq!((p.n_conv, p.kernel_widths, p.batch_size), (3, [5, 7, 7], 8));
        assert_eq!((p.learning_rate, p.dropout_p), (1e-4, 0.5));
        let g = Table6Row::for_consonant(Consonant::G);
        assert_eq!((g.learning_rate, g.dropout_p), (1e-6, 0.08));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse(&[1.5, -2.0], &[1.5, -2.0]), 0.0);
        assert_eq!(mse(&[0.0, 2.0], &[0.0, 0.0]), 2.0);
        assert_eq!(mse(&[3.0], &[0.0]), 9.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = tiny_arch();
        let model = CnnModel::<f64>::init(arch.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = [random_input(&mut rng, 12), random_input(&mut rng, 14)];
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let mask = dropout_mask::<f64>(&mut rng, 2, arch.fc_hidden, 0.25);
        let report = gradient_check(&model, &views, &[0.7, -1.3], Some(&mask), 1e-3).unwrap();
        assert_eq!(report.n_parameters, arch.n_parameters());
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }

    #[test]
    fn zero_loss_gives_zero_output_gradients() {
        let arch = tiny_arch();
        let model = CnnModel::<f64>::init(arch, 3).unwrap();
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(1), 12);
        let cache = model.forward_batch(&[x.view()], None).unwrap();
        let (loss, g) = model.backward(&cache, &[cache.output[0]]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.out_w.iter().all(|&v| v == 0.0));
        assert_eq!(g.out_b[0], 0.0);
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let arch = tiny_arch();
        let model = CnnModel::<f64>::init(arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_input(&mut rng, 12);
        let b = random_input(&mut rng, 13);
        let single = model.forward_batch(&[a.view(), b.view()], None).unwrap();
        let (_, g1) = model.backward(&single, &[1.0, -1.0]).unwrap();
        let double = model
            .forward_batch(&[a.view(), b.view(), a.view(), b.view()], None)
            .unwrap();
        let (_, g2) = model.backward(&double, &[1.0, -1.0, 1.0, -1.0]).unwrap();
        for ((_, x), (_, y)) in g1.views().iter().zip(g2.views()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn batching_matches_single_items() {
        let arch = tiny_arch();
        let model = CnnModel::<f64>::init(arch, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<_> = [12, 17, 15]
            .iter()
            .map(|&t| random_input(&mut rng, t))
            .collect();
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let batch = model.forward_batch(&views, None).unwrap();
        for (i, v) in views.iter().enumerate() {
            let one = model.forward_batch(&[*v], None).unwrap();
            assert!((one.output[0] - batch.output[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_scale_and_eval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask::<f64>(&mut rng, 200, 500, 0.3);
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let ones = dropout_mask::<f64>(&mut rng, 2, 3, 0.0);
        assert!(ones.iter().all(|&v| v == 1.0));

        let arch = tiny_arch();
        let model = CnnModel::<f64>::init(arch.clone(), 1).unwrap();
        let x = random_input(&mut rng, 12);
        let eval = model.forward_batch(&[x.view()], None).unwrap();
        let all_kept = model
            .forward_batch(&[x.view()], Some(Array2::ones((1, arch.fc_hidden))))
            .unwrap();
        assert_eq!(eval.output, all_kept.output);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let arch = CnnArchitecture::table5(3, [3, 3, 3]).unwrap();
        let mut model = CnnModel::<f32>::init(arch, 21).unwrap();
        model.meta = Some(TrainingMeta {
            consonant: Some(Consonant::B),
            config: Table6Row::for_consonant(Consonant::B).train_config(1, 5, 10),
            epoch: 3,
            dev_mse: 1.25,
            config_hash: Some("abc".into()),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        let f = features("x", 12, 0.3);
        assert_eq!(
            model.predict(&f).unwrap().to_bits(),
            loaded.predict(&f).unwrap().to_bits()
        );
        fs::write(&path, b"SNR90CNN\x09\0\0\0").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    fn item(id: &str, talker: &str, value: f32, label: f64) -> LabeledFeatures {
        LabeledFeatures {
            features: features(id, 12, value),
            label_snr90_db: label,
            talker: talker.into(),
        }
    }

    #[test]
    fn split_validation() {
        let ok = DataSplit::new(
            vec![item("a", "t1", 0.0, 1.0)],
            vec![item("b", "t2", 0.0, 1.0)],
            vec![item("c", "t3", 0.0, 1.0)],
        );
        assert!(ok.is_ok());
        let overlap = DataSplit::new(
            vec![item("a", "t1", 0.0, 1.0)],
            vec![item("b", "t2", 0.0, 1.0)],
            vec![item("c", "t1", 0.0, 1.0)],
        );
        assert!(matches!(overlap, Err(Error::InvalidSplit(_))));
        assert!(DataSplit::new(
            vec![],
            vec![item("b", "t2", 0.0, 1.0)],
            vec![item("c", "t3", 0.0, 1.0)]
        )
        .is_err());

        let items: Vec<_> = (0..40)
            .map(|i| item(&format!("x{i}"), &format!("t{}", i % 10), 0.0, 0.0))
            .collect();
        let split = DataSplit::by_talker(items, 0.2, 0.2, 3).unwrap();
        assert_eq!(split.train.len() + split.dev.len() + split.test.len(), 40);
        assert_eq!(split.dev.len(), 8);
    }

    #[test]
    fn constant_predictor_mse() {
        let arch = tiny_arch();
        let mut w = Weights::<f32>::zeros(&arch);
        w.out_b[0] = -6.0;
        let model = CnnModel::new(arch, w).unwrap();
        let items = [item("a", "t1", 0.5, -4.0), item("b", "t1", -0.5, -8.0)];
        let eval = evaluate(&model, &items).unwrap();
        assert_eq!(eval.mse, 4.0);
        assert_eq!(eval.residuals[0].residual, -2.0);
        assert!(evaluate(&model, &[]).is_err());
    }

    fn constant_split() -> DataSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut part = |talker: &str, n: usize| -> Vec<LabeledFeatures> {
            (0..n)
                .map(|i| {
                    item(
                        &format!("{talker}_{i}"),
                        talker,
                        rng.gen_range(-1.0..1.0),
                        -7.5,
                    )
                })
                .collect()
        };
        DataSplit::new(part("a", 24), part("b", 6), part("c", 6)).unwrap()
    }

    #[test]
    fn constant_labels_are_learned() {
        let arch = tiny_arch();
        let config = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            dropout_p: 0.0,
            max_epochs: 30,
            seed: 1,
            patience: 10,
        };
        let split = constant_split();
        let out = train(&split, None, &arch, &config).unwrap();
        let eval = evaluate(&out.model, &split.train).unwrap();
        assert!(eval.mse < 0.01, "train MSE {}", eval.mse);
        let meta = out.model.meta.as_ref().unwrap();
        let best = out
            .log
            .iter()
            .map(|e| e.dev_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(meta.dev_mse, best);
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_config() {
        let arch = tiny_arch();
        let config = TrainConfig {
            batch_size: 3,
            learning_rate: 1e-3,
            dropout_p: 0.2,
            max_epochs: 3,
            seed: 8,
            patience: 10,
        };
        let split = constant_split();
        let a = train(&split, None, &arch, &config).unwrap();
        let b = train(&split, None, &arch, &config).unwrap();
        assert_eq!(a, b);
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..config.clone()
        };
        assert!(train(&split, None, &arch, &bad).is_err());
        let diverge = TrainConfig {
            learning_rate: 1e6,
            ..config
        };
        assert!(matches!(
            train(&split, None, &arch, &diverge),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn training_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_training_log(
            &[EpochLog {
                epoch: 1,
                train_mse: 2.5,
                dev_mse: 3.0,
            }],
            &path,
        )
        .unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "epoch,train_mse,dev_mse\n1,2.5,3\n"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn conv_length_rule(t in 19usize..60, w1 in 1usize..8, w2 in 1usize..8, w3 in 1usize..8) {
            let arch = CnnArchitecture::table5(3, [w1, w2, w3]).unwrap();
            let frames = arch.conv_output_frames(t).unwrap();
            prop_assert_eq!(frames[0], t - w1 + 1);
            prop_assert_eq!(frames[1], frames[0] - w2 + 1);
            prop_assert_eq!(frames[2], frames[1] - w3 + 1);
        }

        #[test]
        fn eval_forward_is_deterministic(seed in 0u64..1000) {
            let model = CnnModel::<f64>::init(tiny_arch(), seed).unwrap();
            let x = random_input(&mut ChaCha8Rng::seed_from_u64(seed), 12);
            let a = model.forward_batch(&[x.view()], None).unwrap().output[0];
            let b = model.forward_batch(&[x.view()], None).unwrap().output[0];
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
