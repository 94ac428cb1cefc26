//! Feed-forward ReLU classifier: the model family the certifier works on.
//!
//! A model is a stack of affine layers with ReLU activations on hidden
//! layers (the final layer may be identity-activated), classifying by
//! arg-max over output logits with ties broken toward the lowest class
//! index. Confidence is the softmax probability of the predicted class,
//! computed with max-subtraction for numerical stability.
//!
//! Models serialize to a small JSON format (`input_dim`, `num_classes`,
//! `layers` with row-major flat weights; optional per-dimension `input_box`
//! clamp bounds, defaulting to [0, 1] everywhere) and hash to a stable
//! identifier so certificates can name the exact model they were issued for.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PagError, Result};

/// Layer nonlinearity. Hidden layers must be `Relu`; only the final layer
/// may be `Identity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `y = W·x + b` followed by its activation.
/// `weight` is row-major with `rows` output units and `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    /// `W·x + b` without the activation.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
        out
    }
}

/// A multi-layer perceptron classifier plus the box of valid inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<AffineLayer>,
    /// Per-dimension `[lo, hi]` clamp bounds of the valid input region.
    /// Absent in files for pixel-valued inputs, where it defaults to [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_box: Option<Vec<[f64; 2]>>,
}

/// Classification outcome at a single input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Arg-max class, ties broken toward the lowest index.
    pub class_index: usize,
    /// Softmax probability of the predicted class; in (0, 1].
    pub confidence: f64,
}

/// Loss whose input gradient `input_gradient` computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `max_{j != c} z_j − z_c` for a protected class `c`: positive once the
    /// reference class has lost the arg-max. Ascending this is the standard
    /// way to search for a class change.
    MarginToRunnerUp { reference_class: usize },
    /// `−ln softmax_t(z)` for a designated true class `t`.
    CrossEntropy { true_class: usize },
}

/// Arg-max with ties broken toward the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Stable softmax probabilities (max-subtraction before exponentiation).
fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

impl MlpModel {
    /// Structural validation: composing dimensions, row-major weight sizes,
    /// finite entries, ReLU on all hidden layers, and a sane input box.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PagError::ModelFormat(msg));
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2".into());
        }
        if self.layers.is_empty() {
            return fail("model has no layers".into());
        }
        let mut expect_in = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.cols != expect_in {
                return fail(format!(
                    "layer {i}: expects {} inputs but the previous width is {expect_in}",
                    layer.cols
                ));
            }
            if layer.weight.len() != layer.rows * layer.cols {
                return fail(format!(
                    "layer {i}: weight has {} entries, rows*cols = {}",
                    layer.weight.len(),
                    layer.rows * layer.cols
                ));
            }
            if layer.bias.len() != layer.rows {
                return fail(format!(
                    "layer {i}: bias has {} entries, rows = {}",
                    layer.bias.len(),
                    layer.rows
                ));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return fail(format!("layer {i}: non-finite weight or bias"));
            }
            let is_last = i + 1 == self.layers.len();
            if !is_last && layer.activation != Activation::Relu {
                return fail(format!("layer {i}: hidden layers must use relu"));
            }
            expect_in = layer.rows;
        }
        if expect_in != self.num_classes {
            return fail(format!(
                "final layer has {expect_in} outputs but num_classes = {}",
                self.num_classes
            ));
        }
        if let Some(bx) = &self.input_box {
            if bx.len() != self.input_dim {
                return fail(format!(
                    "input_box has {} entries for input_dim {}",
                    bx.len(),
                    self.input_dim
                ));
            }
            for (j, [lo, hi]) in bx.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return fail(format!("input_box[{j}] = [{lo}, {hi}] is not a valid interval"));
                }
            }
        }
        Ok(())
    }

    /// Clamp bounds for input dimension `j` ([0, 1] when no box is stored).
    pub fn box_bounds(&self, j: usize) -> (f64, f64) {
        match &self.input_box {
            Some(bx) => (bx[j][0], bx[j][1]),
            None => (0.0, 1.0),
        }
    }

    /// Clamps a candidate input into the valid box, in place.
    pub fn clamp_to_box(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            let (lo, hi) = self.box_bounds(j);
            *v = v.clamp(lo, hi);
        }
    }

    /// Output logits at `x`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.affine(&h);
            if layer.activation == Activation::Relu {
                for v in &mut pre {
                    *v = v.max(0.0);
                }
            }
            h = pre;
        }
        h
    }

    /// Full prediction at `x`: logits, arg-max class, softmax confidence.
    pub fn forward(&self, x: &[f64]) -> Prediction {
        let logits = self.logits(x);
        let class_index = argmax(&logits);
        let confidence = softmax(&logits)[class_index];
        Prediction { logits, class_index, confidence }
    }

    /// Gradient of the chosen loss with respect to the input, by reverse
    /// accumulation through the layers. The ReLU subgradient at exactly 0
    /// is taken as 0.
    pub fn input_gradient(&self, x: &[f64], loss: LossKind) -> Result<Vec<f64>> {
        // Forward pass, keeping every pre-activation for the backward sweep.
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.affine(&h);
            h = pre.clone();
            if layer.activation == Activation::Relu {
                for v in &mut h {
                    *v = v.max(0.0);
                }
            }
            pre_acts.push(pre);
        }
        let logits = h;

        // Seed gradient on the (post-activation) outputs.
        let mut grad = match loss {
            LossKind::MarginToRunnerUp { reference_class: c } => {
                if c >= self.num_classes {
                    return Err(PagError::range(
                        "reference_class",
                        c as f64,
                        "class index < num_classes",
                    ));
                }
                let mut runner = if c == 0 { 1 } else { 0 };
                for j in 0..self.num_classes {
                    if j != c && logits[j] > logits[runner] {
                        runner = j;
                    }
                }
                let mut g = vec![0.0; self.num_classes];
                g[runner] = 1.0;
                g[c] = -1.0;
                g
            }
            LossKind::CrossEntropy { true_class: t } => {
                if t >= self.num_classes {
                    return Err(PagError::range(
                        "true_class",
                        t as f64,
                        "class index < num_classes",
                    ));
                }
                let mut g = softmax(&logits);
                g[t] -= 1.0;
                g
            }
        };

        // Backward sweep: activation derivative, then transpose-multiply.
        for (layer, pre) in self.layers.iter().zip(&pre_acts).rev() {
            if layer.activation == Activation::Relu {
                for (g, p) in grad.iter_mut().zip(pre) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut upstream = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let gr = grad[r];
                if gr == 0.0 {
                    continue;
                }
                let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
                for (u, w) in upstream.iter_mut().zip(row) {
                    *u += gr * w;
                }
            }
            grad = upstream;
        }
        Ok(grad)
    }

    /// Stable content hash of the model: SHA-256 over the canonical JSON
    /// serialization (independent of on-disk formatting).
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("model serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// Loads and validates a model from a JSON file.
pub fn load_model(path: &Path) -> Result<MlpModel> {
    let file = std::fs::File::open(path)?;
    let model: MlpModel = serde_json::from_reader(std::io::BufReader::new(file))?;
    model.validate()?;
    Ok(model)
}

/// Validates and writes a model as pretty-printed JSON.
pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    model.validate()?;
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), model)?;
    Ok(())
}
