//! Multi-layer perceptron classifier with a softmax output.
//!
//! Hidden layers use ReLU, the output layer is linear and feeds a numerically
//! stable softmax. Gradients are flattened layer by layer (weights row-major,
//! then biases) into a [`GradientVec`]; the same layout is used everywhere a
//! parameter-space vector appears.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, norm_sq, Mat, Op};

/// Hidden and output widths used for MNIST: 784 → 100 → 100 → 10.
pub const MNIST_DIMS: [usize; 4] = [784, 100, 100, 10];

/// One affine layer `z = W a + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: Mat,
    /// length out
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * (self.weight.cols() + 1)
    }
}

/// A flat parameter-space vector (gradient, update direction, stored memory
/// direction) in the layout of [`ModelParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVec(Vec<f64>);

impl GradientVec {
    pub fn new(values: Vec<f64>) -> Self {
        GradientVec(values)
    }

    pub fn zeros(len: usize) -> Self {
        GradientVec(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &GradientVec) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(mut self, alpha: f64) -> Self {
        self.0.iter_mut().for_each(|v| *v *= alpha);
        self
    }
}

impl From<Vec<f64>> for GradientVec {
    fn from(v: Vec<f64>) -> Self {
        GradientVec(v)
    }
}

/// Labeled examples, one per row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Mat,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Mat, y: Vec<usize>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if x.rows() != y.len() {
            return Err(Error::structural(format!(
                "batch has {} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Everything the backward pass and the Fisher estimate need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (n × in); `inputs[0]` is the batch itself.
    pub inputs: Vec<Mat>,
    /// Pre-activations of each layer (n × out); the last one holds the logits.
    pub pre_activations: Vec<Mat>,
    /// Softmax probabilities (n × classes).
    pub probs: Mat,
}

impl ForwardCache {
    pub fn logits(&self) -> &Mat {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.probs.rows()
    }

    /// Layer input rows with a trailing 1 for the bias: n × (in + 1).
    pub fn homogeneous_inputs(&self, layer: usize) -> Mat {
        homogeneous(&self.inputs[layer])
    }
}

fn homogeneous(a: &Mat) -> Mat {
    let (n, d) = a.shape();
    let mut out = Mat::zeros(n, d + 1);
    for r in 0..n {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(a.row(r));
        row[d] = 1.0;
    }
    out
}

/// Per-layer, per-example quantities whose outer products make up the
/// Kronecker factors: `activations` are layer inputs with a bias column
/// (n × (in+1)), `deltas` are per-example loss gradients with respect to the
/// layer's pre-activations (n × out). The per-example weight gradient is
/// `δ aᵀ`, so the batch gradient is their mean.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub activations: Mat,
    pub deltas: Mat,
}

#[derive(Debug, Clone)]
pub struct Backward {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grad: GradientVec,
    pub stats: Vec<LayerStats>,
}

/// Parameters of the MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    /// He-normal weights (variance 2/fan_in), zero biases.
    pub fn init_kaiming(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                Layer {
                    weight: Mat::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(ModelParams { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        Ok(ModelParams {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: Mat::zeros(w[1], w[0]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::structural("model needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::structural(format!(
                    "layer {i}: bias length {} for {} outputs",
                    l.bias.len(),
                    l.outputs()
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::structural(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].outputs(),
                    i + 1,
                    w[1].inputs()
                )));
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs()];
        dims.extend(self.layers.iter().map(Layer::outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Offset of each layer's block inside a flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_count();
        }
        offsets
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(l.weight.as_slice());
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::structural(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(())
    }

    /// `w ← w − step·direction`.
    pub fn apply_update(&mut self, step: f64, direction: &GradientVec) -> Result<()> {
        if direction.len() != self.param_count() {
            return Err(Error::structural(format!(
                "update of length {} for {} parameters",
                direction.len(),
                self.param_count()
            )));
        }
        let d = direction.as_slice();
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weight.as_mut_slice() {
                *w -= step * d[at];
                at += 1;
            }
            for b in &mut l.bias {
                *b -= step * d[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, x: &Mat) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::structural(format!(
                "input width {} but the first layer takes {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = x.rows();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = Mat::zeros(n, l.outputs());
            gemm(1.0, &current, Op::N, &l.weight, Op::T, 0.0, &mut z)?;
            for r in 0..n {
                for (v, b) in z.row_mut(r).iter_mut().zip(&l.bias) {
                    *v += b;
                }
            }
            if !z.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite pre-activation in layer {i}"
                )));
            }
            let next = if i < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                Some(a)
            } else {
                None
            };
            inputs.push(current);
            pre_activations.push(z);
            if let Some(a) = next {
                current = a;
            } else {
                break;
            }
        }
        let probs = softmax_rows(pre_activations.last().expect("nonempty"));
        Ok(ForwardCache {
            inputs,
            pre_activations,
            probs,
        })
    }

    /// Mean cross-entropy, its exact gradient, and the per-layer statistics,
    /// with respect to the given labels. The forward cache can be reused to
    /// backpropagate several label sets (true labels, sampled labels).
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Backward> {
        let n = cache.batch_size();
        let classes = self.num_classes();
        if labels.len() != n {
            return Err(Error::structural(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let logits = cache.logits();
        let mut loss = 0.0;
        let mut delta = cache.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::structural(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            loss += log_sum_exp(logits.row(r)) - logits[(r, y)];
            delta[(r, y)] -= 1.0;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::numerical("non-finite loss"));
        }
        let (grad, stats) = self.backprop(cache, delta, 1.0 / n as f64)?;
        Ok(Backward { loss, grad, stats })
    }

    pub fn loss_and_backward(&self, batch: &Batch) -> Result<Backward> {
        let cache = self.forward(&batch.x)?;
        self.backward(&cache, &batch.y)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let cache = self.forward(&batch.x)?;
        let logits = cache.logits();
        let classes = self.num_classes();
        let mut loss = 0.0;
        for (r, &y) in batch.y.iter().enumerate() {
            if y >= classes {
                return Err(Error::structural(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            loss += log_sum_exp(logits.row(r)) - logits[(r, y)];
        }
        Ok(loss / batch.len() as f64)
    }

    /// Gradient of the single logit `f_class(x)` with respect to all parameters.
    pub fn logit_gradient(&self, x: &[f64], class: usize) -> Result<GradientVec> {
        let classes = self.num_classes();
        if class >= classes {
            return Err(Error::structural(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let cache = self.forward(&Mat::from_vec(1, x.len(), x.to_vec())?)?;
        let mut delta = Mat::zeros(1, classes);
        delta[(0, class)] = 1.0;
        Ok(self.backprop(&cache, delta, 1.0)?.0)
    }

    /// Backpropagates output deltas (n × classes); the returned gradient is
    /// `scale · Σ_examples δ aᵀ` per layer.
    fn backprop(
        &self,
        cache: &ForwardCache,
        output_delta: Mat,
        scale: f64,
    ) -> Result<(GradientVec, Vec<LayerStats>)> {
        let n = cache.batch_size();
        let offsets = self.layer_offsets();
        let mut grad = vec![0.0; self.param_count()];
        let mut stats: Vec<Option<LayerStats>> = vec![None; self.layers.len()];
        let mut delta = output_delta;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (out, inp) = (l.outputs(), l.inputs());
            let input = &cache.inputs[i];
            let block = &mut grad[offsets[i]..offsets[i] + out * (inp + 1)];
            let (w_grad, b_grad) = block.split_at_mut(out * inp);
            let mut wg = Mat::zeros(out, inp);
            gemm(scale, &delta, Op::T, input, Op::N, 0.0, &mut wg)?;
            w_grad.copy_from_slice(wg.as_slice());
            for r in 0..n {
                for (bg, d) in b_grad.iter_mut().zip(delta.row(r)) {
                    *bg += d;
                }
            }
            b_grad.iter_mut().for_each(|b| *b *= scale);

            let next_delta = if i > 0 {
                let mut back = Mat::zeros(n, inp);
                gemm(1.0, &delta, Op::N, &l.weight, Op::N, 0.0, &mut back)?;
                let z_prev = &cache.pre_activations[i - 1];
                for (b, z) in back.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                    // ReLU'(0) = 0
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
                Some(back)
            } else {
                None
            };
            stats[i] = Some(LayerStats {
                activations: homogeneous(input),
                deltas: delta,
            });
            match next_delta {
                Some(d) => delta = d,
                None => break,
            }
        }
        let grad = GradientVec(grad);
        if !grad.is_finite() {
            return Err(Error::numerical("non-finite gradient"));
        }
        Ok((grad, stats.into_iter().map(|s| s.expect("filled")).collect()))
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        let cache = self.forward(x)?;
        let logits = cache.logits();
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Fraction of correctly classified rows, evaluated in chunks.
    pub fn accuracy(&self, x: &Mat, y: &[usize]) -> Result<f64> {
        if x.rows() != y.len() {
            return Err(Error::structural("accuracy: rows and labels differ"));
        }
        if y.is_empty() {
            return Err(Error::EmptyBatch);
        }
        const CHUNK: usize = 512;
        let mut correct = 0usize;
        let d = x.cols();
        for start in (0..y.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(y.len());
            let chunk = Mat::from_vec(
                end - start,
                d,
                x.as_slice()[start * d..end * d].to_vec(),
            )?;
            correct += self
                .predict(&chunk)?
                .iter()
                .zip(&y[start..end])
                .filter(|(p, t)| p == t)
                .count();
        }
        Ok(correct as f64 / y.len() as f64)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::structural(
            "layer sizes need an input and an output width",
        ));
    }
    if dims.contains(&0) {
        return Err(Error::structural("layer sizes must be positive"));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Mat) -> Mat {
    let mut p = z.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Draws one label per row from the cached predictive distribution.
pub fn sample_labels<R: Rng + ?Sized>(cache: &ForwardCache, rng: &mut R) -> Vec<usize> {
    let p = &cache.probs;
    (0..p.rows())
        .map(|r| {
            let row = p.row(r);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &pc) in row.iter().enumerate() {
                acc += pc;
                if u < acc {
                    return c;
                }
            }
            // u landed in the rounding gap above the cumulative sum
            row.iter().rposition(|&pc| pc > 0.0).unwrap_or(row.len() - 1)
        })
        .collect()
}

/// [`sample_labels`] with a dedicated generator seeded from `seed`.
pub fn sample_labels_seeded(cache: &ForwardCache, seed: u64) -> Vec<usize> {
    sample_labels(cache, &mut ChaCha8Rng::seed_from_u64(seed))
}
