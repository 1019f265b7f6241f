//! Dense feed-forward classifiers with hand-written backpropagation.
//!
//! A [`DenseModel`] is a chain of affine layers, ReLU on every hidden layer
//! and identity on the output. Weights are stored `fan_in × fan_out`, so a
//! batch `X` (rows are samples) maps to `X · W + b`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax_into, softmax_into, LogitBatch, Matrix, ProbBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    layers: Vec<DenseLayer>,
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Matrix>,
}

impl ForwardTrace {
    /// Features entering the final layer (`N × d`).
    pub fn penultimate(&self) -> &Matrix {
        self.inputs.last().expect("trace has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Weights of the combined distillation objective
/// `alpha · T² · KL(softmax(Z/T) ‖ teacher) + beta · CE(Z, labels)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl DistillLoss {
    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

impl DenseModel {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::invalid("model needs at least one layer"));
        };
        if last.activation != Activation::Identity {
            return Err(Error::invalid("output layer must be identity"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::invalid(alloc::format!(
                    "layer {k}: bias length {} != fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("model parameters"));
            }
            if let Some(next) = layers.get(k + 1) {
                if next.fan_in() != l.fan_out() {
                    return Err(Error::invalid(alloc::format!(
                        "layer {} fan_in {} does not chain from fan_out {}",
                        k + 1,
                        next.fan_in(),
                        l.fan_out()
                    )));
                }
            }
        }
        Ok(DenseModel { layers })
    }

    fn dims(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        dims
    }

    /// All-zero parameters.
    pub fn zeros(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let dims = Self::dims(input_dim, hidden, classes);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| DenseLayer {
                weights: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
                activation: if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        DenseModel { layers }
    }

    /// He-uniform weights on ReLU layers, Glorot-uniform on the output layer,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut model = Self::zeros(input_dim, hidden, classes);
        for layer in &mut model.layers {
            let (fan_in, fan_out) = (layer.fan_in() as f64, layer.fan_out() as f64);
            let limit = match layer.activation {
                Activation::Relu => libm::sqrt(6.0 / fan_in),
                Activation::Identity => libm::sqrt(6.0 / (fan_in + fan_out)),
            };
            for w in layer.weights.as_mut_slice() {
                *w = rng.random_range(-limit..limit);
            }
        }
        model
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Width `d` of the features entering the final layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_in()
    }

    pub fn final_layer(&self) -> &DenseLayer {
        &self.layers[self.layers.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Replaces the final layer's weights (`d × C`).
    pub fn set_final_weights(&mut self, weights: Matrix) -> Result<()> {
        let last = self.layers.len() - 1;
        let (r, c) = self.layers[last].weights.shape();
        weights.ensure_shape("final layer weights", r, c)?;
        if !weights.is_finite() {
            return Err(Error::NonFinite("final layer weights"));
        }
        self.layers[last].weights = weights;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(LogitBatch, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "forward input",
                expected_rows: x.rows(),
                expected_cols: self.input_dim(),
                rows: x.rows(),
                cols: x.cols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weights)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let next = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(core::mem::replace(&mut current, next));
            pre.push(z);
        }
        Ok((LogitBatch::new(current)?, ForwardTrace { inputs, pre }))
    }

    pub fn logits(&self, x: &Matrix) -> Result<LogitBatch> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Backpropagates `d_logits` (gradient of the loss w.r.t. the logits).
    fn backprop(&self, trace: &ForwardTrace, d_logits: Matrix) -> Result<Gradients> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_logits;
        for k in (0..self.layers.len()).rev() {
            let weights = trace.inputs[k].t_matmul(&delta)?;
            let mut bias = vec![0.0; delta.cols()];
            for r in 0..delta.rows() {
                for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if k > 0 {
                let mut upstream = delta.matmul_t(&self.layers[k].weights)?;
                let pre = &trace.pre[k - 1];
                for (u, &z) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = upstream;
            }
            grads.push(LayerGrad { weights, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    fn check_labels(&self, rows: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "labels",
                expected_rows: rows,
                expected_cols: 1,
                rows: labels.len(),
                cols: 1,
            });
        }
        if rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let classes = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(())
    }

    /// Mean softmax cross-entropy of the logits on `x` against `labels`.
    pub fn ce_loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        self.check_labels(x.rows(), labels)?;
        let z = self.logits(x)?;
        let mut buf = vec![0.0; self.num_classes()];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            log_softmax_into(z.matrix().row(r), 1.0, &mut buf);
            total -= buf[y];
        }
        Ok(total / labels.len() as f64)
    }

    fn ce_loss_and_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.check_labels(x.rows(), labels)?;
        let (z, trace) = self.forward(x)?;
        let n = x.rows() as f64;
        let mut d = Matrix::zeros(z.rows(), z.classes());
        let mut logp = vec![0.0; z.classes()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = z.matrix().row(r);
            log_softmax_into(row, 1.0, &mut logp);
            loss -= logp[y];
            let dr = d.row_mut(r);
            softmax_into(row, 1.0, dr);
            dr[y] -= 1.0;
            for v in dr.iter_mut() {
                *v /= n;
            }
        }
        Ok((loss / n, self.backprop(&trace, d)?))
    }

    /// Exact gradient of the mean cross-entropy of `softmax(logits)`.
    pub fn backward_ce(&self, x: &Matrix, labels: &[usize]) -> Result<Gradients> {
        self.ce_loss_and_grad(x, labels).map(|(_, g)| g)
    }

    fn check_teacher(&self, x: &Matrix, teacher: &ProbBatch) -> Result<()> {
        teacher
            .matrix()
            .ensure_shape("distillation teacher", x.rows(), self.num_classes())
    }

    /// Value of the combined distillation loss.
    pub fn distill_loss(
        &self,
        x: &Matrix,
        teacher: &ProbBatch,
        labels: Option<&[usize]>,
        loss: DistillLoss,
    ) -> Result<f64> {
        self.distill_loss_and_grad(x, teacher, labels, loss, false)
            .map(|(l, _)| l)
    }

    /// Exact gradient of the combined distillation loss. The teacher is a
    /// constant; without labels the supervised term is dropped.
    pub fn backward_distill(
        &self,
        x: &Matrix,
        teacher: &ProbBatch,
        labels: Option<&[usize]>,
        loss: DistillLoss,
    ) -> Result<Gradients> {
        self.distill_loss_and_grad(x, teacher, labels, loss, true)
            .map(|(_, g)| g.expect("gradient requested"))
    }

    fn distill_loss_and_grad(
        &self,
        x: &Matrix,
        teacher: &ProbBatch,
        labels: Option<&[usize]>,
        loss: DistillLoss,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        loss.validate()?;
        self.check_teacher(x, teacher)?;
        if let Some(labels) = labels {
            self.check_labels(x.rows(), labels)?;
        }
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let DistillLoss {
            alpha,
            beta,
            temperature: t,
        } = loss;
        let (z, trace) = self.forward(x)?;
        let classes = z.classes();
        let n = x.rows() as f64;
        let mut d = Matrix::zeros(z.rows(), classes);
        let mut log_s = vec![0.0; classes];
        let mut log_p1 = vec![0.0; classes];
        let mut total = 0.0;
        for r in 0..z.rows() {
            let row = z.matrix().row(r);
            let teach = teacher.row(r);
            log_softmax_into(row, t, &mut log_s);
            // g_c = ln s_c - ln t_c ; KL = Σ s_c g_c
            let mut kl = 0.0;
            for c in 0..classes {
                let s = libm::exp(log_s[c]);
                kl += s * (log_s[c] - libm::log(teach[c]));
            }
            total += alpha * t * t * kl;
            let dr = d.row_mut(r);
            if alpha != 0.0 {
                for c in 0..classes {
                    let s = libm::exp(log_s[c]);
                    let g = log_s[c] - libm::log(teach[c]);
                    dr[c] = alpha * t * s * (g - kl);
                }
            }
            if let (Some(labels), true) = (labels, beta != 0.0) {
                let y = labels[r];
                log_softmax_into(row, 1.0, &mut log_p1);
                total -= beta * log_p1[y];
                for c in 0..classes {
                    let p = libm::exp(log_p1[c]);
                    dr[c] += beta * (p - if c == y { 1.0 } else { 0.0 });
                }
            }
            for v in dr.iter_mut() {
                *v /= n;
            }
        }
        let grads = if want_grad {
            Some(self.backprop(&trace, d)?)
        } else {
            None
        };
        Ok((total / n, grads))
    }

    /// In-place SGD step with learning rate `eta`.
    pub fn apply(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::invalid("gradient layer count mismatch"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights = crate::numerics::sgd_step(&layer.weights, &g.weights, eta)?;
            if g.bias.len() != layer.bias.len() {
                return Err(Error::invalid("bias gradient length mismatch"));
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= eta * gb;
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("parameters after SGD step"));
            }
        }
        Ok(())
    }

    /// Minibatch SGD over `n` samples; `step` returns the batch loss and gradient.
    fn sgd_epochs<R, F>(
        &mut self,
        n: usize,
        eta: f64,
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
        mut step: F,
    ) -> Result<Vec<f64>>
    where
        R: Rng + ?Sized,
        F: FnMut(&DenseModel, &[usize]) -> Result<(f64, Gradients)>,
    {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(batch_size) {
                let (loss, grads) = step(self, batch)?;
                epoch_loss += loss * batch.len() as f64;
                self.apply(&grads, eta)?;
            }
            trace.push(epoch_loss / n as f64);
        }
        Ok(trace)
    }

    /// Trains with mean cross-entropy for `epochs` passes; returns the mean
    /// loss of each epoch.
    pub fn train_epochs<R: Rng + ?Sized>(
        &mut self,
        data: &Dataset,
        eta: f64,
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.features().cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "training features",
                expected_rows: data.len(),
                expected_cols: self.input_dim(),
                rows: data.len(),
                cols: data.features().cols(),
            });
        }
        self.sgd_epochs(data.len(), eta, epochs, batch_size, rng, |m, idx| {
            let x = data.features().select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            m.ce_loss_and_grad(&x, &y)
        })
    }

    /// Trains on the combined distillation objective; `teacher` rows align
    /// with rows of `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn distill_epochs<R: Rng + ?Sized>(
        &mut self,
        x: &Matrix,
        teacher: &ProbBatch,
        labels: Option<&[usize]>,
        loss: DistillLoss,
        eta: f64,
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        loss.validate()?;
        self.check_teacher(x, teacher)?;
        if let Some(labels) = labels {
            self.check_labels(x.rows(), labels)?;
        }
        self.sgd_epochs(x.rows(), eta, epochs, batch_size, rng, |m, idx| {
            let xb = x.select_rows(idx);
            let tb = ProbBatch::new(teacher.matrix().select_rows(idx))?;
            let yb: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let (l, g) = m.distill_loss_and_grad(&xb, &tb, yb.as_deref(), loss, true)?;
            Ok((l, g.expect("gradient requested")))
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let z = self.logits(data.features())?;
        let correct = (0..z.rows())
            .filter(|&r| argmax(z.matrix().row(r)) == data.labels()[r])
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use crate::rng::rng_from;

    fn matrix(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Flattened parameter view for finite differences.
    fn params(m: &DenseModel) -> Vec<f64> {
        m.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    fn with_params(m: &DenseModel, p: &[f64]) -> DenseModel {
        let mut out = m.clone();
        let mut it = p.iter();
        for l in &mut out.layers {
            for w in l.weights.as_mut_slice() {
                *w = *it.next().unwrap();
            }
            for b in &mut l.bias {
                *b = *it.next().unwrap();
            }
        }
        out
    }

    fn flat_grads(g: &Gradients) -> Vec<f64> {
        g.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    fn assert_fd(m: &DenseModel, analytic: &Gradients, loss: impl Fn(&DenseModel) -> f64) {
        let p = params(m);
        let g = flat_grads(analytic);
        let h = 1e-5;
        for k in 0..p.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (loss(&with_params(m, &plus)) - loss(&with_params(m, &minus))) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = DenseModel::zeros(3, &[4], 2);
        let x = matrix(&[&[1.0, -2.0, 3.0]]);
        let (z, _) = m.forward(&x).unwrap();
        assert!(z.matrix().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer() {
        let m = DenseModel::from_layers(vec![DenseLayer {
            weights: matrix(&[&[2.0, 0.0], &[0.0, 3.0]]),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = matrix(&[&[1.0, 0.0]]);
        let (z, trace) = m.forward(&x).unwrap();
        assert_eq!(z.matrix().as_slice(), &[2.0, 0.0]);
        assert_eq!(trace.penultimate(), &x);
    }

    #[test]
    fn from_layers_rejects_broken_chain() {
        let bad = vec![
            DenseLayer {
                weights: Matrix::zeros(2, 3),
                bias: vec![0.0; 3],
                activation: Activation::Relu,
            },
            DenseLayer {
                weights: Matrix::zeros(4, 2),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            },
        ];
        assert!(DenseModel::from_layers(bad).is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = DenseModel::zeros(3, &[], 2);
        assert!(matches!(
            m.forward(&Matrix::zeros(1, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_grad() {
        let mut rng = rng_from(1);
        let m = DenseModel::init(3, &[5], 3, &mut rng);
        let g = m.backward_ce(&Matrix::zeros(2, 3), &[0, 2]).unwrap();
        assert!(g.layers[0].weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.layers[1].bias.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicated_rows_do_not_change_mean_gradient() {
        let mut rng = rng_from(2);
        let m = DenseModel::init(3, &[4], 3, &mut rng);
        let x1 = matrix(&[&[0.2, -0.5, 0.9]]);
        let x2 = matrix(&[&[0.2, -0.5, 0.9], &[0.2, -0.5, 0.9]]);
        let g1 = flat_grads(&m.backward_ce(&x1, &[1]).unwrap());
        let g2 = flat_grads(&m.backward_ce(&x2, &[1, 1]).unwrap());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_ce_matches_finite_differences() {
        let mut rng = rng_from(3);
        for hidden in [&[][..], &[6], &[5, 4]] {
            let m = DenseModel::init(4, hidden, 3, &mut rng);
            let x = random_batch(&mut rng, 5, 4);
            let y = [0, 2, 1, 1, 0];
            let g = m.backward_ce(&x, &y).unwrap();
            assert_fd(&m, &g, |mm| mm.ce_loss(&x, &y).unwrap());
        }
    }

    #[test]
    fn backward_distill_matches_finite_differences() {
        let mut rng = rng_from(4);
        let m = DenseModel::init(3, &[6], 4, &mut rng);
        let x = random_batch(&mut rng, 4, 3);
        let teacher = softmax_rows(
            &LogitBatch::new(random_batch(&mut rng, 4, 4).scale(2.0)).unwrap(),
            1.0,
        )
        .unwrap();
        let y = [3, 0, 1, 2];
        let loss = DistillLoss {
            alpha: 0.7,
            beta: 0.3,
            temperature: 3.0,
        };
        for labels in [Some(&y[..]), None] {
            let g = m.backward_distill(&x, &teacher, labels, loss).unwrap();
            assert_fd(&m, &g, |mm| mm.distill_loss(&x, &teacher, labels, loss).unwrap());
        }
    }

    #[test]
    fn distill_reduces_to_ce_when_alpha_zero() {
        let mut rng = rng_from(5);
        let m = DenseModel::init(3, &[4], 3, &mut rng);
        let x = random_batch(&mut rng, 3, 3);
        let y = [0, 1, 2];
        let teacher = ProbBatch::new(Matrix::new(3, 3, vec![1.0 / 3.0; 9]).unwrap()).unwrap();
        let loss = DistillLoss {
            alpha: 0.0,
            beta: 1.0,
            temperature: 2.0,
        };
        let gd = flat_grads(&m.backward_distill(&x, &teacher, Some(&y), loss).unwrap());
        let gc = flat_grads(&m.backward_ce(&x, &y).unwrap());
        for (a, b) in gd.iter().zip(&gc) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn self_distillation_is_a_fixed_point() {
        let mut rng = rng_from(6);
        let m = DenseModel::init(3, &[8], 4, &mut rng);
        let x = random_batch(&mut rng, 6, 3);
        let t = 3.0;
        let teacher = softmax_rows(&m.logits(&x).unwrap(), t).unwrap();
        let loss = DistillLoss {
            alpha: 1.0,
            beta: 0.0,
            temperature: t,
        };
        let g = m.backward_distill(&x, &teacher, None, loss).unwrap();
        assert!(g.max_abs() < 1e-9, "{}", g.max_abs());
    }

    #[test]
    fn training_is_deterministic_and_eta_zero_is_identity() {
        let data = crate::data::synth_blobs(9, 2, 30, 2, 0.3).unwrap();
        let base = DenseModel::init(2, &[8], 2, &mut rng_from(1));

        let mut frozen = base.clone();
        frozen.train_epochs(&data, 0.0, 3, 8, &mut rng_from(2)).unwrap();
        assert_eq!(frozen, base);

        let mut a = base.clone();
        let mut b = base.clone();
        let la = a.train_epochs(&data, 0.1, 4, 8, &mut rng_from(3)).unwrap();
        let lb = b.train_epochs(&data, 0.1, 4, 8, &mut rng_from(3)).unwrap();
        assert_eq!(la.len(), 4);
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = crate::data::synth_blobs(11, 2, 100, 2, 0.25).unwrap();
        let mut m = DenseModel::init(2, &[16], 2, &mut rng_from(4));
        m.train_epochs(&data, 0.1, 20, 16, &mut rng_from(5)).unwrap();
        assert!(m.accuracy(&data).unwrap() >= 0.95);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = DenseModel::zeros(2, &[], 2);
        assert_eq!(
            Dataset::new(Matrix::zeros(0, 2), vec![], 2),
            Err(Error::EmptyDataset)
        );
        let teacher = ProbBatch::new(Matrix::zeros(0, 2)).unwrap();
        let loss = DistillLoss {
            alpha: 1.0,
            beta: 0.0,
            temperature: 1.0,
        };
        assert_eq!(
            m.distill_epochs(&Matrix::zeros(0, 2), &teacher, None, loss, 0.1, 1, 4, &mut rng_from(0)),
            Err(Error::EmptyDataset)
        );
    }

    #[test]
    fn accuracy_tie_break_and_constant_predictor() {
        let x = matrix(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let balanced = Dataset::new(x.clone(), vec![0, 1, 0, 1], 2).unwrap();
        assert_eq!(DenseModel::zeros(1, &[], 2).accuracy(&balanced).unwrap(), 0.5);

        let mut constant = DenseModel::zeros(1, &[], 3);
        constant.layers[0].bias = vec![0.0, 0.0, 1.0];
        let all_two = Dataset::new(x, vec![2; 4], 3).unwrap();
        assert_eq!(constant.accuracy(&all_two).unwrap(), 1.0);
    }
}
