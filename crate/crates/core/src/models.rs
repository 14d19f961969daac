//! Small differentiable models: a batch-free quadratic bowl, multinomial
//! logistic regression and a one-hidden-layer tanh MLP.
//!
//! Parameters live in one flat [`ParamVector`]. Classifier layouts are
//! row-major weight matrices followed by their bias vectors:
//!
//! * logistic regression: `W[c][i]` then `b[c]`
//! * MLP: `W1[h][i]`, `b1[h]`, `W2[c][h]`, `b2[c]`
//!
//! Losses and gradients are means over batch rows, accumulated in row order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::vecmath::{ParamVector, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `½‖w − center‖²`, independent of the data.
    Quadratic {
        center: ParamVector,
    },
    LogisticRegression {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
}

/// A mini-batch of labelled rows, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must contain at least one row".into()));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                found: inputs.len(),
            });
        }
        Ok(Batch {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

impl ModelSpec {
    /// Number of scalar parameters.
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Quadratic { center } => center.len(),
            ModelSpec::LogisticRegression { input_dim, num_classes } => num_classes * input_dim + num_classes,
            ModelSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Quadratic { .. })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            ModelSpec::Quadratic { .. } => None,
            ModelSpec::LogisticRegression { num_classes, .. } | ModelSpec::Mlp { num_classes, .. } => {
                Some(*num_classes)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Quadratic { center } => {
                if center.is_empty() || !center.is_finite() {
                    return Err(Error::InvalidConfig(
                        "quadratic center must be a nonempty finite vector".into(),
                    ));
                }
            }
            ModelSpec::LogisticRegression { input_dim, num_classes } => {
                check_classifier_dims(*input_dim, *num_classes, 1)?
            }
            ModelSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => check_classifier_dims(*input_dim, *num_classes, *hidden_dim)?,
        }
        Ok(())
    }

    /// Initial weights: zeros for the convex models, symmetric uniform
    /// `±1/√fan_in` for the MLP layers.
    pub fn init_params(&self, stream: RngStream) -> ParamVector {
        match self {
            ModelSpec::Quadratic { .. } | ModelSpec::LogisticRegression { .. } => ParamVector::zeros(self.dim()),
            ModelSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                let mut rng = stream.rng();
                let mut w = Vec::with_capacity(self.dim());
                let mut layer = |count: usize, fan_in: usize, w: &mut Vec<f64>| {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    w.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
                };
                layer(hidden_dim * input_dim + hidden_dim, *input_dim, &mut w);
                layer(num_classes * hidden_dim + num_classes, *hidden_dim, &mut w);
                ParamVector::new(w)
            }
        }
    }

    pub fn loss(&self, w: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check(w, batch)?;
        Ok(match self {
            ModelSpec::Quadratic { center } => half_dist_sq(w, center),
            _ => self.forward_backward(w, batch, false).0,
        })
    }

    pub fn grad(&self, w: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        Ok(self.loss_and_grad(w, batch)?.1)
    }

    pub fn loss_and_grad(&self, w: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check(w, batch)?;
        Ok(match self {
            ModelSpec::Quadratic { center } => {
                let g = w.as_slice().iter().zip(center.as_slice()).map(|(a, c)| a - c).collect();
                (half_dist_sq(w, center), ParamVector::new(g))
            }
            _ => {
                let (loss, g) = self.forward_backward(w, batch, true);
                (loss, ParamVector::new(g))
            }
        })
    }

    /// Fraction of rows whose argmax prediction equals the label; ties go
    /// to the lowest class index.
    pub fn accuracy(&self, w: &ParamVector, batch: &Batch) -> Result<f64> {
        if !self.is_classifier() {
            return Err(Error::InvalidArgument(
                "accuracy is undefined for the quadratic model".into(),
            ));
        }
        self.check(w, batch)?;
        let mut logits = Vec::new();
        let mut hidden = Vec::new();
        let mut correct = 0usize;
        for (i, &label) in batch.labels().iter().enumerate() {
            self.logits(w.as_slice(), batch.row(i), &mut hidden, &mut logits);
            if argmax(&logits) == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }

    fn check(&self, w: &ParamVector, batch: &Batch) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: w.len(),
            });
        }
        match self {
            ModelSpec::Quadratic { .. } => Ok(()),
            ModelSpec::LogisticRegression { input_dim, num_classes }
            | ModelSpec::Mlp {
                input_dim, num_classes, ..
            } => {
                if batch.input_dim() != *input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: *input_dim,
                        found: batch.input_dim(),
                    });
                }
                if let Some(&bad) = batch.labels().iter().find(|&&l| l >= *num_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {num_classes} classes"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Writes the class scores for one row into `logits`. `hidden` receives
    /// the tanh activations for the MLP.
    fn logits(&self, w: &[f64], x: &[f64], hidden: &mut Vec<f64>, logits: &mut Vec<f64>) {
        logits.clear();
        match *self {
            ModelSpec::Quadratic { .. } => unreachable!("quadratic model has no logits"),
            ModelSpec::LogisticRegression { input_dim, num_classes } => {
                let (weights, bias) = w.split_at(num_classes * input_dim);
                affine(weights, bias, x, logits);
            }
            ModelSpec::Mlp {
                input_dim,
                hidden_dim,
                num_classes,
            } => {
                let layout = MlpLayout::new(input_dim, hidden_dim, num_classes);
                hidden.clear();
                affine(&w[layout.w1.clone()], &w[layout.b1.clone()], x, hidden);
                hidden.iter_mut().for_each(|h| *h = h.tanh());
                affine(&w[layout.w2.clone()], &w[layout.b2.clone()], hidden, logits);
            }
        }
    }

    /// Mean cross-entropy and, when requested, its gradient.
    fn forward_backward(&self, w: &ParamVector, batch: &Batch, want_grad: bool) -> (f64, Vec<f64>) {
        let w = w.as_slice();
        let mut grad = if want_grad { vec![0.0; w.len()] } else { Vec::new() };
        let mut logits = Vec::new();
        let mut hidden = Vec::new();
        let mut dhidden = Vec::new();
        let mut total = 0.0;
        for (i, &label) in batch.labels().iter().enumerate() {
            let x = batch.row(i);
            self.logits(w, x, &mut hidden, &mut logits);
            let lse = log_sum_exp(&logits);
            total += lse - logits[label];
            if !want_grad {
                continue;
            }
            // logits now become dL/dlogits = softmax - onehot
            for (c, z) in logits.iter_mut().enumerate() {
                *z = (*z - lse).exp() - if c == label { 1.0 } else { 0.0 };
            }
            match *self {
                ModelSpec::Quadratic { .. } => unreachable!(),
                ModelSpec::LogisticRegression { input_dim, num_classes } => {
                    let (gw, gb) = grad.split_at_mut(num_classes * input_dim);
                    outer_accumulate(gw, gb, &logits, x);
                }
                ModelSpec::Mlp {
                    input_dim,
                    hidden_dim,
                    num_classes,
                } => {
                    let layout = MlpLayout::new(input_dim, hidden_dim, num_classes);
                    {
                        let (head, tail) = grad.split_at_mut(layout.b2.start);
                        outer_accumulate(&mut head[layout.w2.clone()], tail, &logits, &hidden);
                    }
                    let w2 = &w[layout.w2.clone()];
                    dhidden.clear();
                    dhidden.extend((0..hidden_dim).map(|h| {
                        let mut acc = 0.0;
                        for (c, d) in logits.iter().enumerate() {
                            acc += w2[c * hidden_dim + h] * d;
                        }
                        acc * (1.0 - hidden[h] * hidden[h])
                    }));
                    let (gw1, rest) = grad.split_at_mut(layout.b1.start);
                    outer_accumulate(gw1, &mut rest[..hidden_dim], &dhidden, x);
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (total / n, grad)
    }
}

fn check_classifier_dims(input_dim: usize, num_classes: usize, hidden_dim: usize) -> Result<()> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::InvalidConfig("input_dim and hidden_dim must be positive".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("classifiers need num_classes >= 2".into()));
    }
    Ok(())
}

struct MlpLayout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl MlpLayout {
    fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        let w1_end = hidden_dim * input_dim;
        let b1_end = w1_end + hidden_dim;
        let w2_end = b1_end + num_classes * hidden_dim;
        MlpLayout {
            w1: 0..w1_end,
            b1: w1_end..b1_end,
            w2: b1_end..w2_end,
            b2: w2_end..w2_end + num_classes,
        }
    }
}

fn half_dist_sq(w: &ParamVector, center: &ParamVector) -> f64 {
    let mut acc = 0.0;
    for (a, c) in w.as_slice().iter().zip(center.as_slice()) {
        acc += (a - c) * (a - c);
    }
    0.5 * acc
}

/// `out = weights · x + bias` with `weights` row-major `[out][in]`.
fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.extend(bias.iter().enumerate().map(|(r, b)| {
        let row = &weights[r * n_in..(r + 1) * n_in];
        let mut acc = *b;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        acc
    }));
}

/// `gw += d ⊗ x`, `gb += d`.
fn outer_accumulate(gw: &mut [f64], gb: &mut [f64], d: &[f64], x: &[f64]) {
    let n_in = x.len();
    for (r, dv) in d.iter().enumerate() {
        for (g, xv) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(x) {
            *g += dv * xv;
        }
        gb[r] += dv;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    for v in z {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: &[f64]) -> ModelSpec {
        ModelSpec::Quadratic {
            center: ParamVector::new(c.to_vec()),
        }
    }

    fn binary_batch(counts: (usize, usize)) -> Batch {
        let n = counts.0 + counts.1;
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= counts.0)).collect();
        let inputs = (0..n).flat_map(|i| [i as f64 * 0.3 - 1.0, 0.5]).collect();
        Batch::new(inputs, labels, 2).unwrap()
    }

    #[test]
    fn quadratic_loss_and_grad() {
        let b = binary_batch((1, 1));
        let spec = quad(&[2.0]);
        assert_eq!(spec.loss(&ParamVector::new(vec![2.0]), &b).unwrap(), 0.0);
        assert_eq!(spec.loss(&ParamVector::new(vec![0.0]), &b).unwrap(), 2.0);
        assert_eq!(spec.grad(&ParamVector::new(vec![0.0]), &b).unwrap().as_slice(), &[-2.0]);
        assert_eq!(spec.grad(&ParamVector::new(vec![2.0]), &b).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 2,
            num_classes: 2,
        };
        let loss = spec
            .loss(&ParamVector::zeros(spec.dim()), &binary_batch((4, 4)))
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ties_resolve_to_class_zero() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 2,
            num_classes: 2,
        };
        let acc = spec
            .accuracy(&ParamVector::zeros(spec.dim()), &binary_batch((7, 3)))
            .unwrap();
        assert_eq!(acc, 0.7);
    }

    #[test]
    fn accuracy_extremes() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 1,
            num_classes: 2,
        };
        let batch = Batch::new(vec![-1.0, -2.0, 1.0, 2.0], vec![0, 0, 1, 1], 1).unwrap();
        // class-1 score = 5x, class-0 score = -5x
        let fitted = ParamVector::new(vec![-5.0, 5.0, 0.0, 0.0]);
        assert_eq!(spec.accuracy(&fitted, &batch).unwrap(), 1.0);
        let flipped = Batch::new(vec![-1.0, -2.0, 1.0, 2.0], vec![1, 1, 0, 0], 1).unwrap();
        assert_eq!(spec.accuracy(&fitted, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_has_no_accuracy() {
        let spec = quad(&[1.0]);
        assert!(spec.accuracy(&ParamVector::zeros(1), &binary_batch((1, 1))).is_err());
    }

    #[test]
    fn dimension_and_label_errors() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 2,
            num_classes: 2,
        };
        let b = binary_batch((2, 2));
        assert!(matches!(
            spec.loss(&ParamVector::zeros(5), &b),
            Err(Error::DimensionMismatch { expected: 6, found: 5 })
        ));
        let bad = Batch::new(vec![0.0, 0.0], vec![2], 2).unwrap();
        assert!(spec.loss(&ParamVector::zeros(6), &bad).is_err());
        assert!(Batch::new(vec![], vec![], 2).is_err());
    }

    #[test]
    fn mlp_dimension_and_init_bounds() {
        let spec = ModelSpec::Mlp {
            input_dim: 4,
            hidden_dim: 3,
            num_classes: 2,
        };
        assert_eq!(spec.dim(), 4 * 3 + 3 + 2 * 3 + 2);
        let w = spec.init_params(RngStream::new(1, 0, 0));
        assert_eq!(w.len(), spec.dim());
        assert!(w.as_slice()[..15].iter().all(|v| v.abs() <= 0.5));
        assert!(w.as_slice()[15..].iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
        assert_eq!(w, spec.init_params(RngStream::new(1, 0, 0)));
    }

    #[test]
    fn loss_is_stable_for_huge_logits() {
        let spec = ModelSpec::LogisticRegression {
            input_dim: 1,
            num_classes: 2,
        };
        let batch = Batch::new(vec![1.0], vec![0], 1).unwrap();
        let w = ParamVector::new(vec![0.0, 1e4, 0.0, 0.0]);
        let (loss, g) = spec.loss_and_grad(&w, &batch).unwrap();
        assert!((loss - 1e4).abs() < 1e-9);
        assert!(g.is_finite());
    }
}
