//! Feed-forward recall network: dropout, linear, GELU, layer norm, dropout,
//! linear, sigmoid. Computation is in f64 over row-major batches.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::model::ModelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROBABILITY_CLAMP: f64 = 1e-7;
pub const DEFAULT_HIDDEN: usize = 768;

/// Parameters (or gradients, or optimizer moments) of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// `hidden x input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub w2: Array1<f64>,
    /// Output bias, a single element.
    pub b2: Array1<f64>,
}

impl NetworkParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            gamma: Array1::zeros(hidden),
            beta: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: Array1::zeros(1),
        }
    }

    /// Glorot-uniform weights, zero biases, unit gain. Values are f32-representable.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-a1..=a1));
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        p.w2.mapv_inplace(|_| rng.random_range(-a2..=a2));
        p.gamma.fill(1.0);
        p.round_to_f32();
        p
    }

    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.gamma.as_slice().expect("standard layout"),
            self.beta.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.gamma.as_slice_mut().expect("standard layout"),
            self.beta.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss(probability: f64, label: f64) -> f64 {
    let p = probability.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Inverted-dropout masks: each entry is 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl DropoutMasks {
    /// `None` when `rate` is 0.
    pub fn sample(rng: &mut impl Rng, batch: usize, input: usize, hidden: usize, rate: f64) -> Option<Self> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep });
        let input = draw((batch, input));
        let hidden = draw((batch, hidden));
        Some(Self { input, hidden })
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    hidden_mask: Option<Array2<f64>>,
    hidden_out: Array2<f64>,
    logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, stage: &'static str) -> Result<(), ModelError> {
    if values.into_iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonfiniteActivation(stage))
    }
}

/// Forward pass over a batch of rows. Dropout applies only when `masks` is given.
pub fn forward_batch(params: &NetworkParams, x: ArrayView2<'_, f64>, masks: Option<&DropoutMasks>) -> Result<ForwardCache, ModelError> {
    if x.ncols() != params.input_width() {
        return Err(ModelError::DimensionMismatch {
            expected: params.input_width(),
            found: x.ncols(),
        });
    }
    let input = match masks {
        Some(m) => &x * &m.input,
        None => x.to_owned(),
    };
    let mut z1 = input.dot(&params.w1.t());
    z1 += &params.b1;
    check_finite(z1.iter(), "first linear layer")?;

    let h = params.hidden_width() as f64;
    let mut xhat = z1.mapv(gelu);
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let is = *s;
        row.mapv_inplace(|v| (v - mean) * is);
    }
    let mut hidden_out = &xhat * &params.gamma + &params.beta;
    let hidden_mask = masks.map(|m| m.hidden.clone());
    if let Some(m) = &hidden_mask {
        hidden_out *= m;
    }
    let logits = hidden_out.dot(&params.w2) + params.b2[0];
    check_finite(logits.iter(), "output layer")?;
    let probabilities = logits.mapv(sigmoid);
    Ok(ForwardCache {
        input,
        z1,
        xhat,
        inv_std,
        hidden_mask,
        hidden_out,
        logits,
        probabilities,
    })
}

/// Eval-mode probability for one input row.
pub fn forward(params: &NetworkParams, input: &[f64]) -> Result<f64, ModelError> {
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row shape");
    Ok(forward_batch(params, x, None)?.probabilities[0])
}

/// Mean loss over the cached batch.
pub fn batch_loss(cache: &ForwardCache, labels: &[f64]) -> f64 {
    cache.probabilities.iter().zip(labels).map(|(p, y)| loss(*p, *y)).sum::<f64>() / labels.len().max(1) as f64
}

/// Gradients of the mean batch loss, holding the cached dropout masks fixed.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, labels: &[f64]) -> NetworkParams {
    let n = labels.len() as f64;
    let h = params.hidden_width() as f64;
    let dz2: Array1<f64> = Zip::from(&cache.probabilities).and(&cache.logits).and(labels).map_collect(|&p, _, &y| {
        if (PROBABILITY_CLAMP..=1.0 - PROBABILITY_CLAMP).contains(&p) {
            (p - y) / n
        } else {
            0.0
        }
    });

    let mut grads = NetworkParams::zeros(params.input_width(), params.hidden_width());
    grads.w2 = cache.hidden_out.t().dot(&dz2);
    grads.b2[0] = dz2.sum();

    // d(hidden_out) then back through the second dropout.
    let mut dy = dz2.view().insert_axis(Axis(1)).dot(&params.w2.view().insert_axis(Axis(0)));
    if let Some(m) = &cache.hidden_mask {
        dy *= m;
    }
    grads.gamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    grads.beta = dy.sum_axis(Axis(0));

    let mut dz1 = dy * &params.gamma;
    for ((mut row, xh), (&is, z)) in dz1
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter().zip(cache.z1.axis_iter(Axis(0))))
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xh.iter()).map(|(d, x)| d * x).sum::<f64>() / h;
        Zip::from(&mut row).and(&xh).and(&z).for_each(|d, &x, &zv| {
            *d = is * (*d - mean_d - x * mean_dx) * gelu_derivative(zv);
        });
    }
    grads.w1 = dz1.t().dot(&cache.input);
    grads.b1 = dz1.sum_axis(Axis(0));
    grads
}

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: NetworkParams,
    v: NetworkParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &NetworkParams, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = NetworkParams::zeros(params.input_width(), params.hidden_width());
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
