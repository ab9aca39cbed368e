//! Small fully connected networks with hand-written backpropagation, a
//! central-difference gradient checker and the Adam optimizer.
//!
//! Parameters live in one flat vector. Layer `l` maps `sizes[l]` inputs to
//! `sizes[l + 1]` outputs and contributes its weight matrix (row-major,
//! `sizes[l + 1]` rows of `sizes[l]` columns) followed by its bias vector.
//! Hidden layers use `tanh`; the output layer is linear.

use rand::Rng;

use crate::error::{Error, Result};

/// Hidden layer widths used when none are configured.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Borrowed view of one layer's parameters.
#[derive(Debug)]
pub struct LayerView<'a> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: &'a [f64],
    pub biases: &'a [f64],
}

fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Config(
            "a network needs at least an input and an output size".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

impl Network {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let mut params = Vec::with_capacity(param_count_for(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(rng.gen_range(-bound..=bound));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count_for(sizes)],
        })
    }

    /// Rebuild a network from its layer sizes and flattened parameters.
    pub fn from_flat(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        check_sizes(sizes)?;
        let expected = param_count_for(sizes);
        if params.len() != expected {
            return Err(Error::Shape {
                what: "network parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let weights = &self.params[offset..offset + inputs * outputs];
                offset += inputs * outputs;
                let biases = &self.params[offset..offset + outputs];
                offset += outputs;
                LayerView {
                    inputs,
                    outputs,
                    weights,
                    biases,
                }
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut acts = self.forward_cached(input)?;
        Ok(acts.pop().unwrap())
    }

    /// Activations of every layer, input first and output last.
    fn forward_cached(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.input_size() {
            return Err(Error::Shape {
                what: "network input",
                expected: self.input_size(),
                got: input.len(),
            });
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(input.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let x = &acts[l];
            let out: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    let z = layer.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Ok(acts)
    }

    /// Add d(loss)/d(params) for one input to `grad`, given d(loss)/d(output).
    fn backprop_into(&self, acts: &[Vec<f64>], out_grad: &[f64], grad: &mut [f64]) {
        let layers = self.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for layer in &layers {
            offsets.push(offset);
            offset += layer.inputs * layer.outputs + layer.outputs;
        }

        let mut delta = out_grad.to_vec();
        for l in (0..layers.len()).rev() {
            let layer = &layers[l];
            let x = &acts[l];
            let w_off = offsets[l];
            let b_off = w_off + layer.inputs * layer.outputs;
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += d * v;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                // x is the tanh activation of the previous layer
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    /// Analytic gradient of a loss defined on the network outputs.
    ///
    /// `loss_fn` receives one output vector per input and returns the loss
    /// together with d(loss)/d(output) for each of them. The gradient is
    /// flattened in the canonical parameter order.
    pub fn loss_gradient<F>(&self, inputs: &[&[f64]], loss_fn: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
    {
        let caches = inputs
            .iter()
            .map(|x| self.forward_cached(x))
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<Vec<f64>> = caches.iter().map(|c| c.last().unwrap().clone()).collect();
        let (loss, out_grads) = loss_fn(&outputs);
        if out_grads.len() != inputs.len() {
            return Err(Error::Shape {
                what: "output gradients",
                expected: inputs.len(),
                got: out_grads.len(),
            });
        }
        let mut grad = vec![0.0; self.param_count()];
        for (cache, g) in caches.iter().zip(&out_grads) {
            if g.len() != self.output_size() {
                return Err(Error::Shape {
                    what: "output gradient",
                    expected: self.output_size(),
                    got: g.len(),
                });
            }
            self.backprop_into(cache, g, &mut grad);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient (loss = {loss})"
            )));
        }
        Ok((loss, grad))
    }

    /// Largest relative disagreement between [`Network::loss_gradient`] and
    /// central differences of the same loss.
    pub fn finite_diff_check<F>(&self, inputs: &[&[f64]], loss_fn: F, epsilon: f64) -> Result<f64>
    where
        F: Fn(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
    {
        let (_, analytic) = self.loss_gradient(inputs, &loss_fn)?;
        let numeric = central_differences(&self.params, epsilon, |p| {
            let net = Network {
                sizes: self.sizes.clone(),
                params: p.to_vec(),
            };
            let outputs = inputs
                .iter()
                .map(|x| net.forward(x))
                .collect::<Result<Vec<_>>>()?;
            Ok(loss_fn(&outputs).0)
        })?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

/// Central-difference estimate of the gradient of `loss` at `params`.
pub fn central_differences<F>(params: &[f64], epsilon: f64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + epsilon;
        let plus = loss(&p)?;
        p[i] = orig - epsilon;
        let minus = loss(&p)?;
        p[i] = orig;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(1, |a_i|)`.
pub fn max_relative_error(analytic: &[f64], other: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape {
                what: "adam parameters",
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grad.len() != params.len() {
            return Err(Error::Shape {
                what: "adam gradient",
                expected: params.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
