use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::aggregation::AggregationSequence;
use crate::error::{invalid, FlockError, Result};
use crate::geometry::Vec2;

/// Shape of the per-node network: `K·p` inputs, tanh hidden layers, linear
/// `q` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    /// History depth `K` of the aggregation sequence.
    pub history_depth: usize,
    /// Features per aggregation row `p`.
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    /// Output width `q`.
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(history_depth: usize, feature_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = Self {
            history_depth,
            feature_dim,
            hidden,
            output_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Flocking network: `K` rows of 6 features in, one acceleration out.
    pub fn flocking(history_depth: usize, hidden: Vec<usize>) -> Result<Self> {
        Self::new(history_depth, crate::controllers::FEATURE_DIM, hidden, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_depth == 0 {
            return Err(invalid("K", "history depth must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(invalid("output_dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "hidden layers must have at least one unit"));
        }
        Ok(())
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.history_depth * self.feature_dim
    }

    /// `(n_out, n_in)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|&(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub n_out: usize,
    pub n_in: usize,
    /// Offset of the row-major `n_out × n_in` weight block.
    pub weights: usize,
    /// Offset of the `n_out` bias block, directly after the weights.
    pub bias: usize,
}

/// Weights and biases of every layer, stored in one flat buffer.
///
/// Layer `l` occupies `[W_l (row-major, out×in) | b_l]`, layers in order.
/// Gradients and Adam moments use the same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: Architecture,
    layout: Vec<LayerLayout>,
    values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layout = Vec::new();
        let mut offset = 0;
        for (n_out, n_in) in arch.layer_dims() {
            layout.push(LayerLayout {
                n_out,
                n_in,
                weights: offset,
                bias: offset + n_out * n_in,
            });
            offset += n_out * n_in + n_out;
        }
        Ok(Self {
            arch: arch.clone(),
            layout,
            values: vec![0.0; offset],
        })
    }

    /// Rebuilds parameters from a flat buffer in the documented layout.
    pub fn from_flat(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(FlockError::Dimension(format!(
                "{} parameters for an architecture with {}",
                values.len(),
                p.values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameters", "non-finite value"));
        }
        p.values = values;
        Ok(p)
    }

    /// A zero-filled buffer with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    #[inline]
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    #[inline]
    pub fn n_layers(&self) -> usize {
        self.layout.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let l = self.layout[layer];
        &self.values[l.weights..l.bias]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer];
        &mut self.values[l.weights..l.bias]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = self.layout[layer];
        &self.values[l.bias..l.bias + l.n_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout[layer];
        &mut self.values[l.bias..l.bias + l.n_out]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Glorot-uniform weights on `±√(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(arch)?;
    for layer in 0..params.n_layers() {
        let LayerLayout { n_out, n_in, .. } = params.layout[layer];
        let limit = glorot_limit(n_in, n_out);
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        for w in params.weights_mut(layer) {
            *w = dist.sample(rng);
        }
    }
    Ok(params)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Reusable activation buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// `acts[0]` is the input; `acts[l+1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        let mut acts = vec![vec![0.0; arch.input_dim()]];
        for &h in &arch.hidden {
            acts.push(vec![0.0; h]);
        }
        acts.push(vec![0.0; arch.output_dim]);
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            acts,
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }

    /// Hidden activations of the last forward pass.
    pub fn hidden(&self, layer: usize) -> &[f64] {
        &self.acts[layer + 1]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

impl MlpParams {
    /// Forward pass into `ws`; returns the output slice.
    pub fn forward_into<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(input.len(), self.arch.input_dim());
        ws.acts[0].copy_from_slice(input);
        let last = self.layout.len() - 1;
        for (l, lay) in self.layout.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            let w = &self.values[lay.weights..lay.bias];
            let b = &self.values[lay.bias..lay.bias + lay.n_out];
            for o in 0..lay.n_out {
                let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    acc += wi * xi;
                }
                y[o] = if l == last { acc } else { acc.tanh() };
            }
        }
        ws.output()
    }

    /// Checked forward pass returning an owned output.
    pub fn forward_slice(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.arch.input_dim() {
            return Err(FlockError::Dimension(format!(
                "network expects {} inputs, got {}",
                self.arch.input_dim(),
                input.len()
            )));
        }
        let mut ws = Workspace::new(&self.arch);
        Ok(self.forward_into(input, &mut ws).to_vec())
    }

    /// Adds `scale · ∂‖f(x) − target‖²/∂θ` to `grad` and returns the
    /// unscaled squared error.
    pub(crate) fn accumulate_gradient(
        &self,
        input: &[f64],
        target: &[f64],
        scale: f64,
        grad: &mut MlpParams,
        ws: &mut Workspace,
    ) -> f64 {
        self.forward_into(input, ws);
        let q = self.arch.output_dim;
        let mut sq = 0.0;
        for o in 0..q {
            let e = ws.acts.last().unwrap()[o] - target[o];
            sq += e * e;
            ws.delta[o] = 2.0 * scale * e;
        }
        for l in (0..self.layout.len()).rev() {
            let lay = self.layout[l];
            let x = &ws.acts[l];
            let w = &self.values[lay.weights..lay.bias];
            let delta = &ws.delta[..lay.n_out];
            {
                let gw = &mut grad.values[lay.weights..lay.bias];
                for o in 0..lay.n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut gw[o * lay.n_in..(o + 1) * lay.n_in];
                        for (g, xi) in row.iter_mut().zip(x.iter()) {
                            *g += d * xi;
                        }
                    }
                }
                let gb = &mut grad.values[lay.bias..lay.bias + lay.n_out];
                for (g, d) in gb.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            if l > 0 {
                // Back through W_l, then through the tanh that produced x.
                let prev = &mut ws.delta_prev[..lay.n_in];
                prev.fill(0.0);
                for o in 0..lay.n_out {
                    let d = delta[o];
                    let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
                for (p, h) in prev.iter_mut().zip(x.iter()) {
                    *p *= 1.0 - h * h;
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
        sq
    }
}

/// Network output for one aggregation sequence.
pub fn forward(params: &MlpParams, z: &AggregationSequence) -> Result<Vec2> {
    let arch = params.architecture();
    if z.depth() != arch.history_depth || z.dim() != arch.feature_dim {
        return Err(FlockError::ArchitectureMismatch(format!(
            "sequence is {}x{}, network expects {}x{}",
            z.depth(),
            z.dim(),
            arch.history_depth,
            arch.feature_dim
        )));
    }
    if arch.output_dim != 2 {
        return Err(FlockError::ArchitectureMismatch(format!(
            "network has {} outputs, an action needs 2",
            arch.output_dim
        )));
    }
    let out = params.forward_slice(z.as_flat())?;
    Ok(Vec2::new(out[0], out[1]))
}

/// `B` flattened inputs with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Minibatch {
    pub fn new(input_dim: usize, output_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || inputs.is_empty() {
            return Err(invalid("batch", "empty minibatch"));
        }
        if inputs.len() % input_dim != 0 || targets.len() != inputs.len() / input_dim * output_dim {
            return Err(FlockError::Dimension(format!(
                "{} inputs / {} targets do not form a {input_dim}->{output_dim} batch",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(invalid("batch", "non-finite value"));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, b: usize) -> &[f64] {
        &self.inputs[b * self.input_dim..(b + 1) * self.input_dim]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        &self.targets[b * self.output_dim..(b + 1) * self.output_dim]
    }
}

/// Mean over the batch of the summed squared error, and its exact gradient.
pub fn loss_and_gradient(params: &MlpParams, batch: &Minibatch) -> Result<(f64, MlpParams)> {
    let arch = params.architecture();
    if batch.input_dim != arch.input_dim() || batch.output_dim != arch.output_dim {
        return Err(FlockError::Dimension(format!(
            "batch is {}->{}, network is {}->{}",
            batch.input_dim,
            batch.output_dim,
            arch.input_dim(),
            arch.output_dim
        )));
    }
    let mut grad = params.zeros_like();
    let mut ws = Workspace::new(arch);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for b in 0..batch.len() {
        loss += params.accumulate_gradient(batch.input(b), batch.target(b), scale, &mut grad, &mut ws);
    }
    Ok((loss * scale, grad))
}

/// Mean squared error without gradients.
pub fn loss(params: &MlpParams, batch: &Minibatch) -> Result<f64> {
    let mut ws = Workspace::new(params.architecture());
    let mut total = 0.0;
    for b in 0..batch.len() {
        if batch.input(b).len() != params.architecture().input_dim() {
            return Err(FlockError::Dimension("batch width".into()));
        }
        let out = params.forward_into(batch.input(b), &mut ws);
        total += out
            .iter()
            .zip(batch.target(b))
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}
