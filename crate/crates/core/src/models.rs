//! Small multilayer perceptrons with hand-written reverse mode, the feature
//! map (trunk, normalization, score head and label embedding), the generator,
//! optimizers and the checkpoint format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{normalize_vjp, norm, Matrix, Rng, EPS_NORM};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Leaky ReLU with negative slope 0.2.
    LeakyRelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// Fully connected network. Hidden layers use `activation`; the last layer
/// is affine. Parameters live in one flat buffer, layer by layer, each layer
/// stored as its `in x out` weight matrix (row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    version: u64,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    version: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of hidden layers.
    pre: Vec<Matrix>,
}

impl Mlp {
    /// Zero-initialized network.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least two positive layer widths, got {widths:?}"
            )));
        }
        let count = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; count],
            version: 0,
        })
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Mlp::zeros(widths, activation)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = std * rng.normal();
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates tapes recorded before the call.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape_err(
                format!("{} parameters", self.params.len()),
                format!("{}", params.len()),
            ));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.widths.len() - 1);
        let mut offset = 0;
        for w in self.widths.windows(2) {
            out.push((offset, w[0], w[1]));
            offset += (w[0] + 1) * w[1];
        }
        out
    }

    /// Weight (`in x out`, row-major) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, fi, fo) = self.layer_offsets()[l];
        (&self.params[off..off + fi * fo], &self.params[off + fi * fo..off + (fi + 1) * fo])
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, MlpTape)> {
        if batch.cols() != self.input_dim() {
            return Err(shape_err(
                format!("input of width {}", self.input_dim()),
                format!("width {}", batch.cols()),
            ));
        }
        let layers = self.layer_offsets();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len().saturating_sub(1));
        let mut x = batch.clone();
        for (l, &(off, fi, fo)) in layers.iter().enumerate() {
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + (fi + 1) * fo];
            let mut z = Matrix::zeros(x.rows(), fo);
            for i in 0..x.rows() {
                let xi = x.row(i);
                let zi = z.row_mut(i);
                zi.copy_from_slice(b);
                for (p, &xv) in xi.iter().enumerate() {
                    if xv != 0.0 {
                        let wr = &w[p * fo..(p + 1) * fo];
                        for (zj, wj) in zi.iter_mut().zip(wr) {
                            *zj += xv * wj;
                        }
                    }
                }
            }
            let last = l + 1 == layers.len();
            inputs.push(std::mem::replace(&mut x, Matrix::zeros(0, 0)));
            if last {
                x = z;
            } else {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                pre.push(z);
                x = a;
            }
        }
        Ok((
            x,
            MlpTape {
                version: self.version,
                inputs,
                pre,
            },
        ))
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// (flat, same layout as [`Mlp::params`]) and the input batch.
    pub fn backward(&self, tape: &MlpTape, upstream: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                model: self.version,
            });
        }
        let layers = self.layer_offsets();
        let n = tape.inputs[0].rows();
        if upstream.shape() != (n, self.output_dim()) {
            return Err(shape_err(
                format!("upstream of shape ({n}, {})", self.output_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = upstream.clone();
        for (l, &(off, fi, fo)) in layers.iter().enumerate().rev() {
            if l + 1 != layers.len() {
                // g is d/d(activation output); move it to the pre-activation
                let z = &tape.pre[l];
                let a = &tape.inputs[l + 1];
                for ((gv, zv), av) in g.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                    *gv *= self.activation.derivative(*zv, *av);
                }
            }
            let x = &tape.inputs[l];
            let w = &self.params[off..off + fi * fo];
            let (gw, gb) = grads[off..off + (fi + 1) * fo].split_at_mut(fi * fo);
            let mut gx = Matrix::zeros(n, fi);
            for i in 0..n {
                let gi = g.row(i);
                let xi = x.row(i);
                for (b, v) in gb.iter_mut().zip(gi) {
                    *b += v;
                }
                let gxi = gx.row_mut(i);
                for p in 0..fi {
                    let wr = &w[p * fo..(p + 1) * fo];
                    let gwr = &mut gw[p * fo..(p + 1) * fo];
                    let xv = xi[p];
                    let mut acc = 0.0;
                    for j in 0..fo {
                        gwr[j] += xv * gi[j];
                        acc += wr[j] * gi[j];
                    }
                    gxi[p] = acc;
                }
            }
            g = gx;
        }
        Ok((grads, g))
    }
}

/// Discriminator feature map `phi = phi_un / |phi_un|` with an optional
/// linear score head and label embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub trunk: Mlp,
    pub normalize_output: bool,
    pub score_head: Option<Vec<f64>>,
    pub label_embedding: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct FeatureTape {
    trunk: MlpTape,
    phi: Matrix,
    norms: Vec<f64>,
    normalized: bool,
}

#[derive(Debug, Clone)]
pub struct FeatureOutput {
    pub phi: Matrix,
    pub phi_un: Matrix,
    pub tape: FeatureTape,
}

/// Parameter gradients of a [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrads {
    pub trunk: Vec<f64>,
    pub score_head: Option<Vec<f64>>,
    pub label_embedding: Option<Matrix>,
}

impl FeatureGrads {
    pub fn zeros_like(fm: &FeatureMap) -> Self {
        FeatureGrads {
            trunk: vec![0.0; fm.trunk.param_count()],
            score_head: fm.score_head.as_ref().map(|t| vec![0.0; t.len()]),
            label_embedding: fm
                .label_embedding
                .as_ref()
                .map(|v| Matrix::zeros(v.rows(), v.cols())),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.trunk.clone();
        if let Some(t) = &self.score_head {
            out.extend_from_slice(t);
        }
        if let Some(v) = &self.label_embedding {
            out.extend_from_slice(v.as_slice());
        }
        out
    }
}

impl FeatureMap {
    /// Trunk `input_dim -> hidden x hidden_layers -> feature_dim` with
    /// leaky-ReLU hidden activations.
    pub fn new(
        input_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        feature_dim: usize,
        normalize_output: bool,
        score_head: bool,
        num_classes: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat(hidden).take(hidden_layers));
        widths.push(feature_dim);
        let trunk = Mlp::new(&widths, Activation::LeakyRelu, rng)?;
        let std = (1.0 / feature_dim as f64).sqrt();
        let score_head = score_head.then(|| (0..feature_dim).map(|_| std * rng.normal()).collect());
        let label_embedding = num_classes.map(|c| {
            Matrix::from_vec_unchecked(c, feature_dim, (0..c * feature_dim).map(|_| std * rng.normal()).collect())
        });
        Ok(FeatureMap {
            trunk,
            normalize_output,
            score_head,
            label_embedding,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.score_head.as_ref().map_or(0, Vec::len)
            + self.label_embedding.as_ref().map_or(0, |v| v.as_slice().len())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.trunk.params().to_vec();
        if let Some(t) = &self.score_head {
            out.extend_from_slice(t);
        }
        if let Some(v) = &self.label_embedding {
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape_err(
                format!("{} parameters", self.param_count()),
                format!("{}", flat.len()),
            ));
        }
        let nt = self.trunk.param_count();
        self.trunk.set_params(&flat[..nt])?;
        let mut off = nt;
        if let Some(t) = &mut self.score_head {
            let len = t.len();
            t.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        if let Some(v) = &mut self.label_embedding {
            let len = v.as_slice().len();
            v.as_mut_slice().copy_from_slice(&flat[off..off + len]);
        }
        Ok(())
    }

    pub fn apply(&self, batch: &Matrix) -> Result<FeatureOutput> {
        let (phi_un, trunk) = self.trunk.forward(batch)?;
        let mut phi = phi_un.clone();
        let mut norms = Vec::new();
        if self.normalize_output {
            norms.reserve(phi.rows());
            for i in 0..phi.rows() {
                let row = phi.row_mut(i);
                let n = norm(row);
                if !(n > EPS_NORM) {
                    return Err(Error::DegenerateNorm { norm: n });
                }
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
        }
        Ok(FeatureOutput {
            tape: FeatureTape {
                trunk,
                phi: phi.clone(),
                norms,
                normalized: self.normalize_output,
            },
            phi,
            phi_un,
        })
    }

    /// Unnormalized features only.
    pub fn apply_unnormalized(&self, batch: &Matrix) -> Result<(Matrix, MlpTape)> {
        self.trunk.forward(batch)
    }

    /// Pulls a gradient on `phi` back to the trunk parameters and inputs.
    pub fn backward(&self, tape: &FeatureTape, grad_phi: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        if grad_phi.shape() != tape.phi.shape() {
            return Err(shape_err(format!("{:?}", tape.phi.shape()), format!("{:?}", grad_phi.shape())));
        }
        let grad_un = if tape.normalized {
            let mut g = Matrix::zeros(grad_phi.rows(), grad_phi.cols());
            for i in 0..g.rows() {
                normalize_vjp(tape.phi.row(i), tape.norms[i], grad_phi.row(i), g.row_mut(i));
            }
            g
        } else {
            grad_phi.clone()
        };
        self.trunk.backward(&tape.trunk, &grad_un)
    }

    /// Linear scores `<theta, phi>` of each row.
    pub fn scores(&self, phi: &Matrix) -> Result<Vec<f64>> {
        let theta = self
            .score_head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("feature map has no score head".into()))?;
        Ok(phi.iter_rows().map(|r| crate::numerics::dot(r, theta)).collect())
    }
}

/// Generator `z (+ one-hot label) -> x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: Mlp,
    pub latent_dim: usize,
    pub num_classes: Option<usize>,
}

impl Generator {
    /// `latent (+ classes) -> hidden x hidden_layers -> data_dim`, tanh hidden
    /// activations.
    pub fn new(
        latent_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        data_dim: usize,
        num_classes: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![latent_dim + num_classes.unwrap_or(0)];
        widths.extend(std::iter::repeat(hidden).take(hidden_layers));
        widths.push(data_dim);
        Ok(Generator {
            net: Mlp::new(&widths, Activation::Tanh, rng)?,
            latent_dim,
            num_classes,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input(&self, z: &Matrix, labels: Option<&[usize]>) -> Result<Matrix> {
        if z.cols() != self.latent_dim {
            return Err(shape_err(format!("latent width {}", self.latent_dim), format!("{}", z.cols())));
        }
        match (self.num_classes, labels) {
            (None, _) => Ok(z.clone()),
            (Some(_), None) => Err(Error::InvalidArgument("conditional generator needs labels".into())),
            (Some(c), Some(labels)) => {
                if labels.len() != z.rows() {
                    return Err(shape_err(format!("{} labels", z.rows()), format!("{}", labels.len())));
                }
                let mut m = Matrix::zeros(z.rows(), self.latent_dim + c);
                for (i, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(Error::InvalidArgument(format!("label {y} out of range")));
                    }
                    let row = m.row_mut(i);
                    row[..self.latent_dim].copy_from_slice(z.row(i));
                    row[self.latent_dim + y] = 1.0;
                }
                Ok(m)
            }
        }
    }

    pub fn forward(&self, z: &Matrix, labels: Option<&[usize]>) -> Result<(Matrix, MlpTape)> {
        self.net.forward(&self.input(z, labels)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3, 0.5, 0.999)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One in-place update. SGD: `p -= lr g`. Adam: bias-corrected moments.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<()> {
    if !(config.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", config.lr)));
    }
    if params.len() != grads.len() {
        return Err(shape_err(format!("{} gradients", params.len()), format!("{}", grads.len())));
    }
    match config.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= config.lr * g;
            }
            state.t += 1;
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.t = 0;
            }
            state.t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(state.t as i32);
            let c2 = 1.0 - b2.powi(state.t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
    }
    Ok(())
}

/// Named arrays in a line-oriented text file:
///
/// ```text
/// kdd-checkpoint 1
/// array <name> <rows> <cols>
/// <rows * cols values, space separated, shortest round-trip exponent form>
/// ...
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Matrix)>,
}

pub const CHECKPOINT_MAGIC: &str = "kdd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn push(&mut self, name: &str, m: Matrix) {
        self.arrays.push((name.to_string(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (name, m) in &self.arrays {
            let _ = writeln!(out, "array {name} {} {}", m.rows(), m.cols());
            let values: Vec<String> = m.as_slice().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse("missing checkpoint header".into()));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let mut ckpt = Checkpoint::default();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "array" {
                return Err(Error::Parse(format!("bad array header: {line}")));
            }
            let rows: usize = parts[2].parse().map_err(|_| Error::Parse(format!("bad rows in {line}")))?;
            let cols: usize = parts[3].parse().map_err(|_| Error::Parse(format!("bad cols in {line}")))?;
            let body = lines.next().unwrap_or("");
            let data = body
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value {v}"))))
                .collect::<Result<Vec<_>>>()?;
            ckpt.push(parts[1], Matrix::from_vec(rows, cols, data)?);
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, relative_error};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_net_outputs_final_bias() {
        let mut net = Mlp::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(net.param_count(), 4 * 4 + 5 * 2);
        let n = net.param_count();
        net.params_mut()[n - 2..].copy_from_slice(&[0.5, -1.5]);
        let mut rng = Rng::seeded(1);
        let (out, _) = net.forward(&random_batch(&mut rng, 3, 3)).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_layer() {
        let mut net = Mlp::zeros(&[3, 3], Activation::Tanh).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        let mut rng = Rng::seeded(2);
        let x = random_batch(&mut rng, 4, 3);
        assert_eq!(net.forward(&x).unwrap().0, x);
        assert!(Mlp::zeros(&[3], Activation::Tanh).is_err());
        assert!(net.forward(&random_batch(&mut rng, 2, 4)).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::seeded(3);
        let net = Mlp::new(&[2, 16, 16, 3], Activation::LeakyRelu, &mut rng).unwrap();
        let x = random_batch(&mut rng, 8, 2);
        let a = net.forward(&x).unwrap().0;
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn backward_edge_cases() {
        let mut rng = Rng::seeded(4);
        let mut net = Mlp::new(&[2, 5, 3], Activation::Tanh, &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, 2);
        let (_, tape) = net.forward(&x).unwrap();
        let (gp, gx) = net.backward(&tape, &Matrix::zeros(4, 3)).unwrap();
        assert!(gp.iter().all(|v| *v == 0.0) && gx.as_slice().iter().all(|v| *v == 0.0));
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&tape, &Matrix::zeros(4, 3)), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn single_linear_layer_closed_form() {
        let mut rng = Rng::seeded(5);
        let net = Mlp::new(&[3, 2], Activation::Tanh, &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, 3);
        let up = random_batch(&mut rng, 4, 2);
        let (_, tape) = net.forward(&x).unwrap();
        let (gp, gx) = net.backward(&tape, &up).unwrap();
        for p in 0..3 {
            for j in 0..2 {
                let expected: f64 = (0..4).map(|i| x.get(i, p) * up.get(i, j)).sum();
                assert!((gp[p * 2 + j] - expected).abs() < 1e-12);
            }
        }
        for j in 0..2 {
            let expected: f64 = (0..4).map(|i| up.get(i, j)).sum();
            assert!((gp[6 + j] - expected).abs() < 1e-12);
        }
        let (w, _) = net.layer(0);
        for i in 0..4 {
            for p in 0..3 {
                let expected = dot(&w[p * 2..p * 2 + 2], up.row(i));
                assert!((gx.get(i, p) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        for (seed, act) in [(6, Activation::Tanh), (7, Activation::LeakyRelu)] {
            let mut rng = Rng::seeded(seed);
            let net = Mlp::new(&[3, 6, 1], act, &mut rng).unwrap();
            let x = random_batch(&mut rng, 5, 3);
            let (_, tape) = net.forward(&x).unwrap();
            let (gp, gx) = net.backward(&tape, &Matrix::from_vec(5, 1, vec![1.0; 5]).unwrap()).unwrap();
            let loss = |p: &[f64]| {
                let mut n = net.clone();
                n.set_params(p).unwrap();
                n.forward(&x).unwrap().0.as_slice().iter().sum::<f64>()
            };
            let num = finite_diff_grad(loss, net.params(), 1e-5).unwrap();
            assert!(relative_error(&gp, &num, 1e-8) < 1e-5);
            let num = finite_diff_grad(
                |v| net.forward(&Matrix::from_vec(5, 3, v.to_vec()).unwrap()).unwrap().0.as_slice().iter().sum(),
                x.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(gx.as_slice(), &num, 1e-8) < 1e-5);
        }
    }

    #[test]
    fn feature_map_normalization() {
        let mut rng = Rng::seeded(8);
        let fm = FeatureMap::new(2, 8, 2, 3, true, true, Some(4), &mut rng).unwrap();
        let x = random_batch(&mut rng, 10, 2);
        let out = fm.apply(&x).unwrap();
        for r in out.phi.iter_rows() {
            assert!((crate::numerics::norm(r) - 1.0).abs() < 1e-9);
        }
        let mut raw = fm.clone();
        raw.normalize_output = false;
        let out = raw.apply(&x).unwrap();
        assert_eq!(out.phi, out.phi_un);
        assert_eq!(fm.flat_params().len(), fm.param_count());
    }

    #[test]
    fn feature_map_gradients_through_normalization() {
        let mut rng = Rng::seeded(9);
        let fm = FeatureMap::new(2, 6, 1, 3, true, false, None, &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, 2);
        let up = random_batch(&mut rng, 4, 3);
        let out = fm.apply(&x).unwrap();
        let (gp, gx) = fm.backward(&out.tape, &up).unwrap();
        let f = |p: &[f64]| {
            let mut m = fm.clone();
            m.set_flat_params(p).unwrap();
            dot(m.apply(&x).unwrap().phi.as_slice(), up.as_slice())
        };
        let num = finite_diff_grad(f, &fm.flat_params(), 1e-5).unwrap();
        assert!(relative_error(&gp, &num, 1e-8) < 1e-5);
        let num = finite_diff_grad(
            |v| dot(fm.apply(&Matrix::from_vec(4, 2, v.to_vec()).unwrap()).unwrap().phi.as_slice(), up.as_slice()),
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(gx.as_slice(), &num, 1e-8) < 1e-5);
    }

    #[test]
    fn normalization_preserves_score_signs_at_equal_norms() {
        // Rows with equal |phi_un| have scores scaled by one positive factor.
        let mut rng = Rng::seeded(10);
        let mut net = Mlp::zeros(&[2, 2], Activation::Tanh).unwrap();
        net.params_mut()[0] = 1.0;
        net.params_mut()[3] = 1.0;
        let fm = FeatureMap {
            trunk: net,
            normalize_output: true,
            score_head: Some(vec![0.3, -1.1]),
            label_embedding: None,
        };
        let angles: Vec<f64> = (0..12).map(|_| rng.uniform() * std::f64::consts::TAU).collect();
        let x = Matrix::from_rows(&angles.iter().map(|a| [2.0 * a.cos(), 2.0 * a.sin()]).collect::<Vec<_>>()).unwrap();
        let out = fm.apply(&x).unwrap();
        let s = fm.scores(&out.phi).unwrap();
        let s_un = fm.scores(&out.phi_un).unwrap();
        for (a, b) in s.iter().zip(&s_un) {
            assert_eq!(a.signum(), b.signum());
        }
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax(&s), argmax(&s_un));
    }

    #[test]
    fn conditional_generator_input() {
        let mut rng = Rng::seeded(11);
        let g = Generator::new(2, 4, 1, 2, Some(3), &mut rng).unwrap();
        let z = random_batch(&mut rng, 2, 2);
        let input = g.input(&z, Some(&[2, 0])).unwrap();
        assert_eq!(&input.row(0)[2..], &[0.0, 0.0, 1.0]);
        assert_eq!(&input.row(1)[2..], &[1.0, 0.0, 0.0]);
        assert!(g.input(&z, None).is_err());
        assert!(g.input(&z, Some(&[3, 0])).is_err());
        assert_eq!(g.forward(&z, Some(&[1, 1])).unwrap().0.shape(), (2, 2));
    }

    #[test]
    fn optimizer_examples() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::default();
        optimizer_step(&mut p, &[1.0, 0.0], &mut st, &OptimizerConfig::sgd(10.0)).unwrap();
        assert_eq!(p, vec![-9.0, 2.0]);
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, &OptimizerConfig::sgd(10.0)).unwrap();
        assert_eq!(p, vec![-9.0, 2.0]);
        let mut st = OptimizerState::default();
        let adam = OptimizerConfig::adam(0.01, 0.9, 0.999);
        optimizer_step(&mut p, &[0.0, 0.0], &mut st, &adam).unwrap();
        assert_eq!(p, vec![-9.0, 2.0]);
        assert!(optimizer_step(&mut p, &[0.0, 0.0], &mut st, &OptimizerConfig::sgd(0.0)).is_err());
        assert!(optimizer_step(&mut p, &[0.0], &mut st, &OptimizerConfig::sgd(1.0)).is_err());
    }

    proptest! {
        #[test]
        fn adam_first_step_is_bounded_by_lr(
            g in proptest::collection::vec(-1e3f64..1e3, 1..8),
            lr in 1e-4f64..1.0,
        ) {
            let mut p = vec![0.0; g.len()];
            let mut st = OptimizerState::default();
            optimizer_step(&mut p, &g, &mut st, &OptimizerConfig::adam(lr, 0.5, 0.999)).unwrap();
            for v in &p {
                prop_assert!(v.abs() <= lr * (1.0 + 1e-12));
            }
        }

        #[test]
        fn checkpoint_round_trip(vals in proptest::collection::vec(-1e300f64..1e300, 0..12), cols in 1usize..4) {
            let rows = vals.len() / cols;
            let m = Matrix::from_vec(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let mut c = Checkpoint::default();
            c.push("w", m);
            c.push("bias", Matrix::from_vec(1, 2, vec![1e-310, -0.1]).unwrap());
            prop_assert_eq!(Checkpoint::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        assert!(Checkpoint::from_text("").is_err());
        assert!(Checkpoint::from_text("kdd-checkpoint 2\n").is_err());
        assert!(Checkpoint::from_text("kdd-checkpoint 1\narray w 1 2\n1.0\n").is_err());
        assert!(Checkpoint::from_text("kdd-checkpoint 1\nmatrix w 1 1\n1.0\n").is_err());
    }
}
