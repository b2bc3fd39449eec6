use super::graph::{linear_row, Graph, Var};
use super::{Matrix, ParamId, ParamSet};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of a layer name, used to derive its PRNG stream.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Uniform `(-a, a)` matrix with `a = sqrt(1 / fan_in)`, drawn from the
/// stream named `name`.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, seed: u64, name: &str) -> Matrix {
    let a = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let data = (0..rows * cols)
        .map(|_| a * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Affine map `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub in_width: usize,
    pub out_width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new(params: &mut ParamSet, name: &str, in_width: usize, out_width: usize, seed: u64) -> Self {
        let w = uniform_init(out_width, in_width, in_width, seed, &format!("{name}.weight"));
        let b = uniform_init(1, out_width, in_width, seed, &format!("{name}.bias"));
        Self::from_matrices(params, name, w, b)
    }

    pub fn zeros(params: &mut ParamSet, name: &str, in_width: usize, out_width: usize) -> Self {
        let w = Matrix::zeros(out_width, in_width);
        let b = Matrix::zeros(1, out_width);
        Self::from_matrices(params, name, w, b)
    }

    pub fn from_matrices(params: &mut ParamSet, name: &str, weight: Matrix, bias: Matrix) -> Self {
        assert_eq!(bias.shape(), (1, weight.rows()), "bias shape");
        let (out_width, in_width) = weight.shape();
        Self {
            in_width,
            out_width,
            weight: params.add(format!("{name}.weight"), weight),
            bias: params.add(format!("{name}.bias"), bias),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

/// Stack of linear layers with ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

/// Primal output plus the recorded graph of one forward pass.
pub struct GradTape<'p> {
    pub graph: Graph<'p>,
    pub input: Var,
    pub output: Var,
}

impl Mlp {
    /// Layers with the given widths, e.g. `[in, hidden, out]`.
    pub fn new(params: &mut ParamSet, name: &str, widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(params, &format!("{name}.{i}"), w[0], w[1], seed))
            .collect();
        Self { layers }
    }

    /// Two layers with hidden width `factor * input`.
    pub fn two_layer(params: &mut ParamSet, name: &str, input: usize, output: usize, factor: usize, seed: u64) -> Self {
        Self::new(params, name, &[input, factor.max(1) * input, output], seed)
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("empty MLP".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_width != w[1].in_width {
                return Err(Error::ShapeMismatch(format!(
                    "layer widths {} -> {} do not chain",
                    w[0].out_width, w[1].in_width
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_width)
    }

    pub fn last(&self) -> &LinearLayer {
        self.layers.last().expect("non-empty MLP")
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.apply(g, h);
        }
        h
    }

    /// Evaluate one input row without recording a tape.
    pub fn eval_row(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let mut out = vec![0.0; layer.out_width];
            linear_row(&h, params.get(layer.weight), params.get(layer.bias).data(), &mut out);
            h = out;
        }
        h
    }

    /// Batched forward pass over the rows of `x`, keeping the tape.
    pub fn forward<'p>(&self, params: &'p ParamSet, x: &Matrix) -> Result<(Matrix, GradTape<'p>)> {
        if x.cols() != self.in_width() {
            return Err(Error::ShapeMismatch(format!(
                "MLP expects width {}, got {}",
                self.in_width(),
                x.cols()
            )));
        }
        let mut graph = Graph::new(params);
        let input = graph.input(x.clone());
        let output = self.apply(&mut graph, input);
        let y = graph.value(output).clone();
        Ok((y, GradTape { graph, input, output }))
    }
}
