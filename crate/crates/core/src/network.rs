//! Fully-connected network used as the trial function.
//!
//! Layers act on row batches: `T = σ(X·W + b)` with `X` of shape
//! `batch × fan_in`, `W` of shape `fan_in × fan_out` and `b` a `1 × fan_out`
//! row. The output layer is affine (no activation).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Matrix, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_mlp(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit));
            Layer {
                weight,
                bias: Matrix::zeros((1, fan_out)),
            }
        })
        .collect();
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        layers,
    })
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(format!(
            "need at least an input and an output size, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::config(format!("layer sizes must be positive: {layer_sizes:?}")));
    }
    Ok(())
}

/// Layer sizes `[input, hidden × depth, output]`.
pub fn layer_sizes(input: usize, hidden: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(hidden, depth));
    sizes.push(output);
    sizes
}

impl MlpParams {
    pub fn from_layers(layer_sizes: Vec<usize>, activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        if layers.len() != layer_sizes.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layers for {} sizes",
                layers.len(),
                layer_sizes.len()
            )));
        }
        for (i, (layer, w)) in layers.iter().zip(layer_sizes.windows(2)).enumerate() {
            if layer.weight.dim() != (w[0], w[1]) || layer.bias.dim() != (1, w[1]) {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?} / bias {:?}, expected ({}, {}) / (1, {})",
                    layer.weight.dim(),
                    layer.bias.dim(),
                    w[0],
                    w[1],
                    w[1]
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            activation,
            layers,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: `W1, b1, W2, b2, ...`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers every weight and bias as a leaf on `tape`.
    pub fn attach<'t>(&self, tape: &'t Tape) -> TapedMlp<'t> {
        TapedMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
                .collect(),
            activation: self.activation,
            input_dim: self.input_dim(),
        }
    }

    /// Plain evaluation without recording, same arithmetic as the taped path.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        let tape = Tape::new();
        let taped = TapedMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
            activation: self.activation,
            input_dim: self.input_dim(),
        };
        Ok(taped.forward(&tape.constant(input.clone()))?.value().clone())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "weakform-mlp 1").unwrap();
        writeln!(out, "activation {}", self.activation.name()).unwrap();
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(out, "layer_sizes {}", sizes.join(" ")).unwrap();
        for (i, layer) in self.layers.iter().enumerate() {
            write_matrix(&mut out, &format!("weight {i}"), &layer.weight);
            write_matrix(&mut out, &format!("bias {i}"), &layer.bias);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::parse(format!("checkpoint truncated before {what}")));
        if next("header")?.trim() != "weakform-mlp 1" {
            return Err(Error::parse("not a weakform-mlp checkpoint"));
        }
        let activation: Activation = expect_key(next("activation")?, "activation")?.trim().parse()?;
        let layer_sizes = expect_key(next("layer_sizes")?, "layer_sizes")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::parse(format!("layer size `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        validate_sizes(&layer_sizes)?;
        let mut layers = Vec::new();
        for i in 0..layer_sizes.len() - 1 {
            let weight = read_matrix(&mut next, &format!("weight {i}"))?;
            let bias = read_matrix(&mut next, &format!("bias {i}"))?;
            layers.push(Layer { weight, bias });
        }
        Self::from_layers(layer_sizes, activation, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn expect_key<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .ok_or_else(|| Error::parse(format!("expected `{key}`, found `{line}`")))
}

fn write_matrix(out: &mut String, label: &str, m: &Matrix) {
    writeln!(out, "{label} {} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.rows() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", vals.join(" ")).unwrap();
    }
}

fn read_matrix<'a>(next: &mut impl FnMut(&str) -> Result<&'a str>, label: &str) -> Result<Matrix> {
    let header = next(label)?;
    let dims = expect_key(header, label)?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::parse(format!("{label} dims: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::parse(format!("{label}: expected two dimensions")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = next(label)?;
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse(format!("{label} value `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols {
            return Err(Error::parse(format!("{label}: row of {} values, expected {cols}", row.len())));
        }
        data.extend(row);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::parse(e.to_string()))
}

/// Network parameters attached to one tape.
pub struct TapedMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
    input_dim: usize,
}

impl<'t> TapedMlp<'t> {
    /// Parameter variables in the same order as [`MlpParams::tensors`].
    pub fn parameters(&self) -> Vec<&Var<'t>> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, input: &Var<'t>) -> Result<Var<'t>> {
        let width = input.shape().1;
        if width != self.input_dim {
            return Err(Error::Dimension(format!(
                "network expects {} input columns, got {width}",
                self.input_dim
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = h.matmul(w)?.add(b)?;
            h = if i == last {
                z
            } else {
                match self.activation {
                    Activation::Softplus => z.softplus(),
                    Activation::Tanh => z.tanh(),
                }
            };
        }
        Ok(h)
    }
}

/// Affine maps between physical coordinates/outputs and the unit-scaled
/// values the network sees: `ξ = (x - lower) / span`, `u = offset + scale · N(ξ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub lower: Vec<f64>,
    pub span: Vec<f64>,
    pub out_offset: f64,
    pub out_scale: f64,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            span: vec![1.0; dim],
            out_offset: 0.0,
            out_scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn normalize(&self, coords: &Matrix) -> Matrix {
        let mut out = coords.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, span) = (self.lower[j], self.span[j]);
            col.mapv_inplace(|x| (x - lo) / span);
        }
        out
    }

    pub fn denormalize_output(&self, raw: &Matrix) -> Matrix {
        raw.mapv(|v| self.out_offset + self.out_scale * v)
    }
}

/// A network plus its normalisation: maps normalised coordinates on a tape to
/// physical outputs.
pub struct Surrogate<'t, 'n> {
    pub net: TapedMlp<'t>,
    pub norm: &'n Normalization,
}

impl<'t> Surrogate<'t, '_> {
    /// Physical output for normalised input `xi` (`n × d`) as an `n × 1` column.
    pub fn eval_normalized(&self, xi: &Var<'t>) -> Result<Var<'t>> {
        let raw = self.net.forward(xi)?;
        Ok(raw.scale(self.norm.out_scale).add_scalar(self.norm.out_offset)?)
    }

    /// Physical output at physical coordinates (treated as constants).
    pub fn eval(&self, tape: &'t Tape, coords: &Matrix) -> Result<Var<'t>> {
        self.eval_normalized(&tape.constant(self.norm.normalize(coords)))
    }
}

/// Physical predictions at physical coordinates, no tape involved.
pub fn predict_physical(params: &MlpParams, norm: &Normalization, coords: &Matrix) -> Result<Matrix> {
    let raw = params.predict(&norm.normalize(coords))?;
    Ok(norm.denormalize_output(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use proptest::prelude::*;

    #[test]
    fn default_architectures() {
        let sp = init_mlp(&layer_sizes(3, 50, 7, 1), Activation::Softplus, 1).unwrap();
        assert_eq!(sp.layers().len(), 8);
        assert_eq!(sp.layer_sizes(), &[3, 50, 50, 50, 50, 50, 50, 50, 1]);
        let bl = init_mlp(&layer_sizes(2, 20, 8, 1), Activation::Tanh, 1).unwrap();
        assert_eq!(bl.layers().len(), 9);
        assert_eq!(bl.num_parameters(), 2 * 20 + 20 + 7 * (400 + 20) + 20 + 1);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_mlp(&[3, 8, 1], Activation::Tanh, 42).unwrap();
        let b = init_mlp(&[3, 8, 1], Activation::Tanh, 42).unwrap();
        let c = init_mlp(&[3, 8, 1], Activation::Tanh, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 11.0).sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= limit));
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_sizes() {
        assert!(matches!(init_mlp(&[], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[3], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[3, 0, 1], Activation::Tanh, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_propagates_ln2() {
        let mut p = init_mlp(&[2, 4, 3, 1], Activation::Softplus, 0).unwrap();
        p.layers[0].weight.fill(0.0);
        p.layers[1].weight.fill(0.0);
        p.layers[2].weight = array![[1.0], [2.0], [3.0]];
        let out = p.predict(&array![[5.0, -1.0], [0.3, 0.2]]).unwrap();
        let expected = 6.0 * std::f64::consts::LN_2;
        for v in out.iter() {
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn single_affine_layer() {
        let p = MlpParams::from_layers(
            vec![1, 1],
            Activation::Tanh,
            vec![Layer {
                weight: array![[2.0]],
                bias: array![[1.0]],
            }],
        )
        .unwrap();
        assert_eq!(p.predict(&array![[3.0]]).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = init_mlp(&[3, 4, 1], Activation::Tanh, 0).unwrap();
        assert!(matches!(p.predict(&Matrix::zeros((2, 2))), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_rows_match_single_rows_exactly() {
        let p = init_mlp(&layer_sizes(3, 50, 7, 1), Activation::Softplus, 9).unwrap();
        let x = Array2::from_shape_fn((37, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let batch = p.predict(&x).unwrap();
        for k in 0..x.nrows() {
            let single = p.predict(&x.slice(s![k..k + 1, ..]).to_owned()).unwrap();
            assert_eq!(single[[0, 0]], batch[[k, 0]], "row {k}");
        }
    }

    #[test]
    fn odd_network_negates_output() {
        // zero biases + tanh: the whole network is an odd function
        let p = init_mlp(&[2, 6, 6, 1], Activation::Tanh, 5).unwrap();
        let x = array![[0.3, -0.7], [1.2, 0.4], [-0.1, 0.05]];
        let pos = p.predict(&x).unwrap();
        let neg = p.predict(&x.mapv(|v| -v)).unwrap();
        assert_eq!(pos, neg.mapv(|v| -v));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let p = init_mlp(&[2, 5, 4, 1], Activation::Softplus, 3).unwrap();
        let x = array![[0.1, 0.9], [0.4, -0.3], [0.8, 0.2], [-0.5, 0.6]];
        let loss = |p: &MlpParams| {
            let y = p.predict(&x).unwrap();
            y.mapv(|v| v * v).mean().unwrap()
        };
        let tape = Tape::new();
        let net = p.attach(&tape);
        let y = net.forward(&tape.constant(x.clone())).unwrap();
        let l = y.square().mean();
        let grads = tape.grad(&l, &net.parameters()).unwrap();
        let h = 1e-6;
        for (t, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = p.clone();
                plus.tensors_mut()[t][[r, c]] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (g[[r, c]] - fd).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-5, "tensor {t} [{r},{c}]: {} vs {fd}", g[[r, c]]);
            }
        }
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            lower: vec![0.0, 10.0],
            span: vec![1020.0, 2.0],
            out_offset: 201.0,
            out_scale: 1.0,
        };
        let x = array![[510.0, 11.0]];
        assert_eq!(n.normalize(&x), array![[0.5, 0.5]]);
        assert_eq!(n.denormalize_output(&array![[-1.0]]), array![[200.0]]);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(seed in 0u64..1000, depth in 1usize..4, act in 0u8..2) {
            let activation = if act == 0 { Activation::Softplus } else { Activation::Tanh };
            let p = init_mlp(&layer_sizes(3, 7, depth, 2), activation, seed).unwrap();
            let back = MlpParams::from_text(&p.to_text()).unwrap();
            prop_assert_eq!(p, back);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(MlpParams::from_text("hello").is_err());
        let p = init_mlp(&[2, 3, 1], Activation::Tanh, 1).unwrap();
        let text = p.to_text();
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(MlpParams::from_text(&truncated).is_err());
    }
}
