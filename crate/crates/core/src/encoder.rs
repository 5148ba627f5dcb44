//! Dual MLP encoders with L2-normalized outputs and manual backpropagation.
//!
//! Hidden layers apply the configured activation; the last layer is affine
//! and its output is row-normalized onto the unit sphere. The backward pass
//! includes the Jacobian of `x ↦ x/‖x‖`, which is `(I − uuᵀ)/‖x‖`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{child_seed, l2_normalize_rows, norm, seeded_rng, Matrix, UnitEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { layer_dims, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config("MLP widths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order: weight row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.flatten_into(&mut out);
        out
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrite parameters from a flat slice; returns the number consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = seeded_rng(seed);
    let mut params = MlpParams::zeros(spec);
    for l in &mut params.layers {
        let (fan_out, fan_in) = l.weight.shape();
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in l.weight.as_mut_slice() {
            *w = rng.gen_range(-a..a);
        }
    }
    params
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
    /// Layer outputs; `post[0]` is the input batch.
    post: Vec<Matrix>,
    /// Final pre-normalization row norms.
    norms: Vec<f64>,
    pub output: UnitEmbeddings,
}

fn affine(input: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = input.matmul_t(&layer.weight)?;
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

pub fn forward(params: &MlpParams, inputs: &Matrix) -> Result<ForwardTrace> {
    if inputs.cols() != params.spec.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects width {}, got {}",
            params.spec.input_dim(),
            inputs.cols()
        )));
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers + 1);
    post.push(inputs.clone());
    for (k, layer) in params.layers.iter().enumerate() {
        let z = affine(&post[k], layer)?;
        let a = if k + 1 < n_layers {
            z.map(|x| params.spec.activation.apply(x))
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    let last = post.last().expect("at least one layer");
    let norms = last.row_iter().map(norm).collect();
    let output = l2_normalize_rows(last)?;
    Ok(ForwardTrace {
        pre,
        post,
        norms,
        output,
    })
}

/// Forward pass followed by row normalization.
pub fn encode(params: &MlpParams, inputs: &Matrix) -> Result<UnitEmbeddings> {
    forward(params, inputs).map(|t| t.output)
}

/// Parameter gradient given `∂loss/∂output` on the unit-norm outputs.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, upstream: &Matrix) -> Result<MlpParams> {
    let u = trace.output.matrix();
    if upstream.shape() != u.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs output {:?}",
            upstream.shape(),
            u.shape()
        )));
    }
    // Through the normalization: (g − (g·u) u) / ‖x‖.
    let mut delta = upstream.clone();
    for i in 0..delta.rows() {
        let ui = u.row(i);
        let gu: f64 = delta.row(i).iter().zip(ui).map(|(g, x)| g * x).sum();
        let inv = 1.0 / trace.norms[i];
        for (g, &x) in delta.row_mut(i).iter_mut().zip(ui) {
            *g = (*g - gu * x) * inv;
        }
    }

    let mut grads = MlpParams::zeros(&params.spec);
    for k in (0..params.layers.len()).rev() {
        let g = &mut grads.layers[k];
        g.weight = delta.t_matmul(&trace.post[k])?;
        for row in delta.row_iter() {
            for (b, &d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if k > 0 {
            let mut next = delta.matmul(&params.layers[k].weight)?;
            let z = &trace.pre[k - 1];
            let a = &trace.post[k];
            let act = params.spec.activation;
            for ((d, &zv), &av) in next.as_mut_slice().iter_mut().zip(z.as_slice()).zip(a.as_slice()) {
                *d *= act.derivative(zv, av);
            }
            delta = next;
        }
    }
    Ok(grads)
}

/// Recomputes the forward pass, then backpropagates `upstream`.
pub fn encode_backward(params: &MlpParams, inputs: &Matrix, upstream: &Matrix) -> Result<MlpParams> {
    let trace = forward(params, inputs)?;
    backward(params, &trace, upstream)
}

/// Trainable state of one phase: both encoders plus the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderSnapshot {
    pub vision: MlpParams,
    pub language: MlpParams,
    pub temperature: f64,
    pub phase_index: usize,
}

/// Gradient with the same layout as a snapshot's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub vision: MlpParams,
    pub language: MlpParams,
}

impl GradientBundle {
    pub fn zeros_like(snapshot: &DualEncoderSnapshot) -> Self {
        Self {
            vision: MlpParams::zeros(&snapshot.vision.spec),
            language: MlpParams::zeros(&snapshot.language.spec),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.vision.flatten();
        self.language.flatten_into(&mut out);
        out
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"MODXSNP1";

impl DualEncoderSnapshot {
    pub fn init(vision: &MlpSpec, language: &MlpSpec, temperature: f64, seed: u64) -> Result<Self> {
        vision.validate()?;
        language.validate()?;
        if vision.output_dim() != language.output_dim() {
            return Err(Error::Config(format!(
                "vision and language embedding widths differ ({} vs {})",
                vision.output_dim(),
                language.output_dim()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::NonpositiveTemperature(temperature));
        }
        Ok(Self {
            vision: init_params(vision, child_seed(seed, 1)),
            language: init_params(language, child_seed(seed, 2)),
            temperature,
            phase_index: 0,
        })
    }

    pub fn num_params(&self) -> usize {
        self.vision.num_params() + self.language.num_params()
    }

    /// Vision parameters followed by language parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.vision.flatten();
        self.language.flatten_into(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let used = self.vision.load_flat(flat)?;
        self.language.load_flat(&flat[used..])?;
        Ok(())
    }

    pub fn encode_pair(&self, vision: &Matrix, language: &Matrix) -> Result<(UnitEmbeddings, UnitEmbeddings)> {
        Ok((encode(&self.vision, vision)?, encode(&self.language, language)?))
    }

    /// Little-endian binary layout:
    ///
    /// ```text
    /// magic "MODXSNP1" | phase_index u64 | temperature f64
    /// per branch (vision, language):
    ///   activation u32 | n_dims u32 | dims u64 × n_dims | params f64 × count
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_params());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.phase_index as u64).to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        for branch in [&self.vision, &self.language] {
            out.extend_from_slice(&branch.spec.activation.tag().to_le_bytes());
            out.extend_from_slice(&(branch.spec.layer_dims.len() as u32).to_le_bytes());
            for &d in &branch.spec.layer_dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for p in branch.flatten() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err("bad magic".into());
        }
        let phase_index = r.u64()? as usize;
        let temperature = r.f64()?;
        let mut branches = Vec::with_capacity(2);
        for _ in 0..2 {
            let tag = r.u32()?;
            let activation = Activation::from_tag(tag).ok_or_else(|| format!("unknown activation tag {tag}"))?;
            let n_dims = r.u32()? as usize;
            if n_dims > 1024 {
                return Err(format!("implausible layer count {n_dims}"));
            }
            let dims = (0..n_dims)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let spec = MlpSpec::new(dims, activation).map_err(|e| e.to_string())?;
            let mut params = MlpParams::zeros(&spec);
            let count = params.num_params();
            let flat = (0..count)
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            params.load_flat(&flat).map_err(|e| e.to_string())?;
            branches.push(params);
        }
        if r.at != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.at));
        }
        let language = branches.pop().expect("two branches");
        let vision = branches.pop().expect("two branches");
        Ok(Self {
            vision,
            language,
            temperature,
            phase_index,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err("unexpected end of snapshot".into()),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::seeded_rng;

    fn spec(dims: &[usize], act: Activation) -> MlpSpec {
        MlpSpec::new(dims.to_vec(), act).unwrap()
    }

    /// Scalar objective `Σ W ⊙ encode(x)` with fixed random weights `W`.
    fn probe_loss(params: &MlpParams, x: &Matrix, w: &Matrix) -> f64 {
        let u = encode(params, x).unwrap();
        u.matrix().as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn grad_check(dims: &[usize], act: Activation, seed: u64) -> f64 {
        let s = spec(dims, act);
        let mut params = init_params(&s, seed);
        // Nonzero biases so their gradients are exercised.
        let mut rng = seeded_rng(seed + 100);
        for l in &mut params.layers {
            for b in &mut l.bias {
                *b = 0.1 * crate::numeric::gaussian(&mut rng);
            }
        }
        let x = Matrix::gaussian(4, dims[0], &mut rng);
        let w = Matrix::gaussian(4, *dims.last().unwrap(), &mut rng);
        let analytic = encode_backward(&params, &x, &w).unwrap().flatten();

        let base = params.flatten();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut p = params.clone();
            let mut plus = base.clone();
            plus[k] += h;
            p.load_flat(&plus).unwrap();
            let fp = probe_loss(&p, &x, &w);
            let mut minus = base.clone();
            minus[k] -= h;
            p.load_flat(&minus).unwrap();
            let fm = probe_loss(&p, &x, &w);
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (numeric - analytic[k]).abs() / (numeric.abs() + analytic[k].abs()).max(1e-4);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn identity_layer_reduces_to_normalization() {
        let mut p = MlpParams::zeros(&spec(&[2, 2], Activation::Tanh));
        p.layers[0].weight = Matrix::identity(2);
        let u = encode(&p, &Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert!((u.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((u.row(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_normalized_bias() {
        let mut p = init_params(&spec(&[3, 2], Activation::Tanh), 4);
        p.layers[0].bias = vec![3.0, -4.0];
        let u = encode(&p, &Matrix::zeros(1, 3)).unwrap();
        assert!((u.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((u.row(0)[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn collapsed_output_is_degenerate() {
        let p = MlpParams::zeros(&spec(&[3, 2], Activation::Tanh));
        assert!(matches!(
            encode(&p, &Matrix::zeros(2, 3)),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn encode_is_deterministic() {
        let s = spec(&[5, 7, 3], Activation::Tanh);
        let p = init_params(&s, 9);
        let x = Matrix::gaussian(6, 5, &mut seeded_rng(1));
        let a = encode(&p, &x).unwrap();
        let b = encode(&p, &x).unwrap();
        assert_eq!(a.matrix().as_slice(), b.matrix().as_slice());
        for r in a.matrix().row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = init_params(&spec(&[5, 3], Activation::Tanh), 0);
        assert!(matches!(
            encode(&p, &Matrix::zeros(1, 4)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let s = spec(&[4, 4], Activation::Tanh);
        assert_eq!(init_params(&s, 3), init_params(&s, 3));
        assert_ne!(init_params(&s, 0), init_params(&s, 1));
        let bound = (6.0f64 / 8.0).sqrt();
        let p = init_params(&s, 3);
        assert!(p.layers[0].weight.as_slice().iter().all(|w| w.abs() < bound));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let s = spec(&[5, 6, 3], Activation::Relu);
        let mut p = init_params(&s, 2);
        for l in &mut p.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.5);
        }
        let x = Matrix::gaussian(4, 5, &mut seeded_rng(3));
        let g = encode_backward(&p, &x, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_jacobian_closed_form() {
        // Single identity layer: grad wrt bias equals (I − uuᵀ) g / ‖x‖.
        let mut p = MlpParams::zeros(&spec(&[2, 2], Activation::Tanh));
        p.layers[0].weight = Matrix::identity(2);
        let x = Matrix::from_rows(&[[3.0, 4.0]]);
        let g = Matrix::from_rows(&[[1.0, 2.0]]);
        let grads = encode_backward(&p, &x, &g).unwrap();
        // u = (0.6, 0.8), g·u = 2.2, (g − 2.2u)/5 = (-0.064, 0.048)
        assert!((grads.layers[0].bias[0] + 0.064).abs() < 1e-15);
        assert!((grads.layers[0].bias[1] - 0.048).abs() < 1e-15);
        // Weight grad is the outer product with the input.
        assert!((grads.layers[0].weight[(0, 0)] + 0.064 * 3.0).abs() < 1e-14);
        assert!((grads.layers[0].weight[(1, 1)] - 0.048 * 4.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            for dims in [&[5usize, 3][..], &[5, 6, 3], &[5, 6, 4, 3]] {
                for seed in 0..3 {
                    let err = grad_check(dims, act, seed);
                    assert!(err < 1e-5, "{act} {dims:?} seed {seed}: rel err {err:e}");
                }
            }
        }
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let p = init_params(&spec(&[4, 5, 3], Activation::Tanh), 8);
        let x = Matrix::gaussian(5, 4, &mut seeded_rng(2));
        let perm = [3, 0, 4, 1, 2];
        let a = encode(&p, &x).unwrap();
        let b = encode(&p, &x.select_rows(&perm)).unwrap();
        assert_eq!(a.select_rows(&perm).matrix(), b.matrix());
    }

    #[test]
    fn snapshot_bytes_round_trip() {
        let v = spec(&[6, 5, 4], Activation::Tanh);
        let l = spec(&[3, 4], Activation::Relu);
        let mut s = DualEncoderSnapshot::init(&v, &l, 0.07, 12).unwrap();
        s.phase_index = 3;
        let bytes = s.to_bytes();
        let back = DualEncoderSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert!(DualEncoderSnapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DualEncoderSnapshot::from_bytes(&bad).is_err());
    }

    #[test]
    fn snapshot_rejects_bad_config() {
        let v = spec(&[6, 4], Activation::Tanh);
        let l = spec(&[3, 5], Activation::Tanh);
        assert!(DualEncoderSnapshot::init(&v, &l, 0.07, 0).is_err());
        let l = spec(&[3, 4], Activation::Tanh);
        assert!(matches!(
            DualEncoderSnapshot::init(&v, &l, 0.0, 0),
            Err(Error::NonpositiveTemperature(_))
        ));
    }
}
