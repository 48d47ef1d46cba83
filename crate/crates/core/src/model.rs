//! Sentence classifiers with exact, hand-derived gradients.
//!
//! * `meanpool`: `logits = Wᵀ mean_rows(X) + b`
//! * `conv`: `F` filters of width `w` over the rows of `X` (zero-padded to
//!   `w` rows when shorter), activation, max-pool over positions, then an
//!   affine map to `C` logits.
//!
//! [`backward`] returns gradients for every parameter and for the input
//! matrix, which the adversarial strategies need for `dL/de`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng as _;

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Architecture {
    #[default]
    MeanPool,
    Conv,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::MeanPool => "meanpool",
            Architecture::Conv => "conv",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanpool" | "meanpool_linear" => Ok(Architecture::MeanPool),
            "conv" | "conv_maxpool" => Ok(Architecture::Conv),
            _ => Err(Error::invalid("arch", format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
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

    /// Derivative expressed through the activation value `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::invalid("activation", format!("unknown activation {s:?}"))),
        }
    }
}

/// Shape hyperparameters for building a classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub filters: usize,
    pub filter_width: usize,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Architecture::MeanPool,
            filters: 8,
            filter_width: 3,
            activation: Activation::Tanh,
        }
    }
}

/// Classifier parameters. The same type holds parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierParams {
    MeanPool {
        /// `d x C`
        weights: Array2<f64>,
        bias: Array1<f64>,
    },
    Conv {
        /// `F x w x d`
        filters: Array3<f64>,
        filter_bias: Array1<f64>,
        /// `F x C`
        out_weights: Array2<f64>,
        out_bias: Array1<f64>,
        activation: Activation,
    },
}

fn glorot(shape_fan: (usize, usize), rng: &mut crate::seed::Rng) -> f64 {
    let limit = (6.0 / (shape_fan.0 + shape_fan.1) as f64).sqrt();
    rng.random_range(-limit..=limit)
}

impl ClassifierParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_classes < 2 {
            return Err(Error::invalid("shape", "need d >= 1 and C >= 2"));
        }
        let mut rng = rng_from_seed(seed);
        Ok(match spec.arch {
            Architecture::MeanPool => ClassifierParams::MeanPool {
                weights: Array2::from_shape_simple_fn((dim, num_classes), || {
                    glorot((dim, num_classes), &mut rng)
                }),
                bias: Array1::zeros(num_classes),
            },
            Architecture::Conv => {
                let (f, w) = (spec.filters, spec.filter_width);
                if f == 0 || w == 0 {
                    return Err(Error::invalid("filters", "need F >= 1 and w >= 1"));
                }
                ClassifierParams::Conv {
                    filters: Array3::from_shape_simple_fn((f, w, dim), || {
                        glorot((w * dim, f), &mut rng)
                    }),
                    filter_bias: Array1::zeros(f),
                    out_weights: Array2::from_shape_simple_fn((f, num_classes), || {
                        glorot((f, num_classes), &mut rng)
                    }),
                    out_bias: Array1::zeros(num_classes),
                    activation: spec.activation,
                }
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ClassifierParams::MeanPool { .. } => Architecture::MeanPool,
            ClassifierParams::Conv { .. } => Architecture::Conv,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierParams::MeanPool { bias, .. } => bias.len(),
            ClassifierParams::Conv { out_bias, .. } => out_bias.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ClassifierParams::MeanPool { weights, .. } => weights.nrows(),
            ClassifierParams::Conv { filters, .. } => filters.dim().2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, values) in out.arrays_mut() {
            values.fill(0.0);
        }
        out
    }

    /// Named flat views of every parameter array, in a fixed order.
    pub fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameters are in standard layout")
        }
        match self {
            ClassifierParams::MeanPool { weights, bias } => {
                vec![("weights", flat(weights)), ("bias", flat(bias))]
            }
            ClassifierParams::Conv {
                filters,
                filter_bias,
                out_weights,
                out_bias,
                ..
            } => vec![
                ("filters", flat(filters)),
                ("filter_bias", flat(filter_bias)),
                ("out_weights", flat(out_weights)),
                ("out_bias", flat(out_bias)),
            ],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameters are in standard layout")
        }
        match self {
            ClassifierParams::MeanPool { weights, bias } => {
                vec![("weights", flat(weights)), ("bias", flat(bias))]
            }
            ClassifierParams::Conv {
                filters,
                filter_bias,
                out_weights,
                out_bias,
                ..
            } => vec![
                ("filters", flat(filters)),
                ("filter_bias", flat(filter_bias)),
                ("out_weights", flat(out_weights)),
                ("out_bias", flat(out_bias)),
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += alpha * other`; `other` must have the same shapes.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src = other.arrays();
        for ((_, dst), (_, src)) in self.arrays_mut().into_iter().zip(src) {
            assert_eq!(dst.len(), src.len(), "parameter shapes differ");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// Intermediates cached by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardTrace {
    MeanPool {
        pooled: Array1<f64>,
        logits: Array1<f64>,
    },
    Conv {
        /// Input zero-padded to at least `w` rows.
        padded: Array2<f64>,
        /// Max-pooled activation per filter.
        pooled: Array1<f64>,
        /// Winning position per filter (first on ties).
        argmax: Vec<usize>,
        /// Margin between the best and second-best position per filter.
        pool_margin: Vec<f64>,
        logits: Array1<f64>,
    },
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array1<f64> {
        match self {
            ForwardTrace::MeanPool { logits, .. } | ForwardTrace::Conv { logits, .. } => logits,
        }
    }

    /// Smallest gap between the winning and runner-up max-pool
    /// activations; `INFINITY` for architectures without pooling choices.
    pub fn min_pool_margin(&self) -> f64 {
        match self {
            ForwardTrace::MeanPool { .. } => f64::INFINITY,
            ForwardTrace::Conv { pool_margin, .. } => {
                pool_margin.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

pub fn forward(params: &ClassifierParams, x: &Array2<f64>) -> Result<(Array1<f64>, ForwardTrace)> {
    let (l, d) = x.dim();
    if l == 0 {
        return Err(Error::invalid("x", "empty input"));
    }
    if d != params.input_dim() {
        return Err(Error::Shape {
            expected: (l, params.input_dim()),
            found: (l, d),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input"));
    }

    match params {
        ClassifierParams::MeanPool { weights, bias } => {
            let pooled = x.mean_axis(Axis(0)).expect("l >= 1");
            let logits = pooled.dot(weights) + bias;
            Ok((
                logits.clone(),
                ForwardTrace::MeanPool { pooled, logits },
            ))
        }
        ClassifierParams::Conv {
            filters,
            filter_bias,
            out_weights,
            out_bias,
            activation,
        } => {
            let (nf, w, _) = filters.dim();
            let rows = l.max(w);
            let mut padded = Array2::zeros((rows, d));
            padded.slice_mut(ndarray::s![..l, ..]).assign(x);
            let positions = rows - w + 1;

            let mut pooled = Array1::zeros(nf);
            let mut argmax = vec![0; nf];
            let mut pool_margin = vec![f64::INFINITY; nf];
            for f in 0..nf {
                let kernel = filters.index_axis(Axis(0), f);
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for t in 0..positions {
                    let window = padded.slice(ndarray::s![t..t + w, ..]);
                    let z = (&window * &kernel).sum() + filter_bias[f];
                    let a = activation.apply(z);
                    if a > best {
                        second = best;
                        best = a;
                        argmax[f] = t;
                    } else if a > second {
                        second = a;
                    }
                }
                pooled[f] = best;
                pool_margin[f] = best - second;
            }
            let logits = pooled.dot(out_weights) + out_bias;
            Ok((
                logits.clone(),
                ForwardTrace::Conv {
                    padded,
                    pooled,
                    argmax,
                    pool_margin,
                    logits,
                },
            ))
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - m).exp());
    let total = exp.sum();
    exp / total
}

/// Softmax cross-entropy `-log softmax(logits)[label]`.
pub fn loss(logits: ArrayView1<'_, f64>, label: usize) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradients of the loss for `label` with respect to every parameter and
/// to `x`.
pub fn backward(
    params: &ClassifierParams,
    x: &Array2<f64>,
    label: usize,
    trace: &ForwardTrace,
) -> Result<(ClassifierParams, Array2<f64>)> {
    let logits = trace.logits();
    if label >= logits.len() {
        return Err(Error::invalid("label", format!("{label} >= C = {}", logits.len())));
    }
    let mut dlogits = softmax(logits.view());
    dlogits[label] -= 1.0;
    let (l, d) = x.dim();

    match (params, trace) {
        (ClassifierParams::MeanPool { weights, .. }, ForwardTrace::MeanPool { pooled, .. }) => {
            let dw = outer(pooled.view(), dlogits.view());
            let dpooled = weights.dot(&dlogits) / l as f64;
            let mut dx = Array2::zeros((l, d));
            for mut row in dx.rows_mut() {
                row.assign(&dpooled);
            }
            Ok((
                ClassifierParams::MeanPool {
                    weights: dw,
                    bias: dlogits,
                },
                dx,
            ))
        }
        (
            ClassifierParams::Conv {
                filters,
                out_weights,
                activation,
                ..
            },
            ForwardTrace::Conv {
                padded,
                pooled,
                argmax,
                ..
            },
        ) => {
            let (nf, w, _) = filters.dim();
            let d_out_weights = outer(pooled.view(), dlogits.view());
            let dpooled = out_weights.dot(&dlogits);
            let mut dfilters = Array3::zeros(filters.dim());
            let mut dfilter_bias = Array1::zeros(nf);
            let mut dpadded = Array2::<f64>::zeros(padded.dim());
            for f in 0..nf {
                let t = argmax[f];
                let dz = dpooled[f] * activation.derivative(pooled[f]);
                if dz == 0.0 {
                    continue;
                }
                dfilter_bias[f] = dz;
                let window = padded.slice(ndarray::s![t..t + w, ..]);
                dfilters
                    .index_axis_mut(Axis(0), f)
                    .scaled_add(dz, &window);
                dpadded
                    .slice_mut(ndarray::s![t..t + w, ..])
                    .scaled_add(dz, &filters.index_axis(Axis(0), f));
            }
            let dx = dpadded.slice(ndarray::s![..l, ..]).to_owned();
            Ok((
                ClassifierParams::Conv {
                    filters: dfilters,
                    filter_bias: dfilter_bias,
                    out_weights: d_out_weights,
                    out_bias: dlogits,
                    activation: *activation,
                },
                dx,
            ))
        }
        _ => Err(Error::invalid("trace", "trace does not match parameters")),
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Loss plus all gradients for one example.
pub fn loss_and_grads(
    params: &ClassifierParams,
    x: &Array2<f64>,
    label: usize,
) -> Result<(f64, ClassifierParams, Array2<f64>)> {
    let (logits, trace) = forward(params, x)?;
    let value = loss(logits.view(), label);
    let (grads, dx) = backward(params, x, label, &trace)?;
    Ok((value, grads, dx))
}

/// Argmax; ties go to the lowest class index.
pub fn argmax(logits: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ClassifierParams, x: &Array2<f64>) -> Result<usize> {
    let (logits, _) = forward(params, x)?;
    Ok(argmax(logits.view()))
}

/// Magic first line of the checkpoint container.
pub const CHECKPOINT_MAGIC: &str = "perturb-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters (and optionally embeddings) as a versioned list of
/// named arrays:
///
/// ```text
/// perturb-lab-checkpoint 1
/// arch conv tanh
/// array filters 3 8 3 16
/// <space-separated values, row-major>
/// ...
/// end
/// ```
pub fn write_checkpoint<W: Write>(
    mut out: W,
    params: &ClassifierParams,
    embeddings: Option<&EmbeddingMatrix>,
) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    match params {
        ClassifierParams::MeanPool { .. } => writeln!(out, "arch meanpool")?,
        ClassifierParams::Conv { activation, .. } => writeln!(out, "arch conv {activation}")?,
    }
    let shapes: Vec<Vec<usize>> = match params {
        ClassifierParams::MeanPool { weights, bias } => {
            vec![weights.shape().to_vec(), bias.shape().to_vec()]
        }
        ClassifierParams::Conv {
            filters,
            filter_bias,
            out_weights,
            out_bias,
            ..
        } => vec![
            filters.shape().to_vec(),
            filter_bias.shape().to_vec(),
            out_weights.shape().to_vec(),
            out_bias.shape().to_vec(),
        ],
    };
    let mut write_array = |name: &str, shape: &[usize], values: &[f64]| -> std::io::Result<()> {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(out, "array {name} {} {}", shape.len(), dims.join(" "))?;
        let vals: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", vals.join(" "))
    };
    for ((name, values), shape) in params.arrays().into_iter().zip(&shapes) {
        write_array(name, shape, values)?;
    }
    if let Some(emb) = embeddings {
        let w = emb.weights();
        write_array(
            "embeddings",
            w.shape(),
            w.as_slice().expect("standard layout"),
        )?;
    }
    writeln!(out, "end")
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ClassifierParams,
    pub embeddings: Option<Array2<f64>>,
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Config(format!("checkpoint: {msg}"));
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file".into()))?
            .map_err(|e| Error::io("<checkpoint>", e))
    };

    let header = next()?;
    let version = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let arch_line = next()?;
    let arch_parts: Vec<&str> = arch_line.split_whitespace().collect();
    let (arch, activation) = match arch_parts.as_slice() {
        ["arch", a] => (a.parse::<Architecture>()?, Activation::Tanh),
        ["arch", a, act] => (a.parse::<Architecture>()?, act.parse::<Activation>()?),
        _ => return Err(bad(format!("bad arch line {arch_line:?}"))),
    };

    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    loop {
        let line = next()?;
        if line.trim() == "end" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 || parts[0] != "array" {
            return Err(bad(format!("bad array header {line:?}")));
        }
        let ndim: usize = parts[2].parse().map_err(|_| bad(format!("bad ndim in {line:?}")))?;
        if parts.len() != 3 + ndim {
            return Err(bad(format!("bad shape in {line:?}")));
        }
        let shape: Vec<usize> = parts[3..]
            .iter()
            .map(|s| s.parse().map_err(|_| bad(format!("bad dim {s:?}"))))
            .collect::<Result<_>>()?;
        let values: Vec<f64> = next()?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("bad value {s:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(bad(format!("array {} has wrong element count", parts[1])));
        }
        arrays.push((parts[1].to_owned(), shape, values));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let pos = arrays
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| bad(format!("missing array {name}")))?;
        let (_, shape, values) = arrays.remove(pos);
        Ok((shape, values))
    };
    let shape_err = |e: ndarray::ShapeError| bad(e.to_string());
    let params = match arch {
        Architecture::MeanPool => {
            let (ws, wv) = take("weights")?;
            let (bs, bv) = take("bias")?;
            ClassifierParams::MeanPool {
                weights: Array2::from_shape_vec(dims2(&ws)?, wv).map_err(shape_err)?,
                bias: Array1::from_shape_vec(dims1(&bs)?, bv).map_err(shape_err)?,
            }
        }
        Architecture::Conv => {
            let (fs, fv) = take("filters")?;
            let (fbs, fbv) = take("filter_bias")?;
            let (ows, owv) = take("out_weights")?;
            let (obs, obv) = take("out_bias")?;
            if fs.len() != 3 {
                return Err(bad("filters must be 3-d".into()));
            }
            ClassifierParams::Conv {
                filters: Array3::from_shape_vec((fs[0], fs[1], fs[2]), fv).map_err(shape_err)?,
                filter_bias: Array1::from_shape_vec(dims1(&fbs)?, fbv).map_err(shape_err)?,
                out_weights: Array2::from_shape_vec(dims2(&ows)?, owv).map_err(shape_err)?,
                out_bias: Array1::from_shape_vec(dims1(&obs)?, obv).map_err(shape_err)?,
                activation,
            }
        }
    };
    let embeddings = match take("embeddings") {
        Ok((s, v)) => Some(Array2::from_shape_vec(dims2(&s)?, v).map_err(shape_err)?),
        Err(_) => None,
    };
    Ok(Checkpoint { params, embeddings })
}

fn dims1(shape: &[usize]) -> Result<usize> {
    match shape {
        [n] => Ok(*n),
        _ => Err(Error::Config(format!("checkpoint: expected 1-d array, got {shape:?}"))),
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Config(format!("checkpoint: expected 2-d array, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_meanpool_gives_zero_logits() {
        let p = ClassifierParams::MeanPool {
            weights: Array2::zeros((3, 2)),
            bias: Array1::zeros(2),
        };
        let (logits, _) = forward(&p, &random_matrix(4, 3, 1)).unwrap();
        assert_eq!(logits, array![0.0, 0.0]);
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let p = ClassifierParams::init(&ModelSpec::default(), 3, 2, 0).unwrap();
        let x = array![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]];
        let (_, trace) = forward(&p, &x).unwrap();
        match trace {
            ForwardTrace::MeanPool { pooled, .. } => assert_eq!(pooled, array![0.5, -1.0, 2.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn conv_pads_short_inputs() {
        let spec = ModelSpec {
            arch: Architecture::Conv,
            filters: 2,
            filter_width: 3,
            ..ModelSpec::default()
        };
        let p = ClassifierParams::init(&spec, 4, 2, 0).unwrap();
        let x = random_matrix(2, 4, 3);
        let (logits, trace) = forward(&p, &x).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        let (_, dx) = backward(&p, &x, 1, &trace).unwrap();
        assert_eq!(dx.dim(), (2, 4));
    }

    #[test]
    fn forward_rejects_non_finite() {
        let p = ClassifierParams::init(&ModelSpec::default(), 2, 2, 0).unwrap();
        assert!(forward(&p, &array![[f64::NAN, 0.0]]).is_err());
        assert!(forward(&p, &Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn loss_examples() {
        assert!((loss(array![0.3, 0.3].view(), 1) - 2f64.ln()).abs() < 1e-15);
        let big = loss(array![1000.0, 0.0].view(), 0);
        assert!(big.is_finite() && big.abs() < 1e-12);
        assert!((loss(Array1::zeros(6).view(), 4) - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(argmax(array![0.2, 0.9].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let diff = (a - b).abs();
        if diff < 1e-9 {
            0.0
        } else {
            diff / a.abs().max(b.abs())
        }
    }

    fn check_gradients(params: &ClassifierParams, x: &Array2<f64>, label: usize) -> f64 {
        let (_, grads, dx) = loss_and_grads(params, x, label).unwrap();
        let objective = |p: &ClassifierParams, x: &Array2<f64>| {
            let (logits, _) = forward(p, x).unwrap();
            loss(logits.view(), label)
        };
        let mut worst: f64 = 0.0;
        let grad_arrays: Vec<Vec<f64>> = grads.arrays().iter().map(|(_, a)| a.to_vec()).collect();
        for (ai, analytic) in grad_arrays.iter().enumerate() {
            for (k, &g) in analytic.iter().enumerate() {
                let numeric = central_difference(
                    |v| {
                        let mut p = params.clone();
                        p.arrays_mut()[ai].1[k] = v;
                        objective(&p, x)
                    },
                    params.arrays()[ai].1[k],
                    1e-4,
                );
                worst = worst.max(rel_err(g, numeric));
            }
        }
        for ((i, j), &g) in dx.indexed_iter() {
            let numeric = central_difference(
                |v| {
                    let mut xp = x.clone();
                    xp[[i, j]] = v;
                    objective(params, &xp)
                },
                x[[i, j]],
                1e-4,
            );
            worst = worst.max(rel_err(g, numeric));
        }
        worst
    }

    #[test]
    fn meanpool_gradients_match_finite_differences() {
        for seed in 0..20 {
            let p = ClassifierParams::init(&ModelSpec::default(), 4, 2, seed).unwrap();
            let x = random_matrix(3, 4, seed + 100);
            let err = check_gradients(&p, &x, (seed % 2) as usize);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = ModelSpec {
            arch: Architecture::Conv,
            filters: 2,
            filter_width: 2,
            ..ModelSpec::default()
        };
        let mut checked = 0;
        for seed in 0..40 {
            let p = ClassifierParams::init(&spec, 3, 2, seed).unwrap();
            let x = random_matrix(5, 3, seed + 7);
            let (_, trace) = forward(&p, &x).unwrap();
            if trace.min_pool_margin() < 1e-3 {
                continue;
            }
            let err = check_gradients(&p, &x, (seed % 2) as usize);
            assert!(err < 1e-5, "seed {seed}: {err}");
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn relu_conv_gradients() {
        let spec = ModelSpec {
            arch: Architecture::Conv,
            filters: 3,
            filter_width: 2,
            activation: Activation::Relu,
        };
        let mut checked = 0;
        for seed in 0..40 {
            let p = ClassifierParams::init(&spec, 3, 3, seed).unwrap();
            let x = random_matrix(4, 3, seed + 50);
            let (_, trace) = forward(&p, &x).unwrap();
            if trace.min_pool_margin() < 1e-3 {
                continue;
            }
            assert!(check_gradients(&p, &x, 2) < 1e-5, "seed {seed}");
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        for arch in [Architecture::MeanPool, Architecture::Conv] {
            let spec = ModelSpec {
                arch,
                filters: 2,
                filter_width: 2,
                ..ModelSpec::default()
            };
            let p = ClassifierParams::init(&spec, 3, 2, 9).unwrap();
            let emb = EmbeddingMatrix::init_random(5, 3, 0.3, 1).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &p, Some(&emb)).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.params, p);
            assert_eq!(back.embeddings.as_ref(), Some(emb.weights()));
        }
        assert!(read_checkpoint("perturb-lab-checkpoint 99\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 2..8)) {
            let s = softmax(Array1::from(logits).view());
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn loss_nonnegative(logits in proptest::collection::vec(-1e3f64..1e3, 2..8), label in 0usize..8) {
            let n = logits.len();
            let v = loss(Array1::from(logits).view(), label % n);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn predict_shift_invariant(ticks in proptest::collection::vec(-64i32..64, 2..8), shift in -64i32..64) {
            let logits = Array1::from_iter(ticks.iter().map(|&t| t as f64 / 8.0));
            let shifted = logits.mapv(|z| z + shift as f64 / 8.0);
            prop_assert_eq!(argmax(logits.view()), argmax(shifted.view()));
        }
    }
}
