//! The eight candidate cell operations and the 4-convolution dense cell.
//!
//! Every operation chains conv1 -> conv2 -> conv3 -> conv4. Skip `j` (1..=3)
//! additionally concatenates the cell input onto the input of conv `j + 1`.
//! Convs 1-3 are followed by a leaky rectifier; conv4 is linear and its
//! output is added back onto the cell input scaled by `beta`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conv::{conv2d_backward, conv2d_forward, ConvShape, KERNEL};
use crate::error::{Error, Result};
use crate::norm::{self, NormTrace};
use crate::params::{kaiming_uniform, Grads, ParamId, ParamStore};
use crate::tensor::{leaky_relu, leaky_relu_backward, Tensor};

pub const NUM_OPS: usize = 8;
pub const CONVS_PER_CELL: usize = 4;

const DILATED: [usize; 4] = [1, 2, 4, 1];
const PLAIN: [usize; 4] = [1, 1, 1, 1];

/// One column of the search-space table: dilation per conv and which of the
/// three optional skip connections are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OperationSpec {
    index: u8,
    dilations: [usize; 4],
    skips: [bool; 3],
}

const TABLE: [OperationSpec; NUM_OPS] = [
    OperationSpec { index: 1, dilations: DILATED, skips: [true, true, true] },
    OperationSpec { index: 2, dilations: DILATED, skips: [false, true, true] },
    OperationSpec { index: 3, dilations: DILATED, skips: [true, false, true] },
    OperationSpec { index: 4, dilations: DILATED, skips: [true, true, false] },
    OperationSpec { index: 5, dilations: DILATED, skips: [true, false, false] },
    OperationSpec { index: 6, dilations: DILATED, skips: [false, true, false] },
    OperationSpec { index: 7, dilations: DILATED, skips: [false, false, true] },
    OperationSpec { index: 8, dilations: PLAIN, skips: [true, true, true] },
];

/// The full table, `O1` first.
pub fn op_table() -> [OperationSpec; NUM_OPS] {
    TABLE
}

impl OperationSpec {
    /// Looks up `O{index}` for `index` in `1..=8`.
    pub fn get(index: usize) -> Result<Self> {
        if !(1..=NUM_OPS).contains(&index) {
            return Err(Error::InvalidArgument(format!(
                "operation index {index} outside 1..=8"
            )));
        }
        Ok(TABLE[index - 1])
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn dilations(&self) -> [usize; 4] {
        self.dilations
    }

    /// Present skip connections, numbered 1..=3.
    pub fn skips(&self) -> Vec<usize> {
        (1..=3).filter(|&j| self.skips[j - 1]).collect()
    }

    pub fn has_skip(&self, j: usize) -> bool {
        (1..=3).contains(&j) && self.skips[j - 1]
    }

    pub fn name(&self) -> String {
        format!("O{}", self.index)
    }

    /// Input width of conv `k` (0-based) for `c` feature channels.
    pub fn conv_input_width(&self, k: usize, c: usize) -> usize {
        if k > 0 && self.skips[k - 1] {
            2 * c
        } else {
            c
        }
    }

    pub fn conv_shapes(&self, c: usize) -> [ConvShape; 4] {
        std::array::from_fn(|k| ConvShape {
            in_channels: self.conv_input_width(k, c),
            out_channels: c,
            dilation: self.dilations[k],
        })
    }
}

impl fmt::Display for OperationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}", self.index)
    }
}

impl FromStr for OperationSpec {
    type Err = Error;

    /// Accepts `O5`, `o5`, `O_5`, `O₅` or a bare `5`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t.strip_prefix(['O', 'o']).unwrap_or(t);
        let digits = digits.strip_prefix('_').unwrap_or(digits);
        let digits: String = digits
            .chars()
            .map(|ch| match ch {
                '₀'..='₉' => char::from_digit(ch as u32 - '₀' as u32, 10).unwrap_or(ch),
                other => other,
            })
            .collect();
        let index: usize = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("not an operation name: {s:?}")))?;
        OperationSpec::get(index)
    }
}

impl Serialize for OperationSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for OperationSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Name(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Index(i) => OperationSpec::get(i).map_err(serde::de::Error::custom),
            Repr::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Theoretical receptive field of the sequential chain, `1 + 2 * sum(dilations)`.
pub fn receptive_field(spec: &OperationSpec) -> usize {
    receptive_field_of(&spec.dilations)
}

pub fn receptive_field_of(dilations: &[usize]) -> usize {
    1 + (KERNEL - 1) * dilations.iter().sum::<usize>()
}

/// A convolution whose kernel and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub shape: ConvShape,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, shape: ConvShape, init_scale: f64, rng: &mut R) -> Self {
        let fan_in = shape.in_channels * KERNEL * KERNEL;
        let weight = store.add(
            format!("{name}.weight"),
            vec![shape.out_channels, shape.in_channels, KERNEL, KERNEL],
            kaiming_uniform(rng, shape.weight_len(), fan_in, init_scale),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            vec![shape.out_channels],
            vec![0.0; shape.out_channels],
            true,
        );
        ConvLayer { shape, weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.shape.in_channels {
            return Err(Error::InvalidArgument(format!(
                "convolution expects {} input channels, got {}",
                self.shape.in_channels,
                x.channels()
            )));
        }
        Ok(conv2d_forward(x, &self.shape, store.get(self.weight), store.get(self.bias)))
    }

    pub fn backward(&self, store: &ParamStore, input: &Tensor, grad_out: &Tensor, grads: &mut Grads) -> Tensor {
        let g = conv2d_backward(input, &self.shape, store.get(self.weight), grad_out);
        grads.accumulate(self.weight, &g.weight);
        grads.accumulate(self.bias, &g.bias);
        g.input
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormLayer {
    pub fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        NormLayer {
            gamma: store.add(format!("{name}.gamma"), vec![channels], vec![1.0; channels], true),
            beta: store.add(format!("{name}.beta"), vec![channels], vec![0.0; channels], true),
            running_mean: store.add(format!("{name}.running_mean"), vec![channels], vec![0.0; channels], false),
            running_var: store.add(format!("{name}.running_var"), vec![channels], vec![1.0; channels], false),
        }
    }
}

/// Kernels and biases of one cell, laid out for a given operation.
#[derive(Clone, Debug, PartialEq)]
pub struct CellWeights {
    pub spec: OperationSpec,
    pub convs: [ConvLayer; 4],
    pub norms: Option<[NormLayer; 3]>,
}

/// Initialization scale of cell kernels relative to fan-in initialization.
pub const CELL_INIT_SCALE: f64 = 0.1;

impl CellWeights {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: OperationSpec,
        channels: usize,
        use_bn: bool,
        rng: &mut R,
    ) -> Self {
        let shapes = spec.conv_shapes(channels);
        let convs = std::array::from_fn(|k| {
            ConvLayer::register(store, &format!("{prefix}.conv{}", k + 1), shapes[k], CELL_INIT_SCALE, rng)
        });
        let norms = use_bn.then(|| std::array::from_fn(|k| NormLayer::register(store, &format!("{prefix}.bn{}", k + 1), channels)));
        CellWeights { spec, convs, norms }
    }

    pub fn channels(&self) -> usize {
        self.convs[0].shape.in_channels
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self.convs.iter().map(|c| c.shape.param_count()).sum();
        let norms = self.norms.map_or(0, |_| 3 * 2 * self.channels());
        convs + norms
    }
}

/// Hyper-parameters shared by every cell evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellOptions {
    pub beta: f64,
    pub leaky_slope: f64,
    /// Local residual `x + beta * conv4`; disabled for the plain-chain ablation.
    pub residual: bool,
    /// Batch statistics (training) vs running statistics (inference) for BN cells.
    pub training: bool,
}

impl CellOptions {
    pub fn new(beta: f64) -> Self {
        CellOptions {
            beta,
            leaky_slope: 0.2,
            residual: true,
            training: false,
        }
    }
}

/// Saved activations for the backward pass.
pub struct CellTrace {
    pub input: Tensor,
    pub conv_inputs: [Tensor; 4],
    /// Inputs to the three activations (after BN when present).
    pub pre_activations: [Tensor; 3],
    pub norm_traces: Option<[NormTrace; 3]>,
    pub output: Tensor,
}

impl CellTrace {
    /// Number of stored activation scalars.
    pub fn activation_count(&self) -> usize {
        let mut n = self.input.data().len() + self.output.data().len();
        n += self.conv_inputs.iter().map(|t| t.data().len()).sum::<usize>();
        n += self.pre_activations.iter().map(|t| t.data().len()).sum::<usize>();
        if let Some(traces) = &self.norm_traces {
            n += traces.iter().map(|t| t.normalized.data().len()).sum::<usize>();
        }
        n
    }
}

/// Computes one cell; `spec` must match the layout of `wts`.
pub fn cell_forward(x: &Tensor, spec: &OperationSpec, wts: &CellWeights, store: &ParamStore, beta: f64) -> Result<Tensor> {
    if *spec != wts.spec {
        return Err(Error::InvalidArgument(format!(
            "weights are laid out for {} but {} was requested",
            wts.spec, spec
        )));
    }
    Ok(cell_forward_traced(x, wts, store, &CellOptions::new(beta))?.0)
}

pub fn cell_forward_traced(x: &Tensor, wts: &CellWeights, store: &ParamStore, opts: &CellOptions) -> Result<(Tensor, CellTrace)> {
    let c = wts.channels();
    if x.channels() != c {
        return Err(Error::InvalidArgument(format!(
            "cell expects {c} channels, got {}",
            x.channels()
        )));
    }
    let mut conv_inputs: Vec<Tensor> = Vec::with_capacity(4);
    let mut pre: Vec<Tensor> = Vec::with_capacity(3);
    let mut norm_traces: Vec<NormTrace> = Vec::with_capacity(3);
    let mut current = x.clone();
    for k in 0..3 {
        let input = if k > 0 && wts.spec.has_skip(k) {
            current.concat_channels(x)?
        } else {
            current
        };
        let mut h = wts.convs[k].forward(store, &input)?;
        conv_inputs.push(input);
        if let Some(norms) = &wts.norms {
            let n = &norms[k];
            if opts.training {
                let (y, trace) = norm::forward_train(&h, store.get(n.gamma), store.get(n.beta));
                norm_traces.push(trace);
                h = y;
            } else {
                h = norm::forward_eval(
                    &h,
                    store.get(n.gamma),
                    store.get(n.beta),
                    store.get(n.running_mean),
                    store.get(n.running_var),
                );
            }
        }
        current = leaky_relu(&h, opts.leaky_slope);
        pre.push(h);
    }
    let input4 = if wts.spec.has_skip(3) {
        current.concat_channels(x)?
    } else {
        current
    };
    let h4 = wts.convs[3].forward(store, &input4)?;
    conv_inputs.push(input4);
    let output = if opts.residual {
        let mut out = x.clone();
        out.add_scaled(&h4, opts.beta);
        out
    } else {
        h4
    };
    let norm_traces = if norm_traces.len() == 3 {
        let mut it = norm_traces.into_iter();
        Some(std::array::from_fn(|_| it.next().expect("three traces")))
    } else {
        None
    };
    let mut ci = conv_inputs.into_iter();
    let mut pi = pre.into_iter();
    let trace = CellTrace {
        input: x.clone(),
        conv_inputs: std::array::from_fn(|_| ci.next().expect("four conv inputs")),
        pre_activations: std::array::from_fn(|_| pi.next().expect("three activations")),
        norm_traces,
        output: output.clone(),
    };
    Ok((output, trace))
}

/// Back-propagates through a traced cell, accumulating parameter gradients.
/// Returns the gradient with respect to the cell input.
pub fn cell_backward(trace: &CellTrace, wts: &CellWeights, store: &ParamStore, grad_out: &Tensor, opts: &CellOptions, grads: &mut Grads) -> Tensor {
    let c = wts.channels();
    let (mut grad_x, mut g) = if opts.residual {
        (grad_out.clone(), grad_out.scaled(opts.beta))
    } else {
        (Tensor::zeros(grad_out.batch(), c, grad_out.height(), grad_out.width()), grad_out.clone())
    };
    for k in (0..4).rev() {
        let g_in = wts.convs[k].backward(store, &trace.conv_inputs[k], &g, grads);
        if k == 0 {
            grad_x.add_assign(&g_in);
            break;
        }
        let g_act = if wts.spec.has_skip(k) {
            let (g_act, g_skip) = g_in.split_channels(c);
            grad_x.add_assign(&g_skip);
            g_act
        } else {
            g_in
        };
        let g_pre = leaky_relu_backward(&trace.pre_activations[k - 1], &g_act, opts.leaky_slope);
        g = match (&wts.norms, &trace.norm_traces) {
            (Some(norms), Some(traces)) => {
                let n = &norms[k - 1];
                let (g_h, g_gamma, g_beta) = norm::backward(&traces[k - 1], store.get(n.gamma), &g_pre);
                grads.accumulate(n.gamma, &g_gamma);
                grads.accumulate(n.beta, &g_beta);
                g_h
            }
            _ => g_pre,
        };
    }
    grad_x
}
