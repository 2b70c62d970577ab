//! The N-component cascade. Each component is
//! `conv(2 -> c) -> residual-in-residual block -> conv(c -> 2) -> TDC`, with the
//! second conv's output added onto the component input before TDC.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::ConvShape;
use crate::error::{Error, Result};
use crate::kspace::{self, ComplexImage, KSpaceGrid, SamplingMask};
use crate::nas::ArchParams;
use crate::params::{Grads, ParamId, ParamStore};
use crate::searchspace::{
    cell_backward, cell_forward_traced, op_table, CellOptions, CellTrace, CellWeights, ConvLayer, OperationSpec, NUM_OPS,
};
use crate::tensor::Tensor;

/// Image channels: real and imaginary part.
pub const IMAGE_CHANNELS: usize = 2;

const HEAD_INIT_SCALE: f64 = 1.0;
const TAIL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of cascade components.
    #[serde(rename = "N")]
    pub components: usize,
    pub cells_per_block: usize,
    /// Feature channels `c`.
    pub channels: usize,
    pub use_bn: bool,
    pub use_rir: bool,
    pub beta: f64,
    pub leaky_slope: f64,
    /// Forces every cell to one operation (homogeneous ablation).
    pub homogeneous_op: Option<OperationSpec>,
}

/// Channel width whose fixed-genotype parameter count is closest to 0.33M
/// for the reference configuration (see [`calibrate_channels`]).
pub const REFERENCE_CHANNELS: usize = 19;

/// Parameter budget the reference configuration is calibrated against.
pub const REFERENCE_PARAM_TARGET: usize = 330_000;

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            components: 5,
            cells_per_block: 3,
            channels: REFERENCE_CHANNELS,
            use_bn: false,
            use_rir: true,
            beta: 0.2,
            leaky_slope: 0.2,
            homogeneous_op: None,
        }
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            components: 2,
            channels: 4,
            ..Self::default()
        }
    }

    /// Total number of cells `T = N * cells_per_block`.
    pub fn total_cells(&self) -> usize {
        self.components * self.cells_per_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidArgument("N must be at least 1".into()));
        }
        if !(3..=4).contains(&self.cells_per_block) {
            return Err(Error::InvalidArgument(format!(
                "cells_per_block must be 3 or 4, got {}",
                self.cells_per_block
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("channels must be at least 1".into()));
        }
        if !self.beta.is_finite() || !self.leaky_slope.is_finite() {
            return Err(Error::InvalidArgument("beta and leaky_slope must be finite".into()));
        }
        Ok(())
    }

    fn cell_options(&self, training: bool) -> CellOptions {
        CellOptions {
            beta: self.beta,
            leaky_slope: self.leaky_slope,
            residual: self.use_rir,
            training,
        }
    }
}

/// Operation assignment for all `T` cells, grouped into blocks of
/// `cells_per_block`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GenotypeFile", into = "GenotypeFile")]
pub struct Genotype {
    cells_per_block: usize,
    ops: Vec<OperationSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    cells_per_block: usize,
    #[serde(rename = "N")]
    components: usize,
    ops: Vec<OperationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pretty: Option<String>,
}

impl TryFrom<GenotypeFile> for Genotype {
    type Error = Error;

    fn try_from(f: GenotypeFile) -> Result<Self> {
        let g = Genotype::new(f.ops, f.cells_per_block)?;
        if g.components() != f.components {
            return Err(Error::InvalidArgument(format!(
                "genotype declares N = {} but lists {} blocks",
                f.components,
                g.components()
            )));
        }
        if let Some(pretty) = f.pretty {
            if pretty != g.pretty() {
                return Err(Error::InvalidArgument(format!(
                    "pretty form {pretty:?} disagrees with ops {:?}",
                    g.pretty()
                )));
            }
        }
        Ok(g)
    }
}

impl From<Genotype> for GenotypeFile {
    fn from(g: Genotype) -> Self {
        GenotypeFile {
            cells_per_block: g.cells_per_block,
            components: g.components(),
            pretty: Some(g.pretty()),
            ops: g.ops,
        }
    }
}

impl Genotype {
    pub fn new(ops: Vec<OperationSpec>, cells_per_block: usize) -> Result<Self> {
        if cells_per_block == 0 || ops.is_empty() || ops.len() % cells_per_block != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} operations do not form whole blocks of {cells_per_block}",
                ops.len()
            )));
        }
        Ok(Genotype { cells_per_block, ops })
    }

    pub fn from_indices(indices: &[usize], cells_per_block: usize) -> Result<Self> {
        let ops = indices
            .iter()
            .map(|&i| OperationSpec::get(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ops, cells_per_block)
    }

    pub fn homogeneous(op: OperationSpec, components: usize, cells_per_block: usize) -> Result<Self> {
        Self::new(vec![op; components * cells_per_block], cells_per_block)
    }

    /// Parses the bracketed form `[O5 O8 O8|O8 O8 O8|...]`; brackets are
    /// optional and block size is inferred from the `|` groups.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.trim();
        let body = body.strip_prefix('[').unwrap_or(body);
        let body = body.strip_suffix(']').unwrap_or(body);
        let mut groups = Vec::new();
        for group in body.split('|') {
            let ops = group
                .split(|c: char| c.is_whitespace() || c == ',' || c == '~')
                .filter(|t| !t.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<OperationSpec>>>()?;
            groups.push(ops);
        }
        let size = groups.first().map_or(0, Vec::len);
        if groups.iter().any(|g| g.len() != size) {
            return Err(Error::InvalidArgument(format!(
                "blocks of unequal size in genotype {text:?}"
            )));
        }
        Self::new(groups.concat(), size)
    }

    /// Human-readable form, e.g. `O5 O8 O8|O8 O8 O8`.
    pub fn pretty(&self) -> String {
        self.ops
            .chunks(self.cells_per_block)
            .map(|block| block.iter().map(|o| o.name()).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn ops(&self) -> &[OperationSpec] {
        &self.ops
    }

    pub fn indices(&self) -> Vec<usize> {
        self.ops.iter().map(OperationSpec::index).collect()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn cells_per_block(&self) -> usize {
        self.cells_per_block
    }

    pub fn components(&self) -> usize {
        self.ops.len() / self.cells_per_block
    }

    pub fn check_against(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.cells_per_block != cfg.cells_per_block || self.ops.len() != cfg.total_cells() {
            return Err(Error::InvalidArgument(format!(
                "genotype has {} cells in blocks of {}, configuration needs {} in blocks of {}",
                self.ops.len(),
                self.cells_per_block,
                cfg.total_cells(),
                cfg.cells_per_block
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.pretty())
    }
}

/// Per-component weights. `cells[l]` holds one candidate in fixed mode and
/// all eight (indexed by operation number - 1) in search mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentWeights {
    pub head: ConvLayer,
    pub cells: Vec<Vec<CellWeights>>,
    pub tail: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Fixed(Genotype),
    /// Every cell carries all eight candidate operations.
    Search,
}

/// All trainable state of a cascade plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: NetworkConfig,
    architecture: Architecture,
    store: ParamStore,
    components: Vec<ComponentWeights>,
}

/// Which path each cell runs.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    Genotype(&'a Genotype),
    /// Gate-activated path per cell, `binarize(softmax(alpha))`.
    Arch(&'a ArchParams),
}

impl ModelWeights {
    /// Fixed-architecture model, one weight set per cell.
    pub fn new_fixed(config: &NetworkConfig, genotype: &Genotype, seed: u64) -> Result<Self> {
        config.validate()?;
        genotype.check_against(config)?;
        Ok(Self::build(config, Architecture::Fixed(genotype.clone()), seed))
    }

    /// Search supernet: eight candidate weight sets per cell.
    pub fn new_search(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, Architecture::Search, seed))
    }

    fn build(config: &NetworkConfig, architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let mut components = Vec::with_capacity(config.components);
        for n in 0..config.components {
            let head = ConvLayer::register(
                &mut store,
                &format!("c{n}.head"),
                ConvShape { in_channels: IMAGE_CHANNELS, out_channels: c, dilation: 1 },
                HEAD_INIT_SCALE,
                &mut rng,
            );
            let mut cells = Vec::with_capacity(config.cells_per_block);
            for l in 0..config.cells_per_block {
                let candidates: Vec<OperationSpec> = match &architecture {
                    Architecture::Fixed(g) => vec![g.ops()[n * config.cells_per_block + l]],
                    Architecture::Search => op_table().to_vec(),
                };
                cells.push(
                    candidates
                        .into_iter()
                        .map(|spec| {
                            CellWeights::register(&mut store, &format!("c{n}.cell{l}.{spec}"), spec, c, config.use_bn, &mut rng)
                        })
                        .collect(),
                );
            }
            let tail = ConvLayer::register(
                &mut store,
                &format!("c{n}.tail"),
                ConvShape { in_channels: c, out_channels: IMAGE_CHANNELS, dilation: 1 },
                TAIL_INIT_SCALE,
                &mut rng,
            );
            components.push(ComponentWeights { head, cells, tail });
        }
        ModelWeights {
            config: config.clone(),
            architecture,
            store,
            components,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn is_search(&self) -> bool {
        matches!(self.architecture, Architecture::Search)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn components(&self) -> &[ComponentWeights] {
        &self.components
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.trainable_scalars()
    }

    /// Resolves the operation each cell runs for a selection.
    pub fn paths(&self, selection: Selection<'_>) -> Result<Vec<OperationSpec>> {
        let t = self.config.total_cells();
        let ops: Vec<OperationSpec> = match selection {
            Selection::Genotype(g) => {
                g.check_against(&self.config)?;
                g.ops().to_vec()
            }
            Selection::Arch(a) => {
                if a.cells() != t {
                    return Err(Error::InvalidArgument(format!(
                        "architecture parameters cover {} cells, network has {t}",
                        a.cells()
                    )));
                }
                a.active_ops()
            }
        };
        if let Architecture::Fixed(g) = &self.architecture {
            if g.ops() != ops.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "weights were built for {g} but {} was requested",
                    Genotype::new(ops, self.config.cells_per_block)?
                )));
            }
        }
        Ok(ops)
    }

    fn cell(&self, component: usize, position: usize, op: OperationSpec) -> &CellWeights {
        let candidates = &self.components[component].cells[position];
        match self.architecture {
            Architecture::Fixed(_) => &candidates[0],
            Architecture::Search => &candidates[op.index() - 1],
        }
    }

    /// Copies running statistics gathered by a training-mode forward pass.
    pub fn apply_norm_updates(&mut self, trace: &NetworkTrace) {
        for (id, batch) in &trace.norm_updates {
            crate::norm::update_running(self.store.get_mut(*id), batch);
        }
    }

    /// Batched forward pass over `(n, 2, H, W)` inputs.
    pub fn forward(&self, x: &Tensor, k0: &Tensor, masks: &[SamplingMask], paths: &[OperationSpec], training: bool) -> Result<(Tensor, NetworkTrace)> {
        self.run(x, k0, masks, paths, training, true)
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &Tensor, k0: &Tensor, masks: &[SamplingMask], paths: &[OperationSpec]) -> Result<Tensor> {
        Ok(self.run(x, k0, masks, paths, false, false)?.0)
    }

    fn run(&self, x: &Tensor, k0: &Tensor, masks: &[SamplingMask], paths: &[OperationSpec], training: bool, record: bool) -> Result<(Tensor, NetworkTrace)> {
        check_batch(x, k0, masks)?;
        if paths.len() != self.config.total_cells() {
            return Err(Error::InvalidArgument(format!(
                "{} paths given for {} cells",
                paths.len(),
                self.config.total_cells()
            )));
        }
        let opts = self.config.cell_options(training);
        let mut trace = NetworkTrace::default();
        let mut current = x.clone();
        for n in 0..self.config.components {
            let comp = &self.components[n];
            let head_out = comp.head.forward(&self.store, &current)?;
            let cells: Vec<&CellWeights> = (0..self.config.cells_per_block)
                .map(|l| self.cell(n, l, paths[n * self.config.cells_per_block + l]))
                .collect();
            let (block_out, cell_traces) = block_forward(&head_out, &cells, &self.store, &opts, self.config.use_rir)?;
            if training {
                for (cell, ct) in cells.iter().zip(&cell_traces) {
                    if let (Some(norms), Some(nt)) = (&cell.norms, &ct.norm_traces) {
                        for (layer, t) in norms.iter().zip(nt) {
                            trace.norm_updates.push((layer.running_mean, t.batch_mean.clone()));
                            trace.norm_updates.push((layer.running_var, t.batch_var.clone()));
                        }
                    }
                }
            }
            let tail_out = comp.tail.forward(&self.store, &block_out)?;
            let mut s = current.clone();
            s.add_assign(&tail_out);
            let (out, firsts) = tdc_batch(&s, k0, masks);
            if record {
                trace.components.push(ComponentTrace {
                    input: current,
                    head_out,
                    cells: cell_traces,
                    block_out,
                    tdc_first: firsts,
                });
            }
            current = out;
        }
        Ok((current, trace))
    }

    /// Back-propagates `grad_out` (gradient of the loss w.r.t. the network
    /// output) through a recorded forward pass.
    pub fn backward(&self, trace: &NetworkTrace, masks: &[SamplingMask], paths: &[OperationSpec], grad_out: &Tensor, training: bool, grads: &mut Grads) -> Backward {
        let opts = self.config.cell_options(training);
        let cpb = self.config.cells_per_block;
        let mut gate_grads = vec![0.0; self.config.total_cells()];
        let mut g = grad_out.clone();
        for n in (0..self.config.components).rev() {
            let comp = &self.components[n];
            let ct = &trace.components[n];
            let g_s = tdc_backward_batch(&ct.tdc_first, &g, masks);
            let mut g_input = g_s.clone();
            let g_block = comp.tail.backward(&self.store, &ct.block_out, &g_s, grads);

            let (mut g_head, mut g_cell) = if self.config.use_rir {
                (g_block.scaled(1.0 - self.config.beta), g_block.scaled(self.config.beta))
            } else {
                (Tensor::zeros(g_block.batch(), g_block.channels(), g_block.height(), g_block.width()), g_block)
            };
            for l in (0..cpb).rev() {
                let cell_trace = &ct.cells[l];
                gate_grads[n * cpb + l] = g_cell.dot(&cell_trace.output);
                let cell = self.cell(n, l, paths[n * cpb + l]);
                g_cell = cell_backward(cell_trace, cell, &self.store, &g_cell, &opts, grads);
            }
            g_head.add_assign(&g_cell);
            let g_head_in = comp.head.backward(&self.store, &ct.input, &g_head, grads);
            g_input.add_assign(&g_head_in);
            g = g_input;
        }
        Backward {
            input: g,
            gate_grads,
        }
    }
}

/// Gradients that are not parameter gradients.
pub struct Backward {
    pub input: Tensor,
    /// `dL/dg` of the active gate of every cell: the inner product of the
    /// cell's output gradient with its output.
    pub gate_grads: Vec<f64>,
}

pub struct ComponentTrace {
    input: Tensor,
    head_out: Tensor,
    cells: Vec<CellTrace>,
    block_out: Tensor,
    tdc_first: Vec<Vec<f64>>,
}

#[derive(Default)]
pub struct NetworkTrace {
    components: Vec<ComponentTrace>,
    norm_updates: Vec<(ParamId, Vec<f64>)>,
}

impl NetworkTrace {
    /// Number of activation scalars held for the backward pass.
    pub fn activation_count(&self) -> usize {
        self.components
            .iter()
            .map(|c| {
                c.input.data().len()
                    + c.head_out.data().len()
                    + c.block_out.data().len()
                    + c.tdc_first.iter().map(Vec::len).sum::<usize>()
                    + c.cells.iter().map(CellTrace::activation_count).sum::<usize>()
            })
            .sum()
    }
}

fn check_batch(x: &Tensor, k0: &Tensor, masks: &[SamplingMask]) -> Result<()> {
    let [n, c, h, w] = x.shape();
    if c != IMAGE_CHANNELS {
        return Err(Error::InvalidArgument(format!("input must have 2 channels, got {c}")));
    }
    x.ensure_same_shape(k0)
        .map_err(|_| Error::InvalidArgument(format!("input {:?} and k-space {:?} differ", x.shape(), k0.shape())))?;
    if masks.len() != n {
        return Err(Error::InvalidArgument(format!("{} masks for a batch of {n}", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| m.height() != h || m.width() != w) {
        return Err(Error::InvalidArgument(format!(
            "mask {}x{} does not match {h}x{w} images",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

fn tdc_batch(s: &Tensor, k0: &Tensor, masks: &[SamplingMask]) -> (Tensor, Vec<Vec<f64>>) {
    let [n, c, h, w] = s.shape();
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| kspace::tdc_raw(h, w, s.sample(i), k0.sample(i), &masks[i]))
        .collect();
    let mut out = Tensor::zeros(n, c, h, w);
    let mut firsts = Vec::with_capacity(n);
    for (i, (o, first)) in results.into_iter().enumerate() {
        out.sample_mut(i).copy_from_slice(&o);
        firsts.push(first);
    }
    (out, firsts)
}

fn tdc_backward_batch(firsts: &[Vec<f64>], grad: &Tensor, masks: &[SamplingMask]) -> Tensor {
    let [n, c, h, w] = grad.shape();
    let results: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| kspace::tdc_backward_raw(h, w, &firsts[i], grad.sample(i), &masks[i]))
        .collect();
    let mut out = Tensor::zeros(n, c, h, w);
    for (i, r) in results.into_iter().enumerate() {
        out.sample_mut(i).copy_from_slice(&r);
    }
    out
}

fn block_forward(x: &Tensor, cells: &[&CellWeights], store: &ParamStore, opts: &CellOptions, use_rir: bool) -> Result<(Tensor, Vec<CellTrace>)> {
    let mut traces = Vec::with_capacity(cells.len());
    let mut h = x.clone();
    for cell in cells {
        let (out, trace) = cell_forward_traced(&h, cell, store, opts)?;
        traces.push(trace);
        h = out;
    }
    if use_rir {
        // x + beta * (chain(x) - x); exact passthrough when the chain is identity
        let mut out = x.clone();
        out.add_scaled(&h.sub(x), opts.beta);
        Ok((out, traces))
    } else {
        Ok((h, traces))
    }
}

/// Residual-in-residual basic block on a feature map. Without RIR the cells
/// are chained with every residual add disabled.
pub fn rir_block_forward(x: &Tensor, cells: &[(OperationSpec, &CellWeights)], store: &ParamStore, cfg: &NetworkConfig) -> Result<Tensor> {
    if cells.len() != cfg.cells_per_block {
        return Err(Error::InvalidArgument(format!(
            "block needs {} cells, got {}",
            cfg.cells_per_block,
            cells.len()
        )));
    }
    if let Some((spec, w)) = cells.iter().find(|(s, w)| *s != w.spec) {
        return Err(Error::InvalidArgument(format!(
            "cell weights laid out for {} used as {spec}",
            w.spec
        )));
    }
    let weights: Vec<&CellWeights> = cells.iter().map(|(_, w)| *w).collect();
    Ok(block_forward(x, &weights, store, &cfg.cell_options(false), cfg.use_rir)?.0)
}

fn image_batch(img: &ComplexImage) -> Tensor {
    Tensor::from_vec([1, IMAGE_CHANNELS, img.height(), img.width()], img.data().to_vec()).expect("image layout")
}

fn grid_batch(k: &KSpaceGrid) -> Tensor {
    Tensor::from_vec([1, IMAGE_CHANNELS, k.height(), k.width()], k.data().to_vec()).expect("grid layout")
}

fn check_single(img: &ComplexImage, k0: &KSpaceGrid, m: &SamplingMask) -> Result<()> {
    if img.shape() != k0.shape() || (m.height(), m.width()) != img.shape() {
        return Err(Error::InvalidArgument(format!(
            "image {:?}, k-space {:?} and mask {}x{} must agree",
            img.shape(),
            k0.shape(),
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// One cascade component (`index` in `0..N`) applied to a single image.
pub fn component_forward(img: &ComplexImage, k0: &KSpaceGrid, m: &SamplingMask, weights: &ModelWeights, index: usize, selection: Selection<'_>) -> Result<ComplexImage> {
    check_single(img, k0, m)?;
    let cfg = weights.config();
    if index >= cfg.components {
        return Err(Error::InvalidArgument(format!("component {index} of {}", cfg.components)));
    }
    let paths = weights.paths(selection)?;
    let cpb = cfg.cells_per_block;
    let comp = &weights.components[index];
    let x = image_batch(img);
    let f = comp.head.forward(weights.store(), &x)?;
    let cells: Vec<&CellWeights> = (0..cpb).map(|l| weights.cell(index, l, paths[index * cpb + l])).collect();
    let (b, _) = block_forward(&f, &cells, weights.store(), &cfg.cell_options(false), cfg.use_rir)?;
    let mut s = x;
    s.add_assign(&comp.tail.forward(weights.store(), &b)?);
    let s = ComplexImage::from_vec(img.height(), img.width(), s.into_vec())?;
    kspace::tdc(&s, k0, m)
}

/// Full cascade on a single image.
pub fn network_forward(x: &ComplexImage, k0: &KSpaceGrid, m: &SamplingMask, selection: Selection<'_>, weights: &ModelWeights) -> Result<ComplexImage> {
    check_single(x, k0, m)?;
    let paths = weights.paths(selection)?;
    let out = weights.predict(&image_batch(x), &grid_batch(k0), std::slice::from_ref(m), &paths)?;
    ComplexImage::from_vec(x.height(), x.width(), out.into_vec())
}

/// Sum of squared differences over both channels and all pixels.
pub fn l2_loss(pred: &ComplexImage, target: &ComplexImage) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Per-sample squared error averaged over the batch, with its gradient.
pub fn l2_loss_batch(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.ensure_same_shape(target)?;
    let n = pred.batch().max(1) as f64;
    let diff = pred.sub(target);
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scaled(2.0 / n)))
}

/// Trainable scalars of a fixed-genotype network.
pub fn param_count(cfg: &NetworkConfig, genotype: &Genotype) -> usize {
    let c = cfg.channels;
    let boundary = ConvShape { in_channels: IMAGE_CHANNELS, out_channels: c, dilation: 1 }.param_count()
        + ConvShape { in_channels: c, out_channels: IMAGE_CHANNELS, dilation: 1 }.param_count();
    let cells: usize = genotype
        .ops()
        .iter()
        .map(|op| {
            let convs: usize = op.conv_shapes(c).iter().map(ConvShape::param_count).sum();
            let norms = if cfg.use_bn { 3 * 2 * c } else { 0 };
            convs + norms
        })
        .sum();
    cfg.components * boundary + cells
}

/// Channel width in `1..=max_channels` whose count is closest to `target`.
pub fn calibrate_channels(cfg: &NetworkConfig, genotype: &Genotype, target: usize, max_channels: usize) -> usize {
    (1..=max_channels)
        .min_by_key(|&c| {
            let trial = NetworkConfig { channels: c, ..cfg.clone() };
            param_count(&trial, genotype).abs_diff(target)
        })
        .unwrap_or(1)
}

/// Genotype reported for the Cardiac dataset.
pub const CARDIAC_GENOTYPE: &str = "O5 O8 O8|O8 O8 O8|O4 O1 O2|O8 O8 O8|O6 O8 O8";
/// Genotype reported for the Brain dataset.
pub const BRAIN_GENOTYPE: &str = "O6 O6 O2|O4 O1 O2|O3 O8 O1|O3 O6 O3|O3 O1 O3";

/// Number of candidate operations per cell in search mode.
pub const CANDIDATES: usize = NUM_OPS;
