//! Lenet-5 in sequential and 4-worker distributed form, the equivalence
//! check between the two, and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::gather_partition;
use crate::layers::kernels::{argmax_rows, cross_entropy};
use crate::layers::{Adam, AffineDesc, ConvDesc, Layer, LayerDesc, Param, PoolDesc, PoolMode, Tape, TransposeDesc};
use crate::tensor::relative_error;
use crate::{spawn_with, Comm, Error, GroupConfig, Grid, KernelDim, Partition, Real, Result, Tensor};

/// Side of the (padded) input image.
pub const IMAGE: usize = 32;
pub const CLASSES: usize = 10;
pub const LENET_WORKERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Distributed,
}

impl Mode {
    pub fn workers(self) -> usize {
        match self {
            Mode::Sequential => 1,
            Mode::Distributed => LENET_WORKERS,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Distributed => "distributed",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" | "seq" => Ok(Mode::Sequential),
            "distributed" | "dist" => Ok(Mode::Distributed),
            _ => Err(Error::contract(format!("unknown mode {s:?}"))),
        }
    }
}

/// Ordered layers plus the layouts of the network input and output.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub mode: Mode,
    pub workers: usize,
    pub batch: usize,
    pub input: Partition,
    pub output: Partition,
    pub layers: Vec<LayerDesc>,
}

/// One learnable tensor of a spec, in install order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub layout: Partition,
}

impl NetworkSpec {
    /// Layout after every layer, checking that neighbors agree.
    pub fn partitions(&self) -> Result<Vec<Partition>> {
        let mut at = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            at = l.output_partition(&at)?;
            out.push(at.clone());
        }
        if at != self.output {
            return Err(Error::contract(format!("network ends on {} instead of {}", at.grid(), self.output.grid())));
        }
        Ok(out)
    }

    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerDesc::Conv(d) => {
                    let fan_in = d.weight_shape()[1..].iter().product();
                    out.push(ParamInfo { name: format!("{}.w", d.name), shape: d.weight_shape(), fan_in, layout: d.weight_layout()? });
                    out.push(ParamInfo { name: format!("{}.b", d.name), shape: vec![d.out_channels], fan_in, layout: d.bias_layout()? });
                }
                LayerDesc::Affine(d) => {
                    out.push(ParamInfo { name: format!("{}.w", d.name), shape: vec![d.n_fo, d.n_fi], fan_in: d.n_fi, layout: d.weight_layout()? });
                    out.push(ParamInfo { name: format!("{}.b", d.name), shape: vec![d.n_fo], fan_in: d.n_fi, layout: d.bias_layout()? });
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.params()?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }

    /// `(parameter, rank, block shape)` for every block held anywhere.
    pub fn placement(&self) -> Result<Vec<(String, usize, Vec<usize>)>> {
        let mut rows = Vec::new();
        for p in self.params()? {
            for rank in 0..self.workers {
                if let Some(s) = p.layout.local_shape(rank) {
                    rows.push((p.name.clone(), rank, s));
                }
            }
        }
        Ok(rows)
    }
}

fn conv(name: &str, input: &[usize], co: usize, mode: Mode) -> ConvDesc {
    let mut d = ConvDesc::sequential(name, input, co, vec![KernelDim::new(5, 1); 2]);
    if mode == Mode::Distributed {
        d.feature_grid = vec![2, 2];
        d.w_ranks = vec![0, 1, 2, 3];
    }
    d
}

fn pool(name: &str, input: &[usize], mode: Mode) -> PoolDesc {
    let mut d = PoolDesc::sequential(name, input, vec![KernelDim::new(2, 2); 2], PoolMode::Max);
    if mode == Mode::Distributed {
        d.grid = vec![1, 1, 2, 2];
        d.ranks = vec![0, 1, 2, 3];
    }
    d
}

fn affine(name: &str, batch: usize, n_fi: usize, n_fo: usize, mode: Mode) -> AffineDesc {
    let mut d = AffineDesc::sequential(name, batch, n_fi, n_fo);
    if mode == Mode::Distributed {
        (d.p_fo, d.p_fi, d.w_ranks) = (2, 2, vec![0, 1, 2, 3]);
    }
    d
}

fn transpose(name: &str, src: Partition, dst: Partition) -> LayerDesc {
    LayerDesc::Transpose(TransposeDesc { name: name.into(), src, dst })
}

fn on(shape: &[usize], dims: &[usize], ranks: &[usize]) -> Result<Partition> {
    Partition::new(shape, Grid::with_ranks(dims, ranks.to_vec())?)
}

/// Lenet-5 on `(batch, 1, 32, 32)` inputs. The distributed form runs C1
/// through S4 on a 2x2 feature grid with the parameters on worker 0, and
/// the affine layers on 2x2 weight grids, with transposes as glue.
pub fn build_lenet5(mode: Mode, workers: usize, batch: usize) -> Result<NetworkSpec> {
    if workers != mode.workers() {
        return Err(Error::contract(format!("{mode} Lenet-5 runs on {} workers, not {workers}", mode.workers())));
    }
    if batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let nb = batch;
    let x_shape = [nb, 1, IMAGE, IMAGE];
    let input = Partition::single(&x_shape, 0)?;
    let output = Partition::single(&[nb, CLASSES], 0)?;
    let relu = |n: &str| LayerDesc::Relu(n.into());
    let c1 = conv("C1", &x_shape, 6, mode);
    let s2 = pool("S2", &[nb, 6, 28, 28], mode);
    let c3 = conv("C3", &[nb, 6, 14, 14], 16, mode);
    let s4 = pool("S4", &[nb, 16, 10, 10], mode);
    let c5 = affine("C5", nb, 400, 120, mode);
    let f6 = affine("F6", nb, 120, 84, mode);
    let out = affine("Output", nb, 84, CLASSES, mode);
    let mut layers = Vec::new();
    if mode == Mode::Distributed {
        layers.push(transpose("T_in", input.clone(), c1.x_partition()?));
    }
    layers.extend([
        LayerDesc::Conv(c1),
        relu("C1.relu"),
        LayerDesc::Pool(s2),
        LayerDesc::Conv(c3),
        relu("C3.relu"),
        LayerDesc::Pool(s4.clone()),
    ]);
    if mode == Mode::Distributed {
        let src = s4.y_partition()?;
        layers.push(transpose("T_S4", src, on(&[nb, 16, 5, 5], &[1, 2, 1, 1], &[0, 1])?));
    }
    layers.push(LayerDesc::Flatten("flatten".into()));
    let glue = |layers: &mut Vec<LayerDesc>, name: &str, from: &AffineDesc, to: &AffineDesc| -> Result<()> {
        if mode == Mode::Distributed {
            layers.push(transpose(name, from.y_partition()?, to.x_partition()?));
        }
        Ok(())
    };
    layers.push(LayerDesc::Affine(c5.clone()));
    layers.push(relu("C5.relu"));
    glue(&mut layers, "T_C5", &c5, &f6)?;
    layers.push(LayerDesc::Affine(f6.clone()));
    layers.push(relu("F6.relu"));
    glue(&mut layers, "T_F6", &f6, &out)?;
    layers.push(LayerDesc::Affine(out.clone()));
    if mode == Mode::Distributed {
        layers.push(transpose("T_out", out.y_partition()?, output.clone()));
    }
    let spec = NetworkSpec { mode, workers, batch, input, output, layers };
    spec.partitions()?;
    Ok(spec)
}

/// Uniform in `±1/sqrt(fan_in)` per layer, drawn in install order.
pub fn init_params<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Vec<Tensor<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.params()?
        .iter()
        .map(|p| {
            let bound = 1.0 / (p.fan_in as f64).sqrt();
            let n: usize = p.shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_f64(&p.shape, &v)
        })
        .collect()
}

/// One worker's view of a network.
pub struct Network<T> {
    layers: Vec<Box<dyn Layer<T>>>,
    parts: Vec<Partition>,
    tape: Tape,
}

impl<T: Real> Network<T> {
    pub fn new(spec: &NetworkSpec, rank: usize) -> Result<Self> {
        let parts = spec.partitions()?;
        let layers = spec.layers.iter().map(|d| d.build(rank)).collect::<Result<_>>()?;
        Ok(Self { layers, parts, tape: Tape::new() })
    }

    pub fn layers(&self) -> &[Box<dyn Layer<T>>] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Scatters full parameter tensors held by rank 0 to their blocks.
    pub fn install(&mut self, comm: &Comm<T>, full: Option<&[Tensor<T>]>) -> Result<()> {
        let mut params = self.params_mut();
        if let Some(full) = full {
            if full.len() != params.len() {
                return Err(Error::contract(format!("{} parameter tensors for {} parameters", full.len(), params.len())));
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            p.scatter(comm, 0, full.map(|f| &f[i]))?;
        }
        Ok(())
    }

    /// Full parameter tensors on rank 0.
    pub fn gather_params(&self, comm: &Comm<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let blocks = self.params().iter().map(|p| p.gather(comm, 0)).collect::<Result<Vec<_>>>()?;
        Ok(blocks.into_iter().collect())
    }

    pub fn gather_grads(&self, comm: &Comm<T>) -> Result<Option<Vec<Tensor<T>>>> {
        let blocks = self.params().iter().map(|p| p.gather_grad(comm, 0)).collect::<Result<Vec<_>>>()?;
        Ok(blocks.into_iter().collect())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn forward(&mut self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        self.tape.forward(&self.layers, comm, x)
    }

    /// Forward pass that also gathers every layer's output to rank 0.
    pub fn forward_traced(&mut self, comm: &Comm<T>, mut x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Vec<(String, Option<Tensor<T>>)>)> {
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut saved = Vec::with_capacity(self.layers.len());
        for (layer, part) in self.layers.iter().zip(&self.parts) {
            let (y, s) = layer.forward(comm, x)?;
            trace.push((layer.name().to_string(), gather_partition(comm, part, 0, y.as_ref())?));
            saved.push(s);
            x = y;
        }
        self.tape = Tape::from_saved(saved);
        Ok((x, trace))
    }

    pub fn backward(&mut self, comm: &Comm<T>, dy: Option<Tensor<T>>) -> Result<()> {
        self.tape.backward(&mut self.layers, comm, dy)?;
        Ok(())
    }

    pub fn fingerprint(&self) -> Vec<u64> {
        self.tape.fingerprint(&self.layers)
    }

    /// Forward, loss on rank 0, backward. Gradients are reset first.
    pub fn loss_and_grad(&mut self, comm: &Comm<T>, x: Option<Tensor<T>>, labels: &[usize]) -> Result<Option<T>> {
        self.zero_grad();
        let logits = self.forward(comm, x)?;
        let (loss, dy) = match logits {
            Some(z) => {
                let (l, g) = cross_entropy(&z, labels)?;
                (Some(l), Some(g))
            }
            None => (None, None),
        };
        self.backward(comm, dy)?;
        Ok(loss)
    }

    /// Class predictions on rank 0.
    pub fn predict(&mut self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<Option<Vec<usize>>> {
        Ok(self.forward(comm, x)?.map(|z| argmax_rows(&z)))
    }
}

/// Adds `delta` to the first entry of one rank's block of a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    pub param: String,
    pub rank: usize,
    pub delta: f64,
}

/// Everything one forward/backward evaluation produces, collected on rank 0.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<(String, Tensor<T>)>,
    pub activations: Vec<(String, Tensor<T>)>,
    /// ReLU masks and max-pool winners of every rank, rank-ordered.
    pub fingerprint: Vec<u64>,
}

/// Installs `params`, runs one traced forward/backward pass on a fresh group
/// and returns the gathered results.
pub fn evaluate<T: Real>(
    spec: &NetworkSpec,
    params: &[Tensor<T>],
    x: &Tensor<T>,
    labels: &[usize],
    fault: Option<&Fault>,
    config: GroupConfig,
) -> Result<Evaluation<T>> {
    let names: Vec<String> = spec.params()?.into_iter().map(|p| p.name).collect();
    let out = spawn_with(spec.workers, config, |c: &Comm<T>| {
        let me = c.rank();
        let mut net = Network::new(spec, me)?;
        net.install(c, (me == 0).then_some(params))?;
        if let Some(f) = fault {
            let p = net
                .params_mut()
                .into_iter()
                .find(|p| p.name == f.param)
                .ok_or_else(|| Error::contract(format!("no parameter named {}", f.param)))?;
            if me == f.rank {
                let v = p.value.as_mut().ok_or_else(|| Error::contract(format!("rank {me} holds no block of {}", f.param)))?;
                v.data_mut()[0] += T::from_f64_lossy(f.delta);
            }
        }
        net.zero_grad();
        let (logits, trace) = net.forward_traced(c, (me == 0).then(|| x.clone()))?;
        let (loss, dy) = match &logits {
            Some(z) => {
                let (l, g) = cross_entropy(z, labels)?;
                (Some(l), Some(g))
            }
            None => (None, None),
        };
        net.backward(c, dy)?;
        let grads = net.gather_grads(c)?;
        Ok((loss, logits, grads, trace, net.fingerprint()))
    })?;
    let mut fingerprint = Vec::new();
    for r in &out {
        fingerprint.extend_from_slice(&r.4);
    }
    let (loss, logits, grads, trace, _) = out.into_iter().next().expect("rank 0");
    Ok(Evaluation {
        loss: loss.expect("rank 0 computes the loss"),
        logits: logits.expect("rank 0 holds the output"),
        grads: names.into_iter().zip(grads.expect("rank 0 gathers")).collect(),
        activations: trace.into_iter().map(|(n, t)| (n, t.expect("rank 0 gathers"))).collect(),
        fingerprint,
    })
}

/// One row of an equivalence report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{}, {:.3e}, {:.1e}, {verdict}", self.name, self.rel_err, self.tolerance)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EquivalenceReport {
    pub checks: Vec<Check>,
}

impl EquivalenceReport {
    pub const HEADER: &'static str = "check, rel_err, tolerance, result";

    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    /// The earliest failing check in forward order.
    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed())
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Forward output tolerance.
pub const FORWARD_TOL: f64 = 1e-12;
/// Gradient tolerance.
pub const GRAD_TOL: f64 = 1e-10;

/// Compares sequential and distributed Lenet-5 on one random batch from
/// identical initial parameters: every layer output, the loss and every
/// parameter gradient.
pub fn verify_equivalence(seed: u64, batch: usize, fault: Option<&Fault>, config: GroupConfig) -> Result<EquivalenceReport> {
    let seq = build_lenet5(Mode::Sequential, 1, batch)?;
    let dist = build_lenet5(Mode::Distributed, LENET_WORKERS, batch)?;
    let params = init_params::<f64>(&seq, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::from_f64(
        &[batch, 1, IMAGE, IMAGE],
        &(0..batch * IMAGE * IMAGE).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..CLASSES)).collect();
    let a = evaluate(&seq, &params, &x, &labels, None, config)?;
    let b = evaluate(&dist, &params, &x, &labels, fault, config)?;
    Ok(compare(&a, &b))
}

/// Checks of `dist` against `seq`: layer outputs by name, loss, gradients.
pub fn compare<T: Real>(seq: &Evaluation<T>, dist: &Evaluation<T>) -> EquivalenceReport {
    let mut checks = Vec::new();
    for (name, y) in &seq.activations {
        if let Some((_, z)) = dist.activations.iter().find(|(n, _)| n == name) {
            let rel_err = if y.shape() == z.shape() { relative_error(z.data(), y.data()) } else { f64::INFINITY };
            checks.push(Check { name: name.clone(), rel_err, tolerance: FORWARD_TOL });
        }
    }
    checks.push(Check {
        name: "loss".into(),
        rel_err: relative_error(&[dist.loss], &[seq.loss]),
        tolerance: FORWARD_TOL,
    });
    for ((name, g), (_, h)) in seq.grads.iter().zip(&dist.grads) {
        checks.push(Check { name: format!("grad {name}"), rel_err: relative_error(h.data(), g.data()), tolerance: GRAD_TOL });
    }
    EquivalenceReport { checks }
}

/// Labeled images, row-major, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if rows > IMAGE || cols > IMAGE {
            return Err(Error::Dataset(format!("{rows}x{cols} images do not fit the {IMAGE}x{IMAGE} input")));
        }
        if images.len() != rows * cols * labels.len() {
            return Err(Error::Dataset(format!("{} pixels for {} images of {rows}x{cols}", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Dataset(format!("label {l} out of range")));
        }
        Ok(Self { rows, cols, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(count, 1, rows, cols)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.len(), 1, self.rows, self.cols]
    }

    /// Full batches only; the remainder is dropped.
    pub fn batches(&self, batch: usize) -> usize {
        self.len() / batch
    }

    /// Batch `i`, zero-padded to `(batch, 1, 32, 32)` with the image centered.
    pub fn batch<T: Real>(&self, i: usize, batch: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        if (i + 1) * batch > self.len() {
            return Err(Error::Dataset(format!("batch {i} of size {batch} exceeds {} samples", self.len())));
        }
        let (top, left) = ((IMAGE - self.rows) / 2, (IMAGE - self.cols) / 2);
        let px = self.rows * self.cols;
        let mut x = Tensor::zeros(&[batch, 1, IMAGE, IMAGE]);
        let data = x.data_mut();
        for n in 0..batch {
            let src = &self.images[(i * batch + n) * px..][..px];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    data[n * IMAGE * IMAGE + (top + r) * IMAGE + left + c] = T::from_f64_lossy(src[r * self.cols + c] as f64);
                }
            }
        }
        let labels = self.labels[i * batch..(i + 1) * batch].iter().map(|&l| l as usize).collect();
        Ok((x, labels))
    }

    /// Two linearly separable classes: a bright square in the top-left or
    /// the bottom-right corner over faint noise.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 28;
        let mut images = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.gen_range(0..2u8);
            let at = if label == 0 { 4 } else { 16 };
            for r in 0..side {
                for c in 0..side {
                    let lit = (at..at + 8).contains(&r) && (at..at + 8).contains(&c);
                    images.push(if lit { 1.0 } else { rng.gen_range(0.0..0.2) });
                }
            }
            labels.push(label);
        }
        Self { rows: side, cols: side, images, labels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub watchdog: std::time::Duration,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch: 256, lr: 1e-3, seed: 0, max_steps: None, watchdog: GroupConfig::default().watchdog }
    }
}

/// One optimizer step; `test_acc` is set on the last step of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub test_acc: Option<f64>,
}

impl Metric {
    pub const HEADER: &'static str = "epoch, step, loss, test_acc";
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}, {:.17e}, ", self.epoch, self.step, self.loss)?;
        match self.test_acc {
            Some(a) => write!(f, "{a:.4}"),
            None => f.write_str("nan"),
        }
    }
}

/// Trains Lenet-5 in `mode`. Data lives on rank 0; `sink` sees every
/// metric as it is produced.
pub fn train<T: Real>(
    mode: Mode,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    sink: &(dyn Fn(&Metric) + Sync),
) -> Result<Vec<Metric>> {
    let spec = build_lenet5(mode, mode.workers(), cfg.batch)?;
    let per_epoch = train.batches(cfg.batch);
    if per_epoch == 0 {
        return Err(Error::Dataset(format!("{} samples do not fill one batch of {}", train.len(), cfg.batch)));
    }
    let init = init_params::<T>(&spec, cfg.seed)?;
    let config = GroupConfig { watchdog: cfg.watchdog };
    let out = spawn_with(spec.workers, config, |c: &Comm<T>| {
        let me = c.rank();
        let mut net = Network::new(&spec, me)?;
        net.install(c, (me == 0).then_some(init.as_slice()))?;
        let mut adam = Adam::new(cfg.lr);
        let mut history = Vec::new();
        let mut step = 0;
        'epochs: for epoch in 1..=cfg.epochs {
            for i in 0..per_epoch {
                let (x, labels) = if me == 0 { train.batch::<T>(i, cfg.batch)? } else { (Tensor::zeros(&[0]), Vec::new()) };
                let loss = net.loss_and_grad(c, (me == 0).then_some(x), &labels)?;
                adam.step(net.params_mut())?;
                step += 1;
                let last = i + 1 == per_epoch || cfg.max_steps == Some(step);
                let test_acc = if last { accuracy(&mut net, c, test, cfg.batch)? } else { None };
                if let Some(loss) = loss {
                    let m = Metric { epoch, step, loss: loss.as_f64(), test_acc };
                    sink(&m);
                    history.push(m);
                }
                if cfg.max_steps == Some(step) {
                    break 'epochs;
                }
            }
        }
        Ok(history)
    })?;
    Ok(out.into_iter().next().expect("rank 0"))
}

/// Test accuracy over full batches, on rank 0. `None` if there is no full
/// test batch.
fn accuracy<T: Real>(net: &mut Network<T>, c: &Comm<T>, test: &Dataset, batch: usize) -> Result<Option<f64>> {
    let n = test.batches(batch);
    if n == 0 {
        return Ok(None);
    }
    let mut correct = 0;
    for i in 0..n {
        let (x, labels) = if c.rank() == 0 { test.batch::<T>(i, batch)? } else { (Tensor::zeros(&[0]), Vec::new()) };
        if let Some(pred) = net.predict(c, (c.rank() == 0).then_some(x))? {
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
    }
    Ok(Some(correct as f64 / (n * batch) as f64))
}

/// Largest per-step relative loss difference between two runs.
pub fn loss_divergence(a: &[Metric], b: &[Metric]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| relative_error(&[x.loss], &[y.loss])).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let spec = build_lenet5(Mode::Sequential, 1, 2).unwrap();
        let counts: Vec<usize> = spec.params().unwrap().chunks(2).map(|p| p.iter().map(|q| q.shape.iter().product::<usize>()).sum()).collect();
        assert_eq!(counts, vec![156, 2416, 48120, 10164, 850]);
        assert_eq!(spec.param_count().unwrap(), 61706);
    }

    #[test]
    fn distributed_placement_table() {
        let spec = build_lenet5(Mode::Distributed, 4, 2).unwrap();
        let rows = spec.placement().unwrap();
        let held = |rank: usize| -> Vec<(String, Vec<usize>)> {
            rows.iter().filter(|r| r.1 == rank).map(|r| (r.0.clone(), r.2.clone())).collect()
        };
        let s = |n: &str, v: &[usize]| (n.to_string(), v.to_vec());
        assert_eq!(
            held(1),
            vec![s("C5.w", &[60, 200]), s("F6.w", &[42, 60]), s("Output.w", &[5, 42])]
        );
        assert_eq!(held(3), held(1));
        assert_eq!(
            held(2),
            vec![s("C5.w", &[60, 200]), s("C5.b", &[60]), s("F6.w", &[42, 60]), s("F6.b", &[42]), s("Output.w", &[5, 42]), s("Output.b", &[5])]
        );
        let zero = held(0);
        assert_eq!(zero[..4], [s("C1.w", &[6, 1, 5, 5]), s("C1.b", &[6]), s("C3.w", &[16, 6, 5, 5]), s("C3.b", &[16])]);
        // the blocks tile each sequential tensor
        let seq = build_lenet5(Mode::Sequential, 1, 2).unwrap();
        for p in seq.params().unwrap() {
            let total: usize = rows.iter().filter(|r| r.0 == p.name).map(|r| r.2.iter().product::<usize>()).sum();
            assert_eq!(total, p.shape.iter().product::<usize>(), "{}", p.name);
        }
    }

    #[test]
    fn unsupported_worker_count() {
        assert!(build_lenet5(Mode::Distributed, 3, 2).is_err());
        assert!(build_lenet5(Mode::Sequential, 4, 2).is_err());
    }

    #[test]
    fn identical_seeds_are_equivalent() {
        let r = verify_equivalence(7, 3, None, GroupConfig::default()).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn perturbed_block_fails_at_c5() {
        let fault = Fault { param: "C5.w".into(), rank: 1, delta: 1e-3 };
        let r = verify_equivalence(7, 3, Some(&fault), GroupConfig::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.first_failure().unwrap().name, "C5");
    }

    #[test]
    fn zero_input_propagates_biases_only() {
        let seq = build_lenet5(Mode::Sequential, 1, 3).unwrap();
        let dist = build_lenet5(Mode::Distributed, 4, 3).unwrap();
        let params = init_params::<f64>(&seq, 1).unwrap();
        let x = Tensor::zeros(&[3, 1, IMAGE, IMAGE]);
        let a = evaluate(&seq, &params, &x, &[0, 1, 2], None, GroupConfig::default()).unwrap();
        let b = evaluate(&dist, &params, &x, &[0, 1, 2], None, GroupConfig::default()).unwrap();
        assert!(relative_error(b.logits.data(), a.logits.data()) < FORWARD_TOL);
        // every sample sees the same constant planes, so every row agrees
        let z = a.logits.data();
        assert_eq!(z[..10], z[10..20]);
        assert_eq!(z[..10], z[20..30]);
    }

    #[test]
    fn batches_drop_the_remainder() {
        let d = Dataset::synthetic(10, 0);
        assert_eq!(d.batches(4), 2);
        let (x, l) = d.batch::<f64>(1, 4).unwrap();
        assert_eq!(x.shape(), &[4, 1, 32, 32]);
        assert_eq!(l.len(), 4);
        assert!(d.batch::<f64>(2, 4).is_err());
        // the 28x28 image sits in the middle of the 32x32 frame
        assert_eq!(x.get(&[0, 0, 0, 0]), 0.0);
        assert_eq!(x.get(&[0, 0, 31, 31]), 0.0);
    }

    #[test]
    fn synthetic_training_descends() {
        let data = Dataset::synthetic(64, 3);
        let cfg = TrainConfig { epochs: 2, batch: 16, lr: 1e-3, seed: 5, ..Default::default() };
        let h = train::<f64>(Mode::Sequential, &data, &data, &cfg, &|_| {}).unwrap();
        assert_eq!(h.len(), 8);
        assert!(h.last().unwrap().loss < h[0].loss, "{h:?}");
        assert!(h[3].test_acc.is_some() && h[2].test_acc.is_none());
    }
}
