//! Layers: sequential kernels, distributed layers built from the data
//! movement primitives, a reverse-mode tape and the Adam optimizer.
//!
//! A layer runs on every worker of a group. Ranks that hold no part of a
//! tensor pass `None` through. Parameters know their global layout, so the
//! blocks spread over a group can be gathered or scattered uniformly.

mod dist;
pub mod kernels;
mod local;

use std::any::Any;

pub use dist::{DistAffine, DistConv, DistLayerOp, DistPool, DistTranspose};
pub use kernels::PoolMode;
pub use local::{Flatten, LocalAffine, LocalConv, LocalPool, Relu};

use crate::comm::{gather_partition, scatter_partition};
use crate::halo::KernelDim;
use crate::partition::Grid;
use crate::{Comm, Error, Partition, Real, Result, Tensor};

/// Whatever a layer checkpoints in its forward pass for its backward pass.
pub type Saved = Box<dyn Any + Send>;

/// One learnable tensor. Every rank carries the metadata; only the ranks in
/// `layout` hold a block.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub layout: Partition,
    pub value: Option<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, layout: Partition, rank: usize) -> Self {
        let value = layout.local_shape(rank).map(|s| Tensor::zeros(&s));
        Self { name: name.into(), grad: value.clone(), layout, value }
    }

    pub fn global_shape(&self) -> &[usize] {
        self.layout.global_shape()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    pub(crate) fn accumulate(&mut self, delta: Option<Tensor<T>>) -> Result<()> {
        match (self.grad.as_mut(), delta) {
            (Some(g), Some(d)) => g.add_assign(&d),
            (None, None) => Ok(()),
            _ => Err(Error::contract(format!("gradient of {} arrived on a rank that does not hold it", self.name))),
        }
    }

    /// Collects the blocks onto `root`.
    pub fn gather(&self, comm: &Comm<T>, root: usize) -> Result<Option<Tensor<T>>> {
        gather_partition(comm, &self.layout, root, self.value.as_ref())
    }

    pub fn gather_grad(&self, comm: &Comm<T>, root: usize) -> Result<Option<Tensor<T>>> {
        gather_partition(comm, &self.layout, root, self.grad.as_ref())
    }

    /// Installs a global tensor held by `root` into the blocks.
    pub fn scatter(&mut self, comm: &Comm<T>, root: usize, full: Option<&Tensor<T>>) -> Result<()> {
        if let Some(v) = scatter_partition(comm, &self.layout, root, full)? {
            self.value = Some(v);
        }
        Ok(())
    }
}

/// A layer as seen by one worker.
pub trait Layer<T: Real>: Send {
    fn name(&self) -> &str;
    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)>;
    /// Consumes the forward context, accumulates parameter gradients and
    /// returns the input cotangent.
    fn backward(&mut self, comm: &Comm<T>, saved: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>>;
    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }
    /// Discrete choices made in the forward pass (ReLU masks, max-pool
    /// winners). Equal fingerprints mean the network is locally linear
    /// between the two evaluations.
    fn fingerprint(&self, _saved: &Saved, _out: &mut Vec<u64>) {}
}

pub(crate) fn saved<S: Any + Send>(s: S) -> Saved {
    Box::new(s)
}

pub(crate) fn restore<S: Any>(saved: Saved, layer: &str) -> Result<S> {
    saved
        .downcast::<S>()
        .map(|b| *b)
        .map_err(|_| Error::contract(format!("{layer}: backward received another layer's context")))
}

/// Forward contexts of one pass through a layer stack, replayed in reverse.
#[derive(Default)]
pub struct Tape {
    saved: Vec<Saved>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape from contexts recorded by hand, in forward order.
    pub fn from_saved(saved: Vec<Saved>) -> Self {
        Self { saved }
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }

    pub fn forward<T: Real>(
        &mut self,
        layers: &[Box<dyn Layer<T>>],
        comm: &Comm<T>,
        mut x: Option<Tensor<T>>,
    ) -> Result<Option<Tensor<T>>> {
        self.saved.clear();
        for layer in layers {
            let (y, s) = layer.forward(comm, x)?;
            self.saved.push(s);
            x = y;
        }
        Ok(x)
    }

    pub fn backward<T: Real>(
        &mut self,
        layers: &mut [Box<dyn Layer<T>>],
        comm: &Comm<T>,
        mut dy: Option<Tensor<T>>,
    ) -> Result<Option<Tensor<T>>> {
        if self.saved.len() != layers.len() {
            return Err(Error::contract(format!(
                "backward before forward: tape holds {} of {} layers",
                self.saved.len(),
                layers.len()
            )));
        }
        for layer in layers.iter_mut().rev() {
            let s = self.saved.pop().expect("length checked");
            dy = layer.backward(comm, s, dy)?;
        }
        Ok(dy)
    }

    pub fn fingerprint<T: Real>(&self, layers: &[Box<dyn Layer<T>>]) -> Vec<u64> {
        let mut out = Vec::new();
        for (layer, s) in layers.iter().zip(&self.saved) {
            layer.fingerprint(s, &mut out);
        }
        out
    }
}

/// Adam with bias correction. Elementwise, so blocks of a distributed
/// parameter update exactly like the matching part of the full tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every locally held parameter from its gradient.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| p.value.as_ref().map(|v| (Tensor::zeros(v.shape()), Tensor::zeros(v.shape()))))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::contract("optimizer bound to a different parameter list"));
        }
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.step));
        let bc2 = c(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (c(self.lr), c(self.eps));
        for (p, state) in params.into_iter().zip(&mut self.moments) {
            let (Some(value), Some(grad), Some((m, v))) = (p.value.as_mut(), p.grad.as_ref(), state.as_mut()) else {
                continue;
            };
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                value.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Convolution over `(n_b, n_ci, spatial...)`. The work grid `P_w` is
/// `1 x P_co x P_ci x features`; weights live on `P_r` (`P_co x P_ci`).
/// Inputs live on the `co = 0` slice of `P_w`, outputs and biases on the
/// `ci = 0` slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDesc {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub out_channels: usize,
    /// Spatial dimensions only.
    pub kernel: Vec<KernelDim>,
    pub p_co: usize,
    pub p_ci: usize,
    pub feature_grid: Vec<usize>,
    /// `P_w` ranks, row-major over `(co, ci, features...)`.
    pub w_ranks: Vec<usize>,
    /// `P_r` ranks, row-major over `(co, ci)`.
    pub r_ranks: Vec<usize>,
}

impl ConvDesc {
    /// Everything on rank 0.
    pub fn sequential(name: &str, input_shape: &[usize], out_channels: usize, kernel: Vec<KernelDim>) -> Self {
        let nf = kernel.len();
        Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            out_channels,
            kernel,
            p_co: 1,
            p_ci: 1,
            feature_grid: vec![1; nf],
            w_ranks: vec![0],
            r_ranks: vec![0],
        }
    }

    fn features(&self) -> usize {
        self.feature_grid.iter().product()
    }

    pub fn workers(&self) -> usize {
        self.w_ranks.len()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        [&[self.out_channels, self.input_shape[1]][..], &self.kernel.iter().map(|k| k.size).collect::<Vec<_>>()].concat()
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let spatial = crate::KernelSpec::new(self.kernel.clone()).output_shape(&self.input_shape[2..])?;
        Ok([&[self.input_shape[0], self.out_channels][..], &spatial].concat())
    }

    fn w_rank(&self, co: usize, ci: usize, f: usize) -> usize {
        self.w_ranks[(co * self.p_ci + ci) * self.features() + f]
    }

    fn validate(&self) -> Result<()> {
        let nf = self.kernel.len();
        if self.input_shape.len() != nf + 2 || self.feature_grid.len() != nf {
            return Err(Error::contract(format!("{}: kernel and input ranks disagree", self.name)));
        }
        if self.w_ranks.len() != self.p_co * self.p_ci * self.features() || self.r_ranks.len() != self.p_co * self.p_ci {
            return Err(Error::contract(format!("{}: rank lists do not match the partition shapes", self.name)));
        }
        Ok(())
    }

    /// `P_x` as a tensor partition: `1 x P_ci x features`.
    pub fn x_partition(&self) -> Result<Partition> {
        self.validate()?;
        let ranks = (0..self.p_ci).flat_map(|ci| (0..self.features()).map(move |f| (ci, f))).map(|(ci, f)| self.w_rank(0, ci, f));
        let grid = Grid::with_ranks(&[&[1, self.p_ci][..], &self.feature_grid].concat(), ranks.collect())?;
        Partition::new(&self.input_shape, grid)
    }

    /// `P_y` as a tensor partition: `1 x P_co x features`.
    pub fn y_partition(&self) -> Result<Partition> {
        self.validate()?;
        let ranks = (0..self.p_co).flat_map(|co| (0..self.features()).map(move |f| (co, f))).map(|(co, f)| self.w_rank(co, 0, f));
        let grid = Grid::with_ranks(&[&[1, self.p_co][..], &self.feature_grid].concat(), ranks.collect())?;
        Partition::new(&self.output_shape()?, grid)
    }

    pub fn weight_layout(&self) -> Result<Partition> {
        self.validate()?;
        let dims = [&[self.p_co, self.p_ci][..], &vec![1; self.kernel.len()]].concat();
        Partition::new(&self.weight_shape(), Grid::with_ranks(&dims, self.r_ranks.clone())?)
    }

    pub fn bias_layout(&self) -> Result<Partition> {
        self.validate()?;
        let ranks = (0..self.p_co).map(|co| self.r_ranks[co * self.p_ci]).collect();
        Partition::new(&[self.out_channels], Grid::with_ranks(&[self.p_co], ranks)?)
    }
}

/// Pooling over `(n_b, n_c, spatial...)` on a `1 x P_c x features` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolDesc {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub kernel: Vec<KernelDim>,
    pub mode: PoolMode,
    pub grid: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl PoolDesc {
    pub fn sequential(name: &str, input_shape: &[usize], kernel: Vec<KernelDim>, mode: PoolMode) -> Self {
        Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            kernel,
            mode,
            grid: vec![1; input_shape.len()],
            ranks: vec![0],
        }
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let spatial = crate::KernelSpec::new(self.kernel.clone()).output_shape(&self.input_shape[2..])?;
        Ok([&self.input_shape[..2], &spatial].concat())
    }

    pub fn x_partition(&self) -> Result<Partition> {
        if self.grid.len() != self.input_shape.len() || self.grid[0] != 1 {
            return Err(Error::contract(format!("{}: pooling grid must be 1 x P_c x features", self.name)));
        }
        Partition::new(&self.input_shape, Grid::with_ranks(&self.grid, self.ranks.clone())?)
    }

    pub fn y_partition(&self) -> Result<Partition> {
        self.x_partition()?.with_shape(&self.output_shape()?)
    }
}

/// Affine map `(n_b, n_fi) -> (n_b, n_fo)` with weights on `P_w`
/// (`P_fo x P_fi`). Inputs live on row `fo = 0`, outputs and biases on
/// column `fi = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineDesc {
    pub name: String,
    pub batch: usize,
    pub n_fi: usize,
    pub n_fo: usize,
    pub p_fo: usize,
    pub p_fi: usize,
    pub w_ranks: Vec<usize>,
}

impl AffineDesc {
    pub fn sequential(name: &str, batch: usize, n_fi: usize, n_fo: usize) -> Self {
        Self { name: name.into(), batch, n_fi, n_fo, p_fo: 1, p_fi: 1, w_ranks: vec![0] }
    }

    pub fn workers(&self) -> usize {
        self.w_ranks.len()
    }

    fn validate(&self) -> Result<()> {
        if self.w_ranks.len() != self.p_fo * self.p_fi {
            return Err(Error::contract(format!("{}: {} ranks for a {}x{} grid", self.name, self.w_ranks.len(), self.p_fo, self.p_fi)));
        }
        Ok(())
    }

    pub(crate) fn x_ranks(&self) -> Vec<usize> {
        (0..self.p_fi).map(|fi| self.w_ranks[fi]).collect()
    }

    pub(crate) fn y_ranks(&self) -> Vec<usize> {
        (0..self.p_fo).map(|fo| self.w_ranks[fo * self.p_fi]).collect()
    }

    pub fn x_partition(&self) -> Result<Partition> {
        self.validate()?;
        Partition::new(&[self.batch, self.n_fi], Grid::with_ranks(&[1, self.p_fi], self.x_ranks())?)
    }

    pub fn y_partition(&self) -> Result<Partition> {
        self.validate()?;
        Partition::new(&[self.batch, self.n_fo], Grid::with_ranks(&[1, self.p_fo], self.y_ranks())?)
    }

    pub fn weight_layout(&self) -> Result<Partition> {
        self.validate()?;
        Partition::new(&[self.n_fo, self.n_fi], Grid::with_ranks(&[self.p_fo, self.p_fi], self.w_ranks.clone())?)
    }

    pub fn bias_layout(&self) -> Result<Partition> {
        self.validate()?;
        Partition::new(&[self.n_fo], Grid::with_ranks(&[self.p_fo], self.y_ranks())?)
    }
}

/// Repartition between two layouts of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TransposeDesc {
    pub name: String,
    pub src: Partition,
    pub dst: Partition,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    Conv(ConvDesc),
    Pool(PoolDesc),
    Affine(AffineDesc),
    Transpose(TransposeDesc),
    Relu(String),
    Flatten(String),
}

impl LayerDesc {
    pub fn name(&self) -> &str {
        match self {
            LayerDesc::Conv(d) => &d.name,
            LayerDesc::Pool(d) => &d.name,
            LayerDesc::Affine(d) => &d.name,
            LayerDesc::Transpose(d) => &d.name,
            LayerDesc::Relu(n) | LayerDesc::Flatten(n) => n,
        }
    }

    /// Layout of the output given the layout of the input, or an error if
    /// the layer cannot accept that input layout.
    pub fn output_partition(&self, input: &Partition) -> Result<Partition> {
        let expect = |want: Partition| {
            if &want == input {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "{} expects input {:?} on {}, got {:?} on {}",
                    self.name(),
                    want.global_shape(),
                    want.grid(),
                    input.global_shape(),
                    input.grid()
                )))
            }
        };
        match self {
            LayerDesc::Conv(d) => {
                expect(d.x_partition()?)?;
                d.y_partition()
            }
            LayerDesc::Pool(d) => {
                expect(d.x_partition()?)?;
                d.y_partition()
            }
            LayerDesc::Affine(d) => {
                expect(d.x_partition()?)?;
                d.y_partition()
            }
            LayerDesc::Transpose(d) => {
                expect(d.src.clone())?;
                Ok(d.dst.clone())
            }
            LayerDesc::Relu(_) => Ok(input.clone()),
            LayerDesc::Flatten(name) => {
                let shape = input.global_shape();
                let dims = input.grid().dims();
                if shape.len() < 2 || dims[0] != 1 || dims[2..].iter().any(|&p| p != 1) {
                    return Err(Error::contract(format!("{name}: only the second dimension may be split")));
                }
                let flat: usize = shape[1..].iter().product();
                Partition::new(&[shape[0], flat], Grid::with_ranks(&[1, dims[1]], input.grid().ranks().to_vec())?)
            }
        }
    }

    /// The layer as held by `rank`. Single-worker descriptors build the
    /// sequential layer; anything larger builds the distributed one.
    pub fn build<T: Real>(&self, rank: usize) -> Result<Box<dyn Layer<T>>> {
        Ok(match self {
            LayerDesc::Conv(d) if d.workers() == 1 && d.r_ranks == d.w_ranks => Box::new(LocalConv::new(d, rank)?),
            LayerDesc::Conv(d) => Box::new(DistConv::new(d, rank)?),
            LayerDesc::Pool(d) if d.ranks.len() == 1 => Box::new(LocalPool::new(d)?),
            LayerDesc::Pool(d) => Box::new(DistPool::new(d)?),
            LayerDesc::Affine(d) if d.workers() == 1 => Box::new(LocalAffine::new(d, rank)?),
            LayerDesc::Affine(d) => Box::new(DistAffine::new(d, rank)?),
            LayerDesc::Transpose(d) => Box::new(DistTranspose::new(d)),
            LayerDesc::Relu(n) => Box::new(Relu::new(n)),
            LayerDesc::Flatten(n) => Box::new(Flatten::new(n)),
        })
    }
}
