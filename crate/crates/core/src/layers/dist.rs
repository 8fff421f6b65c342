//! Distributed layers assembled from halo exchanges, broadcasts,
//! sum-reductions and repartitions. Each backward pass is the composition of
//! the primitive adjoints in reverse order.

use super::kernels::{self, PoolMode};
use super::{restore, saved, AffineDesc, ConvDesc, Layer, LayerDesc, Param, PoolDesc, Saved, TransposeDesc};
use crate::comm::{broadcast_along, reduce_along, repartition, repartition_adjoint, SpmdOp};
use crate::halo::{HaloExchange, KernelDim, KernelSpec};
use crate::partition::Grid;
use crate::{broadcast_map, BroadcastMap, Comm, Error, Partition, Real, Result, Tensor};

fn full_kernel(spatial: &[KernelDim]) -> KernelSpec {
    KernelSpec::new([&[KernelDim::IDENTITY; 2][..], spatial].concat())
}

fn split_kernel(spatial: &[KernelDim]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    (
        spatial.iter().map(|k| k.size).collect(),
        spatial.iter().map(|k| k.stride).collect(),
        spatial.iter().map(|k| k.dilation).collect(),
    )
}

/// Bulk block grown to the full footprint of this worker's outputs: halo
/// exchange, trim, then zero padding at the global boundary.
fn gather_footprint<T: Real>(halo: &HaloExchange, comm: &Comm<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let me = comm.rank();
    let spec = halo.spec_of_rank(me).expect("caller checked membership");
    let mut local = halo.allocate(me, &x)?;
    halo.exchange(comm, &mut local)?;
    halo.trim(me, &local)?.pad(&spec.pad_left, &spec.pad_right)
}

/// Adjoint of [`gather_footprint`].
fn scatter_footprint<T: Real>(halo: &HaloExchange, comm: &Comm<T>, dx: Tensor<T>) -> Result<Tensor<T>> {
    let me = comm.rank();
    let spec = halo.spec_of_rank(me).expect("caller checked membership");
    let mut local = halo.trim_adjoint(me, &dx.unpad(&spec.pad_left, &spec.pad_right)?)?;
    halo.exchange_adjoint(comm, &mut local)?;
    halo.deallocate(me, &local)
}

fn member_input<T: Real>(part: &Partition, rank: usize, x: Option<Tensor<T>>, layer: &str) -> Result<Option<Tensor<T>>> {
    match (part.grid().contains_rank(rank), x) {
        (true, Some(x)) => Ok(Some(x)),
        (false, None) => Ok(None),
        (true, None) => Err(Error::contract(format!("{layer}: rank {rank} holds an input block but got none"))),
        (false, Some(_)) => Err(Error::contract(format!("{layer}: rank {rank} got input outside the input partition"))),
    }
}

pub struct DistConv<T> {
    name: String,
    kernel: Vec<KernelDim>,
    input: Partition,
    halo: HaloExchange,
    w_ranks: Vec<usize>,
    w_map: BroadcastMap,
    b_map: BroadcastMap,
    x_map: BroadcastMap,
    y_map: BroadcastMap,
    w: Param<T>,
    b: Param<T>,
}

struct ConvSaved<T> {
    x: Option<Tensor<T>>,
    w: Option<Tensor<T>>,
    with_bias: bool,
}

impl<T: Real> DistConv<T> {
    pub fn new(desc: &ConvDesc, rank: usize) -> Result<Self> {
        let input = desc.x_partition()?;
        let y = desc.y_partition()?;
        let halo = HaloExchange::from_kernel(input.clone(), &full_kernel(&desc.kernel))?;
        let ones = vec![1; desc.kernel.len()];
        let fg = &desc.feature_grid;
        let w_grid = Grid::with_ranks(&[&[1, desc.p_co, desc.p_ci][..], fg].concat(), desc.w_ranks.clone())?;
        let r_grid = Grid::with_ranks(&[&[1, desc.p_co, desc.p_ci][..], &ones].concat(), desc.r_ranks.clone())?;
        let x_grid = Grid::with_ranks(&[&[1, 1, desc.p_ci][..], fg].concat(), input.grid().ranks().to_vec())?;
        let y_grid = Grid::with_ranks(&[&[1, desc.p_co, 1][..], fg].concat(), y.grid().ranks().to_vec())?;
        let b_layout = desc.bias_layout()?;
        let b_grid = Grid::with_ranks(&[&[1, desc.p_co, 1][..], &ones].concat(), b_layout.grid().ranks().to_vec())?;
        Ok(Self {
            name: desc.name.clone(),
            kernel: desc.kernel.clone(),
            input,
            halo,
            w_ranks: desc.w_ranks.clone(),
            w_map: broadcast_map(&r_grid, &w_grid)?,
            b_map: broadcast_map(&b_grid, &y_grid)?,
            x_map: broadcast_map(&x_grid, &w_grid)?,
            y_map: broadcast_map(&y_grid, &w_grid)?,
            w: Param::new(format!("{}.w", desc.name), desc.weight_layout()?, rank),
            b: Param::new(format!("{}.b", desc.name), b_layout, rank),
        })
    }
}

impl<T: Real> Layer<T> for DistConv<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        let me = comm.rank();
        let x = member_input(&self.input, me, x, &self.name)?;
        let xhat = x.map(|x| gather_footprint(&self.halo, comm, x)).transpose()?;
        let w = broadcast_along(comm, &self.w_map, self.w.value.as_ref())?;
        let b = broadcast_along(comm, &self.b_map, self.b.value.as_ref())?;
        let x = broadcast_along(comm, &self.x_map, xhat.as_ref())?;
        let partial = if self.w_ranks.contains(&me) {
            let (_, stride, dilation) = split_kernel(&self.kernel);
            let (x, w) = (x.as_ref().expect("P_w member"), w.as_ref().expect("P_w member"));
            Some(kernels::conv_valid(x, w, b.as_ref(), &stride, &dilation)?)
        } else {
            None
        };
        let y = reduce_along(comm, &self.y_map, partial.as_ref())?;
        Ok((y, saved(ConvSaved { x, w, with_bias: b.is_some() })))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let s: ConvSaved<T> = restore(s, &self.name)?;
        let dy = broadcast_along(comm, &self.y_map, dy.as_ref())?;
        let (mut dx, mut dw, mut db) = (None, None, None);
        if let (Some(x), Some(w)) = (&s.x, &s.w) {
            let dy = dy.as_ref().ok_or_else(|| Error::contract(format!("{}: missing output cotangent", self.name)))?;
            let (_, stride, dilation) = split_kernel(&self.kernel);
            let (gx, gw, gb) = kernels::conv_valid_backward(x, w, dy, &stride, &dilation, s.with_bias)?;
            (dx, dw, db) = (Some(gx), Some(gw), gb);
        }
        let dw = reduce_along(comm, &self.w_map, dw.as_ref())?;
        self.w.accumulate(dw)?;
        let db = reduce_along(comm, &self.b_map, db.as_ref())?;
        self.b.accumulate(db)?;
        let dxhat = reduce_along(comm, &self.x_map, dx.as_ref())?;
        dxhat.map(|d| scatter_footprint(&self.halo, comm, d)).transpose()
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct DistPool {
    name: String,
    kernel: Vec<KernelDim>,
    mode: PoolMode,
    input: Partition,
    halo: HaloExchange,
}

struct PoolSaved {
    x_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl DistPool {
    pub fn new(desc: &PoolDesc) -> Result<Self> {
        let input = desc.x_partition()?;
        let halo = HaloExchange::from_kernel(input.clone(), &full_kernel(&desc.kernel))?;
        Ok(Self { name: desc.name.clone(), kernel: desc.kernel.clone(), mode: desc.mode, input, halo })
    }

    pub fn halo(&self) -> &HaloExchange {
        &self.halo
    }
}

impl<T: Real> Layer<T> for DistPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        let Some(x) = member_input(&self.input, comm.rank(), x, &self.name)? else {
            return Ok((None, saved(None::<PoolSaved>)));
        };
        let xhat = gather_footprint(&self.halo, comm, x)?;
        let (size, stride, dilation) = split_kernel(&self.kernel);
        let (y, argmax) = kernels::pool_valid(&xhat, &size, &stride, &dilation, self.mode)?;
        Ok((Some(y), saved(Some(PoolSaved { x_shape: xhat.shape().to_vec(), argmax }))))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let s: Option<PoolSaved> = restore(s, &self.name)?;
        let (Some(s), Some(dy)) = (s, dy) else {
            return Ok(None);
        };
        let (size, stride, dilation) = split_kernel(&self.kernel);
        let dxhat = kernels::pool_valid_backward(&s.x_shape, &dy, &size, &stride, &dilation, self.mode, &s.argmax)?;
        Ok(Some(scatter_footprint(&self.halo, comm, dxhat)?))
    }

    fn fingerprint(&self, s: &Saved, out: &mut Vec<u64>) {
        if let Some(Some(s)) = s.downcast_ref::<Option<PoolSaved>>() {
            out.extend(s.argmax.iter().map(|&i| i as u64));
        }
    }
}

pub struct DistAffine<T> {
    name: String,
    input: Partition,
    w_ranks: Vec<usize>,
    x_map: BroadcastMap,
    y_map: BroadcastMap,
    w: Param<T>,
    b: Param<T>,
}

impl<T: Real> DistAffine<T> {
    pub fn new(desc: &AffineDesc, rank: usize) -> Result<Self> {
        let w_grid = Grid::with_ranks(&[desc.p_fo, desc.p_fi], desc.w_ranks.clone())?;
        let x_grid = Grid::with_ranks(&[1, desc.p_fi], desc.x_ranks())?;
        let y_grid = Grid::with_ranks(&[desc.p_fo, 1], desc.y_ranks())?;
        Ok(Self {
            name: desc.name.clone(),
            input: desc.x_partition()?,
            w_ranks: desc.w_ranks.clone(),
            x_map: broadcast_map(&x_grid, &w_grid)?,
            y_map: broadcast_map(&y_grid, &w_grid)?,
            w: Param::new(format!("{}.w", desc.name), desc.weight_layout()?, rank),
            b: Param::new(format!("{}.b", desc.name), desc.bias_layout()?, rank),
        })
    }
}

impl<T: Real> Layer<T> for DistAffine<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        let me = comm.rank();
        let x = member_input(&self.input, me, x, &self.name)?;
        let x = broadcast_along(comm, &self.x_map, x.as_ref())?;
        let partial = if self.w_ranks.contains(&me) {
            let w = self.w.value.as_ref().expect("P_w member holds weights");
            Some(kernels::affine_local(w, self.b.value.as_ref(), x.as_ref().expect("P_w member"))?)
        } else {
            None
        };
        let y = reduce_along(comm, &self.y_map, partial.as_ref())?;
        Ok((y, saved(x)))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let x: Option<Tensor<T>> = restore(s, &self.name)?;
        let dy = broadcast_along(comm, &self.y_map, dy.as_ref())?;
        let mut dx = None;
        if let (Some(x), Some(w)) = (&x, &self.w.value) {
            let dy = dy.as_ref().ok_or_else(|| Error::contract(format!("{}: missing output cotangent", self.name)))?;
            let (gw, gb, gx) = kernels::affine_local_adjoint(w, x, dy)?;
            self.w.accumulate(Some(gw))?;
            if self.b.value.is_some() {
                self.b.accumulate(Some(gb))?;
            }
            dx = Some(gx);
        }
        reduce_along(comm, &self.x_map, dx.as_ref())
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct DistTranspose {
    name: String,
    src: Partition,
    dst: Partition,
}

impl DistTranspose {
    pub fn new(desc: &TransposeDesc) -> Self {
        Self { name: desc.name.clone(), src: desc.src.clone(), dst: desc.dst.clone() }
    }
}

impl<T: Real> Layer<T> for DistTranspose {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        let x = member_input(&self.src, comm.rank(), x, &self.name)?;
        Ok((repartition(comm, &self.src, &self.dst, x.as_ref())?, saved(())))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        restore::<()>(s, &self.name)?;
        repartition_adjoint(comm, &self.src, &self.dst, dy.as_ref())
    }
}

/// A layer with frozen parameters, seen as a map of its input alone, so the
/// adjoint harness can certify it. Only layers linear in their input (with
/// zero bias) are meaningful here: the adjoint replays the backward pass
/// from a forward pass at zero.
pub struct DistLayerOp {
    pub desc: LayerDesc,
    pub input: Partition,
    pub workers: usize,
    /// Global parameter values in the layer's parameter order.
    pub params: Vec<Tensor<f64>>,
}

impl DistLayerOp {
    fn output(&self) -> Partition {
        self.desc.output_partition(&self.input).expect("validated by the constructor's caller")
    }

    fn len(part: &Partition, rank: usize) -> usize {
        part.local_shape(rank).map_or(0, |s| s.iter().product())
    }

    fn layer<T: Real>(&self, rank: usize) -> Result<Box<dyn Layer<T>>> {
        let mut layer = self.desc.build::<T>(rank)?;
        let mut params = layer.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::contract(format!("{}: expected {} parameters", self.desc.name(), params.len())));
        }
        for (p, full) in params.iter_mut().zip(&self.params) {
            if full.shape() != p.global_shape() {
                return Err(Error::ShapeMismatch { expected: p.global_shape().to_vec(), got: full.shape().to_vec() });
            }
            if let Some(range) = p.layout.range_of_rank(rank) {
                let block = full.slice(&range)?;
                p.value = Some(Tensor::from_f64(block.shape(), block.data())?);
            }
        }
        drop(params);
        Ok(layer)
    }

    fn block<T: Real>(part: &Partition, rank: usize, v: Vec<T>) -> Result<Option<Tensor<T>>> {
        part.local_shape(rank).map(|s| Tensor::from_vec(&s, v)).transpose()
    }
}

impl<T: Real> SpmdOp<T> for DistLayerOp {
    fn name(&self) -> String {
        self.desc.name().to_string()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        Self::len(&self.input, rank)
    }
    fn codomain_len(&self, rank: usize) -> usize {
        Self::len(&self.output(), rank)
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let layer = self.layer::<T>(comm.rank())?;
        let (y, _) = layer.forward(comm, Self::block(&self.input, comm.rank(), x)?)?;
        Ok(y.map(Tensor::into_vec).unwrap_or_default())
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let me = comm.rank();
        let mut layer = self.layer::<T>(me)?;
        let zero = self.input.local_shape(me).map(|s| Tensor::zeros(&s));
        let (_, s) = layer.forward(comm, zero)?;
        let dx = layer.backward(comm, s, Self::block(&self.output(), me, y)?)?;
        Ok(dx.map(Tensor::into_vec).unwrap_or_default())
    }
}
