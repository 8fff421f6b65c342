//! Group-collective operators seen as single linear maps, so the adjoint
//! harness can certify them end to end.

use super::{
    all_reduce, broadcast, gather, repartition, repartition_adjoint, scatter, scatter_adjoint, send_recv,
    send_recv_adjoint, spawn_with, sum_reduce, Comm, GroupConfig,
};
use crate::memory_ops::LinearOp;
use crate::{Error, IndexRange, Partition, Real, Result, Tensor};

/// A linear operator whose input and output are spread over a worker group.
/// Each rank sees only its own slice of the flat domain and codomain.
pub trait SpmdOp<T: Real>: Sync {
    fn name(&self) -> String;
    fn workers(&self) -> usize;
    fn domain_len(&self, rank: usize) -> usize;
    fn codomain_len(&self, rank: usize) -> usize;
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>>;
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>>;
}

/// Runs an [`SpmdOp`] on a fresh worker group per application. Global
/// vectors are the rank-ordered concatenation of the per-rank pieces.
pub struct Spmd<O> {
    pub op: O,
    pub config: GroupConfig,
}

impl<O> Spmd<O> {
    pub fn new(op: O) -> Self {
        Self { op, config: GroupConfig::default() }
    }

    fn run<T: Real>(
        &self,
        v: &[T],
        in_len: impl Fn(usize) -> usize,
        out_len: impl Fn(usize) -> usize + Sync,
        adjoint: bool,
    ) -> Result<Vec<T>>
    where
        O: SpmdOp<T>,
    {
        let k = self.op.workers();
        let lens: Vec<usize> = (0..k).map(in_len).collect();
        let pieces = split(v, &lens)?;
        let out = spawn_with(k, self.config, |c: &Comm<T>| {
            let x = pieces[c.rank()].clone();
            let y = if adjoint { self.op.adjoint(c, x)? } else { self.op.forward(c, x)? };
            if y.len() != out_len(c.rank()) {
                return Err(Error::ShapeMismatch { expected: vec![out_len(c.rank())], got: vec![y.len()] });
            }
            Ok(y)
        })?;
        Ok(out.concat())
    }
}

fn split<T: Copy>(v: &[T], lens: &[usize]) -> Result<Vec<Vec<T>>> {
    let total: usize = lens.iter().sum();
    if v.len() != total {
        return Err(Error::ShapeMismatch { expected: vec![total], got: vec![v.len()] });
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &n in lens {
        out.push(v[at..at + n].to_vec());
        at += n;
    }
    Ok(out)
}

impl<T: Real, O: SpmdOp<T>> LinearOp<T> for Spmd<O> {
    fn name(&self) -> String {
        self.op.name()
    }
    fn domain_len(&self) -> usize {
        (0..self.op.workers()).map(|r| self.op.domain_len(r)).sum()
    }
    fn codomain_len(&self) -> usize {
        (0..self.op.workers()).map(|r| self.op.codomain_len(r)).sum()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.run(x, |r| self.op.domain_len(r), |r| self.op.codomain_len(r), false)
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        self.run(y, |r| self.op.codomain_len(r), |r| self.op.domain_len(r), true)
    }
}

fn some_vec<T: Real>(t: Option<Tensor<T>>) -> Vec<T> {
    t.map(Tensor::into_vec).unwrap_or_default()
}

fn tensor<T: Real>(shape: &[usize], v: Vec<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, v)
}

/// Copy from `src` to `dst`: the source keeps `x` and the destination gets
/// a copy, so the codomain is both.
pub struct SendRecvOp {
    pub workers: usize,
    pub src: usize,
    pub dst: usize,
    pub len: usize,
}

impl<T: Real> SpmdOp<T> for SendRecvOp {
    fn name(&self) -> String {
        "send_recv".into()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        if rank == self.src {
            self.len
        } else {
            0
        }
    }
    fn codomain_len(&self, rank: usize) -> usize {
        if rank == self.src || rank == self.dst {
            self.len
        } else {
            0
        }
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let me = comm.rank();
        let x = (me == self.src).then(|| tensor(&[self.len], x)).transpose()?;
        let y = send_recv(comm, self.src, self.dst, x.as_ref())?;
        Ok(if me == self.src { some_vec(x) } else { some_vec(y) })
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let me = comm.rank();
        let mut dy = (me == self.src || me == self.dst).then(|| tensor(&[self.len], y)).transpose()?;
        if me == self.src {
            send_recv_adjoint(comm, self.src, self.dst, None, dy.as_mut())?;
            Ok(some_vec(dy))
        } else {
            send_recv_adjoint(comm, self.src, self.dst, dy.as_ref(), None)?;
            Ok(Vec::new())
        }
    }
}

/// Scatter of a root tensor into blocks.
pub struct ScatterOp {
    pub workers: usize,
    pub root: usize,
    pub shape: Vec<usize>,
    pub blocks: Vec<(usize, IndexRange)>,
}

impl ScatterOp {
    fn block_len(&self, rank: usize) -> usize {
        self.blocks.iter().find(|(r, _)| *r == rank).map_or(0, |(_, b)| b.volume())
    }
    fn block_shape(&self, rank: usize) -> Option<Vec<usize>> {
        self.blocks.iter().find(|(r, _)| *r == rank).map(|(_, b)| b.extents())
    }
    fn root_len(&self, rank: usize) -> usize {
        if rank == self.root {
            self.shape.iter().product()
        } else {
            0
        }
    }
}

impl<T: Real> SpmdOp<T> for ScatterOp {
    fn name(&self) -> String {
        "scatter".into()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        self.root_len(rank)
    }
    fn codomain_len(&self, rank: usize) -> usize {
        self.block_len(rank)
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let x = (comm.rank() == self.root).then(|| tensor(&self.shape, x)).transpose()?;
        Ok(some_vec(scatter(comm, self.root, &self.blocks, x.as_ref())?))
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let dy = self.block_shape(comm.rank()).map(|s| tensor(&s, y)).transpose()?;
        Ok(some_vec(scatter_adjoint(comm, self.root, &self.blocks, &self.shape, dy.as_ref())?))
    }
}

/// Gather of blocks onto a root; the reverse of [`ScatterOp`].
pub struct GatherOp(pub ScatterOp);

impl<T: Real> SpmdOp<T> for GatherOp {
    fn name(&self) -> String {
        "gather".into()
    }
    fn workers(&self) -> usize {
        self.0.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        self.0.block_len(rank)
    }
    fn codomain_len(&self, rank: usize) -> usize {
        self.0.root_len(rank)
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let s = &self.0;
        let x = s.block_shape(comm.rank()).map(|sh| tensor(&sh, x)).transpose()?;
        Ok(some_vec(gather(comm, s.root, &s.blocks, &s.shape, x.as_ref())?))
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let s = &self.0;
        let dy = (comm.rank() == s.root).then(|| tensor(&s.shape, y)).transpose()?;
        Ok(some_vec(scatter(comm, s.root, &s.blocks, dy.as_ref())?))
    }
}

/// Broadcast from `root` to `group`. With `corrupt` set the adjoint is
/// replaced by another broadcast, which is wrong; the adjoint test must
/// catch it.
pub struct BroadcastOp {
    pub workers: usize,
    pub root: usize,
    pub group: Vec<usize>,
    pub len: usize,
    pub corrupt: bool,
}

impl BroadcastOp {
    pub fn new(workers: usize, len: usize) -> Self {
        Self { workers, root: 0, group: (0..workers).collect(), len, corrupt: false }
    }
}

impl<T: Real> SpmdOp<T> for BroadcastOp {
    fn name(&self) -> String {
        if self.corrupt {
            "broadcast_corrupt".into()
        } else {
            "broadcast".into()
        }
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        if rank == self.root {
            self.len
        } else {
            0
        }
    }
    fn codomain_len(&self, rank: usize) -> usize {
        if self.group.contains(&rank) {
            self.len
        } else {
            0
        }
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let x = (comm.rank() == self.root).then(|| tensor(&[self.len], x)).transpose()?;
        Ok(some_vec(broadcast(comm, self.root, &self.group, x.as_ref())?))
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let me = comm.rank();
        let dy = self.group.contains(&me).then(|| tensor(&[self.len], y)).transpose()?;
        if self.corrupt {
            let b = broadcast(comm, self.root, &self.group, dy.as_ref())?;
            return Ok(if me == self.root { some_vec(b) } else { Vec::new() });
        }
        Ok(some_vec(sum_reduce(comm, self.root, &self.group, dy.as_ref())?))
    }
}

/// Sum-reduce of `group` onto `root`.
pub struct SumReduceOp(pub BroadcastOp);

impl<T: Real> SpmdOp<T> for SumReduceOp {
    fn name(&self) -> String {
        "sum_reduce".into()
    }
    fn workers(&self) -> usize {
        self.0.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        SpmdOp::<T>::codomain_len(&self.0, rank)
    }
    fn codomain_len(&self, rank: usize) -> usize {
        SpmdOp::<T>::domain_len(&self.0, rank)
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        SpmdOp::adjoint(&self.0, comm, x)
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        SpmdOp::forward(&self.0, comm, y)
    }
}

/// All-reduce over every worker; self-adjoint.
pub struct AllReduceOp {
    pub workers: usize,
    pub len: usize,
}

impl<T: Real> SpmdOp<T> for AllReduceOp {
    fn name(&self) -> String {
        "all_reduce".into()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, _: usize) -> usize {
        self.len
    }
    fn codomain_len(&self, _: usize) -> usize {
        self.len
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let group: Vec<usize> = (0..self.workers).collect();
        Ok(some_vec(all_reduce(comm, &group, Some(&tensor(&[self.len], x)?))?))
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        self.forward(comm, y)
    }
}

/// Repartition between two decompositions of one global shape.
pub struct RepartitionOp {
    pub workers: usize,
    pub src: Partition,
    pub dst: Partition,
}

fn local<T: Real>(p: &Partition, rank: usize, v: Vec<T>) -> Result<Option<Tensor<T>>> {
    p.local_shape(rank).map(|s| tensor(&s, v)).transpose()
}

impl<T: Real> SpmdOp<T> for RepartitionOp {
    fn name(&self) -> String {
        "repartition".into()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        self.src.range_of_rank(rank).map_or(0, |r| r.volume())
    }
    fn codomain_len(&self, rank: usize) -> usize {
        self.dst.range_of_rank(rank).map_or(0, |r| r.volume())
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        let x = local(&self.src, comm.rank(), x)?;
        Ok(some_vec(repartition(comm, &self.src, &self.dst, x.as_ref())?))
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        let dy = local(&self.dst, comm.rank(), y)?;
        Ok(some_vec(repartition_adjoint(comm, &self.src, &self.dst, dy.as_ref())?))
    }
}
