//! Parallel data movement primitives. Every function is collective over the
//! ranks it names: all of them must make the matching call, in the same
//! order relative to other collectives. Ranks that hold no data for an
//! operand pass `None` and get `None` back.

use super::{Comm, OpKind, Tag};
use crate::partition::{overlap, BroadcastMap, Partition};
use crate::{Error, IndexRange, Real, Result, Tensor};

const SEND_RECV: Tag = Tag::new(OpKind::SendRecv, 0);
const SEND_RECV_ADJ: Tag = Tag::new(OpKind::SendRecv, 1);
const SCATTER: Tag = Tag::new(OpKind::Scatter, 0);
const GATHER: Tag = Tag::new(OpKind::Gather, 0);
const BROADCAST: Tag = Tag::new(OpKind::Broadcast, 0);
const SUM_REDUCE: Tag = Tag::new(OpKind::SumReduce, 0);
const REPARTITION: Tag = Tag::new(OpKind::Repartition, 0);

fn required<'a, T>(x: Option<&'a Tensor<T>>, rank: usize, what: &str) -> Result<&'a Tensor<T>> {
    x.ok_or_else(|| Error::contract(format!("rank {rank} must supply the {what}")))
}

fn expect_shape<T: Real>(t: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if t.shape() == shape {
        Ok(t)
    } else {
        Err(Error::ShapeMismatch { expected: shape.to_vec(), got: t.shape().to_vec() })
    }
}

fn check_group<T: Real>(comm: &Comm<T>, group: &[usize]) -> Result<()> {
    if group.is_empty() {
        return Err(Error::contract("collective over an empty group"));
    }
    for (i, &r) in group.iter().enumerate() {
        comm.check_rank(r)?;
        if group[..i].contains(&r) {
            return Err(Error::contract(format!("rank {r} appears twice in group {group:?}")));
        }
    }
    Ok(())
}

/// Blocks must be pairwise disjoint, name distinct ranks and cover `shape`.
fn check_tiling(blocks: &[(usize, IndexRange)], shape: &[usize]) -> Result<()> {
    let full = IndexRange::full(shape);
    let mut covered = 0;
    for (i, (rank, range)) in blocks.iter().enumerate() {
        if !full.contains(range) {
            return Err(Error::contract(format!("block {range} of rank {rank} lies outside {full}")));
        }
        for (other, prev) in &blocks[..i] {
            if other == rank {
                return Err(Error::contract(format!("rank {rank} has two blocks")));
            }
            if !prev.intersect(range).is_empty() {
                return Err(Error::contract(format!("blocks {prev} and {range} overlap")));
            }
        }
        covered += range.volume();
    }
    if covered != full.volume() {
        return Err(Error::contract(format!("blocks cover {covered} of {} elements of {full}", full.volume())));
    }
    Ok(())
}

fn block_of(blocks: &[(usize, IndexRange)], rank: usize) -> Option<&IndexRange> {
    blocks.iter().find(|(r, _)| *r == rank).map(|(_, b)| b)
}

/// Copies `x` from `src` to `dst`. The source keeps its data.
pub fn send_recv<T: Real>(comm: &Comm<T>, src: usize, dst: usize, x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    comm.check_rank(src)?;
    comm.check_rank(dst)?;
    if src == dst {
        return Err(Error::contract(format!("send-receive needs distinct ranks, got {src} twice")));
    }
    if comm.rank() == src {
        comm.send(dst, SEND_RECV, required(x, src, "send buffer")?.clone())?;
    }
    if comm.rank() == dst {
        return Ok(Some(comm.recv(src, SEND_RECV)?));
    }
    Ok(None)
}

/// Adjoint of [`send_recv`]: the destination's cotangent `dy` travels back
/// and is added into the source's cotangent `dx`.
pub fn send_recv_adjoint<T: Real>(
    comm: &Comm<T>,
    src: usize,
    dst: usize,
    dy: Option<&Tensor<T>>,
    dx: Option<&mut Tensor<T>>,
) -> Result<()> {
    comm.check_rank(src)?;
    comm.check_rank(dst)?;
    if src == dst {
        return Err(Error::contract(format!("send-receive needs distinct ranks, got {src} twice")));
    }
    if comm.rank() == dst {
        comm.send(src, SEND_RECV_ADJ, required(dy, dst, "cotangent")?.clone())?;
    }
    if comm.rank() == src {
        let dx = dx.ok_or_else(|| Error::contract(format!("rank {src} must supply the adjoint buffer")))?;
        let got = comm.recv(dst, SEND_RECV_ADJ)?;
        dx.add_assign(&got)?;
    }
    Ok(())
}

/// Splits the root's tensor into `blocks` and moves each block to its rank.
pub fn scatter<T: Real>(
    comm: &Comm<T>,
    root: usize,
    blocks: &[(usize, IndexRange)],
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    comm.check_rank(root)?;
    let me = comm.rank();
    let mut own = None;
    if me == root {
        let x = required(x, root, "scatter source")?;
        check_tiling(blocks, x.shape())?;
        for (rank, range) in blocks {
            comm.check_rank(*rank)?;
            let piece = x.slice(range)?;
            if *rank == root {
                own = Some(piece);
            } else {
                comm.send(*rank, SCATTER, piece)?;
            }
        }
    }
    match block_of(blocks, me) {
        Some(_) if me == root => Ok(own),
        Some(range) => Ok(Some(expect_shape(comm.recv(root, SCATTER)?, &range.extents())?)),
        None => Ok(None),
    }
}

fn gather_impl<T: Real>(
    comm: &Comm<T>,
    root: usize,
    blocks: &[(usize, IndexRange)],
    root_shape: &[usize],
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    comm.check_rank(root)?;
    check_tiling(blocks, root_shape)?;
    let me = comm.rank();
    if let Some(range) = block_of(blocks, me) {
        let x = required(x, me, "gather block")?;
        if x.shape() != range.extents().as_slice() {
            return Err(Error::ShapeMismatch { expected: range.extents(), got: x.shape().to_vec() });
        }
        if me != root {
            comm.send(root, GATHER, x.clone())?;
        }
    }
    if me != root {
        return Ok(None);
    }
    let mut out = Tensor::zeros(root_shape);
    for (rank, range) in blocks {
        comm.check_rank(*rank)?;
        if *rank == root {
            out.add_slice(range, required(x, root, "gather block")?)?;
        } else {
            let piece = expect_shape(comm.recv(*rank, GATHER)?, &range.extents())?;
            out.add_slice(range, &piece)?;
        }
    }
    Ok(Some(out))
}

/// Assembles the blocks held by their ranks into one tensor on `root`.
pub fn gather<T: Real>(
    comm: &Comm<T>,
    root: usize,
    blocks: &[(usize, IndexRange)],
    root_shape: &[usize],
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    gather_impl(comm, root, blocks, root_shape, x)
}

/// Adjoint of [`scatter`]: block cotangents are added into a fresh root
/// buffer. Blocks tile, so this coincides with [`gather`].
pub fn scatter_adjoint<T: Real>(
    comm: &Comm<T>,
    root: usize,
    blocks: &[(usize, IndexRange)],
    root_shape: &[usize],
    dy: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    gather_impl(comm, root, blocks, root_shape, dy)
}

/// Adjoint of [`gather`].
pub fn gather_adjoint<T: Real>(
    comm: &Comm<T>,
    root: usize,
    blocks: &[(usize, IndexRange)],
    dy: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    scatter(comm, root, blocks, dy)
}

fn partition_blocks(part: &Partition) -> Vec<(usize, IndexRange)> {
    (0..part.grid().size()).map(|i| (part.grid().rank_at(i), part.bulk_range(i))).collect()
}

/// Gathers a partitioned tensor to `root`.
pub fn gather_partition<T: Real>(
    comm: &Comm<T>,
    part: &Partition,
    root: usize,
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    gather(comm, root, &partition_blocks(part), part.global_shape(), x)
}

/// Scatters a tensor held by `root` over `part`.
pub fn scatter_partition<T: Real>(
    comm: &Comm<T>,
    part: &Partition,
    root: usize,
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    scatter(comm, root, &partition_blocks(part), x)
}

/// Copies the root's tensor to every member of `group`; the root must be a
/// member. Non-members get `None`.
pub fn broadcast<T: Real>(comm: &Comm<T>, root: usize, group: &[usize], x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    check_group(comm, group)?;
    if !group.contains(&root) {
        return Err(Error::contract(format!("broadcast root {root} is outside group {group:?}")));
    }
    let me = comm.rank();
    if me == root {
        let x = required(x, root, "broadcast source")?;
        for &r in group.iter().filter(|&&r| r != root) {
            comm.send(r, BROADCAST, x.clone())?;
        }
        return Ok(Some(x.clone()));
    }
    if group.contains(&me) {
        return Ok(Some(comm.recv(root, BROADCAST)?));
    }
    Ok(None)
}

/// Sums the tensors held by `group` onto `root`, which must be a member.
/// Contributions are accumulated in ascending rank order.
pub fn sum_reduce<T: Real>(comm: &Comm<T>, root: usize, group: &[usize], x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    check_group(comm, group)?;
    if !group.contains(&root) {
        return Err(Error::contract(format!("sum-reduce root {root} is outside group {group:?}")));
    }
    let me = comm.rank();
    if !group.contains(&me) {
        return Ok(None);
    }
    let x = required(x, me, "sum-reduce contribution")?;
    if me != root {
        comm.send(root, SUM_REDUCE, x.clone())?;
        return Ok(None);
    }
    let mut order = group.to_vec();
    order.sort_unstable();
    let mut acc = Tensor::zeros(x.shape());
    for r in order {
        if r == root {
            acc.add_assign(x)?;
        } else {
            acc.add_assign(&comm.recv(r, SUM_REDUCE)?)?;
        }
    }
    Ok(Some(acc))
}

/// Sum-reduce onto the lowest rank of `group`, then broadcast back.
pub fn all_reduce<T: Real>(comm: &Comm<T>, group: &[usize], x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    check_group(comm, group)?;
    let root = *group.iter().min().expect("nonempty group");
    let reduced = sum_reduce(comm, root, group, x)?;
    broadcast(comm, root, group, reduced.as_ref())
}

/// Broadcast from the source grid to the destination grid of `map`. Every
/// root sends before any member receives.
pub fn broadcast_along<T: Real>(comm: &Comm<T>, map: &BroadcastMap, x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    let me = comm.rank();
    if let Some(g) = map.group_of_root(me) {
        let x = required(x, me, "broadcast source")?;
        for &r in g.members.iter().filter(|&&r| r != me) {
            comm.send(r, BROADCAST, x.clone())?;
        }
    }
    match map.group_of_member(me) {
        Some(g) if g.root == me => Ok(Some(required(x, me, "broadcast source")?.clone())),
        Some(g) => Ok(Some(comm.recv(g.root, BROADCAST)?)),
        None => Ok(None),
    }
}

/// Adjoint of [`broadcast_along`]: each root receives the sum of its
/// members' tensors, in ascending rank order.
pub fn reduce_along<T: Real>(comm: &Comm<T>, map: &BroadcastMap, x: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
    let me = comm.rank();
    if let Some(g) = map.group_of_member(me) {
        if g.root != me {
            comm.send(g.root, SUM_REDUCE, required(x, me, "reduction contribution")?.clone())?;
        }
    }
    let Some(g) = map.group_of_root(me) else {
        return Ok(None);
    };
    let mut acc: Option<Tensor<T>> = None;
    for &r in &g.members {
        let part = if r == me { required(x, me, "reduction contribution")?.clone() } else { comm.recv(r, SUM_REDUCE)? };
        match acc.as_mut() {
            None => {
                let mut z = Tensor::zeros(part.shape());
                z.add_assign(&part)?;
                acc = Some(z);
            }
            Some(a) => a.add_assign(&part)?,
        }
    }
    acc.map(Some).ok_or_else(|| Error::contract(format!("reduction root {me} has no members")))
}

/// Moves a tensor distributed over `src` to the distribution `dst`. Ranks
/// outside a partition pass or receive `None` for that side.
pub fn repartition<T: Real>(
    comm: &Comm<T>,
    src: &Partition,
    dst: &Partition,
    x: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    let map = overlap(src, dst)?;
    let me = comm.rank();
    let mut local = Vec::new();
    if let Some(mine) = src.range_of_rank(me) {
        let x = required(x, me, "repartition block")?;
        if x.shape() != mine.extents().as_slice() {
            return Err(Error::ShapeMismatch { expected: mine.extents(), got: x.shape().to_vec() });
        }
        for t in map.transfers.iter().filter(|t| t.src_rank == me) {
            comm.check_rank(t.dst_rank)?;
            let piece = x.slice(&t.range.relative_to(mine.start())?)?;
            if t.dst_rank == me {
                local.push(piece);
            } else {
                comm.send(t.dst_rank, REPARTITION, piece)?;
            }
        }
    }
    let Some(mine) = dst.range_of_rank(me) else {
        return Ok(None);
    };
    let mut out = Tensor::zeros(&mine.extents());
    let mut local = local.into_iter();
    for t in map.transfers.iter().filter(|t| t.dst_rank == me) {
        let piece = if t.src_rank == me {
            local.next().expect("one self transfer")
        } else {
            expect_shape(comm.recv(t.src_rank, REPARTITION)?, &t.range.extents())?
        };
        out.assign_slice(&t.range.relative_to(mine.start())?, &piece)?;
    }
    Ok(Some(out))
}

/// Adjoint of [`repartition`]: the reverse repartition.
pub fn repartition_adjoint<T: Real>(
    comm: &Comm<T>,
    src: &Partition,
    dst: &Partition,
    dy: Option<&Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    repartition(comm, dst, src, dy)
}
