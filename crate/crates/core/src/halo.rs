//! Unbalanced halo geometry and the nested halo exchange.
//!
//! Load balance is driven by the output: each worker owns a balanced block
//! of the layer output, and its input needs follow from the kernel. The
//! difference between what a worker needs and what it owns is a halo
//! (shortfall, filled from the adjacent neighbor) or a trim (surplus,
//! dropped before the local kernel runs).

use std::fmt;

use crate::comm::{Comm, OpKind, SpmdOp, Tag};
use crate::memory_ops::LinearOp;
use crate::partition::balanced_block;
use crate::{Error, IndexRange, Partition, Real, Result, Tensor};

/// How the kernel footprint is anchored. Centered kernels are written as
/// left-anchored ones with symmetric padding, so the geometry is identical;
/// the flag only records intent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Anchor {
    #[default]
    Left,
    Centered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelDim {
    pub size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl KernelDim {
    /// A pass-through dimension (batch, channels).
    pub const IDENTITY: KernelDim = KernelDim { size: 1, stride: 1, dilation: 1, pad_left: 0, pad_right: 0 };

    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride, ..Self::IDENTITY }
    }

    pub fn padded(size: usize, pad: usize) -> Self {
        Self { size, pad_left: pad, pad_right: pad, ..Self::IDENTITY }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::contract(format!("kernel size, stride and dilation must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Span of one kernel application, `d(k-1) + 1`.
    pub fn span(&self) -> usize {
        self.dilation * (self.size - 1) + 1
    }

    pub fn output_len(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let padded = n + self.pad_left + self.pad_right;
        if padded < self.span() {
            return Err(Error::contract(format!("kernel span {} exceeds padded input {padded}", self.span())));
        }
        Ok((padded - self.span()) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelSpec {
    pub dims: Vec<KernelDim>,
    pub anchor: Anchor,
}

impl KernelSpec {
    pub fn new(dims: Vec<KernelDim>) -> Self {
        Self { dims, anchor: Anchor::Left }
    }

    pub fn centered(dims: Vec<KernelDim>) -> Self {
        Self { dims, anchor: Anchor::Centered }
    }

    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        if input_shape.len() != self.dims.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.dims.len()], got: vec![input_shape.len()] });
        }
        self.dims.iter().zip(input_shape).map(|(k, &n)| k.output_len(n)).collect()
    }
}

/// Inclusive input index span `[lo, hi]` touched by the outputs in `output`,
/// in unpadded input coordinates. Entries may fall in the padding.
pub fn required_input_range(output: &IndexRange, kernel: &KernelSpec) -> Result<Vec<(i64, i64)>> {
    if output.rank() != kernel.dims.len() {
        return Err(Error::ShapeMismatch { expected: vec![kernel.dims.len()], got: vec![output.rank()] });
    }
    if output.is_empty() {
        return Err(Error::contract(format!("empty output range {output}")));
    }
    kernel
        .dims
        .iter()
        .enumerate()
        .map(|(d, k)| {
            k.validate()?;
            let (lo, hi) = (output.start()[d] as i64, output.stop()[d] as i64 - 1);
            let (s, p) = (k.stride as i64, k.pad_left as i64);
            Ok((lo * s - p, hi * s - p + k.span() as i64 - 1))
        })
        .collect()
}

/// Per-dimension halo and trim widths for one worker, plus the zero padding
/// its local kernel still needs where the required range leaves the global
/// tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloSpec {
    pub left_halo: Vec<usize>,
    pub right_halo: Vec<usize>,
    pub left_trim: Vec<usize>,
    pub right_trim: Vec<usize>,
    pub pad_left: Vec<usize>,
    pub pad_right: Vec<usize>,
}

impl HaloSpec {
    pub fn none(ndim: usize) -> Self {
        let z = vec![0; ndim];
        Self {
            left_halo: z.clone(),
            right_halo: z.clone(),
            left_trim: z.clone(),
            right_trim: z.clone(),
            pad_left: z.clone(),
            pad_right: z,
        }
    }

    /// Halo widths only.
    pub fn halos(left: &[usize], right: &[usize]) -> Self {
        Self { left_halo: left.to_vec(), right_halo: right.to_vec(), ..Self::none(left.len()) }
    }

    pub fn ndim(&self) -> usize {
        self.left_halo.len()
    }

    fn validate(&self, ndim: usize) -> Result<()> {
        let lens = [
            self.left_halo.len(),
            self.right_halo.len(),
            self.left_trim.len(),
            self.right_trim.len(),
            self.pad_left.len(),
            self.pad_right.len(),
        ];
        if lens.iter().any(|&l| l != ndim) {
            return Err(Error::contract(format!("halo spec {lens:?} does not match rank {ndim}")));
        }
        for d in 0..ndim {
            if self.left_halo[d] > 0 && self.left_trim[d] > 0 || self.right_halo[d] > 0 && self.right_trim[d] > 0 {
                return Err(Error::contract(format!("dimension {d} has both a halo and a trim on one side")));
            }
        }
        Ok(())
    }

    /// Bulk extents grown by the halos.
    pub fn local_shape(&self, bulk: &[usize]) -> Vec<usize> {
        (0..bulk.len()).map(|d| bulk[d] + self.left_halo[d] + self.right_halo[d]).collect()
    }

    /// Extents after trimming a local tensor of shape `local`.
    pub fn trimmed_shape(&self, local: &[usize]) -> Vec<usize> {
        (0..local.len()).map(|d| local[d] - self.left_trim[d] - self.right_trim[d]).collect()
    }
}

/// Smallest half-open range holding every in-bounds input that outputs
/// `o_lo..o_hi` read. Entries of the footprint that no kernel tap lands on
/// (dilation, large strides) are left out.
fn touched_hull(k: KernelDim, o_lo: usize, o_hi: usize, n: usize) -> Option<(usize, usize)> {
    let (s, pl, n) = (k.stride as i64, k.pad_left as i64, n as i64);
    let (o_lo, o_hi) = (o_lo as i64, o_hi as i64 - 1);
    let mut lo = None::<i64>;
    let mut hi = None::<i64>;
    for j in 0..k.size as i64 {
        let tap = j * k.dilation as i64 - pl;
        // first output whose tap is >= 0, last whose tap is < n
        let first = o_lo.max((-tap + s - 1).div_euclid(s));
        if first <= o_hi && first * s + tap < n {
            lo = Some(lo.map_or(first * s + tap, |v| v.min(first * s + tap)));
        }
        let last = o_hi.min((n - 1 - tap).div_euclid(s));
        if last >= o_lo && last * s + tap >= 0 {
            hi = Some(hi.map_or(last * s + tap, |v| v.max(last * s + tap)));
        }
    }
    Some((lo? as usize, hi? as usize + 1))
}

/// Halo geometry of the worker at grid index `index` of `input`, for a
/// kernel whose output is balanced over the same grid.
pub fn compute_halo(input: &Partition, kernel: &KernelSpec, index: usize) -> Result<HaloSpec> {
    let shape = input.global_shape();
    let out_shape = kernel.output_shape(shape)?;
    let grid = input.grid();
    let coords = grid.coords(index);
    let mut spec = HaloSpec::none(shape.len());
    for d in 0..shape.len() {
        let (n, p, c) = (shape[d], grid.dims()[d], coords[d]);
        if out_shape[d] < p {
            return Err(Error::PartitionTooFine(format!(
                "{p} workers in dimension {d} but only {} outputs",
                out_shape[d]
            )));
        }
        let (o_lo, o_hi) = balanced_block(out_shape[d], p, c);
        let (b_lo, b_hi) = balanced_block(n, p, c);
        let k = kernel.dims[d];
        let out = IndexRange::from_bounds(&[(o_lo, o_hi)])?;
        let (lo, hi) = required_input_range(&out, &KernelSpec::new(vec![k]))?[0];
        let Some((need_lo, need_hi)) = touched_hull(k, o_lo, o_hi, n) else {
            return Err(Error::PartitionTooFine(format!(
                "worker {index} reads only padding in dimension {d}"
            )));
        };
        spec.pad_left[d] = (need_lo as i64 - lo) as usize;
        spec.pad_right[d] = (hi + 1 - need_hi as i64) as usize;
        if need_lo >= b_hi || need_hi <= b_lo {
            return Err(Error::PartitionTooFine(format!(
                "worker {index} needs [{need_lo}, {need_hi}) in dimension {d} but owns [{b_lo}, {b_hi})"
            )));
        }
        if need_lo < b_lo {
            spec.left_halo[d] = b_lo - need_lo;
            let (l_lo, l_hi) = balanced_block(n, p, c - 1);
            if spec.left_halo[d] > l_hi - l_lo {
                return Err(Error::PartitionTooFine(format!(
                    "worker {index} needs {} entries from its left neighbor in dimension {d}, which owns {}",
                    spec.left_halo[d],
                    l_hi - l_lo
                )));
            }
        } else {
            spec.left_trim[d] = need_lo - b_lo;
        }
        if need_hi > b_hi {
            spec.right_halo[d] = need_hi - b_hi;
            let (r_lo, r_hi) = balanced_block(n, p, c + 1);
            if spec.right_halo[d] > r_hi - r_lo {
                return Err(Error::PartitionTooFine(format!(
                    "worker {index} needs {} entries from its right neighbor in dimension {d}, which owns {}",
                    spec.right_halo[d],
                    r_hi - r_lo
                )));
            }
        } else {
            spec.right_trim[d] = b_hi - need_hi;
        }
    }
    Ok(spec)
}

/// Drops the trimmed entries of a local tensor.
pub fn trim_shim<T: Real>(x: &Tensor<T>, spec: &HaloSpec) -> Result<Tensor<T>> {
    if x.rank() != spec.ndim() {
        return Err(Error::ShapeMismatch { expected: vec![spec.ndim()], got: vec![x.rank()] });
    }
    let shape = x.shape();
    if (0..shape.len()).any(|d| spec.left_trim[d] + spec.right_trim[d] > shape[d]) {
        return Err(Error::contract(format!("trims exceed local shape {shape:?}")));
    }
    let bounds: Vec<(usize, usize)> =
        (0..shape.len()).map(|d| (spec.left_trim[d], shape[d] - spec.right_trim[d])).collect();
    x.slice(&IndexRange::from_bounds(&bounds)?)
}

/// Reinserts zeros where [`trim_shim`] dropped entries.
pub fn trim_shim_adjoint<T: Real>(dy: &Tensor<T>, spec: &HaloSpec) -> Result<Tensor<T>> {
    if dy.rank() != spec.ndim() {
        return Err(Error::ShapeMismatch { expected: vec![spec.ndim()], got: vec![dy.rank()] });
    }
    dy.pad(&spec.left_trim, &spec.right_trim)
}

/// A halo exchange over one partition: every worker's local tensor is its
/// bulk block grown by its halos.
#[derive(Clone, Debug)]
pub struct HaloExchange {
    partition: Partition,
    specs: Vec<HaloSpec>,
}

const fn phase_tag(dim: usize, rightward: bool) -> Tag {
    Tag::new(OpKind::Halo, 2 * dim as u32 + if rightward { 0 } else { 1 })
}

impl HaloExchange {
    /// `specs[i]` belongs to the worker at grid index `i`.
    pub fn new(partition: Partition, specs: Vec<HaloSpec>) -> Result<Self> {
        let grid = partition.grid();
        let ndim = grid.ndim();
        if specs.len() != grid.size() {
            return Err(Error::contract(format!("{} halo specs for {} workers", specs.len(), grid.size())));
        }
        for s in &specs {
            s.validate(ndim)?;
        }
        for (i, s) in specs.iter().enumerate() {
            let bulk = partition.bulk_range(i).extents();
            for d in 0..ndim {
                for (width, forward) in [(s.left_halo[d], false), (s.right_halo[d], true)] {
                    if width == 0 {
                        continue;
                    }
                    let Some(j) = grid.neighbor(i, d, forward) else {
                        return Err(Error::contract(format!("worker {i} has a halo in dimension {d} but no neighbor")));
                    };
                    let owned = partition.bulk_range(j).extents()[d];
                    if width > owned {
                        return Err(Error::PartitionTooFine(format!(
                            "worker {i} needs {width} entries in dimension {d} from worker {j}, which owns {owned}"
                        )));
                    }
                    // Strips carry the halos of earlier dimensions, so both
                    // ends must agree on them.
                    let other = &specs[j];
                    if (0..d).any(|e| other.left_halo[e] != s.left_halo[e] || other.right_halo[e] != s.right_halo[e]) {
                        return Err(Error::contract(format!(
                            "workers {i} and {j} disagree on halos below dimension {d}"
                        )));
                    }
                }
                if s.left_trim[d] + s.right_trim[d] > bulk[d] + s.left_halo[d] + s.right_halo[d] {
                    return Err(Error::contract(format!("worker {i} trims more than it holds in dimension {d}")));
                }
            }
        }
        Ok(Self { partition, specs })
    }

    /// Geometry derived from a kernel applied to `input`.
    pub fn from_kernel(input: Partition, kernel: &KernelSpec) -> Result<Self> {
        let specs = (0..input.grid().size()).map(|i| compute_halo(&input, kernel, i)).collect::<Result<_>>()?;
        Self::new(input, specs)
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn specs(&self) -> &[HaloSpec] {
        &self.specs
    }

    pub fn spec_of_rank(&self, rank: usize) -> Option<&HaloSpec> {
        self.partition.grid().index_of_rank(rank).map(|i| &self.specs[i])
    }

    fn index(&self, rank: usize) -> Result<usize> {
        self.partition
            .grid()
            .index_of_rank(rank)
            .ok_or_else(|| Error::contract(format!("rank {rank} is not in grid {}", self.partition.grid())))
    }

    fn bulk(&self, index: usize) -> Vec<usize> {
        self.partition.bulk_range(index).extents()
    }

    /// Shape of the local tensor (bulk plus halos) of `rank`.
    pub fn local_shape(&self, rank: usize) -> Option<Vec<usize>> {
        let i = self.partition.grid().index_of_rank(rank)?;
        Some(self.specs[i].local_shape(&self.bulk(i)))
    }

    /// Grows a bulk tensor by zero halos.
    pub fn allocate<T: Real>(&self, rank: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.index(rank)?;
        if x.shape() != self.bulk(i).as_slice() {
            return Err(Error::ShapeMismatch { expected: self.bulk(i), got: x.shape().to_vec() });
        }
        x.pad(&self.specs[i].left_halo, &self.specs[i].right_halo)
    }

    /// Drops the halos, the adjoint of [`HaloExchange::allocate`].
    pub fn deallocate<T: Real>(&self, rank: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let i = self.index(rank)?;
        x.unpad(&self.specs[i].left_halo, &self.specs[i].right_halo)
    }

    pub fn trim<T: Real>(&self, rank: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        trim_shim(x, &self.specs[self.index(rank)?])
    }

    pub fn trim_adjoint<T: Real>(&self, rank: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
        trim_shim_adjoint(dy, &self.specs[self.index(rank)?])
    }

    /// Local region exchanged in phase `dim`: `along` in dimension `dim`,
    /// everything (halos included) below it, bulk only above it.
    fn strip(&self, index: usize, dim: usize, along: (usize, usize)) -> Result<IndexRange> {
        let s = &self.specs[index];
        let bulk = self.bulk(index);
        let local = s.local_shape(&bulk);
        let bounds: Vec<(usize, usize)> = (0..bulk.len())
            .map(|e| match e.cmp(&dim) {
                std::cmp::Ordering::Less => (0, local[e]),
                std::cmp::Ordering::Equal => along,
                std::cmp::Ordering::Greater => (s.left_halo[e], s.left_halo[e] + bulk[e]),
            })
            .collect();
        IndexRange::from_bounds(&bounds)
    }

    fn left_halo_strip(&self, i: usize, dim: usize) -> Result<IndexRange> {
        self.strip(i, dim, (0, self.specs[i].left_halo[dim]))
    }

    fn right_halo_strip(&self, i: usize, dim: usize) -> Result<IndexRange> {
        let s = &self.specs[i];
        let end = s.left_halo[dim] + self.bulk(i)[dim];
        self.strip(i, dim, (end, end + s.right_halo[dim]))
    }

    /// The first `width` bulk entries in `dim`.
    fn left_bulk_strip(&self, i: usize, dim: usize, width: usize) -> Result<IndexRange> {
        let lo = self.specs[i].left_halo[dim];
        self.strip(i, dim, (lo, lo + width))
    }

    /// The last `width` bulk entries in `dim`.
    fn right_bulk_strip(&self, i: usize, dim: usize, width: usize) -> Result<IndexRange> {
        let end = self.specs[i].left_halo[dim] + self.bulk(i)[dim];
        self.strip(i, dim, (end - width, end))
    }

    fn check_local<T: Real>(&self, i: usize, x: &Tensor<T>) -> Result<()> {
        let expected = self.specs[i].local_shape(&self.bulk(i));
        if x.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch { expected, got: x.shape().to_vec() });
        }
        Ok(())
    }

    /// Forward exchange, dimensions ascending. Afterwards every halo holds a
    /// copy of the neighbor's bulk, corners included. Ranks outside the
    /// partition return immediately.
    pub fn exchange<T: Real>(&self, comm: &Comm<T>, x: &mut Tensor<T>) -> Result<()> {
        let grid = self.partition.grid();
        let Some(i) = grid.index_of_rank(comm.rank()) else {
            return Ok(());
        };
        self.check_local(i, x)?;
        for dim in 0..grid.ndim() {
            let left = grid.neighbor(i, dim, false);
            let right = grid.neighbor(i, dim, true);
            if let Some(r) = right {
                let w = self.specs[r].left_halo[dim];
                if w > 0 {
                    comm.send(grid.rank_at(r), phase_tag(dim, true), x.slice(&self.right_bulk_strip(i, dim, w)?)?)?;
                }
            }
            if let Some(l) = left {
                let w = self.specs[l].right_halo[dim];
                if w > 0 {
                    comm.send(grid.rank_at(l), phase_tag(dim, false), x.slice(&self.left_bulk_strip(i, dim, w)?)?)?;
                }
            }
            if let Some(l) = left.filter(|_| self.specs[i].left_halo[dim] > 0) {
                let strip = self.left_halo_strip(i, dim)?;
                let got = comm.recv(grid.rank_at(l), phase_tag(dim, true))?;
                x.assign_slice(&strip, &got)?;
            }
            if let Some(r) = right.filter(|_| self.specs[i].right_halo[dim] > 0) {
                let strip = self.right_halo_strip(i, dim)?;
                let got = comm.recv(grid.rank_at(r), phase_tag(dim, false))?;
                x.assign_slice(&strip, &got)?;
            }
        }
        Ok(())
    }

    /// Adjoint exchange, dimensions descending: halo cotangents go back to
    /// their owners, are added into the owners' bulk and cleared locally.
    pub fn exchange_adjoint<T: Real>(&self, comm: &Comm<T>, dx: &mut Tensor<T>) -> Result<()> {
        let grid = self.partition.grid();
        let Some(i) = grid.index_of_rank(comm.rank()) else {
            return Ok(());
        };
        self.check_local(i, dx)?;
        for dim in (0..grid.ndim()).rev() {
            let left = grid.neighbor(i, dim, false);
            let right = grid.neighbor(i, dim, true);
            if let Some(l) = left.filter(|_| self.specs[i].left_halo[dim] > 0) {
                let strip = self.left_halo_strip(i, dim)?;
                comm.send(grid.rank_at(l), phase_tag(dim, true), dx.slice(&strip)?)?;
                dx.clear_slice(&strip)?;
            }
            if let Some(r) = right.filter(|_| self.specs[i].right_halo[dim] > 0) {
                let strip = self.right_halo_strip(i, dim)?;
                comm.send(grid.rank_at(r), phase_tag(dim, false), dx.slice(&strip)?)?;
                dx.clear_slice(&strip)?;
            }
            if let Some(r) = right {
                let w = self.specs[r].left_halo[dim];
                if w > 0 {
                    let got = comm.recv(grid.rank_at(r), phase_tag(dim, true))?;
                    dx.add_slice(&self.right_bulk_strip(i, dim, w)?, &got)?;
                }
            }
            if let Some(l) = left {
                let w = self.specs[l].right_halo[dim];
                if w > 0 {
                    let got = comm.recv(grid.rank_at(l), phase_tag(dim, false))?;
                    dx.add_slice(&self.left_bulk_strip(i, dim, w)?, &got)?;
                }
            }
        }
        Ok(())
    }

    /// The 2x2 configuration used throughout the documentation: workers 0
    /// and 1 take width 2 from workers 2 and 3, which take width 4 back, and
    /// workers 1 and 3 take width 3 from workers 0 and 2.
    pub fn two_by_two_example(shape: &[usize]) -> Result<Self> {
        let partition = crate::decompose(shape, &[2, 2])?;
        let specs = vec![
            HaloSpec::halos(&[0, 0], &[2, 0]),
            HaloSpec::halos(&[0, 3], &[2, 0]),
            HaloSpec::halos(&[4, 0], &[0, 0]),
            HaloSpec::halos(&[4, 3], &[0, 0]),
        ];
        Self::new(partition, specs)
    }
}

impl fmt::Display for HaloExchange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "worker, dim, bulk_range, left_halo, right_halo, left_trim, right_trim")?;
        let grid = self.partition.grid();
        for (i, s) in self.specs.iter().enumerate() {
            let bulk = self.partition.bulk_range(i);
            for d in 0..grid.ndim() {
                writeln!(
                    f,
                    "{}, {d}, [{}:{}], {}, {}, {}, {}",
                    grid.rank_at(i),
                    bulk.start()[d],
                    bulk.stop()[d],
                    s.left_halo[d],
                    s.right_halo[d],
                    s.left_trim[d],
                    s.right_trim[d]
                )?;
            }
        }
        Ok(())
    }
}

/// The in-place exchange `H` on the concatenated local tensors.
pub struct HaloExchangeOp {
    pub workers: usize,
    pub exchange: HaloExchange,
}

impl HaloExchangeOp {
    fn len(&self, rank: usize) -> usize {
        self.exchange.local_shape(rank).map_or(0, |s| s.iter().product())
    }

    fn apply<T: Real>(&self, comm: &Comm<T>, v: Vec<T>, adjoint: bool) -> Result<Vec<T>> {
        let Some(shape) = self.exchange.local_shape(comm.rank()) else {
            return Ok(v);
        };
        let mut x = Tensor::from_vec(&shape, v)?;
        if adjoint {
            self.exchange.exchange_adjoint(comm, &mut x)?;
        } else {
            self.exchange.exchange(comm, &mut x)?;
        }
        Ok(x.into_vec())
    }
}

impl<T: Real> SpmdOp<T> for HaloExchangeOp {
    fn name(&self) -> String {
        "halo_exchange".into()
    }
    fn workers(&self) -> usize {
        self.workers
    }
    fn domain_len(&self, rank: usize) -> usize {
        self.len(rank)
    }
    fn codomain_len(&self, rank: usize) -> usize {
        self.len(rank)
    }
    fn forward(&self, comm: &Comm<T>, x: Vec<T>) -> Result<Vec<T>> {
        self.apply(comm, x, false)
    }
    fn adjoint(&self, comm: &Comm<T>, y: Vec<T>) -> Result<Vec<T>> {
        self.apply(comm, y, true)
    }
}

/// [`trim_shim`] on a single local tensor.
pub struct TrimShim {
    pub shape: Vec<usize>,
    pub spec: HaloSpec,
}

impl<T: Real> LinearOp<T> for TrimShim {
    fn name(&self) -> String {
        "trim_shim".into()
    }
    fn domain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn codomain_len(&self) -> usize {
        self.spec.trimmed_shape(&self.shape).iter().product()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(trim_shim(&Tensor::from_vec(&self.shape, x.to_vec())?, &self.spec)?.into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        let dy = Tensor::from_vec(&self.spec.trimmed_shape(&self.shape), y.to_vec())?;
        Ok(trim_shim_adjoint(&dy, &self.spec)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::Spmd;
    use crate::memory_ops::adjoint_test;
    use crate::{decompose, spawn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn halos_1d(n: usize, k: KernelDim, p: usize) -> Vec<(usize, usize, usize, usize)> {
        let part = decompose(&[n], &[p]).unwrap();
        (0..p)
            .map(|i| {
                let s = compute_halo(&part, &KernelSpec::new(vec![k]), i).unwrap();
                (s.left_halo[0], s.right_halo[0], s.left_trim[0], s.right_trim[0])
            })
            .collect()
    }

    /// Lists, per worker, every input index any of its outputs touches.
    fn enumerate_1d(n: usize, k: KernelDim, p: usize) -> Option<Vec<(usize, usize, usize, usize)>> {
        let m = k.output_len(n).ok()?;
        if m < p {
            return None;
        }
        let mut out = Vec::new();
        for c in 0..p {
            let (o_lo, o_hi) = balanced_block(m, p, c);
            let (b_lo, b_hi) = balanced_block(n, p, c);
            let mut touched = Vec::new();
            for o in o_lo..o_hi {
                for j in 0..k.size {
                    let i = (o * k.stride + j * k.dilation) as i64 - k.pad_left as i64;
                    if (0..n as i64).contains(&i) {
                        touched.push(i as usize);
                    }
                }
            }
            let lo = *touched.iter().min()?;
            let hi = *touched.iter().max()? + 1;
            out.push((
                b_lo.saturating_sub(lo),
                hi.saturating_sub(b_hi),
                lo.saturating_sub(b_lo),
                b_hi.saturating_sub(hi),
            ));
        }
        Some(out)
    }

    #[test]
    fn required_range_examples() {
        let out = IndexRange::from_bounds(&[(0, 4)]).unwrap();
        let k = KernelSpec::centered(vec![KernelDim::padded(5, 2)]);
        assert_eq!(required_input_range(&out, &k).unwrap(), vec![(-2, 5)]);
        let out = IndexRange::from_bounds(&[(2, 4)]).unwrap();
        assert_eq!(required_input_range(&out, &KernelSpec::new(vec![KernelDim::new(2, 2)])).unwrap(), vec![(4, 7)]);
    }

    #[test]
    fn worked_geometries() {
        assert_eq!(halos_1d(11, KernelDim::padded(5, 2), 3), vec![(0, 2, 0, 0), (2, 2, 0, 0), (2, 0, 0, 0)]);
        assert_eq!(halos_1d(11, KernelDim::new(5, 1), 3), vec![(0, 3, 0, 0), (1, 1, 0, 0), (3, 0, 0, 0)]);
        assert_eq!(
            halos_1d(20, KernelDim::new(2, 2), 6),
            vec![(0, 0, 0, 0), (0, 0, 0, 0), (0, 1, 0, 0), (0, 2, 1, 0), (0, 1, 2, 0), (0, 0, 1, 0)]
        );
        assert_eq!(halos_1d(10, KernelDim::new(2, 2), 3), vec![(0, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0)]);
    }

    #[test]
    fn padding_at_the_global_boundary() {
        let part = decompose(&[11], &[3]).unwrap();
        let k = KernelSpec::centered(vec![KernelDim::padded(5, 2)]);
        let s0 = compute_halo(&part, &k, 0).unwrap();
        let s2 = compute_halo(&part, &k, 2).unwrap();
        assert_eq!((s0.pad_left[0], s0.pad_right[0]), (2, 0));
        assert_eq!((s2.pad_left[0], s2.pad_right[0]), (0, 2));
    }

    #[test]
    fn geometry_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 300 {
            let n = rng.gen_range(1..40);
            let p = rng.gen_range(1..7).min(n);
            let k = KernelDim {
                size: rng.gen_range(1..6),
                stride: rng.gen_range(1..4),
                dilation: rng.gen_range(1..3),
                pad_left: rng.gen_range(0..3),
                pad_right: rng.gen_range(0..3),
            };
            let Some(expected) = enumerate_1d(n, k, p) else { continue };
            let part = decompose(&[n], &[p]).unwrap();
            let got: Result<Vec<_>> = (0..p).map(|i| compute_halo(&part, &KernelSpec::new(vec![k]), i)).collect();
            let Ok(got) = got else { continue };
            let got: Vec<_> =
                got.iter().map(|s| (s.left_halo[0], s.right_halo[0], s.left_trim[0], s.right_trim[0])).collect();
            assert_eq!(got, expected, "n={n} p={p} {k:?}");
            checked += 1;
        }
    }

    #[test]
    fn too_fine_partition_is_rejected() {
        let part = decompose(&[12], &[6]).unwrap();
        let k = KernelSpec::new(vec![KernelDim::new(7, 1)]);
        assert!(matches!(compute_halo(&part, &k, 0), Err(Error::PartitionTooFine(_))));
        assert!(matches!(HaloExchange::from_kernel(decompose(&[9], &[3]).unwrap(), &KernelSpec::new(vec![KernelDim::padded(9, 4)])), Err(Error::PartitionTooFine(_))));
    }

    #[test]
    fn trim_examples() {
        let spec = HaloSpec { left_trim: vec![1], ..HaloSpec::none(1) };
        let x = Tensor::vector(vec![7., 8., 9.]);
        assert_eq!(trim_shim(&x, &spec).unwrap().data(), &[8., 9.]);
        assert_eq!(trim_shim_adjoint(&Tensor::vector(vec![2., 3.]), &spec).unwrap().data(), &[0., 2., 3.]);
        let none = HaloSpec::none(1);
        assert_eq!(trim_shim(&x, &none).unwrap(), x);
        assert_eq!(trim_shim_adjoint(&x, &none).unwrap(), x);
        let too_much = HaloSpec { left_trim: vec![2], right_trim: vec![2], ..HaloSpec::none(1) };
        assert!(trim_shim(&x, &too_much).is_err());
    }

    fn global(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    /// Runs the forward exchange and compares each local tensor with the
    /// matching slice of the global tensor.
    fn check_against_slices(ex: &HaloExchange) {
        let shape = ex.partition().global_shape().to_vec();
        let g = global(&shape);
        let k = ex.partition().grid().size();
        let out = spawn(k, |c| {
            let bulk = g.slice(&ex.partition().range_of_rank(c.rank()).unwrap())?;
            let mut x = ex.allocate(c.rank(), &bulk)?;
            ex.exchange(c, &mut x)?;
            Ok(x)
        })
        .unwrap();
        for (rank, x) in out.iter().enumerate() {
            let b = ex.partition().range_of_rank(rank).unwrap();
            let s = ex.spec_of_rank(rank).unwrap();
            let bounds: Vec<(usize, usize)> =
                (0..shape.len()).map(|d| (b.start()[d] - s.left_halo[d], b.stop()[d] + s.right_halo[d])).collect();
            assert_eq!(x, &g.slice(&IndexRange::from_bounds(&bounds).unwrap()).unwrap(), "rank {rank}");
        }
    }

    #[test]
    fn exchange_matches_global_slices() {
        check_against_slices(&HaloExchange::two_by_two_example(&[11, 13]).unwrap());
        let k = KernelSpec::new(vec![KernelDim::IDENTITY, KernelDim::padded(3, 1), KernelDim::new(5, 1)]);
        check_against_slices(&HaloExchange::from_kernel(decompose(&[2, 9, 14], &[1, 3, 2]).unwrap(), &k).unwrap());
    }

    #[test]
    fn corner_comes_from_diagonal_neighbor() {
        let ex = HaloExchange::two_by_two_example(&[8, 8]).unwrap();
        let g = global(&[8, 8]);
        let out = spawn(4, |c| {
            let mut x = ex.allocate(c.rank(), &g.slice(&ex.partition().range_of_rank(c.rank()).unwrap())?)?;
            ex.exchange(c, &mut x)?;
            Ok(x)
        })
        .unwrap();
        // Worker 1 holds rows 0..4 plus 2 halo rows, columns 4..8 plus 3 to
        // the left. Its bottom-left corner is bulk of worker 2.
        let x1 = &out[1];
        assert_eq!(x1.shape(), &[6, 7]);
        assert_eq!(x1.get(&[5, 0]), g.get(&[5, 1]));
        assert!(ex.partition().range_of_rank(2).unwrap().contains(&IndexRange::from_bounds(&[(5, 6), (1, 2)]).unwrap()));
    }

    #[test]
    fn single_worker_is_a_no_op() {
        let ex = HaloExchange::from_kernel(decompose(&[6, 6], &[1, 1]).unwrap(), &KernelSpec::new(vec![KernelDim::new(3, 1); 2]))
            .unwrap();
        let x = global(&[6, 6]);
        let out = spawn(1, |c| {
            let mut y = ex.allocate(0, &x)?;
            ex.exchange(c, &mut y)?;
            ex.exchange_adjoint(c, &mut y)?;
            Ok(y)
        })
        .unwrap();
        assert_eq!(out[0], x);
    }

    #[test]
    fn adjoint_adds_into_neighbor_and_clears() {
        let part = decompose(&[4], &[2]).unwrap();
        let ex = HaloExchange::new(part, vec![HaloSpec::halos(&[0], &[1]), HaloSpec::none(1)]).unwrap();
        let out = spawn(2, |c| {
            let mut dx = if c.rank() == 0 { Tensor::vector(vec![1., 1., 5.]) } else { Tensor::vector(vec![1., 1.]) };
            ex.exchange_adjoint(c, &mut dx)?;
            Ok(dx)
        })
        .unwrap();
        assert_eq!(out[0].data(), &[1., 1., 0.]);
        assert_eq!(out[1].data(), &[6., 1.]);
    }

    /// Dense matrix of `H`: bulk entries map to themselves, halo entries
    /// copy the owner's entry of the same global index.
    fn explicit_matrix(ex: &HaloExchange) -> (Vec<Vec<f64>>, usize) {
        let part = ex.partition();
        let k = part.grid().size();
        let shape = part.global_shape();
        let mut offsets = vec![0];
        for r in 0..k {
            offsets.push(offsets[r] + ex.local_shape(r).unwrap().iter().product::<usize>());
        }
        let total = offsets[k];
        // global index -> flat position of its owner's bulk copy
        let owner_pos = |g: &[usize]| -> usize {
            for r in 0..k {
                let b = part.range_of_rank(r).unwrap();
                if (0..g.len()).all(|d| b.start()[d] <= g[d] && g[d] < b.stop()[d]) {
                    let s = ex.spec_of_rank(r).unwrap();
                    let local = ex.local_shape(r).unwrap();
                    let mut flat = 0;
                    for d in 0..g.len() {
                        flat = flat * local[d] + g[d] - b.start()[d] + s.left_halo[d];
                    }
                    return offsets[r] + flat;
                }
            }
            unreachable!()
        };
        let mut m = vec![vec![0.0; total]; total];
        for r in 0..k {
            let b = part.range_of_rank(r).unwrap();
            let s = ex.spec_of_rank(r).unwrap();
            let local = ex.local_shape(r).unwrap();
            let n: usize = local.iter().product();
            for flat in 0..n {
                let mut rem = flat;
                let mut g = vec![0; local.len()];
                for d in (0..local.len()).rev() {
                    g[d] = b.start()[d] + rem % local[d] - s.left_halo[d];
                    rem /= local[d];
                }
                assert!(g.iter().zip(shape).all(|(a, n)| a < n));
                m[offsets[r] + flat][owner_pos(&g)] = 1.0;
            }
        }
        (m, total)
    }

    #[test]
    fn adjoint_matches_explicit_matrix() {
        let ex = HaloExchange::two_by_two_example(&[8, 7]).unwrap();
        let (m, total) = explicit_matrix(&ex);
        let op = Spmd::new(HaloExchangeOp { workers: 4, exchange: ex });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hx = op.forward(&x).unwrap();
        let hthx = op.adjoint(&hx).unwrap();
        let mx: Vec<f64> = m.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        assert_eq!(hx, mx);
        let mtmx: Vec<f64> = (0..total).map(|j| (0..total).map(|i| m[i][j] * mx[i]).sum()).collect();
        for (a, b) in hthx.iter().zip(&mtmx) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exchange_and_trim_pass_adjoint_test() {
        let op = Spmd::new(HaloExchangeOp { workers: 4, exchange: HaloExchange::two_by_two_example(&[11, 13]).unwrap() });
        assert!(adjoint_test::<f64, _>(&op, 20, 1e-12, 2).unwrap().passed);
        let k = KernelSpec::new(vec![KernelDim::new(2, 2)]);
        let op = Spmd::new(HaloExchangeOp { workers: 6, exchange: HaloExchange::from_kernel(decompose(&[20], &[6]).unwrap(), &k).unwrap() });
        assert!(adjoint_test::<f64, _>(&op, 20, 1e-12, 2).unwrap().passed);
        let trim = TrimShim { shape: vec![5, 4], spec: HaloSpec { left_trim: vec![1, 0], right_trim: vec![0, 2], ..HaloSpec::none(2) } };
        assert!(adjoint_test::<f64, _>(&trim, 20, 1e-12, 2).unwrap().passed);
    }

    #[test]
    fn table_lists_every_worker_and_dimension() {
        let ex = HaloExchange::from_kernel(decompose(&[20], &[6]).unwrap(), &KernelSpec::new(vec![KernelDim::new(2, 2)])).unwrap();
        let table = ex.to_string();
        assert_eq!(table.lines().count(), 7);
        assert!(table.contains("3, 0, [11:14], 0, 2, 1, 0"), "{table}");
    }
}
