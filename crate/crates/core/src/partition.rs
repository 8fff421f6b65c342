//! Cartesian worker grids, balanced decompositions and the mapping rules
//! between partitions used by broadcast, reduce and repartition.

use std::fmt;

use crate::{Error, IndexRange, Result};

/// A cartesian grid of workers. Grid coordinates are linearized row-major;
/// `ranks[i]` is the worker-group rank that sits at linear index `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    dims: Vec<usize>,
    ranks: Vec<usize>,
}

impl Grid {
    /// Grid over ranks `0..product(dims)`.
    pub fn new(dims: &[usize]) -> Result<Self> {
        let n = dims.iter().product();
        Self::with_ranks(dims, (0..n).collect())
    }

    pub fn with_ranks(dims: &[usize], ranks: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::contract(format!("grid extents {dims:?} must be nonempty and positive")));
        }
        let n: usize = dims.iter().product();
        if ranks.len() != n {
            return Err(Error::contract(format!("grid {dims:?} needs {n} ranks, got {}", ranks.len())));
        }
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::contract(format!("grid ranks {ranks:?} repeat a worker")));
        }
        Ok(Self { dims: dims.to_vec(), ranks })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn rank_at(&self, index: usize) -> usize {
        self.ranks[index]
    }

    pub fn index_of_rank(&self, rank: usize) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }

    pub fn contains_rank(&self, rank: usize) -> bool {
        self.ranks.contains(&rank)
    }

    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut c = vec![0; self.dims.len()];
        for d in (0..self.dims.len()).rev() {
            c[d] = index % self.dims[d];
            index /= self.dims[d];
        }
        c
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.dims).fold(0, |acc, (c, n)| acc * n + c)
    }

    /// Linear index of the neighbor one step along `dim`, if any.
    pub fn neighbor(&self, index: usize, dim: usize, forward: bool) -> Option<usize> {
        let mut c = self.coords(index);
        if forward {
            if c[dim] + 1 >= self.dims[dim] {
                return None;
            }
            c[dim] += 1;
        } else {
            if c[dim] == 0 {
                return None;
            }
            c[dim] -= 1;
        }
        Some(self.index_of(&c))
    }

    /// The sub-grid with the coordinates in `fixed` pinned; pinned dimensions
    /// keep extent 1 so the result stays in this grid's coordinate space.
    pub fn subgrid(&self, fixed: &[(usize, usize)]) -> Result<Grid> {
        let mut dims = self.dims.clone();
        for &(d, c) in fixed {
            if d >= dims.len() || c >= self.dims[d] {
                return Err(Error::contract(format!("cannot pin dimension {d} to {c} in grid {:?}", self.dims)));
            }
            dims[d] = 1;
        }
        let ranks = (0..self.size())
            .filter(|&i| {
                let c = self.coords(i);
                fixed.iter().all(|&(d, v)| c[d] == v)
            })
            .map(|i| self.ranks[i])
            .collect();
        Grid::with_ranks(&dims, ranks)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d: Vec<String> = self.dims.iter().map(|v| v.to_string()).collect();
        write!(f, "{}@{:?}", d.join("x"), self.ranks)
    }
}

/// `[start, stop)` of block `i` when `n` indices are split over `p` workers,
/// larger blocks first.
pub fn balanced_block(n: usize, p: usize, i: usize) -> (usize, usize) {
    let base = n / p;
    let extra = n % p;
    let start = i * base + i.min(extra);
    let len = base + usize::from(i < extra);
    (start, start + len)
}

/// A global tensor shape decomposed over a grid of the same rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    grid: Grid,
    global_shape: Vec<usize>,
}

/// Balanced decomposition of `global_shape` over ranks `0..product(grid)`.
pub fn decompose(global_shape: &[usize], grid: &[usize]) -> Result<Partition> {
    Partition::new(global_shape, Grid::new(grid)?)
}

impl Partition {
    pub fn new(global_shape: &[usize], grid: Grid) -> Result<Self> {
        if grid.ndim() != global_shape.len() {
            return Err(Error::contract(format!(
                "grid {grid} and shape {global_shape:?} differ in rank"
            )));
        }
        if let Some(d) = (0..grid.ndim()).find(|&d| grid.dims[d] > global_shape[d]) {
            return Err(Error::contract(format!(
                "grid extent {} exceeds shape extent {} in dimension {d}",
                grid.dims[d], global_shape[d]
            )));
        }
        Ok(Self { grid, global_shape: global_shape.to_vec() })
    }

    /// Everything on a single worker.
    pub fn single(global_shape: &[usize], rank: usize) -> Result<Self> {
        Self::new(global_shape, Grid::with_ranks(&vec![1; global_shape.len()], vec![rank])?)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn global_shape(&self) -> &[usize] {
        &self.global_shape
    }

    /// Bulk region of the worker at linear grid index `index`.
    pub fn bulk_range(&self, index: usize) -> IndexRange {
        let c = self.grid.coords(index);
        let bounds: Vec<(usize, usize)> = (0..c.len())
            .map(|d| balanced_block(self.global_shape[d], self.grid.dims[d], c[d]))
            .collect();
        IndexRange::from_bounds(&bounds).expect("balanced blocks are ordered")
    }

    pub fn range_of_rank(&self, rank: usize) -> Option<IndexRange> {
        self.grid.index_of_rank(rank).map(|i| self.bulk_range(i))
    }

    pub fn local_shape(&self, rank: usize) -> Option<Vec<usize>> {
        self.range_of_rank(rank).map(|r| r.extents())
    }

    /// Same grid, different global shape.
    pub fn with_shape(&self, global_shape: &[usize]) -> Result<Self> {
        Self::new(global_shape, self.grid.clone())
    }
}

/// One nonempty intersection between a source and a destination bulk region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub src_rank: usize,
    pub dst_rank: usize,
    /// Overlap in global coordinates.
    pub range: IndexRange,
}

/// All nonempty source/destination overlaps, in (source, destination) order.
#[derive(Clone, Debug)]
pub struct PartitionMap {
    pub transfers: Vec<Transfer>,
}

impl PartitionMap {
    pub fn get(&self, src_rank: usize, dst_rank: usize) -> Option<&IndexRange> {
        self.transfers
            .iter()
            .find(|t| t.src_rank == src_rank && t.dst_rank == dst_rank)
            .map(|t| &t.range)
    }
}

/// Pairwise intersections of the bulk regions of `src` and `dst`.
pub fn overlap(src: &Partition, dst: &Partition) -> Result<PartitionMap> {
    if src.global_shape != dst.global_shape {
        return Err(Error::ShapeMismatch { expected: src.global_shape.clone(), got: dst.global_shape.clone() });
    }
    let mut transfers = Vec::new();
    for i in 0..src.grid.size() {
        let a = src.bulk_range(i);
        for j in 0..dst.grid.size() {
            let range = a.intersect(&dst.bulk_range(j));
            if !range.is_empty() {
                transfers.push(Transfer { src_rank: src.grid.rank_at(i), dst_rank: dst.grid.rank_at(j), range });
            }
        }
    }
    Ok(PartitionMap { transfers })
}

/// Source rank and the destination ranks it feeds, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastGroup {
    pub root: usize,
    pub members: Vec<usize>,
}

/// Broadcast pattern from a grid to a larger one; reversed, it is the
/// sum-reduction pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastMap {
    pub groups: Vec<BroadcastGroup>,
}

impl BroadcastMap {
    /// The group that `rank` belongs to as a destination.
    pub fn group_of_member(&self, rank: usize) -> Option<&BroadcastGroup> {
        self.groups.iter().find(|g| g.members.contains(&rank))
    }

    pub fn group_of_root(&self, rank: usize) -> Option<&BroadcastGroup> {
        self.groups.iter().find(|g| g.root == rank)
    }
}

/// Source-to-destination broadcast along partitions: `src` must equal `dst`
/// after collapsing some of `dst`'s dimensions to extent 1. Each source
/// worker feeds every destination worker that agrees with it on all
/// non-collapsed coordinates.
pub fn broadcast_map(src: &Grid, dst: &Grid) -> Result<BroadcastMap> {
    if src.ndim() != dst.ndim() {
        return Err(Error::contract(format!("cannot broadcast {src} to {dst}: rank differs")));
    }
    if (0..src.ndim()).any(|d| src.dims[d] != dst.dims[d] && src.dims[d] != 1) {
        return Err(Error::contract(format!("cannot broadcast {src} to {dst}: incompatible extents")));
    }
    let kept: Vec<usize> = (0..src.ndim()).filter(|&d| src.dims[d] != 1).collect();
    let mut groups: Vec<BroadcastGroup> = (0..src.size())
        .map(|i| BroadcastGroup { root: src.rank_at(i), members: Vec::new() })
        .collect();
    for j in 0..dst.size() {
        let c = dst.coords(j);
        let mut sc = vec![0; src.ndim()];
        for &d in &kept {
            sc[d] = c[d];
        }
        groups[src.index_of(&sc)].members.push(dst.rank_at(j));
    }
    for g in &mut groups {
        g.members.sort_unstable();
    }
    Ok(BroadcastMap { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(n: usize, p: usize) -> Vec<usize> {
        (0..p).map(|i| {
            let (a, b) = balanced_block(n, p, i);
            b - a
        }).collect()
    }

    #[test]
    fn balanced_examples() {
        assert_eq!(sizes(11, 3), vec![4, 4, 3]);
        assert_eq!(sizes(20, 6), vec![4, 4, 3, 3, 3, 3]);
        assert_eq!(sizes(5, 5), vec![1; 5]);
    }

    #[test]
    fn decompose_rejects_oversized_grid() {
        assert!(decompose(&[3, 4], &[4, 1]).is_err());
        assert!(decompose(&[3, 4], &[1]).is_err());
        assert!(decompose(&[3, 4], &[0, 1]).is_err());
    }

    #[test]
    fn overlap_identity() {
        let p = decompose(&[7, 5], &[2, 2]).unwrap();
        let m = overlap(&p, &p).unwrap();
        assert_eq!(m.transfers.len(), 4);
        for t in &m.transfers {
            assert_eq!(t.src_rank, t.dst_rank);
            assert_eq!(Some(t.range.clone()), p.range_of_rank(t.src_rank));
        }
    }

    #[test]
    fn overlap_refines() {
        let src = decompose(&[4], &[2]).unwrap();
        let dst = decompose(&[4], &[4]).unwrap();
        let m = overlap(&src, &dst).unwrap();
        let r = |a, b| IndexRange::from_bounds(&[(a, b)]).unwrap();
        assert_eq!(
            m.transfers,
            vec![
                Transfer { src_rank: 0, dst_rank: 0, range: r(0, 1) },
                Transfer { src_rank: 0, dst_rank: 1, range: r(1, 2) },
                Transfer { src_rank: 1, dst_rank: 2, range: r(2, 3) },
                Transfer { src_rank: 1, dst_rank: 3, range: r(3, 4) },
            ]
        );
        assert!(overlap(&src, &decompose(&[5], &[1]).unwrap()).is_err());
    }

    #[test]
    fn overlap_transpose() {
        let src = decompose(&[2, 2], &[1, 2]).unwrap();
        let dst = decompose(&[2, 2], &[2, 1]).unwrap();
        let m = overlap(&src, &dst).unwrap();
        assert_eq!(m.transfers.len(), 4);
        assert!(m.transfers.iter().all(|t| t.range.volume() == 1));
        assert_eq!(m.get(1, 0), Some(&IndexRange::from_bounds(&[(0, 1), (1, 2)]).unwrap()));
    }

    #[test]
    fn broadcast_channel_grid() {
        // P_x = 1x1xP_ci xP_0 into P_w = 1xP_co xP_ci xP_0 with P_co=3, P_ci=2, P_0=2.
        let pw = Grid::new(&[1, 3, 2, 2]).unwrap();
        let px = pw.subgrid(&[(1, 0)]).unwrap();
        let m = broadcast_map(&px, &pw).unwrap();
        assert_eq!(m.groups.len(), 4);
        for g in &m.groups {
            assert_eq!(g.members.len(), 3);
            assert!(g.members.contains(&g.root));
        }
    }

    #[test]
    fn broadcast_bias_column() {
        let pr = Grid::new(&[2, 3]).unwrap();
        let bias = pr.subgrid(&[(1, 0)]).unwrap();
        assert_eq!(bias.ranks(), &[0, 3]);
        let m = broadcast_map(&bias, &pr).unwrap();
        assert_eq!(m.groups[0], BroadcastGroup { root: 0, members: vec![0, 1, 2] });
        assert_eq!(m.groups[1], BroadcastGroup { root: 3, members: vec![3, 4, 5] });
    }

    #[test]
    fn broadcast_identity_and_errors() {
        let g = Grid::new(&[2, 2]).unwrap();
        let m = broadcast_map(&g, &g).unwrap();
        assert!(m.groups.iter().all(|x| x.members == vec![x.root]));
        assert!(broadcast_map(&Grid::new(&[2, 1]).unwrap(), &Grid::new(&[3, 2]).unwrap()).is_err());
        assert!(broadcast_map(&Grid::new(&[2]).unwrap(), &g).is_err());
    }

    fn shape_and_grid() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec(1usize..12, 1..4).prop_flat_map(|shape| {
            let grid: Vec<_> = shape.iter().map(|&n| 1..=n.min(4)).collect();
            (Just(shape), grid)
        })
    }

    proptest! {
        #[test]
        fn decomposition_tiles_exactly((shape, grid) in shape_and_grid()) {
            let p = decompose(&shape, &grid).unwrap();
            let mut hits = vec![0u8; shape.iter().product()];
            for i in 0..p.grid().size() {
                let r = p.bulk_range(i);
                for (d, (&a, &b)) in r.start().iter().zip(r.stop()).enumerate() {
                    let len = b - a;
                    let n = shape[d];
                    let q = grid[d];
                    prop_assert!(len == n / q || len == n / q + 1);
                }
                crate::tensor::for_each_run(&shape, &r, |h, _, n| {
                    for k in h..h + n {
                        hits[k] += 1;
                    }
                });
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }

        #[test]
        fn overlap_conserves_volume((shape, g1) in shape_and_grid(), seed in 0usize..1000) {
            let g2: Vec<usize> = shape.iter().enumerate().map(|(d, &n)| 1 + (seed / (d + 1)) % n.min(4)).collect();
            let a = decompose(&shape, &g1).unwrap();
            let b = decompose(&shape, &g2).unwrap();
            let m = overlap(&a, &b).unwrap();
            let vol: usize = m.transfers.iter().map(|t| t.range.volume()).sum();
            prop_assert_eq!(vol, shape.iter().product::<usize>());
        }

        #[test]
        fn broadcast_map_visits_each_destination_once(dims in prop::collection::vec(1usize..4, 1..4), mask in any::<u8>()) {
            let dst = Grid::new(&dims).unwrap();
            let pinned: Vec<(usize, usize)> = (0..dims.len()).filter(|d| mask >> d & 1 == 1).map(|d| (d, 0)).collect();
            let src = dst.subgrid(&pinned).unwrap();
            let m = broadcast_map(&src, &dst).unwrap();
            let mut seen = vec![0; dst.size()];
            for g in &m.groups {
                let expected: usize = pinned.iter().map(|&(d, _)| dims[d]).product();
                prop_assert_eq!(g.members.len(), expected);
                for &r in &g.members {
                    seen[r] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
