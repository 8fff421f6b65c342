//! Named operators for the adjoint-test suite. Every entry is linear, so
//! each one must pass the adjoint test; `broadcast_corrupt` is the one
//! deliberate exception.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::comm::{AllReduceOp, BroadcastOp, GatherOp, RepartitionOp, ScatterOp, SendRecvOp, Spmd, SumReduceOp};
use crate::halo::{compute_halo, HaloExchangeOp, KernelSpec, TrimShim};
use crate::layers::{AffineDesc, ConvDesc, DistLayerOp, LayerDesc, PoolDesc, PoolMode, TransposeDesc};
use crate::memory_ops::{Add, Allocate, Clear, CopyMove, Deallocate, Identity, Mode, SubsetPair};
use crate::{decompose, Error, GroupConfig, Grid, HaloExchange, IndexRange, KernelDim, LinearOp, Partition, Real, Result, Tensor};

/// Every operator run by `--all`, in report order.
pub const ALL: &[&str] = &[
    "identity",
    "allocate",
    "deallocate",
    "clear",
    "add",
    "copy_in_place",
    "copy_out_of_place",
    "move_in_place",
    "move_out_of_place",
    "send_recv",
    "scatter",
    "gather",
    "broadcast",
    "sum_reduce",
    "all_reduce",
    "repartition",
    "halo_exchange",
    "halo_exchange_2x2",
    "trim_shim",
    "dist_conv",
    "dist_pool_avg",
    "dist_affine",
    "dist_transpose",
];

/// Operators expected to fail.
pub const NEGATIVE_CONTROLS: &[&str] = &["broadcast_corrupt"];

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogConfig {
    pub workers: usize,
    /// Tensor shape for the shape-generic operators.
    pub shape: Vec<usize>,
    /// Worker grid for `scatter`, `gather` and `halo_exchange`; defaults to
    /// splitting the first dimension.
    pub partition: Option<Vec<usize>>,
    /// Seed for frozen layer weights.
    pub seed: u64,
    pub group: GroupConfig,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self { workers: 4, shape: vec![8, 6], partition: None, seed: 0, group: GroupConfig::default() }
    }
}

impl CatalogConfig {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn grid(&self) -> Vec<usize> {
        self.partition.clone().unwrap_or_else(|| {
            let mut g = vec![1; self.shape.len()];
            g[0] = self.workers;
            g
        })
    }

    fn partition(&self) -> Result<Partition> {
        let grid = self.grid();
        if grid.iter().product::<usize>() != self.workers {
            return Err(Error::contract(format!("partition {grid:?} does not have {} workers", self.workers)));
        }
        decompose(&self.shape, &grid)
    }
}

fn flat(lo: usize, hi: usize) -> Result<IndexRange> {
    IndexRange::from_bounds(&[(lo, hi)])
}

fn blocks(part: &Partition) -> Vec<(usize, IndexRange)> {
    (0..part.grid().size()).map(|i| (part.grid().rank_at(i), part.bulk_range(i))).collect()
}

fn copy_move(n: usize, mode: Mode, moves: bool) -> Result<CopyMove> {
    let h = n / 2;
    let pair = match mode {
        Mode::InPlace => SubsetPair::new(flat(0, h)?, flat(h, 2 * h)?)?,
        Mode::OutOfPlace => SubsetPair::appended(flat(0, h)?, n)?,
    };
    Ok(CopyMove { shape: vec![n], pair, mode, moves })
}

fn spmd<O>(cfg: &CatalogConfig, op: O) -> Box<Spmd<O>> {
    Box::new(Spmd { op, config: cfg.group })
}

fn layer_op(cfg: &CatalogConfig, desc: LayerDesc, input: Partition, workers: usize, params: Vec<Tensor>) -> Box<Spmd<DistLayerOp>> {
    spmd(cfg, DistLayerOp { desc, input, workers, params })
}

/// Builds the operator called `name`.
pub fn build<T: Real>(name: &str, cfg: &CatalogConfig) -> Result<Box<dyn LinearOp<T>>> {
    let n = cfg.len();
    let k = cfg.workers;
    if n < 2 {
        return Err(Error::contract(format!("shape {:?} is too small for the catalog", cfg.shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = n / 2;
    Ok(match name {
        "identity" => Box::new(Identity { len: n }),
        "allocate" => Box::new(Allocate { len: n, extent: h }),
        "deallocate" => Box::new(Deallocate { len: n, range: flat(n / 4, n / 4 + h)? }),
        "clear" => {
            let bounds: Vec<(usize, usize)> =
                cfg.shape.iter().enumerate().map(|(d, &e)| if d == 0 { (0, e.div_ceil(2)) } else { (0, e) }).collect();
            Box::new(Clear { shape: cfg.shape.clone(), range: IndexRange::from_bounds(&bounds)? })
        }
        "add" => Box::new(Add { shape: vec![n], pair: SubsetPair::new(flat(0, h)?, flat(h, 2 * h)?)? }),
        "copy" | "copy_in_place" => Box::new(copy_move(n, Mode::InPlace, false)?),
        "copy_out_of_place" => Box::new(copy_move(n, Mode::OutOfPlace, false)?),
        "move" | "move_in_place" => Box::new(copy_move(n, Mode::InPlace, true)?),
        "move_out_of_place" => Box::new(copy_move(n, Mode::OutOfPlace, true)?),
        "send_recv" => {
            if k < 2 {
                return Err(Error::contract("send_recv needs two workers"));
            }
            spmd(cfg, SendRecvOp { workers: k, src: k - 1, dst: 0, len: n })
        }
        "scatter" | "gather" => {
            let part = cfg.partition()?;
            let op = ScatterOp { workers: k, root: 0, shape: cfg.shape.clone(), blocks: blocks(&part) };
            if name == "scatter" {
                spmd(cfg, op)
            } else {
                spmd(cfg, GatherOp(op))
            }
        }
        "broadcast" => spmd(cfg, BroadcastOp::new(k, n)),
        "broadcast_corrupt" => spmd(cfg, BroadcastOp { corrupt: true, ..BroadcastOp::new(k, n) }),
        "sum_reduce" => spmd(cfg, SumReduceOp(BroadcastOp::new(k, n))),
        "all_reduce" => spmd(cfg, AllReduceOp { workers: k, len: n }),
        "repartition" => {
            // first dimension split to last dimension split, ranks reversed
            let src = decompose(&cfg.shape, &cfg.grid())?;
            let mut dims = vec![1; cfg.shape.len()];
            *dims.last_mut().expect("nonempty shape") = k;
            let dst = Partition::new(&cfg.shape, Grid::with_ranks(&dims, (0..k).rev().collect())?)?;
            spmd(cfg, RepartitionOp { workers: k, src, dst })
        }
        "halo_exchange" => {
            let kernel = KernelSpec::centered(vec![KernelDim::padded(3, 1); cfg.shape.len()]);
            let exchange = HaloExchange::from_kernel(cfg.partition()?, &kernel)?;
            spmd(cfg, HaloExchangeOp { workers: k, exchange })
        }
        "halo_exchange_2x2" => spmd(cfg, HaloExchangeOp { workers: 4, exchange: HaloExchange::two_by_two_example(&[11, 13])? }),
        "trim_shim" => {
            // fourth of six workers over 20 inputs, k=2, s=2: one trimmed
            // entry on the left, a halo of two on the right
            let part = decompose(&[20], &[6])?;
            let spec = compute_halo(&part, &KernelSpec::new(vec![KernelDim::new(2, 2)]), 3)?;
            let shape = spec.local_shape(&part.bulk_range(3).extents());
            Box::new(TrimShim { shape, spec })
        }
        "dist_conv" => {
            let d = ConvDesc {
                name: name.into(),
                input_shape: vec![2, 3, 7, 8],
                out_channels: 4,
                kernel: vec![KernelDim::padded(3, 1); 2],
                p_co: 2,
                p_ci: 1,
                feature_grid: vec![1, 2],
                w_ranks: vec![0, 1, 2, 3],
                r_ranks: vec![0, 2],
            };
            let w = Tensor::random(&d.weight_shape(), &mut rng);
            layer_op(cfg, LayerDesc::Conv(d.clone()), d.x_partition()?, 4, vec![w, Tensor::zeros(&[4])])
        }
        "dist_pool_avg" => {
            let d = PoolDesc {
                name: name.into(),
                input_shape: vec![2, 3, 9, 10],
                kernel: vec![KernelDim::padded(3, 1), KernelDim::new(2, 2)],
                mode: PoolMode::Avg,
                grid: vec![1, 1, 2, 2],
                ranks: vec![0, 1, 2, 3],
            };
            layer_op(cfg, LayerDesc::Pool(d.clone()), d.x_partition()?, 4, vec![])
        }
        "dist_affine" => {
            let d = AffineDesc { name: name.into(), batch: 3, n_fi: 9, n_fo: 5, p_fo: 2, p_fi: 2, w_ranks: vec![0, 1, 2, 3] };
            let w = Tensor::random(&[5, 9], &mut rng);
            layer_op(cfg, LayerDesc::Affine(d.clone()), d.x_partition()?, 4, vec![w, Tensor::zeros(&[5])])
        }
        "dist_transpose" => {
            let src = decompose(&[2, 16, 5, 5], &[1, 1, 2, 2])?;
            let dst = Partition::new(&[2, 16, 5, 5], Grid::with_ranks(&[1, 2, 1, 1], vec![0, 1])?)?;
            layer_op(cfg, LayerDesc::Transpose(TransposeDesc { name: name.into(), src: src.clone(), dst }), src, 4, vec![])
        }
        _ => return Err(Error::contract(format!("unknown operator {name:?}"))),
    })
}
