//! Benchmark fixtures.

use adjmove::catalog::{self, CatalogConfig};
use adjmove::network::{build_lenet5, init_params, Mode, NetworkSpec, CLASSES, IMAGE};
use adjmove::{LinearOp, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A catalog operator with random input and output vectors to feed it.
pub struct OpFixture {
    pub op: Box<dyn LinearOp<f64>>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn op_fixture(name: &str, cfg: &CatalogConfig) -> Result<OpFixture> {
    let op = catalog::build::<f64>(name, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::<f64>::random(&[op.domain_len()], &mut rng).into_vec();
    let y = Tensor::<f64>::random(&[op.codomain_len()], &mut rng).into_vec();
    Ok(OpFixture { op, x, y })
}

/// Everything one Lenet-5 evaluation needs.
pub struct LenetFixture {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

pub fn lenet_fixture(mode: Mode, batch: usize) -> Result<LenetFixture> {
    let spec = build_lenet5(mode, mode.workers(), batch)?;
    let params = init_params(&spec, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_f64(
        &[batch, 1, IMAGE, IMAGE],
        &(0..batch * IMAGE * IMAGE).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
    )?;
    let labels = (0..batch).map(|_| rng.gen_range(0..CLASSES)).collect();
    Ok(LenetFixture { spec, params, x, labels })
}
