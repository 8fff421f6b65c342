//! Sequential layers: every tensor lives on a single rank.

use super::kernels::{self, PoolMode};
use super::{restore, saved, AffineDesc, ConvDesc, Layer, Param, PoolDesc, Saved};
use crate::halo::KernelDim;
use crate::{Comm, Error, Real, Result, Tensor};

fn present<T: Real>(x: Option<Tensor<T>>, layer: &str) -> Result<Tensor<T>> {
    x.ok_or_else(|| Error::contract(format!("{layer}: input missing on the holding rank")))
}

fn hash_bools(mask: &[bool], out: &mut Vec<u64>) {
    for chunk in mask.chunks(64) {
        out.push(chunk.iter().enumerate().fold(0u64, |acc, (i, &m)| acc | (u64::from(m) << i)));
    }
}

pub struct LocalConv<T> {
    name: String,
    kernel: Vec<KernelDim>,
    rank: usize,
    w: Param<T>,
    b: Param<T>,
}

impl<T: Real> LocalConv<T> {
    pub fn new(desc: &ConvDesc, rank: usize) -> Result<Self> {
        Ok(Self {
            name: desc.name.clone(),
            kernel: desc.kernel.clone(),
            rank: desc.w_ranks[0],
            w: Param::new(format!("{}.w", desc.name), desc.weight_layout()?, rank),
            b: Param::new(format!("{}.b", desc.name), desc.bias_layout()?, rank),
        })
    }
}

impl<T: Real> Layer<T> for LocalConv<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        if comm.rank() != self.rank {
            return Ok((None, saved(None::<Tensor<T>>)));
        }
        let x = present(x, &self.name)?;
        let w = self.w.value.as_ref().expect("holder has weights");
        let y = kernels::conv_local(w, self.b.value.as_ref(), &x, &self.kernel)?;
        Ok((Some(y), saved(Some(x))))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let x: Option<Tensor<T>> = restore(s, &self.name)?;
        if comm.rank() != self.rank {
            return Ok(None);
        }
        let (x, dy) = (present(x, &self.name)?, present(dy, &self.name)?);
        let (dw, db, dx) = kernels::conv_local_adjoint(self.w.value.as_ref().expect("holder"), &x, &dy, &self.kernel)?;
        self.w.accumulate(Some(dw))?;
        self.b.accumulate(Some(db))?;
        Ok(Some(dx))
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct LocalPool {
    name: String,
    kernel: Vec<KernelDim>,
    mode: PoolMode,
    rank: usize,
}

impl LocalPool {
    pub fn new(desc: &PoolDesc) -> Result<Self> {
        Ok(Self { name: desc.name.clone(), kernel: desc.kernel.clone(), mode: desc.mode, rank: desc.ranks[0] })
    }
}

struct PoolSaved {
    x_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Real> Layer<T> for LocalPool {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        if comm.rank() != self.rank {
            return Ok((None, saved(None::<PoolSaved>)));
        }
        let x = present(x, &self.name)?;
        let (y, argmax) = kernels::pool_local(&x, &self.kernel, self.mode)?;
        Ok((Some(y), saved(Some(PoolSaved { x_shape: x.shape().to_vec(), argmax }))))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let s: Option<PoolSaved> = restore(s, &self.name)?;
        if comm.rank() != self.rank {
            return Ok(None);
        }
        let s = s.expect("holder saved its context");
        let dy = present(dy, &self.name)?;
        Ok(Some(kernels::pool_local_adjoint(&s.x_shape, &dy, &self.kernel, self.mode, &s.argmax)?))
    }

    fn fingerprint(&self, s: &Saved, out: &mut Vec<u64>) {
        if let Some(Some(s)) = s.downcast_ref::<Option<PoolSaved>>() {
            out.extend(s.argmax.iter().map(|&i| i as u64));
        }
    }
}

pub struct LocalAffine<T> {
    name: String,
    rank: usize,
    w: Param<T>,
    b: Param<T>,
}

impl<T: Real> LocalAffine<T> {
    pub fn new(desc: &AffineDesc, rank: usize) -> Result<Self> {
        Ok(Self {
            name: desc.name.clone(),
            rank: desc.w_ranks[0],
            w: Param::new(format!("{}.w", desc.name), desc.weight_layout()?, rank),
            b: Param::new(format!("{}.b", desc.name), desc.bias_layout()?, rank),
        })
    }
}

impl<T: Real> Layer<T> for LocalAffine<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        if comm.rank() != self.rank {
            return Ok((None, saved(None::<Tensor<T>>)));
        }
        let x = present(x, &self.name)?;
        let y = kernels::affine_local(self.w.value.as_ref().expect("holder"), self.b.value.as_ref(), &x)?;
        Ok((Some(y), saved(Some(x))))
    }

    fn backward(&mut self, comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let x: Option<Tensor<T>> = restore(s, &self.name)?;
        if comm.rank() != self.rank {
            return Ok(None);
        }
        let (x, dy) = (present(x, &self.name)?, present(dy, &self.name)?);
        let (dw, db, dx) = kernels::affine_local_adjoint(self.w.value.as_ref().expect("holder"), &x, &dy)?;
        self.w.accumulate(Some(dw))?;
        self.b.accumulate(Some(db))?;
        Ok(Some(dx))
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Elementwise, so it runs unchanged on any layout.
pub struct Relu {
    name: String,
}

impl Relu {
    pub fn new(name: &str) -> Self {
        Self { name: name.into() }
    }
}

impl<T: Real> Layer<T> for Relu {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, _comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        match x {
            Some(x) => {
                let (y, mask) = kernels::relu(&x);
                Ok((Some(y), saved(Some(mask))))
            }
            None => Ok((None, saved(None::<Vec<bool>>))),
        }
    }

    fn backward(&mut self, _comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let mask: Option<Vec<bool>> = restore(s, &self.name)?;
        match (mask, dy) {
            (Some(m), Some(dy)) => Ok(Some(kernels::relu_adjoint(&dy, &m)?)),
            (None, None) => Ok(None),
            _ => Err(Error::contract(format!("{}: cotangent and input live on different ranks", self.name))),
        }
    }

    fn fingerprint(&self, s: &Saved, out: &mut Vec<u64>) {
        if let Some(Some(mask)) = s.downcast_ref::<Option<Vec<bool>>>() {
            hash_bools(mask, out);
        }
    }
}

/// `(n_b, c, ...) -> (n_b, c * ...)`. Row-major storage makes this a pure
/// reshape of each local block as long as only the channel dimension is
/// split.
pub struct Flatten {
    name: String,
}

impl Flatten {
    pub fn new(name: &str) -> Self {
        Self { name: name.into() }
    }
}

impl<T: Real> Layer<T> for Flatten {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, _comm: &Comm<T>, x: Option<Tensor<T>>) -> Result<(Option<Tensor<T>>, Saved)> {
        match x {
            Some(x) => {
                let shape = x.shape().to_vec();
                let flat = x.reshape(&[shape[0], shape[1..].iter().product()])?;
                Ok((Some(flat), saved(Some(shape))))
            }
            None => Ok((None, saved(None::<Vec<usize>>))),
        }
    }

    fn backward(&mut self, _comm: &Comm<T>, s: Saved, dy: Option<Tensor<T>>) -> Result<Option<Tensor<T>>> {
        let shape: Option<Vec<usize>> = restore(s, &self.name)?;
        match (shape, dy) {
            (Some(shape), Some(dy)) => Ok(Some(dy.reshape(&shape)?)),
            (None, None) => Ok(None),
            _ => Err(Error::contract(format!("{}: cotangent and input live on different ranks", self.name))),
        }
    }
}
