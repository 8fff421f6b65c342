//! Dense row-major tensors and index ranges in global index space.

use std::fmt;

use rand::Rng;

use crate::{Error, Real, Result};

/// Half-open, per-dimension interval `[start, stop)` of indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexRange {
    start: Vec<usize>,
    stop: Vec<usize>,
}

impl IndexRange {
    pub fn new(start: Vec<usize>, stop: Vec<usize>) -> Result<Self> {
        if start.len() != stop.len() || start.is_empty() {
            return Err(Error::contract(format!(
                "range bounds {start:?}..{stop:?} must have equal, nonzero rank"
            )));
        }
        if start.iter().zip(&stop).any(|(a, b)| a > b) {
            return Err(Error::contract(format!("range start {start:?} exceeds stop {stop:?}")));
        }
        Ok(Self { start, stop })
    }

    /// Builds a range from `(start, stop)` pairs.
    pub fn from_bounds(bounds: &[(usize, usize)]) -> Result<Self> {
        Self::new(bounds.iter().map(|b| b.0).collect(), bounds.iter().map(|b| b.1).collect())
    }

    /// The whole index space of `shape`.
    pub fn full(shape: &[usize]) -> Self {
        Self { start: vec![0; shape.len()], stop: shape.to_vec() }
    }

    pub fn start(&self) -> &[usize] {
        &self.start
    }

    pub fn stop(&self) -> &[usize] {
        &self.stop
    }

    pub fn rank(&self) -> usize {
        self.start.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.start.iter().zip(&self.stop).map(|(a, b)| b - a).collect()
    }

    pub fn volume(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.volume() == 0
    }

    /// Intersection; disjoint ranges yield an empty range.
    pub fn intersect(&self, other: &IndexRange) -> IndexRange {
        let start: Vec<usize> = self.start.iter().zip(&other.start).map(|(a, b)| *a.max(b)).collect();
        let stop = self
            .stop
            .iter()
            .zip(&other.stop)
            .zip(&start)
            .map(|((a, b), s)| (*a.min(b)).max(*s))
            .collect();
        IndexRange { start, stop }
    }

    pub fn contains(&self, other: &IndexRange) -> bool {
        other.rank() == self.rank()
            && (other.is_empty()
                || self
                    .start
                    .iter()
                    .zip(&self.stop)
                    .zip(other.start.iter().zip(&other.stop))
                    .all(|((s0, s1), (o0, o1))| s0 <= o0 && o1 <= s1))
    }

    /// Translates the range so that `origin` becomes index zero.
    pub fn relative_to(&self, origin: &[usize]) -> Result<IndexRange> {
        if origin.len() != self.rank() || origin.iter().zip(&self.start).any(|(o, s)| o > s) {
            return Err(Error::contract(format!("origin {origin:?} lies past range start {:?}", self.start)));
        }
        Ok(IndexRange {
            start: self.start.iter().zip(origin).map(|(s, o)| s - o).collect(),
            stop: self.stop.iter().zip(origin).map(|(s, o)| s - o).collect(),
        })
    }

    fn fits(&self, shape: &[usize]) -> bool {
        self.rank() == shape.len() && self.stop.iter().zip(shape).all(|(s, n)| s <= n)
    }
}

impl fmt::Display for IndexRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.start.iter().zip(&self.stop).map(|(a, b)| format!("{a}:{b}")).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Calls `f(host_offset, block_offset, len)` for every contiguous run of
/// `range` inside a row-major tensor of `shape`, in ascending order.
pub(crate) fn for_each_run(shape: &[usize], range: &IndexRange, mut f: impl FnMut(usize, usize, usize)) {
    if range.is_empty() {
        return;
    }
    let rank = shape.len();
    let st = strides(shape);
    let ext = range.extents();
    let inner = ext[rank - 1];
    let outer: usize = ext[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut off = range.start[rank - 1];
        for d in 0..rank - 1 {
            off += (range.start[d] + idx[d]) * st[d];
        }
        f(off, o * inner, inner);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < ext[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Dense tensor of rank at least one, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// # Panics
    /// If `shape` is empty; scalars are shape `[1]`.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "rank-0 tensors are not supported");
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::contract("rank-0 tensors are not supported"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Uniform samples in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::from_f64_lossy(rng.gen_range(-1.0..1.0));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn get(&self, index: &[usize]) -> T {
        let off: usize = index.iter().zip(strides(&self.shape)).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    fn check_range(&self, range: &IndexRange) -> Result<()> {
        if range.fits(&self.shape) {
            Ok(())
        } else {
            Err(Error::contract(format!("range {range} outside tensor of shape {:?}", self.shape)))
        }
    }

    /// Copy of the sub-block `range`.
    pub fn slice(&self, range: &IndexRange) -> Result<Self> {
        self.check_range(range)?;
        let mut out = Self::zeros(&range.extents());
        for_each_run(&self.shape, range, |h, b, n| {
            out.data[b..b + n].copy_from_slice(&self.data[h..h + n]);
        });
        Ok(out)
    }

    fn check_block(&self, range: &IndexRange, src: &Tensor<T>) -> Result<()> {
        self.check_range(range)?;
        if range.extents() != src.shape {
            return Err(Error::ShapeMismatch { expected: range.extents(), got: src.shape.clone() });
        }
        Ok(())
    }

    /// Overwrites the block `range` with `src`.
    pub fn assign_slice(&mut self, range: &IndexRange, src: &Tensor<T>) -> Result<()> {
        self.check_block(range, src)?;
        let data = &mut self.data;
        for_each_run(&self.shape, range, |h, b, n| {
            data[h..h + n].copy_from_slice(&src.data[b..b + n]);
        });
        Ok(())
    }

    /// Accumulates `src` into the block `range`.
    pub fn add_slice(&mut self, range: &IndexRange, src: &Tensor<T>) -> Result<()> {
        self.check_block(range, src)?;
        let data = &mut self.data;
        for_each_run(&self.shape, range, |h, b, n| {
            for (d, s) in data[h..h + n].iter_mut().zip(&src.data[b..b + n]) {
                *d += *s;
            }
        });
        Ok(())
    }

    /// Zeroes the block `range`.
    pub fn clear_slice(&mut self, range: &IndexRange) -> Result<()> {
        self.check_range(range)?;
        let data = &mut self.data;
        for_each_run(&self.shape, range, |h, _, n| {
            data[h..h + n].iter_mut().for_each(|v| *v = T::zero());
        });
        Ok(())
    }

    /// Embeds `self` in a zero tensor with `lo`/`hi` extra entries per dimension.
    pub fn pad(&self, lo: &[usize], hi: &[usize]) -> Result<Self> {
        if lo.len() != self.rank() || hi.len() != self.rank() {
            return Err(Error::contract("padding rank differs from tensor rank"));
        }
        if lo.iter().chain(hi).all(|&p| p == 0) {
            return Ok(self.clone());
        }
        let shape: Vec<usize> = (0..self.rank()).map(|d| lo[d] + self.shape[d] + hi[d]).collect();
        let mut out = Self::zeros(&shape);
        let stop = lo.iter().zip(&self.shape).map(|(l, n)| l + n).collect();
        out.assign_slice(&IndexRange { start: lo.to_vec(), stop }, self)?;
        Ok(out)
    }

    /// Adjoint of [`Tensor::pad`]: drops `lo`/`hi` entries per dimension.
    pub fn unpad(&self, lo: &[usize], hi: &[usize]) -> Result<Self> {
        if lo.iter().chain(hi).all(|&p| p == 0) {
            return Ok(self.clone());
        }
        let mut bounds = Vec::with_capacity(self.rank());
        for d in 0..self.rank() {
            if lo[d] + hi[d] > self.shape[d] {
                return Err(Error::contract(format!("cannot remove {}+{} entries from extent {}", lo[d], hi[d], self.shape[d])));
            }
            bounds.push((lo[d], self.shape[d] - hi[d]));
        }
        self.slice(&IndexRange::from_bounds(&bounds)?)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: other.shape.clone() });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Euclidean norm, accumulated in flat ascending order.
    pub fn norm(&self) -> T {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// `Σ a_i b_i` in flat ascending index order.
pub fn inner_product<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { expected: a.shape.clone(), got: b.shape.clone() });
    }
    Ok(dot(&a.data, &b.data))
}

/// Flat-order dot product; callers guarantee equal lengths.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub(crate) fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `‖a − b‖₂ / ‖b‖₂`, with `0/0 = 0`.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on unequal lengths");
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        num += (x - y) * (x - y);
        den += y * y;
    }
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(inner_product(&t(&[3], &[1., 2., 3.]), &t(&[3], &[4., 5., 6.])).unwrap(), 32.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor = Tensor::random(&[3, 4, 5], &mut rng);
        assert_eq!(inner_product(&x, &Tensor::zeros(&[3, 4, 5])).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_matches_element_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Tensor = Tensor::random(&[3, 4, 5], &mut rng);
        let b: Tensor = Tensor::random(&[3, 4, 5], &mut rng);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    acc += a.get(&[i, j, k]) * b.get(&[i, j, k]);
                }
            }
        }
        assert_eq!(inner_product(&a, &b).unwrap().to_bits(), acc.to_bits());
    }

    #[test]
    fn inner_product_rejects_shape_mismatch() {
        let r = inner_product(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[3, 2]));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn slice_examples() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        assert_eq!(x.slice(&IndexRange::from_bounds(&[(1, 3)]).unwrap()).unwrap().data(), &[2., 3.]);
        let e = x.slice(&IndexRange::from_bounds(&[(2, 2)]).unwrap()).unwrap();
        assert_eq!(e.shape(), &[0]);
        assert_eq!(x.slice(&IndexRange::full(&[4])).unwrap(), x);
        assert!(x.slice(&IndexRange::from_bounds(&[(2, 5)]).unwrap()).is_err());
        assert!(IndexRange::from_bounds(&[(3, 2)]).is_err());
    }

    #[test]
    fn add_slice_examples() {
        let src = t(&[2, 1], &[5., 7.]);
        let r = IndexRange::from_bounds(&[(1, 3), (1, 2)]).unwrap();
        let mut a: Tensor = Tensor::zeros(&[3, 2]);
        let mut b: Tensor = Tensor::zeros(&[3, 2]);
        a.add_slice(&r, &src).unwrap();
        b.assign_slice(&r, &src).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), &[0., 0., 0., 5., 0., 7.]);

        let mut c = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let orig = c.clone();
        c.add_slice(&r, &src).unwrap();
        let neg = t(&[2, 1], &[-5., -7.]);
        c.add_slice(&r, &neg).unwrap();
        assert_eq!(c, orig);
        assert!(c.add_slice(&r, &t(&[1, 2], &[1., 1.])).is_err());
    }

    #[test]
    fn add_slice_matches_element_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let shape = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
            let mut base: Tensor = Tensor::random(&shape, &mut rng);
            let bounds: Vec<(usize, usize)> = shape
                .iter()
                .map(|&n| {
                    let a = rng.gen_range(0..=n);
                    (a, rng.gen_range(a..=n))
                })
                .collect();
            let r = IndexRange::from_bounds(&bounds).unwrap();
            let src: Tensor = Tensor::random(&r.extents(), &mut rng);
            let mut expect = base.clone();
            let ext = r.extents();
            for i in 0..ext[0] {
                for j in 0..ext[1] {
                    for k in 0..ext[2] {
                        let g = [i + bounds[0].0, j + bounds[1].0, k + bounds[2].0];
                        let off = (g[0] * shape[1] + g[1]) * shape[2] + g[2];
                        expect.data_mut()[off] += src.get(&[i, j, k]);
                    }
                }
            }
            base.add_slice(&r, &src).unwrap();
            assert_eq!(base, expect);
        }
    }

    #[test]
    fn pad_and_unpad_round_trip() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let p = x.pad(&[1, 0], &[0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 4]);
        assert_eq!(p.data(), &[0., 0., 0., 0., 1., 2., 0., 0., 3., 4., 0., 0.]);
        assert_eq!(p.unpad(&[1, 0], &[0, 2]).unwrap(), x);
    }

    fn shape_and_range() -> impl Strategy<Value = (Vec<usize>, Vec<(usize, usize)>)> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let bounds: Vec<_> = shape
                .iter()
                .map(|&n| (0..=n).prop_flat_map(move |a| (Just(a), a..=n)))
                .collect();
            (Just(shape), bounds)
        })
    }

    proptest! {
        #[test]
        fn inner_product_symmetric_and_bilinear(n in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Tensor = Tensor::random(&[n], &mut rng);
            let b: Tensor = Tensor::random(&[n], &mut rng);
            prop_assert_eq!(inner_product(&a, &b).unwrap(), inner_product(&b, &a).unwrap());
            // Scaling by a power of two is exact, so bilinearity holds bitwise.
            let mut a2 = a.clone();
            a2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            prop_assert_eq!(inner_product(&a2, &b).unwrap(), 2.0 * inner_product(&a, &b).unwrap());
        }

        #[test]
        fn slice_assign_round_trip((shape, bounds) in shape_and_range(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Tensor = Tensor::random(&shape, &mut rng);
            let r = IndexRange::from_bounds(&bounds).unwrap();
            let mut y = x.clone();
            y.assign_slice(&r, &x.slice(&r).unwrap()).unwrap();
            prop_assert_eq!(y, x);
        }
    }
}
