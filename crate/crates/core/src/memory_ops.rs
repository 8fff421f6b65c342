//! Primitive memory operators as explicit forward/adjoint pairs.
//!
//! Every operator here acts on a host tensor and a pair of subsets of it:
//!
//! | operator | forward | adjoint |
//! |---|---|---|
//! | allocate `A_b` | `[x; 0_b]` | deallocate `D_b` |
//! | clear `K_b` | zero `x_b` | itself |
//! | add `S_{a→b}` | `x_b += x_a` | `S_{b→a}` |
//! | in-place copy | `S_{a→b} K_b` | `K_b S_{b→a}` |
//! | out-of-place copy | `S_{a→b} A_b` | `D_b S_{b→a}` |
//! | in-place move | `K_a S_{a→b} K_b` | `K_b S_{b→a} K_a` |
//! | out-of-place move | `D_a S_{a→b} A_b` | `D_b S_{b→a} A_a` |
//!
//! Composite operators are built literally from these compositions so the
//! adjoint test exercises the algebra rather than a shortcut.
//!
//! Out-of-place forms work on the flattened host buffer: the new subset `b`
//! is appended at the end of the buffer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{dot, norm};
use crate::{Error, IndexRange, Real, Result, Tensor};

/// Two disjoint, equally shaped subsets `a` and `b` of a host tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPair {
    a: IndexRange,
    b: IndexRange,
}

impl SubsetPair {
    pub fn new(a: IndexRange, b: IndexRange) -> Result<Self> {
        if a.extents() != b.extents() {
            return Err(Error::contract(format!("subsets {a} and {b} differ in extent")));
        }
        if !a.intersect(&b).is_empty() {
            return Err(Error::contract(format!("subsets {a} and {b} overlap")));
        }
        Ok(Self { a, b })
    }

    /// Pair for an out-of-place operator over a flat buffer of `len`:
    /// `b` is the subset appended right after the buffer.
    pub fn appended(a: IndexRange, len: usize) -> Result<Self> {
        if a.rank() != 1 || a.stop()[0] > len {
            return Err(Error::contract(format!("{a} is not a flat range within {len} elements")));
        }
        let n = a.volume();
        Self::new(a, IndexRange::from_bounds(&[(len, len + n)])?)
    }

    pub fn a(&self) -> &IndexRange {
        &self.a
    }

    pub fn b(&self) -> &IndexRange {
        &self.b
    }

    pub fn disjoint(&self) -> bool {
        self.a.intersect(&self.b).is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self { a: self.b.clone(), b: self.a.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    InPlace,
    OutOfPlace,
}

fn flat<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::vector(x.data().to_vec())
}

/// `A_b`: appends `extent` zeros to the flattened `x`.
pub fn allocate<T: Real>(x: &Tensor<T>, extent: usize) -> Tensor<T> {
    allocate_at(x, x.len(), extent).expect("appending is always in bounds")
}

/// Inserts `extent` zeros into the flattened `x` before flat index `at`.
pub fn allocate_at<T: Real>(x: &Tensor<T>, at: usize, extent: usize) -> Result<Tensor<T>> {
    if at > x.len() {
        return Err(Error::contract(format!("allocation point {at} past end of {} elements", x.len())));
    }
    let mut data = Vec::with_capacity(x.len() + extent);
    data.extend_from_slice(&x.data()[..at]);
    data.resize(at + extent, T::zero());
    data.extend_from_slice(&x.data()[at..]);
    Ok(Tensor::vector(data))
}

/// `D_b`: drops the flat subset `b` from `y`.
pub fn deallocate<T: Real>(y: &Tensor<T>, b: &IndexRange) -> Result<Tensor<T>> {
    if b.rank() != 1 || b.stop()[0] > y.len() {
        return Err(Error::contract(format!("deallocation range {b} outside {} elements", y.len())));
    }
    let (lo, hi) = (b.start()[0], b.stop()[0]);
    let mut data = Vec::with_capacity(y.len() - (hi - lo));
    data.extend_from_slice(&y.data()[..lo]);
    data.extend_from_slice(&y.data()[hi..]);
    Ok(Tensor::vector(data))
}

/// `K_b`: zeroes subset `b`. Self-adjoint.
pub fn clear<T: Real>(x: &Tensor<T>, b: &IndexRange) -> Result<Tensor<T>> {
    let mut y = x.clone();
    y.clear_slice(b)?;
    Ok(y)
}

/// `S_{a→b}`: `x_b ← x_a + x_b`. Its adjoint is `add(y, &pair.reversed())`.
pub fn add<T: Real>(x: &Tensor<T>, pair: &SubsetPair) -> Result<Tensor<T>> {
    let xa = x.slice(&pair.a)?;
    let mut y = x.clone();
    y.add_slice(&pair.b, &xa)?;
    Ok(y)
}

fn check_out_of_place<T: Real>(x: &Tensor<T>, pair: &SubsetPair) -> Result<()> {
    let expect = SubsetPair::appended(pair.a.clone(), x.len())?;
    if expect != *pair {
        return Err(Error::contract(format!(
            "out-of-place subset b must be appended at {}, got {}",
            x.len(),
            pair.b
        )));
    }
    Ok(())
}

/// Copy `x_a` into `x_b`.
pub fn copy_subset<T: Real>(x: &Tensor<T>, pair: &SubsetPair, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::InPlace => add(&clear(x, &pair.b)?, pair),
        Mode::OutOfPlace => {
            check_out_of_place(x, pair)?;
            add(&allocate(&flat(x), pair.a.volume()), pair)
        }
    }
}

/// Adjoint of [`copy_subset`]; `y` lives in the codomain.
pub fn copy_subset_adjoint<T: Real>(y: &Tensor<T>, pair: &SubsetPair, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::InPlace => clear(&add(y, &pair.reversed())?, &pair.b),
        Mode::OutOfPlace => deallocate(&add(&flat(y), &pair.reversed())?, &pair.b),
    }
}

/// Move `x_a` into `x_b`, leaving `a` cleared (in place) or released (out of place).
pub fn move_subset<T: Real>(x: &Tensor<T>, pair: &SubsetPair, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::InPlace => clear(&add(&clear(x, &pair.b)?, pair)?, &pair.a),
        Mode::OutOfPlace => {
            check_out_of_place(x, pair)?;
            let grown = add(&allocate(&flat(x), pair.a.volume()), pair)?;
            deallocate(&grown, &pair.a)
        }
    }
}

/// Adjoint of [`move_subset`], which is the move in the reverse direction.
pub fn move_subset_adjoint<T: Real>(y: &Tensor<T>, pair: &SubsetPair, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::InPlace => clear(&add(&clear(y, &pair.a)?, &pair.reversed())?, &pair.b),
        Mode::OutOfPlace => {
            // y is laid out as the forward output: `a` removed, `b` at the end.
            let n = pair.a.volume();
            let (lo, _) = (pair.a.start()[0], pair.a.stop()[0]);
            let restored = allocate_at(&flat(y), lo, n)?;
            let back = add(&restored, &pair.reversed())?;
            deallocate(&back, &pair.b)
        }
    }
}

/// A linear map together with its hand-written adjoint, acting on flat
/// buffers. Multi-input or multi-output operators concatenate their pieces.
pub trait LinearOp<T: Real> {
    fn name(&self) -> String;
    fn domain_len(&self) -> usize;
    fn codomain_len(&self) -> usize;
    fn forward(&self, x: &[T]) -> Result<Vec<T>>;
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>>;
}

macro_rules! forward_linear_op {
    ($($ty:ty),*) => {$(
        impl<T: Real, O: LinearOp<T> + ?Sized> LinearOp<T> for $ty {
            fn name(&self) -> String {
                (**self).name()
            }
            fn domain_len(&self) -> usize {
                (**self).domain_len()
            }
            fn codomain_len(&self) -> usize {
                (**self).codomain_len()
            }
            fn forward(&self, x: &[T]) -> Result<Vec<T>> {
                (**self).forward(x)
            }
            fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
                (**self).adjoint(y)
            }
        }
    )*};
}

forward_linear_op!(Box<O>, &O);

fn tensor_of<T: Real>(shape: &[usize], data: &[T]) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.to_vec())
}

pub struct Identity {
    pub len: usize,
}

impl<T: Real> LinearOp<T> for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn domain_len(&self) -> usize {
        self.len
    }
    fn codomain_len(&self) -> usize {
        self.len
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(x.to_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(y.to_vec())
    }
}

pub struct Allocate {
    pub len: usize,
    pub extent: usize,
}

impl<T: Real> LinearOp<T> for Allocate {
    fn name(&self) -> String {
        "allocate".into()
    }
    fn domain_len(&self) -> usize {
        self.len
    }
    fn codomain_len(&self) -> usize {
        self.len + self.extent
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(allocate(&Tensor::vector(x.to_vec()), self.extent).into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        let b = IndexRange::from_bounds(&[(self.len, self.len + self.extent)])?;
        Ok(deallocate(&Tensor::vector(y.to_vec()), &b)?.into_vec())
    }
}

pub struct Deallocate {
    pub len: usize,
    pub range: IndexRange,
}

impl<T: Real> LinearOp<T> for Deallocate {
    fn name(&self) -> String {
        "deallocate".into()
    }
    fn domain_len(&self) -> usize {
        self.len
    }
    fn codomain_len(&self) -> usize {
        self.len - self.range.volume()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(deallocate(&Tensor::vector(x.to_vec()), &self.range)?.into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(allocate_at(&Tensor::vector(y.to_vec()), self.range.start()[0], self.range.volume())?.into_vec())
    }
}

pub struct Clear {
    pub shape: Vec<usize>,
    pub range: IndexRange,
}

impl<T: Real> LinearOp<T> for Clear {
    fn name(&self) -> String {
        "clear".into()
    }
    fn domain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn codomain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(clear(&tensor_of(&self.shape, x)?, &self.range)?.into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        self.forward(y)
    }
}

pub struct Add {
    pub shape: Vec<usize>,
    pub pair: SubsetPair,
}

impl<T: Real> LinearOp<T> for Add {
    fn name(&self) -> String {
        "add".into()
    }
    fn domain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn codomain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(add(&tensor_of(&self.shape, x)?, &self.pair)?.into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        Ok(add(&tensor_of(&self.shape, y)?, &self.pair.reversed())?.into_vec())
    }
}

/// Copy or move as a [`LinearOp`]; `shape` is the domain shape.
pub struct CopyMove {
    pub shape: Vec<usize>,
    pub pair: SubsetPair,
    pub mode: Mode,
    pub moves: bool,
}

impl CopyMove {
    fn codomain_shape(&self) -> Vec<usize> {
        let n: usize = self.shape.iter().product();
        match (self.mode, self.moves) {
            (Mode::InPlace, _) => self.shape.clone(),
            (Mode::OutOfPlace, true) => vec![n],
            (Mode::OutOfPlace, false) => vec![n + self.pair.a.volume()],
        }
    }
}

impl<T: Real> LinearOp<T> for CopyMove {
    fn name(&self) -> String {
        let kind = if self.moves { "move" } else { "copy" };
        let mode = match self.mode {
            Mode::InPlace => "in_place",
            Mode::OutOfPlace => "out_of_place",
        };
        format!("{kind}_{mode}")
    }
    fn domain_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn codomain_len(&self) -> usize {
        self.codomain_shape().iter().product()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let x = tensor_of(&self.shape, x)?;
        let y = if self.moves {
            move_subset(&x, &self.pair, self.mode)?
        } else {
            copy_subset(&x, &self.pair, self.mode)?
        };
        Ok(y.into_vec())
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        let y = tensor_of(&self.codomain_shape(), y)?;
        let x = if self.moves {
            move_subset_adjoint(&y, &self.pair, self.mode)?
        } else {
            copy_subset_adjoint(&y, &self.pair, self.mode)?
        };
        Ok(x.into_vec())
    }
}

/// `second ∘ first`, with adjoint `first* ∘ second*`.
pub struct Compose<A, B> {
    pub first: A,
    pub second: B,
}

impl<T: Real, A: LinearOp<T>, B: LinearOp<T>> LinearOp<T> for Compose<A, B> {
    fn name(&self) -> String {
        format!("{}∘{}", self.second.name(), self.first.name())
    }
    fn domain_len(&self) -> usize {
        self.first.domain_len()
    }
    fn codomain_len(&self) -> usize {
        self.second.codomain_len()
    }
    fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.second.forward(&self.first.forward(x)?)
    }
    fn adjoint(&self, y: &[T]) -> Result<Vec<T>> {
        self.first.adjoint(&self.second.adjoint(y)?)
    }
}

/// Outcome of [`adjoint_test`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub epsilon: f64,
    pub passed: bool,
}

impl AdjointReport {
    pub const HEADER: &'static str = "op, trials, max_rel_err, epsilon, result";
}

impl std::fmt::Display for AdjointReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}, {}, {:.3e}, {:.1e}, {}",
            self.op,
            self.trials,
            self.max_rel_err,
            self.epsilon,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative adjoint residual
/// `|⟨Fx,y⟩ − ⟨x,F*y⟩| / max(‖Fx‖‖y‖, ‖x‖‖F*y‖)` for one pair of vectors.
/// A zero denominator with a zero numerator counts as exact agreement.
pub fn adjoint_residual<T: Real, O: LinearOp<T> + ?Sized>(op: &O, x: &[T], y: &[T]) -> Result<f64> {
    let fx = op.forward(x)?;
    let fty = op.adjoint(y)?;
    if fx.len() != y.len() {
        return Err(Error::ShapeMismatch { expected: vec![y.len()], got: vec![fx.len()] });
    }
    if fty.len() != x.len() {
        return Err(Error::ShapeMismatch { expected: vec![x.len()], got: vec![fty.len()] });
    }
    let lhs = dot(&fx, y).as_f64();
    let rhs = dot(x, &fty).as_f64();
    let num = (lhs - rhs).abs();
    let den = (norm(&fx) * norm(y)).max(norm(x) * norm(&fty)).as_f64();
    Ok(if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    })
}

/// Runs `trials` random adjoint checks with vectors drawn uniformly from
/// `[-1, 1]` and passes iff the largest relative residual is below `epsilon`.
pub fn adjoint_test<T: Real, O: LinearOp<T> + ?Sized>(
    op: &O,
    trials: usize,
    epsilon: f64,
    seed: u64,
) -> Result<AdjointReport> {
    if trials == 0 {
        return Err(Error::contract("adjoint test needs at least one trial"));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::<T>::random(&[op.domain_len()], &mut rng).into_vec();
        let y = Tensor::<T>::random(&[op.codomain_len()], &mut rng).into_vec();
        max_rel_err = max_rel_err.max(adjoint_residual(op, &x, &y)?);
    }
    Ok(AdjointReport {
        op: op.name(),
        trials,
        max_rel_err,
        epsilon,
        passed: max_rel_err < epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    fn r(lo: usize, hi: usize) -> IndexRange {
        IndexRange::from_bounds(&[(lo, hi)]).unwrap()
    }

    fn pair(a: (usize, usize), b: (usize, usize)) -> SubsetPair {
        SubsetPair::new(r(a.0, a.1), r(b.0, b.1)).unwrap()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&v(&[1., 2.]), 2).data(), &[1., 2., 0., 0.]);
        assert_eq!(deallocate(&v(&[1., 2., 3., 4.]), &r(2, 4)).unwrap().data(), &[1., 2.]);
        assert!(deallocate(&v(&[1., 2.]), &r(1, 3)).is_err());
        assert!(allocate_at(&v(&[1., 2.]), 3, 1).is_err());
    }

    #[test]
    fn clear_examples() {
        let x = v(&[1., 2., 3.]);
        let once = clear(&x, &r(1, 2)).unwrap();
        assert_eq!(once.data(), &[1., 0., 3.]);
        assert_eq!(clear(&once, &r(1, 2)).unwrap(), once);
        assert!(clear(&x, &r(2, 4)).is_err());
    }

    #[test]
    fn add_examples() {
        let p = pair((0, 1), (1, 2));
        assert_eq!(add(&v(&[1., 2.]), &p).unwrap().data(), &[1., 3.]);
        assert_eq!(add(&v(&[1., 2.]), &p.reversed()).unwrap().data(), &[3., 2.]);
        assert!(SubsetPair::new(r(0, 2), r(1, 3)).is_err());
        assert!(SubsetPair::new(r(0, 1), r(1, 3)).is_err());
    }

    #[test]
    fn copy_examples() {
        let p = pair((0, 1), (1, 2));
        assert_eq!(copy_subset(&v(&[5., 9.]), &p, Mode::InPlace).unwrap().data(), &[5., 5.]);
        // K_b S_{b→a} [1,2] = K_b [3,2] = [3,0]
        assert_eq!(copy_subset_adjoint(&v(&[1., 2.]), &p, Mode::InPlace).unwrap().data(), &[3., 0.]);

        let q = SubsetPair::appended(r(0, 1), 2).unwrap();
        assert_eq!(copy_subset(&v(&[5., 9.]), &q, Mode::OutOfPlace).unwrap().data(), &[5., 9., 5.]);
        assert_eq!(copy_subset_adjoint(&v(&[1., 2., 4.]), &q, Mode::OutOfPlace).unwrap().data(), &[5., 2.]);
        assert!(copy_subset(&v(&[5., 9.]), &p, Mode::OutOfPlace).is_err());
    }

    #[test]
    fn move_examples() {
        let p = pair((0, 1), (1, 2));
        let x = v(&[5., 9.]);
        let moved = move_subset(&x, &p, Mode::InPlace).unwrap();
        assert_eq!(moved.data(), &[0., 5.]);

        // With x_b = 0 initially, moving back restores x.
        let x0 = v(&[5., 0.]);
        let back = move_subset_adjoint(&move_subset(&x0, &p, Mode::InPlace).unwrap(), &p, Mode::InPlace).unwrap();
        assert_eq!(back, x0);
        // The adjoint is the reverse move.
        assert_eq!(
            move_subset_adjoint(&v(&[3., 4.]), &p, Mode::InPlace).unwrap(),
            move_subset(&v(&[3., 4.]), &p.reversed(), Mode::InPlace).unwrap()
        );

        let q = SubsetPair::appended(r(1, 2), 3).unwrap();
        let out = move_subset(&v(&[1., 2., 3.]), &q, Mode::OutOfPlace).unwrap();
        assert_eq!(out.data(), &[1., 3., 2.]);
        assert_eq!(move_subset_adjoint(&out, &q, Mode::OutOfPlace).unwrap().data(), &[1., 2., 3.]);
    }

    fn all_memory_ops() -> Vec<Box<dyn LinearOp<f64>>> {
        let shape = vec![3, 4];
        let a = IndexRange::from_bounds(&[(0, 1), (0, 4)]).unwrap();
        let b = IndexRange::from_bounds(&[(2, 3), (0, 4)]).unwrap();
        let p2 = SubsetPair::new(a.clone(), b).unwrap();
        let flat = SubsetPair::appended(r(2, 7), 12).unwrap();
        let mut ops: Vec<Box<dyn LinearOp<f64>>> = vec![
            Box::new(Identity { len: 9 }),
            Box::new(Allocate { len: 5, extent: 3 }),
            Box::new(Deallocate { len: 8, range: r(2, 5) }),
            Box::new(Clear { shape: shape.clone(), range: a }),
            Box::new(Add { shape: shape.clone(), pair: p2.clone() }),
        ];
        for moves in [false, true] {
            ops.push(Box::new(CopyMove { shape: shape.clone(), pair: p2.clone(), mode: Mode::InPlace, moves }));
            ops.push(Box::new(CopyMove { shape: vec![12], pair: flat.clone(), mode: Mode::OutOfPlace, moves }));
        }
        ops
    }

    #[test]
    fn every_memory_op_passes_adjoint_test() {
        for op in all_memory_ops() {
            let rep = adjoint_test(&op, 100, 1e-12, 42).unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn identity_has_zero_error() {
        let rep = adjoint_test::<f64, _>(&Identity { len: 10 }, 5, 1e-12, 1).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn integer_data_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for op in all_memory_ops() {
            for _ in 0..20 {
                let x: Vec<f64> = (0..op.domain_len()).map(|_| rng.gen_range(-50..50) as f64).collect();
                let y: Vec<f64> = (0..op.codomain_len()).map(|_| rng.gen_range(-50..50) as f64).collect();
                let lhs = dot(&op.forward(&x).unwrap(), &y);
                let rhs = dot(&x, &op.adjoint(&y).unwrap());
                assert_eq!(lhs, rhs, "{}", op.name());
            }
        }
    }

    #[test]
    fn harness_rejects_bad_arguments() {
        let id = Identity { len: 3 };
        assert!(adjoint_test::<f64, _>(&id, 0, 1e-12, 0).is_err());
        assert!(adjoint_test::<f64, _>(&id, 1, 0.0, 0).is_err());
        struct Wrong;
        impl LinearOp<f64> for Wrong {
            fn name(&self) -> String {
                "wrong".into()
            }
            fn domain_len(&self) -> usize {
                2
            }
            fn codomain_len(&self) -> usize {
                3
            }
            fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(x.to_vec())
            }
            fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
                Ok(y.to_vec())
            }
        }
        assert!(matches!(adjoint_test(&Wrong, 1, 1e-12, 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn report_format() {
        let rep = AdjointReport { op: "clear".into(), trials: 100, max_rel_err: 0.0, epsilon: 1e-12, passed: true };
        assert_eq!(rep.to_string(), "clear, 100, 0.000e0, 1.0e-12, PASS");
    }

    proptest! {
        #[test]
        fn composition_adjoint_is_reversed_composition(i in 0usize..9, j in 0usize..9, seed in any::<u64>()) {
            let ops = all_memory_ops();
            // Compose only when lengths line up; pad with allocation otherwise.
            let (f, g) = (&ops[i], &ops[j]);
            let n = f.codomain_len();
            let m = g.domain_len();
            let bridge: Box<dyn LinearOp<f64>> = if n <= m {
                Box::new(Allocate { len: n, extent: m - n })
            } else {
                Box::new(Deallocate { len: n, range: r(m, n) })
            };
            let comp = Compose { first: Compose { first: f, second: bridge }, second: g };
            let rep = adjoint_test(&comp, 10, 1e-12, seed).unwrap();
            prop_assert!(rep.passed, "{}", rep);
        }
    }
}
