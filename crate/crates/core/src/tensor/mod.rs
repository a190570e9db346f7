//! Minimal reverse-mode autodiff over `ndarray` dynamic arrays.
//!
//! A [`Tape`] records a topologically ordered list of nodes; each op pushes
//! its output value plus a VJP closure capturing parent indices (never
//! references, so closures stay `'static`). `backward` walks the list in
//! reverse, accumulating gradients only into nodes that need them.
//!
//! Tapes are single-threaded by design; batch parallelism builds one tape
//! per sample and merges gradient maps afterwards.

pub mod ops;

use crate::num::Real;
use ndarray::ArrayD;
use std::cell::RefCell;

pub(crate) type BackFn<F> =
    Box<dyn Fn(&ArrayD<F>, &[ArrayD<F>], &mut dyn FnMut(usize, ArrayD<F>))>;

struct TapeInner<F: Real> {
    values: Vec<ArrayD<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs: Vec<bool>,
}

pub struct Tape<F: Real> {
    inner: RefCell<TapeInner<F>>,
    grad_enabled: bool,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                backs: Vec::new(),
                needs: Vec::new(),
            }),
            grad_enabled: true,
        }
    }

    /// Tape that records values but no VJPs; used for inference.
    pub fn no_grad() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                backs: Vec::new(),
                needs: Vec::new(),
            }),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Index the next pushed node will get. Ops whose VJP needs their own
    /// output capture this before pushing.
    pub(crate) fn next_idx(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        needs: bool,
        back: Option<BackFn<F>>,
    ) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        let needs = needs && self.grad_enabled;
        inner.values.push(value);
        inner.backs.push(if needs { back } else { None });
        inner.needs.push(needs);
        Var { tape: self, idx }
    }

    /// Constant input: no gradient ever flows into it.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, false, None)
    }

    /// Differentiable input (parameter or probe point).
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, true, None)
    }

    pub(crate) fn needs(&self, idx: usize) -> bool {
        self.inner.borrow().needs[idx]
    }

    pub(crate) fn value_clone(&self, idx: usize) -> ArrayD<F> {
        self.inner.borrow().values[idx].clone()
    }

    pub(crate) fn with_value<R>(&self, idx: usize, f: impl FnOnce(&ArrayD<F>) -> R) -> R {
        f(&self.inner.borrow().values[idx])
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; interior
    /// gradients are freed as soon as they have been propagated.
    pub fn backward(&self, root: Var<'_, F>) -> Grads<F> {
        let inner = self.inner.borrow();
        let n = inner.values.len();
        assert_eq!(
            inner.values[root.idx].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..n).map(|_| None).collect();
        grads[root.idx] = Some(ArrayD::ones(inner.values[root.idx].raw_dim()));
        for i in (0..=root.idx).rev() {
            if inner.backs[i].is_none() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let back = inner.backs[i].as_ref().unwrap();
            back(&g, &inner.values, &mut |p, contrib| {
                if !inner.needs[p] {
                    return;
                }
                match &mut grads[p] {
                    Some(acc) => acc.zip_mut_with(&contrib, |a, b| *a += *b),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Grads { grads }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node. Copyable; all ops live in [`ops`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) idx: usize,
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> ArrayD<F> {
        self.tape.value_clone(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.idx, |v| v.shape().to_vec())
    }

    /// Value of a 0-dim (scalar) node.
    pub fn scalar(&self) -> F {
        self.tape
            .with_value(self.idx, |v| *v.first().expect("scalar node"))
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

pub(crate) fn same_tape<F: Real>(a: &Var<'_, F>, b: &Var<'_, F>) {
    debug_assert!(
        std::ptr::eq(a.tape, b.tape),
        "vars belong to different tapes"
    );
}
