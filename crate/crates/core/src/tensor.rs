//! Dense numeric arrays plus a reverse-mode tape.
//!
//! Every forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar loss walks the tape in reverse and
//! accumulates gradients for every recorded parameter leaf. The tape is
//! rebuilt per step (define-by-run), which keeps variable-length
//! recurrences and masking straightforward.
//!
//! All shape violations are programmer errors and panic with a message
//! naming the operation; data-dependent failures (label out of range,
//! all-masked softmax rows) are surfaced as errors by the callers that
//! own the contract.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{ArrayD, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Scalar element type: f32 for training, f64 for finite-difference checks.
pub trait Scalar:
    Float + ScalarOperand + LinalgScalar + Debug + Display + Sum + Send + Sync + 'static
{
    /// Checkpoint dtype tag: 0 = f32, 1 = f64.
    const DTYPE: u8;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
}
impl Scalar for f64 {
    const DTYPE: u8 = 1;
}

/// Shorthand for lossy construction of a scalar from f64.
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from(x).expect("scalar conversion")
}

/// Additive logit mask magnitude. exp(-BIG) underflows to exactly zero in
/// both f32 and f64, so masked softmax weights are exact zeros.
pub const MASK_BIG: f64 = 1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type GradFn<F> = Box<dyn Fn(&ArrayD<F>, &[&ArrayD<F>], &ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    // None for leaves and constants.
    grad_fn: Option<GradFn<F>>,
    requires_grad: bool,
    param_id: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording tape for one forward/backward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<usize, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<Var>, grad_fn: GradFn<F>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
            param_id: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data, masks, detached values).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
            param_id: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node
    /// so gradient fan-in accumulates naturally.
    pub fn param(&mut self, id: usize, value: &ArrayD<F>) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
            param_id: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Identity in value, but gradients do not flow into `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    // ---- elementwise / broadcast ----------------------------------------

    /// Broadcasting addition (NumPy rules on trailing axes).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, "add", |x, y| x + y, |_x, _y| (F::one(), F::one()))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let out_shape = broadcast_shape(av.shape(), bv.shape(), "mul");
        let out = &av.broadcast(out_shape.clone()).expect("mul: broadcast a").to_owned()
            * &bv.broadcast(out_shape.clone()).expect("mul: broadcast b").to_owned();
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, inputs, _| {
                let (av, bv) = (inputs[0], inputs[1]);
                let gshape = g.shape().to_vec();
                let ga = g * &bv.broadcast(gshape.clone()).unwrap().to_owned();
                let gb = g * &av.broadcast(gshape).unwrap().to_owned();
                vec![reduce_to_shape(&ga, &sa), reduce_to_shape(&gb, &sb)]
            }),
        )
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F>,
        _dfs: fn(&ArrayD<F>, &ArrayD<F>) -> (F, F),
    ) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape(), name);
        let out = f(
            &av.broadcast(out_shape.clone()).unwrap_or_else(|| panic!("{name}: broadcast a")).to_owned(),
            &bv.broadcast(out_shape.clone()).unwrap_or_else(|| panic!("{name}: broadcast b")).to_owned(),
        );
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, _inputs, _| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(g, &sb)]
            }),
        )
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = &self.nodes[a.0].value * c;
        self.push(out, vec![a], Box::new(move |g, _, _| vec![g * c]))
    }

    /// Elementwise product with a fixed (non-differentiable) array.
    pub fn mul_const(&mut self, a: Var, c: &ArrayD<F>) -> Var {
        let av = &self.nodes[a.0].value;
        let out_shape = broadcast_shape(av.shape(), c.shape(), "mul_const");
        let out = &av.broadcast(out_shape.clone()).expect("mul_const: a").to_owned()
            * &c.broadcast(out_shape).expect("mul_const: c").to_owned();
        let sa = av.shape().to_vec();
        let c = c.clone();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let gc = g * &c.broadcast(g.shape().to_vec()).unwrap().to_owned();
                vec![reduce_to_shape(&gc, &sa)]
            }),
        )
    }

    /// Add a fixed (non-differentiable) array, broadcasting.
    pub fn add_const(&mut self, a: Var, c: &ArrayD<F>) -> Var {
        let av = &self.nodes[a.0].value;
        let out_shape = broadcast_shape(av.shape(), c.shape(), "add_const");
        let out = &av.broadcast(out_shape.clone()).expect("add_const: a").to_owned()
            + &c.broadcast(out_shape).expect("add_const: c").to_owned();
        let sa = av.shape().to_vec();
        self.push(out, vec![a], Box::new(move |g, _, _| vec![reduce_to_shape(g, &sa)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| F::one() / (F::one() + (-x).exp()));
        self.push(
            out,
            vec![a],
            Box::new(|g, _, y| vec![g * &y.mapv(|v| v * (F::one() - v))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(
            out,
            vec![a],
            Box::new(|g, _, y| vec![g * &y.mapv(|v| F::one() - v * v)]),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a [m,k] @ w [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let av = as2(&self.nodes[a.0].value, "matmul lhs");
        let wv = as2(&self.nodes[w.0].value, "matmul rhs");
        assert_eq!(av.ncols(), wv.nrows(), "matmul: inner dims {} vs {}", av.ncols(), wv.nrows());
        let out = av.dot(&wv).into_dyn();
        self.push(
            out,
            vec![a, w],
            Box::new(|g, inputs, _| {
                let g2 = as2(g, "matmul grad");
                let av = as2(inputs[0], "matmul lhs");
                let wv = as2(inputs[1], "matmul rhs");
                vec![g2.dot(&wv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Apply a `[k,n]` weight to the trailing axis of `a [..,k]`.
    pub fn linear(&mut self, a: Var, w: Var) -> Var {
        let ashape = self.shape(a).to_vec();
        let k = *ashape.last().expect("linear: scalar input");
        let wv = as2(&self.nodes[w.0].value, "linear weight");
        assert_eq!(k, wv.nrows(), "linear: input width {} vs weight rows {}", k, wv.nrows());
        let n = wv.ncols();
        let rows: usize = ashape[..ashape.len() - 1].iter().product();
        let a2 = self.nodes[a.0]
            .value
            .to_shape((rows, k))
            .expect("linear: reshape")
            .to_owned();
        let out2 = a2.dot(&wv);
        let mut out_shape = ashape.clone();
        *out_shape.last_mut().unwrap() = n;
        let out = out2.into_shape_with_order(IxDyn(&out_shape)).expect("linear: out reshape");
        self.push(
            out,
            vec![a, w],
            Box::new(move |g, inputs, _| {
                let g2 = g.to_shape((rows, n)).unwrap().to_owned();
                let a2 = inputs[0].to_shape((rows, k)).unwrap().to_owned();
                let wv = as2(inputs[1], "linear weight");
                let ga = g2.dot(&wv.t()).into_shape_with_order(IxDyn(&ashape)).unwrap();
                let gw = a2.t().dot(&g2).into_dyn();
                vec![ga, gw]
            }),
        )
    }

    /// Batched `a [B,m,k] @ b [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!(sa.len(), 3, "bmm: lhs must be 3-d");
        assert_eq!(sb.len(), 3, "bmm: rhs must be 3-d");
        assert_eq!(sa[0], sb[0], "bmm: batch {} vs {}", sa[0], sb[0]);
        assert_eq!(sa[2], sb[1], "bmm: inner dims {} vs {}", sa[2], sb[1]);
        let out = bmm_raw(av, bv, false);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, inputs, _| {
                // ga = g @ b^T, gb = a^T @ g
                let ga = bmm_raw(g, inputs[1], true);
                let gb = bmm_raw(&transpose12(inputs[0]), g, false);
                vec![ga, gb]
            }),
        )
    }

    /// Batched `a [B,m,k] @ b [B,n,k]^T -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!(sa[0], sb[0], "bmm_nt: batch {} vs {}", sa[0], sb[0]);
        assert_eq!(sa[2], sb[2], "bmm_nt: inner dims {} vs {}", sa[2], sb[2]);
        let out = bmm_raw(av, bv, true);
        self.push(
            out,
            vec![a, b],
            Box::new(|g, inputs, _| {
                // out = a @ b^T: ga = g @ b, gb = g^T @ a
                let ga = bmm_raw(g, inputs[1], false);
                let gb = bmm_raw(&transpose12(g), inputs[0], false);
                vec![ga, gb]
            }),
        )
    }

    // ---- shape plumbing ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        let out = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                vec![g.clone().into_shape_with_order(IxDyn(&old)).unwrap()]
            }),
        )
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: empty input");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let axis = views[0].ndim() - 1;
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat_last: shape mismatch");
        let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let axis = Axis(g.ndim() - 1);
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let sl = g.slice_axis(axis, ndarray::Slice::from(offset..offset + w));
                        offset += w;
                        sl.to_owned()
                    })
                    .collect()
            }),
        )
    }

    /// Slice `[start, start+len)` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let axis = Axis(v.ndim() - 1);
        let out = v.slice_axis(axis, ndarray::Slice::from(start..start + len)).to_owned();
        let full = v.shape().to_vec();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let mut ga = ArrayD::zeros(IxDyn(&full));
                let axis = Axis(full.len() - 1);
                ga.slice_axis_mut(axis, ndarray::Slice::from(start..start + len)).assign(g);
                vec![ga]
            }),
        )
    }

    /// Extract time step `t` of `a [B,T,D] -> [B,D]`.
    pub fn slice_time(&mut self, a: Var, t: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.ndim(), 3, "slice_time: input must be [B,T,D]");
        let out = v.index_axis(Axis(1), t).to_owned().into_dyn();
        let full = v.shape().to_vec();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let mut ga = ArrayD::zeros(IxDyn(&full));
                ga.index_axis_mut(Axis(1), t).assign(g);
                vec![ga]
            }),
        )
    }

    /// Stack `T` step tensors `[B,D]` into `[B,T,D]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        assert!(!steps.is_empty(), "stack_time: empty input");
        let views: Vec<_> = steps.iter().map(|s| self.nodes[s.0].value.view()).collect();
        let out = ndarray::stack(Axis(1), &views).expect("stack_time: shape mismatch");
        self.push(
            out.into_dyn(),
            steps.to_vec(),
            Box::new(|g, _, _| {
                (0..g.shape()[1])
                    .map(|t| g.index_axis(Axis(1), t).to_owned().into_dyn())
                    .collect()
            }),
        )
    }

    // ---- reductions and nonlinear blocks -----------------------------------

    /// Max over `axis`, removing it. Gradient routes to the argmax element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let n = v.shape()[axis];
        assert!(n > 0, "max_axis: empty axis");
        let out = v.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(F::neg_infinity(), F::max)
        });
        let argmax = v.map_axis(Axis(axis), |lane| {
            let mut best = 0usize;
            let mut bv = F::neg_infinity();
            for (i, &x) in lane.iter().enumerate() {
                if x > bv {
                    bv = x;
                    best = i;
                }
            }
            best
        });
        let full = v.shape().to_vec();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let mut ga = ArrayD::zeros(IxDyn(&full));
                for (idx, &am) in argmax.indexed_iter() {
                    let mut full_idx: Vec<usize> = idx.slice().to_vec();
                    full_idx.insert(axis, am);
                    ga[IxDyn(&full_idx)] = g[idx.clone()];
                }
                vec![ga]
            }),
        )
    }

    /// Softmax over the trailing axis with a 0/1 mask broadcastable to `a`.
    /// Masked positions receive -BIG logits, which underflow to exact zero
    /// probabilities. Panics if any row is fully masked.
    pub fn masked_softmax(&mut self, a: Var, mask: &ArrayD<F>) -> Var {
        let v = &self.nodes[a.0].value;
        let big = fl::<F>(MASK_BIG);
        let m = mask
            .broadcast(v.shape().to_vec())
            .expect("masked_softmax: mask shape")
            .to_owned();
        let mut out = v.clone();
        let last = v.ndim() - 1;
        for (mut row, mrow) in out.rows_mut().into_iter().zip(m.rows()) {
            assert!(
                mrow.iter().any(|&x| x > F::zero()),
                "masked_softmax: fully masked row"
            );
            let mut mx = F::neg_infinity();
            for (x, &mm) in row.iter_mut().zip(mrow.iter()) {
                if mm <= F::zero() {
                    *x = *x - big;
                }
                if *x > mx {
                    mx = *x;
                }
            }
            let mut z = F::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z = z + *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let _ = last;
        self.push(
            out,
            vec![a],
            Box::new(|g, _, y| {
                // dx = y * (g - sum(g*y, last axis))
                let gy = g * y;
                let s = gy.sum_axis(Axis(g.ndim() - 1)).insert_axis(Axis(g.ndim() - 1));
                vec![y * &(g - &s.broadcast(g.shape().to_vec()).unwrap().to_owned())]
            }),
        )
    }

    /// Plain softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ones = ArrayD::ones(IxDyn(&[1]));
        self.masked_softmax(a, &ones)
    }

    /// Embedding lookup: gather rows of `table [V,d]` by `ids` (any shape),
    /// producing `[ids.shape.., d]`.
    pub fn lookup(&mut self, table: Var, ids: &ArrayD<usize>) -> Var {
        let tv = as2(&self.nodes[table.0].value, "lookup table");
        let (v, d) = (tv.nrows(), tv.ncols());
        let mut out_shape = ids.shape().to_vec();
        out_shape.push(d);
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let mut out2 = out.to_shape((ids.len(), d)).unwrap().to_owned();
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < v, "lookup: id {id} out of range {v}");
                out2.row_mut(r).assign(&tv.row(id));
            }
            out = out2.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        }
        let ids = ids.clone();
        self.push(
            out,
            vec![table],
            Box::new(move |g, inputs, _| {
                let tshape = inputs[0].shape().to_vec();
                let mut gt = ndarray::Array2::<F>::zeros((tshape[0], tshape[1]));
                let g2 = g.to_shape((ids.len(), tshape[1])).unwrap();
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g2.row(r);
                }
                vec![gt.into_dyn()]
            }),
        )
    }

    /// Sliding windows over the char axis: `x [B,T,C,d] -> [B,T,C-k+1,k*d]`.
    pub fn unfold_chars(&mut self, x: Var, k: usize) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.shape().to_vec();
        assert_eq!(s.len(), 4, "unfold_chars: input must be [B,T,C,d]");
        let (b, t, c, d) = (s[0], s[1], s[2], s[3]);
        assert!(c >= k, "unfold_chars: {c} chars < kernel width {k}");
        let w = c - k + 1;
        let mut out = ArrayD::zeros(IxDyn(&[b, t, w, k * d]));
        {
            let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for bi in 0..b {
                for ti in 0..t {
                    for wi in 0..w {
                        for ki in 0..k {
                            for di in 0..d {
                                o4[[bi, ti, wi, ki * d + di]] = v4[[bi, ti, wi + ki, di]];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[b, t, c, d]));
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut gx4 = gx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for bi in 0..b {
                    for ti in 0..t {
                        for wi in 0..w {
                            for ki in 0..k {
                                for di in 0..d {
                                    gx4[[bi, ti, wi + ki, di]] =
                                        gx4[[bi, ti, wi + ki, di]] + g4[[bi, ti, wi, ki * d + di]];
                                }
                            }
                        }
                    }
                }
                drop(gx4);
                vec![gx]
            }),
        )
    }

    /// Masked mean negative log-likelihood over rows of `logits [N,C]`.
    /// `weights` are 0/1 row weights; the result is a 0-d scalar:
    /// `sum_i w_i * -log softmax(logits_i)[targets_i] / sum_i w_i`.
    pub fn nll_masked(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let lv = as2(&self.nodes[logits.0].value, "nll logits");
        let (n, c) = (lv.nrows(), lv.ncols());
        assert_eq!(targets.len(), n, "nll: {} targets for {} rows", targets.len(), n);
        assert_eq!(weights.len(), n, "nll: {} weights for {} rows", weights.len(), n);
        let wsum: F = weights.iter().cloned().sum();
        assert!(wsum > F::zero(), "nll: all rows masked");
        // row-wise stable log-softmax
        let mut probs = ndarray::Array2::<F>::zeros((n, c));
        let mut loss = F::zero();
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for &x in row.iter() {
                z = z + (x - mx).exp();
            }
            let logz = z.ln() + mx;
            for (j, &x) in row.iter().enumerate() {
                probs[[i, j]] = (x - logz).exp();
            }
            assert!(targets[i] < c, "nll: target {} out of range {}", targets[i], c);
            loss = loss - weights[i] * (lv[[i, targets[i]]] - logz);
        }
        loss = loss / wsum;
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            out,
            vec![logits],
            Box::new(move |g, _, _| {
                let gs = g[IxDyn(&[])];
                let mut gl = probs.clone();
                for i in 0..n {
                    gl[[i, targets[i]]] = gl[[i, targets[i]]] - F::one();
                    let w = weights[i] / wsum * gs;
                    for j in 0..c {
                        gl[[i, j]] = gl[[i, j]] * w;
                    }
                }
                vec![gl.into_dyn()]
            }),
        )
    }

    /// Sum of all elements, as a 0-d scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.iter().cloned().sum();
        let shape = self.shape(a).to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let gs = g[IxDyn(&[])];
                vec![ArrayD::from_elem(IxDyn(&shape), gs)]
            }),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root. Returns per-var gradients.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward: root must be a scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let Some(grad_fn) = &node.grad_fn else { continue };
            let g = grads[i].take().unwrap();
            let inputs: Vec<&ArrayD<F>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = grad_fn(&g, &inputs, &node.value);
            assert_eq!(parent_grads.len(), node.parents.len(), "grad_fn arity mismatch");
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p.0].value.shape(),
                    "gradient shape mismatch at node {}",
                    p.0
                );
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of all parameter leaves touched by this tape.
    pub fn param_grads(&self, grads: &Gradients<F>) -> HashMap<usize, ArrayD<F>> {
        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param_id {
                if let Some(g) = grads.grads[i].as_ref() {
                    out.insert(pid, g.clone());
                }
            }
        }
        out
    }
}

// ---- helpers ---------------------------------------------------------------

fn as2<F: Scalar>(a: &ArrayD<F>, what: &str) -> ndarray::Array2<F> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap_or_else(|_| panic!("{what}: expected 2-d, got {:?}", a.shape()))
        .to_owned()
}

fn transpose12<F: Scalar>(a: &ArrayD<F>) -> ArrayD<F> {
    let mut v = a.view();
    v.swap_axes(1, 2);
    v.to_owned()
}

/// `a [B,m,k] @ b [B,k,n]` (or `b [B,n,k]` transposed when `bt`).
fn bmm_raw<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, bt: bool) -> ArrayD<F> {
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs 3-d");
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs 3-d");
    let bsz = a3.shape()[0];
    let m = a3.shape()[1];
    let n = if bt { b3.shape()[1] } else { b3.shape()[2] };
    let mut out = ndarray::Array3::<F>::zeros((bsz, m, n));
    for i in 0..bsz {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let r = if bt { ai.dot(&bi.t()) } else { ai.dot(&bi) };
        out.index_axis_mut(Axis(0), i).assign(&r);
    }
    out.into_dyn()
}

fn broadcast_shape(a: &[usize], b: &[usize], name: &str) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("{name}: cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

/// Sum `grad` down to `target` shape (inverse of broadcasting).
fn reduce_to_shape<F: Scalar>(grad: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let mut g = grad.clone();
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if g.shape()[i] != t {
            debug_assert_eq!(t, 1, "reduce_to_shape: incompatible target");
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}
