use std::cell::{Ref, RefCell};

use crate::tensor::{axis_split, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for one recorded op.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this op's output.
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Ops take `&self` so expressions can nest; values are owned by the tape
/// and read back through [`Tape::value`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Record an op with a caller-supplied backward rule.
    ///
    /// The closure receives the output gradient and must return one entry per
    /// input, each either `None` or a tensor of that input's shape.
    pub fn custom(&self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value,
            requires_grad,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = {
            let v = self.value(loss);
            assert_eq!(v.numel(), 1, "backward needs a scalar, got {:?}", v.shape());
            Tensor::full(v.shape(), 1.0)
        };
        self.backward_from(loss, seed)
    }

    /// Reverse sweep with an explicit output gradient.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.0].value.shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[i].as_ref() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{name}: shape mismatch");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.custom(
            &[a, b],
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// Sum of same-shaped values.
    pub fn add_n(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.add_assign(&self.value(p));
        }
        let n = parts.len();
        self.custom(
            parts,
            value,
            Box::new(move |ctx| (0..n).map(|_| Some(ctx.grad.clone())).collect()),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// Elementwise map with derivative `deriv(x, y)` where `y = f(x)`.
    pub fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(a).map(f);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let data = (0..g.len()).map(|i| g[i] * deriv(x[i], y[i])).collect();
                vec![Some(Tensor::new(ctx.grad.shape(), data))]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// `ln(max(sigmoid(z), floor))`.
    pub fn log_sigmoid_clamped(&self, a: Var, floor: f64) -> Var {
        self.unary(
            a,
            move |z| sigmoid(z).max(floor).ln(),
            move |z, _| {
                let s = sigmoid(z);
                if s > floor {
                    1.0 - s
                } else {
                    0.0
                }
            },
        )
    }

    /// `ln(max(1 - sigmoid(z), floor))`.
    pub fn log_one_minus_sigmoid_clamped(&self, a: Var, floor: f64) -> Var {
        self.unary(
            a,
            move |z| sigmoid(-z).max(floor).ln(),
            move |z, _| {
                let s = sigmoid(-z);
                if s > floor {
                    -(1.0 - s)
                } else {
                    0.0
                }
            },
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.custom(
            &[a],
            value,
            Box::new(move |ctx| {
                vec![Some(Tensor::full(
                    ctx.inputs[0].shape(),
                    ctx.grad.item() / n,
                ))]
            }),
        )
    }

    /// Weighted sum of scalars: `Σ wᵢ·aᵢ`.
    pub fn weighted_sum(&self, parts: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in parts {
            total += w * self.item(v);
        }
        let weights: Vec<f64> = parts.iter().map(|&(_, w)| w).collect();
        let vars: Vec<Var> = parts.iter().map(|&(v, _)| v).collect();
        self.custom(
            &vars,
            Tensor::scalar(total),
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                weights
                    .iter()
                    .zip(&ctx.inputs)
                    .map(|(&w, x)| Some(Tensor::full(x.shape(), g * w)))
                    .collect()
            }),
        )
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.custom(
            &[a],
            value,
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        for s in &shapes {
            assert_eq!(s.len(), out_shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: {s:?} vs {out_shape:?} on axis {axis}"
                );
            }
        }
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        for (&p, &len) in parts.iter().zip(&lens) {
            let v = self.value(p);
            let src = v.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        self.custom(
            parts,
            Tensor::new(&out_shape, data),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(lens.len());
                for (i, &len) in lens.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        out.push(Some(Tensor::new(ctx.inputs[i].shape(), d)));
                    } else {
                        out.push(None);
                    }
                    offset += len;
                }
                out
            }),
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape = self.shape(a);
        let (outer, total, inner) = axis_split(&in_shape, axis);
        assert!(start + len <= total, "slice {start}+{len} beyond {total}");
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let v = self.value(a);
            let src = v.data();
            for o in 0..outer {
                let s = (o * total + start) * inner;
                data.extend_from_slice(&src[s..s + len * inner]);
            }
        }
        self.custom(
            &[a],
            Tensor::new(&out_shape, data),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; outer * total * inner];
                for o in 0..outer {
                    let s = (o * total + start) * inner;
                    d[s..s + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    /// Rows of a 2-D table picked by index (embedding lookup).
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let shape = self.shape(table);
        assert_eq!(shape.len(), 2, "gather_rows needs a 2-D table");
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(idx.len() * cols);
        {
            let v = self.value(table);
            for &i in idx {
                assert!(i < rows, "gather index {i} out of {rows} rows");
                data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
            }
        }
        let idx = idx.to_vec();
        self.custom(
            &[table],
            Tensor::new(&[idx.len(), cols], data),
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[rows, cols]);
                let src = ctx.grad.data();
                let dst = g.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dst[i * cols + c] += src[k * cols + c];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// `out[idx[k]] += src[k]` into `rows` zero-initialised rows.
    pub fn index_add_rows(&self, src: Var, idx: &[usize], rows: usize) -> Var {
        let shape = self.shape(src);
        assert_eq!(shape.len(), 2, "index_add_rows needs 2-D input");
        assert_eq!(shape[0], idx.len(), "index_add_rows: one index per row");
        let cols = shape[1];
        let mut out = Tensor::zeros(&[rows, cols]);
        {
            let v = self.value(src);
            let s = v.data();
            let d = out.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                assert!(i < rows, "index {i} out of {rows} rows");
                for c in 0..cols {
                    d[i * cols + c] += s[k * cols + c];
                }
            }
        }
        let idx = idx.to_vec();
        self.custom(
            &[src],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in &idx {
                    data.extend_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                vec![Some(Tensor::new(&[idx.len(), cols], data))]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
