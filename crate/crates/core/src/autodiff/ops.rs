//! Elementwise, reduction and shape primitives.
//!
//! Reductions accumulate sequentially in ascending index order along the
//! reduced axis, so results are bit-reproducible for a given shape.

use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, sum_to_shape, Element, Tensor};

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply<F: Element>(self, a: F, b: F) -> F {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn same_shape_grads<F: Element>(
    op: BinOp,
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &Tensor<F>,
    needs: &[bool],
) -> Vec<Option<Tensor<F>>> {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let shape = g.shape().to_vec();
    let build = |need: bool, f: &dyn Fn(usize) -> F| {
        need.then(|| Tensor::from_parts(shape.clone(), (0..gd.len()).map(f).collect()))
    };
    match op {
        BinOp::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        BinOp::Sub => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        BinOp::Mul => vec![
            build(needs[0], &|i| gd[i] * bd[i]),
            build(needs[1], &|i| gd[i] * ad[i]),
        ],
        BinOp::Div => vec![
            build(needs[0], &|i| gd[i] / bd[i]),
            build(needs[1], &|i| -gd[i] * ad[i] / (bd[i] * bd[i])),
        ],
    }
}

impl<'g, F: Element> Var<'g, F> {
    fn check_same_graph(&self, other: &Var<'_, F>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn check_axis(&self, axis: usize, op: &str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    fn binary(self, other: Var<'g, F>, op: BinOp) -> Result<Var<'g, F>> {
        self.check_same_graph(&other);
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let value = if a.shape() == b.shape() {
            a.zip_map(&b, |x, y| op.apply(x, y))?
        } else {
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let mut out = vec![F::zero(); out_shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = op.apply(ad[ia], bd[ib]);
            });
            Tensor::from_parts(out_shape.clone(), out)
        };
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
            if a.shape() == b.shape() {
                return same_shape_grads(op, a, b, g, args.needs);
            }
            let out_shape = g.shape();
            let sa = broadcast_strides(a.shape(), out_shape);
            let sb = broadcast_strides(b.shape(), out_shape);
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let n = g.numel();
            let mut ga = args.needs[0].then(|| vec![F::zero(); n]);
            let mut gb = args.needs[1].then(|| vec![F::zero(); n]);
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                let (x, y, go) = (ad[ia], bd[ib], gd[o]);
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * y, go * x),
                    BinOp::Div => (go / y, -go * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[o] = da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] = db;
                }
            });
            let reduce = |full: Option<Vec<F>>, target: &[usize]| {
                full.map(|v| sum_to_shape(&Tensor::from_parts(out_shape.to_vec(), v), target))
            };
            vec![reduce(ga, a.shape()), reduce(gb, b.shape())]
        });
        self.graph.record(op.name(), value, &[self.id, other.id], backward)
    }

    /// Broadcasting elementwise sum.
    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, BinOp::Div)
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Result<Var<'g, F>> {
        let value = self.value().map(f);
        // df(input, output) is the local derivative.
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let x = args.inputs[0].data();
            let y = args.output.data();
            let g = args.grad.data();
            let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
            vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
        });
        self.graph.record(op, value, &[self.id], backward)
    }

    pub fn exp(self) -> Result<Var<'g, F>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    /// Natural log; non-positive inputs yield a non-finite error.
    pub fn log(self) -> Result<Var<'g, F>> {
        self.unary("log", |x| x.ln(), |x, _| x.recip())
    }

    pub fn relu(self) -> Result<Var<'g, F>> {
        self.unary(
            "relu",
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(self) -> Result<Var<'g, F>> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn neg(self) -> Result<Var<'g, F>> {
        self.unary("neg", |x| -x, |_, _| -F::one())
    }

    pub fn scale(self, c: f64) -> Result<Var<'g, F>> {
        let c = F::from_f64_lossy(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g, F>> {
        let c = F::from_f64_lossy(c);
        self.unary("add_scalar", move |x| x + c, |_, _| F::one())
    }

    /// Sum along `axis`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, F>> {
        let shape = self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[base + i];
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut dx = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        });
        self.graph.record("sum_axis", value, &[self.id], backward)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, F>> {
        let len = self.check_axis(axis, "mean_axis")?[axis];
        self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, F>> {
        let shape = self.check_axis(axis, "max_axis")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![F::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = xd[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = j;
                    }
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis, keepdim), out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut dx = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = arg[o * inner + i];
                    dx[(o * len + j) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        });
        self.graph.record("max_axis", value, &[self.id], backward)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Result<Var<'g, F>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            vec![Some(Tensor::full(&shape, args.grad.item()))]
        });
        self.graph.record("sum_all", value, &[self.id], backward)
    }

    pub fn mean_all(self) -> Result<Var<'g, F>> {
        let n = self.value().numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            vec![Some(Tensor::from_parts(in_shape.clone(), args.grad.data().to_vec()))]
        });
        self.graph.record("reshape", value, &[self.id], backward)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, F>> {
        let shape = self.check_axis(axis, "slice")?;
        if start >= end || end > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let x = self.value();
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xd[base..base + width * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let value = Tensor::from_parts(out_shape, out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut dx = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                dx[base..base + width * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        });
        self.graph.record("slice", value, &[self.id], backward)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let shape0 = first.check_axis(axis, "concat")?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&shape0, axis);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = total;
        let value = Tensor::from_parts(out_shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut grads: Vec<Vec<F>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gv, &l) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                .collect()
        });
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.graph.record("concat", value, &ids, backward)
    }

    /// Matrix product of `(m,k)` and `(k,n)`.
    pub fn matmul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.check_same_graph(&other);
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        crate::tensor::gemm(false, false, m, k, n, a.data(), b.data(), F::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            let ga = args.needs[0].then(|| {
                let mut d = vec![F::zero(); m * k];
                crate::tensor::gemm(false, true, m, n, k, g, b.data(), F::zero(), &mut d);
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = args.needs[1].then(|| {
                let mut d = vec![F::zero(); k * n];
                crate::tensor::gemm(true, false, k, m, n, a.data(), g, F::zero(), &mut d);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        });
        self.graph.record("matmul", value, &[self.id, other.id], backward)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_shape_rule() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = g.constant(Tensor::ones(&[3, 4])).unwrap();
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 4]);
        assert!(b.matmul(a).is_err());
    }

    #[test]
    fn relu_definition() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_mismatch_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = g.constant(Tensor::ones(&[4])).unwrap();
        let msg = a.add(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcasting_bias_add() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let b = g.leaf(Tensor::from_f64(&[3], &[10.0, 20.0, 30.0]).unwrap()).unwrap();
        let y = a.add(b).unwrap();
        assert_eq!(y.value().data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reductions_and_slices() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 5.0, 2.0, -1.0, -3.0, 0.5]).unwrap()).unwrap();
        assert_eq!(x.max_axis(1, false).unwrap().value().data(), &[5.0, 0.5]);
        assert_eq!(x.sum_axis(0, true).unwrap().shape(), vec![1, 3]);
        let m = x.mean_axis(1, false).unwrap().value();
        assert!((m.data()[0] - 8.0 / 3.0).abs() < 1e-15 && (m.data()[1] + 3.5 / 3.0).abs() < 1e-15);
        assert_eq!(x.slice(1, 1, 3).unwrap().value().data(), &[5.0, 2.0, -3.0, 0.5]);
        let c = crate::autodiff::Var::concat(&[x, x.slice(0, 0, 1).unwrap()], 0).unwrap();
        assert_eq!(c.shape(), vec![3, 3]);
        assert!(x.slice(1, 2, 4).is_err());
    }
}
