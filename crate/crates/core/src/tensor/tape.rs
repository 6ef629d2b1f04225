//! Operation tape and reverse-mode gradients.
//!
//! Every differentiable op is a method on [`Tape`]. When gradients are
//! enabled and at least one input is trainable, the op is recorded;
//! [`Tape::backward`] then walks the records in exact reverse execution
//! order, accumulating gradients into each tensor's grad slot. Tensors with
//! `requires_grad = false` never receive a gradient.
//!
//! One tape is single-threaded by construction; a fresh tape is built per
//! training step.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::cell::RefCell;

const NORM_FLOOR: f64 = 1e-12;

enum Op<F: Scalar> {
    Matmul { a: Tensor<F>, b: Tensor<F> },
    Transpose { a: Tensor<F> },
    Add { a: Tensor<F>, b: Tensor<F> },
    Sub { a: Tensor<F>, b: Tensor<F> },
    Mul { a: Tensor<F>, b: Tensor<F> },
    Div { a: Tensor<F>, b: Tensor<F> },
    Scale { a: Tensor<F>, c: F },
    AddScalar { a: Tensor<F> },
    AddRow { x: Tensor<F>, bias: Tensor<F> },
    Gelu { a: Tensor<F> },
    Softmax { a: Tensor<F>, axis: usize },
    LayerNorm {
        x: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        saved: kernels::LayerNormSaved<F>,
    },
    SumAll { a: Tensor<F> },
    MeanAll { a: Tensor<F> },
    CrossEntropy {
        logits: Tensor<F>,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    ConcatRows { a: Tensor<F>, b: Tensor<F> },
    ConcatCols { a: Tensor<F>, b: Tensor<F> },
    SliceRows { x: Tensor<F>, start: usize },
    SliceCols { x: Tensor<F>, start: usize },
    Dot { a: Tensor<F>, b: Tensor<F> },
    L2Norm { a: Tensor<F>, norm: F },
    ClampMin { a: Tensor<F>, c: F },
}

struct Record<F: Scalar> {
    op: Op<F>,
    out: Tensor<F>,
}

/// Records differentiable operations for one forward pass.
pub struct Tape<F: Scalar> {
    records: RefCell<Vec<Record<F>>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records: evaluation-only forward passes.
    pub fn inference() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    fn emit(&self, op: Op<F>, shape: Vec<usize>, data: Vec<F>, track: bool) -> Tensor<F> {
        let track = track && self.grad_enabled;
        let out = Tensor::raw(shape, data, track);
        if track {
            self.records.borrow_mut().push(Record {
                op,
                out: out.clone(),
            });
        }
        out
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product. Rank-2 `[m,k]·[k,n]`, or rank-3 with equal leading
    /// batch dimension.
    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (out_shape, out) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let mut c = vec![F::zero(); m * n];
                kernels::matmul_acc(&a.data(), &b.data(), &mut c, *m, *k, *n);
                (vec![*m, *n], c)
            }
            ([ba, m, k], [bb, k2, n]) => {
                if ba != bb || k != k2 {
                    return Err(mismatch());
                }
                let mut c = vec![F::zero(); ba * m * n];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..*ba {
                    kernels::matmul_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut c[i * m * n..(i + 1) * m * n],
                        *m,
                        *k,
                        *n,
                    );
                }
                (vec![*ba, *m, *n], c)
            }
            _ => return Err(mismatch()),
        };
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            out_shape,
            out,
            track,
        ))
    }

    pub fn transpose(&self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let &[r, c] = a.shape() else {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        };
        let out = kernels::transpose(&a.data(), r, c);
        Ok(self.emit(Op::Transpose { a: a.clone() }, vec![c, r], out, a.requires_grad()))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: &Tensor<F>,
        b: &Tensor<F>,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.emit(op, a.shape().to_vec(), out, track))
    }

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_same_shape(
            "add",
            a,
            b,
            |x, y| x + y,
            Op::Add {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn sub(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            Op::Sub {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn div(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary_same_shape(
            "div",
            a,
            b,
            |x, y| x / y,
            Op::Div {
                a: a.clone(),
                b: b.clone(),
            },
        )
    }

    pub fn scale(&self, a: &Tensor<F>, c: F) -> Tensor<F> {
        let out = a.data().iter().map(|&x| x * c).collect();
        self.emit(
            Op::Scale { a: a.clone(), c },
            a.shape().to_vec(),
            out,
            a.requires_grad(),
        )
    }

    pub fn add_scalar(&self, a: &Tensor<F>, c: F) -> Tensor<F> {
        let out = a.data().iter().map(|&x| x + c).collect();
        self.emit(
            Op::AddScalar { a: a.clone() },
            a.shape().to_vec(),
            out,
            a.requires_grad(),
        )
    }

    /// Broadcasts `bias[d]` over the rows of `x[…,d]`.
    pub fn add_row(&self, x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let d = *x.shape().last().unwrap_or(&0);
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let track = x.requires_grad() || bias.requires_grad();
        Ok(self.emit(
            Op::AddRow {
                x: x.clone(),
                bias: bias.clone(),
            },
            x.shape().to_vec(),
            out,
            track,
        ))
    }

    pub fn gelu(&self, a: &Tensor<F>) -> Tensor<F> {
        let out = a.data().iter().map(|&x| kernels::gelu(x)).collect();
        self.emit(
            Op::Gelu { a: a.clone() },
            a.shape().to_vec(),
            out,
            a.requires_grad(),
        )
    }

    pub fn clamp_min(&self, a: &Tensor<F>, c: F) -> Tensor<F> {
        let out = a.data().iter().map(|&x| x.max(c)).collect();
        self.emit(
            Op::ClampMin { a: a.clone(), c },
            a.shape().to_vec(),
            out,
            a.requires_grad(),
        )
    }

    // ── normalization and reductions ────────────────────────────────

    pub fn softmax(&self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        if axis >= a.rank() {
            return Err(Error::InvalidAxis {
                axis,
                shape: a.shape().to_vec(),
            });
        }
        let out = kernels::softmax(&a.data(), a.shape(), axis);
        Ok(self.emit(
            Op::Softmax {
                a: a.clone(),
                axis,
            },
            a.shape().to_vec(),
            out,
            a.requires_grad(),
        ))
    }

    pub fn layernorm(
        &self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: F,
    ) -> Result<Tensor<F>> {
        let d = *x.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let (out, saved) = kernels::layernorm(&x.data(), d, &gamma.data(), &beta.data(), eps);
        let track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.emit(
            Op::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                saved,
            },
            x.shape().to_vec(),
            out,
            track,
        ))
    }

    pub fn sum_all(&self, a: &Tensor<F>) -> Tensor<F> {
        let mut s = F::zero();
        for &v in a.data().iter() {
            s += v;
        }
        self.emit(Op::SumAll { a: a.clone() }, Vec::new(), vec![s], a.requires_grad())
    }

    pub fn mean_all(&self, a: &Tensor<F>) -> Tensor<F> {
        let n = F::from_f64(a.numel() as f64);
        let mut s = F::zero();
        for &v in a.data().iter() {
            s += v;
        }
        self.emit(
            Op::MeanAll { a: a.clone() },
            Vec::new(),
            vec![s / n],
            a.requires_grad(),
        )
    }

    /// Mean cross-entropy of `logits[b,c]` against integer labels, fused
    /// with its log-softmax for stability.
    pub fn cross_entropy_logits(&self, logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        let &[b, c] = logits.shape() else {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if b != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: vec![b, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: c,
            });
        }
        let (loss, probs) = kernels::cross_entropy(&logits.data(), c, labels);
        Ok(self.emit(
            Op::CrossEntropy {
                logits: logits.clone(),
                labels: labels.to_vec(),
                probs,
            },
            Vec::new(),
            vec![loss],
            logits.requires_grad(),
        ))
    }

    // ── concatenation and slicing ───────────────────────────────────

    /// Rows of `a` followed by rows of `b` along the first axis.
    pub fn concat_rows(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.rank() == 0 || a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut out = a.to_vec();
        out.extend_from_slice(&b.data());
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            Op::ConcatRows {
                a: a.clone(),
                b: b.clone(),
            },
            shape,
            out,
            track,
        ))
    }

    /// Columns of `a` followed by columns of `b`; rank-2 only.
    pub fn concat_cols(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (&[l, ca], &[l2, cb]) = (a.shape(), b.shape()) else {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if l != l2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![l, ca],
                rhs: vec![l2, cb],
            });
        }
        let mut out = Vec::with_capacity(l * (ca + cb));
        let (ad, bd) = (a.data(), b.data());
        for r in 0..l {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            Op::ConcatCols {
                a: a.clone(),
                b: b.clone(),
            },
            vec![l, ca + cb],
            out,
            track,
        ))
    }

    pub fn slice_rows(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        if x.rank() == 0 || start + len > x.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let row: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = x.data()[start * row..(start + len) * row].to_vec();
        Ok(self.emit(
            Op::SliceRows {
                x: x.clone(),
                start,
            },
            shape,
            out,
            x.requires_grad(),
        ))
    }

    pub fn slice_cols(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        let &[l, c] = x.shape() else {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        };
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![l, c],
                rhs: vec![start, len],
            });
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(l * len);
        for r in 0..l {
            out.extend_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        Ok(self.emit(
            Op::SliceCols {
                x: x.clone(),
                start,
            },
            vec![l, len],
            out,
            x.requires_grad(),
        ))
    }

    // ── vector terms for the cosine machinery ───────────────────────

    pub fn dot(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut s = F::zero();
        for (&x, &y) in a.data().iter().zip(b.data().iter()) {
            s += x * y;
        }
        let track = a.requires_grad() || b.requires_grad();
        Ok(self.emit(
            Op::Dot {
                a: a.clone(),
                b: b.clone(),
            },
            Vec::new(),
            vec![s],
            track,
        ))
    }

    pub fn l2norm(&self, a: &Tensor<F>) -> Tensor<F> {
        let mut s = F::zero();
        for &x in a.data().iter() {
            s += x * x;
        }
        let norm = s.sqrt();
        self.emit(
            Op::L2Norm { a: a.clone(), norm },
            Vec::new(),
            vec![norm],
            a.requires_grad(),
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populates the gradient of every trainable tensor reachable from
    /// `loss`, walking the tape in exact reverse execution order.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        if !loss.requires_grad() {
            // Nothing trainable feeds this value; all gradients are absent.
            return Ok(());
        }
        loss.accumulate_grad(&[F::one()]);
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let Some(gout) = rec.out.grad() else {
                continue;
            };
            step_backward(&rec.op, &rec.out, &gout);
        }
        Ok(())
    }
}

fn accumulate_if_tracked<F: Scalar>(t: &Tensor<F>, delta: &[F]) {
    if t.requires_grad() {
        t.accumulate_grad(delta);
    }
}

fn step_backward<F: Scalar>(op: &Op<F>, out: &Tensor<F>, gout: &[F]) {
    match op {
        Op::Matmul { a, b } => {
            match (a.shape(), b.shape()) {
                ([m, k], [_, n]) => {
                    if a.requires_grad() {
                        let mut da = vec![F::zero(); m * k];
                        kernels::matmul_bt_acc(gout, &b.data(), &mut da, *m, *n, *k);
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![F::zero(); k * n];
                        kernels::matmul_at_acc(&a.data(), gout, &mut db, *k, *m, *n);
                        b.accumulate_grad(&db);
                    }
                }
                ([bt, m, k], [_, _, n]) => {
                    if a.requires_grad() {
                        let mut da = vec![F::zero(); bt * m * k];
                        let bd = b.data();
                        for i in 0..*bt {
                            kernels::matmul_bt_acc(
                                &gout[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                *m,
                                *n,
                                *k,
                            );
                        }
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let mut db = vec![F::zero(); bt * k * n];
                        let ad = a.data();
                        for i in 0..*bt {
                            kernels::matmul_at_acc(
                                &ad[i * m * k..(i + 1) * m * k],
                                &gout[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                *k,
                                *m,
                                *n,
                            );
                        }
                        b.accumulate_grad(&db);
                    }
                }
                _ => unreachable!("validated at forward"),
            }
        }
        Op::Transpose { a } => {
            if a.requires_grad() {
                let &[r, c] = a.shape() else { unreachable!() };
                a.accumulate_grad(&kernels::transpose(gout, c, r));
            }
        }
        Op::Add { a, b } => {
            accumulate_if_tracked(a, gout);
            accumulate_if_tracked(b, gout);
        }
        Op::Sub { a, b } => {
            accumulate_if_tracked(a, gout);
            if b.requires_grad() {
                let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let d: Vec<F> = gout
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&g, &y)| g * y)
                    .collect();
                a.accumulate_grad(&d);
            }
            if b.requires_grad() {
                let d: Vec<F> = gout
                    .iter()
                    .zip(a.data().iter())
                    .map(|(&g, &x)| g * x)
                    .collect();
                b.accumulate_grad(&d);
            }
        }
        Op::Div { a, b } => {
            if a.requires_grad() {
                let d: Vec<F> = gout
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&g, &y)| g / y)
                    .collect();
                a.accumulate_grad(&d);
            }
            if b.requires_grad() {
                let ad = a.data();
                let bd = b.data();
                let d: Vec<F> = gout
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| -g * ad[i] / (bd[i] * bd[i]))
                    .collect();
                b.accumulate_grad(&d);
            }
        }
        Op::Scale { a, c } => {
            if a.requires_grad() {
                let d: Vec<F> = gout.iter().map(|&g| g * *c).collect();
                a.accumulate_grad(&d);
            }
        }
        Op::AddScalar { a } => accumulate_if_tracked(a, gout),
        Op::AddRow { x, bias } => {
            accumulate_if_tracked(x, gout);
            if bias.requires_grad() {
                let d = bias.numel();
                let mut db = vec![F::zero(); d];
                for (i, &g) in gout.iter().enumerate() {
                    db[i % d] += g;
                }
                bias.accumulate_grad(&db);
            }
        }
        Op::Gelu { a } => {
            if a.requires_grad() {
                let d: Vec<F> = a
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| g * kernels::gelu_grad(x))
                    .collect();
                a.accumulate_grad(&d);
            }
        }
        Op::Softmax { a, axis } => {
            if a.requires_grad() {
                let y = out.data();
                let mut dx = vec![F::zero(); y.len()];
                kernels::softmax_backward(&y, gout, a.shape(), *axis, &mut dx);
                a.accumulate_grad(&dx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let d = *x.shape().last().unwrap();
            let mut dx = x.requires_grad().then(|| vec![F::zero(); x.numel()]);
            let mut dgamma = gamma.requires_grad().then(|| vec![F::zero(); d]);
            let mut dbeta = beta.requires_grad().then(|| vec![F::zero(); d]);
            kernels::layernorm_backward(
                gout,
                saved,
                d,
                &gamma.data(),
                dx.as_deref_mut(),
                dgamma.as_deref_mut(),
                dbeta.as_deref_mut(),
            );
            if let Some(dx) = dx {
                x.accumulate_grad(&dx);
            }
            if let Some(dg) = dgamma {
                gamma.accumulate_grad(&dg);
            }
            if let Some(db) = dbeta {
                beta.accumulate_grad(&db);
            }
        }
        Op::SumAll { a } => {
            if a.requires_grad() {
                a.accumulate_grad(&vec![gout[0]; a.numel()]);
            }
        }
        Op::MeanAll { a } => {
            if a.requires_grad() {
                let g = gout[0] / F::from_f64(a.numel() as f64);
                a.accumulate_grad(&vec![g; a.numel()]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if logits.requires_grad() {
                let c = logits.shape()[1];
                let inv_b = F::one() / F::from_f64(labels.len() as f64);
                let mut d = probs.clone();
                for (b, &y) in labels.iter().enumerate() {
                    d[b * c + y] -= F::one();
                }
                for v in &mut d {
                    *v *= gout[0] * inv_b;
                }
                logits.accumulate_grad(&d);
            }
        }
        Op::ConcatRows { a, b } => {
            let na = a.numel();
            if a.requires_grad() {
                a.accumulate_grad(&gout[..na]);
            }
            if b.requires_grad() {
                b.accumulate_grad(&gout[na..]);
            }
        }
        Op::ConcatCols { a, b } => {
            let &[l, ca] = a.shape() else { unreachable!() };
            let cb = b.shape()[1];
            if a.requires_grad() {
                let mut da = vec![F::zero(); l * ca];
                for r in 0..l {
                    da[r * ca..(r + 1) * ca]
                        .copy_from_slice(&gout[r * (ca + cb)..r * (ca + cb) + ca]);
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![F::zero(); l * cb];
                for r in 0..l {
                    db[r * cb..(r + 1) * cb]
                        .copy_from_slice(&gout[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                b.accumulate_grad(&db);
            }
        }
        Op::SliceRows { x, start } => {
            if x.requires_grad() {
                let row: usize = x.shape()[1..].iter().product();
                let mut dx = vec![F::zero(); x.numel()];
                dx[start * row..start * row + gout.len()].copy_from_slice(gout);
                x.accumulate_grad(&dx);
            }
        }
        Op::SliceCols { x, start } => {
            if x.requires_grad() {
                let &[l, c] = x.shape() else { unreachable!() };
                let len = out.shape()[1];
                let mut dx = vec![F::zero(); l * c];
                for r in 0..l {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::Dot { a, b } => {
            if a.requires_grad() {
                let d: Vec<F> = b.data().iter().map(|&y| gout[0] * y).collect();
                a.accumulate_grad(&d);
            }
            if b.requires_grad() {
                let d: Vec<F> = a.data().iter().map(|&x| gout[0] * x).collect();
                b.accumulate_grad(&d);
            }
        }
        Op::L2Norm { a, norm } => {
            if a.requires_grad() {
                let denom = norm.max(F::from_f64(NORM_FLOOR));
                let d: Vec<F> = a.data().iter().map(|&x| gout[0] * x / denom).collect();
                a.accumulate_grad(&d);
            }
        }
        Op::ClampMin { a, c } => {
            if a.requires_grad() {
                let d: Vec<F> = a
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| if x > *c { g } else { F::zero() })
                    .collect();
                a.accumulate_grad(&d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let tape = Tape::new();
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(&eye, &b).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_1x2_by_2x1() {
        let tape = Tape::new();
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).trainable();
        let loss = tape.sum_all(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn detached_loss_leaves_grad_absent() {
        let tape = Tape::new();
        let x = t(vec![2], vec![1.0, 2.0]).trainable();
        let y = t(vec![2], vec![5.0, 6.0]); // not trainable, unrelated
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert!(x.grad().is_none());
        assert!(y.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = t(vec![2], vec![1.0, 2.0]).trainable();
        let y = tape.scale(&x, 2.0);
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn concat_rows_order_and_empty_lhs() {
        let tape = Tape::new();
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(vec![1, 3], vec![7.0, 8.0, 9.0]);
        let c = tape.concat_rows(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);

        let empty = Tensor::zeros(vec![0, 3]);
        let c = tape.concat_rows(&empty, &b).unwrap();
        assert_eq!(c.to_vec(), b.to_vec());
    }

    #[test]
    fn concat_rows_backward_routes_ones() {
        let tape = Tape::new();
        let a = t(vec![2, 2], vec![0.0; 4]).trainable();
        let b = t(vec![1, 2], vec![0.0; 2]).trainable();
        let c = tape.concat_rows(&a, &b).unwrap();
        let loss = tape.sum_all(&c);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn frozen_inputs_never_accumulate() {
        let tape = Tape::new();
        let w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]); // frozen
        let x = t(vec![1, 2], vec![1.0, 1.0]).trainable();
        let y = tape.matmul(&x, &w).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert!(w.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let x = t(vec![2], vec![1.0, 2.0]).trainable();
        let y = tape.scale(&x, 3.0);
        assert_eq!(tape.num_records(), 0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = t(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]);
        let y = tape.softmax(&x, 1).unwrap();
        let yd = y.to_vec();
        for r in 0..2 {
            let s: f64 = yd[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(yd[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_label_bounds() {
        let tape = Tape::new();
        let z = t(vec![1, 3], vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            tape.cross_entropy_logits(&z, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn same_tensor_used_twice_accumulates() {
        let tape = Tape::new();
        let x = t(vec![1], vec![3.0]).trainable();
        let y = tape.mul(&x, &x).unwrap(); // x^2
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
