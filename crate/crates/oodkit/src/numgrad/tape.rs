//! The gradient tape: op recording and reverse-mode replay.

use super::{check_finite, NumError, Tensor};

/// Index of a recorded node on the tape.
pub type NodeId = usize;

/// `Some(id)` when the operand lives on the tape, `None` for constants.
type In = Option<NodeId>;

/// A recorded primitive with everything its backward rule needs.
///
/// Saved operand values are clones taken at record time, so later mutation of
/// the source tensors cannot corrupt the backward pass.
#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: In, b: In },
    Sub { a: In, b: In },
    Mul { a: In, b: In, av: Vec<f64>, bv: Vec<f64> },
    Div { a: In, b: In, av: Vec<f64>, bv: Vec<f64> },
    AddScalar { a: In },
    Scale { a: In, c: f64 },
    AddRow { a: In, b: In, rows: usize, cols: usize },
    SubRow { a: In, b: In, rows: usize, cols: usize },
    MulRow { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, rows: usize, cols: usize },
    DivRow { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, rows: usize, cols: usize },
    AddCol { a: In, b: In, rows: usize, cols: usize },
    SubCol { a: In, b: In, rows: usize, cols: usize },
    MulCol { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, rows: usize, cols: usize },
    DivCol { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, rows: usize, cols: usize },
    Matmul { a: In, b: In, av: Vec<f64>, bv: Vec<f64>, m: usize, k: usize, n: usize },
    Transpose { a: In, rows: usize, cols: usize },
    Exp { a: In, y: Vec<f64> },
    Log { a: In, av: Vec<f64> },
    Relu { a: In, av: Vec<f64> },
    Sigmoid { a: In, y: Vec<f64> },
    Sqrt { a: In, y: Vec<f64> },
    ClampMin { a: In, av: Vec<f64>, c: f64 },
    Sum { a: In, len: usize },
    Mean { a: In, len: usize },
    SumAxis1 { a: In, rows: usize, cols: usize },
    MeanAxis0 { a: In, rows: usize, cols: usize },
    MaxAxis1 { a: In, argmax: Vec<usize>, rows: usize, cols: usize },
    Softmax { a: In, y: Vec<f64>, rows: usize, cols: usize },
    LogSoftmax { a: In, y: Vec<f64>, rows: usize, cols: usize },
    GatherClass { a: In, labels: Vec<usize>, cols: usize },
    ConcatCols { inputs: Vec<In>, rows: usize },
    Reshape { a: In, len: usize },
}

/// Define-by-run gradient tape.
///
/// One tape per forward pass; tensors watched or produced on it are confined
/// to the thread that owns it. Ops on fully detached operands compute forward
/// values only and record nothing.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Op>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches `t` to the tape as a differentiable leaf.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let id = self.push_node(Op::Leaf);
        Tensor::with_node(t.shape().to_vec(), t.data().to_vec(), Some(id))
    }

    fn push_node(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Finalizes an op: finiteness check, optional recording, tensor assembly.
    fn finish(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Option<Op>,
    ) -> Result<Tensor, NumError> {
        check_finite(name, &data)?;
        let node = op.map(|op| self.push_node(op));
        Ok(Tensor::with_node(shape, data, node))
    }

    fn recording(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.node().is_some())
    }

    // ── elementwise, same shape ──────────────────────────────────────────

    fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
        if a.shape() != b.shape() {
            return Err(NumError::Shape {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        Self::check_same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let op = Self::recording(&[a, b]).then(|| Op::Add { a: a.node(), b: b.node() });
        self.finish("add", a.shape().to_vec(), data, op)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        Self::check_same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let op = Self::recording(&[a, b]).then(|| Op::Sub { a: a.node(), b: b.node() });
        self.finish("sub", a.shape().to_vec(), data, op)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        Self::check_same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let op = Self::recording(&[a, b]).then(|| Op::Mul {
            a: a.node(),
            b: b.node(),
            av: a.data().to_vec(),
            bv: b.data().to_vec(),
        });
        self.finish("mul", a.shape().to_vec(), data, op)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        Self::check_same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let op = Self::recording(&[a, b]).then(|| Op::Div {
            a: a.node(),
            b: b.node(),
            av: a.data().to_vec(),
            bv: b.data().to_vec(),
        });
        self.finish("div", a.shape().to_vec(), data, op)
    }

    /// Adds the constant `c` to every element.
    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor, NumError> {
        let data = a.data().iter().map(|x| x + c).collect();
        let op = Self::recording(&[a]).then(|| Op::AddScalar { a: a.node() });
        self.finish("add_scalar", a.shape().to_vec(), data, op)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, NumError> {
        let data = a.data().iter().map(|x| x * c).collect();
        let op = Self::recording(&[a]).then(|| Op::Scale { a: a.node(), c });
        self.finish("scale", a.shape().to_vec(), data, op)
    }

    // ── broadcast over rows: [B,F] ∘ [F] ─────────────────────────────────

    fn check_row_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NumError> {
        if a.shape().len() != 2 || b.shape().len() != 1 || b.shape()[0] != a.shape()[1] {
            return Err(NumError::Shape {
                op,
                detail: format!("expected [B,F] and [F], got {:?} and {:?}", a.shape(), b.shape()),
            });
        }
        Ok((a.shape()[0], a.shape()[1]))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_row_shapes(name, a, b)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(a.data()[r * cols + c], b.data()[c]));
            }
        }
        let rec = Self::recording(&[a, b]).then(|| op(rows, cols));
        self.finish(name, vec![rows, cols], data, rec)
    }

    pub fn add_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        self.row_broadcast("add_row", a, b, |x, y| x + y, |rows, cols| Op::AddRow {
            a: an,
            b: bn,
            rows,
            cols,
        })
    }

    pub fn sub_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        self.row_broadcast("sub_row", a, b, |x, y| x - y, |rows, cols| Op::SubRow {
            a: an,
            b: bn,
            rows,
            cols,
        })
    }

    pub fn mul_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        let (av, bv) = (a.data().to_vec(), b.data().to_vec());
        self.row_broadcast("mul_row", a, b, |x, y| x * y, move |rows, cols| Op::MulRow {
            a: an,
            b: bn,
            av,
            bv,
            rows,
            cols,
        })
    }

    pub fn div_row(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        let (av, bv) = (a.data().to_vec(), b.data().to_vec());
        self.row_broadcast("div_row", a, b, |x, y| x / y, move |rows, cols| Op::DivRow {
            a: an,
            b: bn,
            av,
            bv,
            rows,
            cols,
        })
    }

    // ── broadcast over columns: [B,F] ∘ [B,1] ────────────────────────────

    fn check_col_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NumError> {
        if a.shape().len() != 2
            || b.shape().len() != 2
            || b.shape()[0] != a.shape()[0]
            || b.shape()[1] != 1
        {
            return Err(NumError::Shape {
                op,
                detail: format!("expected [B,F] and [B,1], got {:?} and {:?}", a.shape(), b.shape()),
            });
        }
        Ok((a.shape()[0], a.shape()[1]))
    }

    fn col_broadcast(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_col_shapes(name, a, b)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(a.data()[r * cols + c], b.data()[r]));
            }
        }
        let rec = Self::recording(&[a, b]).then(|| op(rows, cols));
        self.finish(name, vec![rows, cols], data, rec)
    }

    pub fn add_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        self.col_broadcast("add_col", a, b, |x, y| x + y, |rows, cols| Op::AddCol {
            a: an,
            b: bn,
            rows,
            cols,
        })
    }

    pub fn sub_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        self.col_broadcast("sub_col", a, b, |x, y| x - y, |rows, cols| Op::SubCol {
            a: an,
            b: bn,
            rows,
            cols,
        })
    }

    pub fn mul_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        let (av, bv) = (a.data().to_vec(), b.data().to_vec());
        self.col_broadcast("mul_col", a, b, |x, y| x * y, move |rows, cols| Op::MulCol {
            a: an,
            b: bn,
            av,
            bv,
            rows,
            cols,
        })
    }

    pub fn div_col(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        let (an, bn) = (a.node(), b.node());
        let (av, bv) = (a.data().to_vec(), b.data().to_vec());
        self.col_broadcast("div_col", a, b, |x, y| x / y, move |rows, cols| Op::DivCol {
            a: an,
            b: bn,
            av,
            bv,
            rows,
            cols,
        })
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(NumError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let op = Self::recording(&[a, b]).then(|| Op::Matmul {
            a: a.node(),
            b: b.node(),
            av: a.data().to_vec(),
            bv: b.data().to_vec(),
            m,
            k,
            n,
        });
        self.finish("matmul", vec![m, n], data, op)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        if a.shape().len() != 2 {
            return Err(NumError::Shape {
                op: "transpose",
                detail: format!("expected matrix, got {:?}", a.shape()),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let data = transpose_raw(a.data(), rows, cols);
        let op = Self::recording(&[a]).then(|| Op::Transpose { a: a.node(), rows, cols });
        self.finish("transpose", vec![cols, rows], data, op)
    }

    // ── unary maps ───────────────────────────────────────────────────────

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let y: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
        let op = Self::recording(&[a]).then(|| Op::Exp { a: a.node(), y: y.clone() });
        self.finish("exp", a.shape().to_vec(), y, op)
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let data = a.data().iter().map(|x| x.ln()).collect();
        let op = Self::recording(&[a]).then(|| Op::Log { a: a.node(), av: a.data().to_vec() });
        self.finish("log", a.shape().to_vec(), data, op)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        let op = Self::recording(&[a]).then(|| Op::Relu { a: a.node(), av: a.data().to_vec() });
        self.finish("relu", a.shape().to_vec(), data, op)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let y: Vec<f64> = a.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let op = Self::recording(&[a]).then(|| Op::Sigmoid { a: a.node(), y: y.clone() });
        self.finish("sigmoid", a.shape().to_vec(), y, op)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let y: Vec<f64> = a.data().iter().map(|x| x.sqrt()).collect();
        let op = Self::recording(&[a]).then(|| Op::Sqrt { a: a.node(), y: y.clone() });
        self.finish("sqrt", a.shape().to_vec(), y, op)
    }

    /// Elementwise `max(x, c)`; subgradient 1 where `x >= c`, 0 below.
    pub fn clamp_min(&mut self, a: &Tensor, c: f64) -> Result<Tensor, NumError> {
        let data = a.data().iter().map(|x| x.max(c)).collect();
        let op = Self::recording(&[a]).then(|| Op::ClampMin {
            a: a.node(),
            av: a.data().to_vec(),
            c,
        });
        self.finish("clamp_min", a.shape().to_vec(), data, op)
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        if a.numel() == 0 {
            return Err(NumError::EmptyAxis { op: "sum" });
        }
        let s: f64 = a.data().iter().sum();
        let op = Self::recording(&[a]).then(|| Op::Sum { a: a.node(), len: a.numel() });
        self.finish("sum", vec![1], vec![s], op)
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        if a.numel() == 0 {
            return Err(NumError::EmptyAxis { op: "mean" });
        }
        let s: f64 = a.data().iter().sum();
        let m = s / a.numel() as f64;
        let op = Self::recording(&[a]).then(|| Op::Mean { a: a.node(), len: a.numel() });
        self.finish("mean", vec![1], vec![m], op)
    }

    /// Row sums of a matrix: `[B,F] -> [B,1]`.
    pub fn sum_axis1(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("sum_axis1", a)?;
        if cols == 0 {
            return Err(NumError::EmptyAxis { op: "sum_axis1" });
        }
        let data = (0..rows)
            .map(|r| a.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let op = Self::recording(&[a]).then(|| Op::SumAxis1 { a: a.node(), rows, cols });
        self.finish("sum_axis1", vec![rows, 1], data, op)
    }

    /// Column means of a matrix: `[B,F] -> [F]`.
    pub fn mean_axis0(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("mean_axis0", a)?;
        if rows == 0 {
            return Err(NumError::EmptyAxis { op: "mean_axis0" });
        }
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += a.data()[r * cols + c];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        let op = Self::recording(&[a]).then(|| Op::MeanAxis0 { a: a.node(), rows, cols });
        self.finish("mean_axis0", vec![cols], data, op)
    }

    /// Row maxima of a matrix: `[B,F] -> [B,1]`. Ties go to the first index.
    pub fn max_axis1(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("max_axis1", a)?;
        if cols == 0 {
            return Err(NumError::EmptyAxis { op: "max_axis1" });
        }
        let mut data = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let (mut best, mut best_i) = (row[0], 0usize);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data.push(best);
            argmax.push(best_i);
        }
        let op = Self::recording(&[a]).then(|| Op::MaxAxis1 { a: a.node(), argmax, rows, cols });
        self.finish("max_axis1", vec![rows, 1], data, op)
    }

    // ── row-wise softmax family ──────────────────────────────────────────

    /// Row-wise softmax with max subtraction: `[B,C] -> [B,C]`.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("softmax", a)?;
        if cols == 0 {
            return Err(NumError::EmptyAxis { op: "softmax" });
        }
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            y.extend(exps.iter().map(|e| e / z));
        }
        let op = Self::recording(&[a]).then(|| Op::Softmax {
            a: a.node(),
            y: y.clone(),
            rows,
            cols,
        });
        self.finish("softmax", vec![rows, cols], y, op)
    }

    /// Row-wise log-softmax, computed in log space: `[B,C] -> [B,C]`.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("log_softmax", a)?;
        if cols == 0 {
            return Err(NumError::EmptyAxis { op: "log_softmax" });
        }
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            y.extend(row.iter().map(|v| v - lse));
        }
        let op = Self::recording(&[a]).then(|| Op::LogSoftmax {
            a: a.node(),
            y: y.clone(),
            rows,
            cols,
        });
        self.finish("log_softmax", vec![rows, cols], y, op)
    }

    /// Picks element `labels[r]` from each row: `[B,C] -> [B,1]`.
    pub fn gather_class(&mut self, a: &Tensor, labels: &[usize]) -> Result<Tensor, NumError> {
        let (rows, cols) = Self::check_matrix("gather_class", a)?;
        if labels.len() != rows {
            return Err(NumError::Shape {
                op: "gather_class",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(NumError::Shape {
                op: "gather_class",
                detail: format!("label {bad} out of range for {cols} classes"),
            });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| a.data()[r * cols + l])
            .collect();
        let op = Self::recording(&[a]).then(|| Op::GatherClass {
            a: a.node(),
            labels: labels.to_vec(),
            cols,
        });
        self.finish("gather_class", vec![rows, 1], data, op)
    }

    /// Concatenates `[B,1]` columns into `[B,C]`.
    pub fn concat_cols(&mut self, cols: &[&Tensor]) -> Result<Tensor, NumError> {
        if cols.is_empty() {
            return Err(NumError::EmptyAxis { op: "concat_cols" });
        }
        let rows = cols[0].shape().first().copied().unwrap_or(0);
        for t in cols {
            if t.shape() != [rows, 1] {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    detail: format!("expected [{rows},1], got {:?}", t.shape()),
                });
            }
        }
        let c = cols.len();
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            for t in cols {
                data.push(t.data()[r]);
            }
        }
        let op = Self::recording(cols).then(|| Op::ConcatCols {
            inputs: cols.iter().map(|t| t.node()).collect(),
            rows,
        });
        self.finish("concat_cols", vec![rows, c], data, op)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor, NumError> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(NumError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape(), shape),
            });
        }
        let op = Self::recording(&[a]).then(|| Op::Reshape { a: a.node(), len: numel });
        self.finish("reshape", shape, a.data().to_vec(), op)
    }

    fn check_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize), NumError> {
        if a.shape().len() != 2 {
            return Err(NumError::Shape {
                op,
                detail: format!("expected matrix, got {:?}", a.shape()),
            });
        }
        Ok((a.shape()[0], a.shape()[1]))
    }

    // ── reverse pass ─────────────────────────────────────────────────────

    /// Reverse-mode gradients of a one-element `scalar` w.r.t. each of `wrt`.
    ///
    /// Tensors in `wrt` that are unreachable from `scalar` (or detached) get
    /// zero gradients. The reverse sweep visits each recorded node once.
    pub fn grad(&self, scalar: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>, NumError> {
        if scalar.numel() != 1 {
            return Err(NumError::NotScalar { len: scalar.numel() });
        }
        let root = scalar.node().ok_or(NumError::NotOnTape)?;
        if root >= self.nodes.len() {
            return Err(NumError::NotOnTape);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = std::mem::take(&mut grads[id]) else {
                continue;
            };
            self.backward_node(&self.nodes[id], &g, &mut grads);
            grads[id] = Some(g); // keep for wrt extraction
        }

        let mut out = Vec::with_capacity(wrt.len());
        for t in wrt {
            let data = match t.node() {
                Some(id) if id < self.nodes.len() => {
                    grads[id].clone().unwrap_or_else(|| vec![0.0; t.numel()])
                }
                _ => vec![0.0; t.numel()],
            };
            check_finite("grad", &data)?;
            out.push(Tensor::with_node(t.shape().to_vec(), data, None));
        }
        Ok(out)
    }

    fn backward_node(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(grads, *a, g.len(), |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, g.len(), |db| {
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.len(), |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, g.len(), |db| {
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul { a, b, av, bv } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, g.len(), |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div { a, b, av, bv } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] / bv[i];
                    }
                });
                acc(grads, *b, g.len(), |db| {
                    for i in 0..g.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::AddScalar { a } => {
                acc(grads, *a, g.len(), |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(grads, *a, g.len(), |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                });
            }
            Op::AddRow { a, b, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, *cols, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::SubRow { a, b, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, *cols, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] -= g[r * cols + c];
                        }
                    }
                });
            }
            Op::MulRow { a, b, av, bv, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r * cols + c] * bv[c];
                        }
                    }
                });
                acc(grads, *b, *cols, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += g[r * cols + c] * av[r * cols + c];
                        }
                    }
                });
            }
            Op::DivRow { a, b, av, bv, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r * cols + c] / bv[c];
                        }
                    }
                });
                acc(grads, *b, *cols, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] -= g[r * cols + c] * av[r * cols + c] / (bv[c] * bv[c]);
                        }
                    }
                });
            }
            Op::AddCol { a, b, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, *rows, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[r] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::SubCol { a, b, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, *rows, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[r] -= g[r * cols + c];
                        }
                    }
                });
            }
            Op::MulCol { a, b, av, bv, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r * cols + c] * bv[r];
                        }
                    }
                });
                acc(grads, *b, *rows, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[r] += g[r * cols + c] * av[r * cols + c];
                        }
                    }
                });
            }
            Op::DivCol { a, b, av, bv, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r * cols + c] / bv[r];
                        }
                    }
                });
                acc(grads, *b, *rows, |db| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[r] -= g[r * cols + c] * av[r * cols + c] / (bv[r] * bv[r]);
                        }
                    }
                });
            }
            Op::Matmul { a, b, av, bv, m, k, n } => {
                // da += g @ b^T, db += a^T @ g
                acc(grads, *a, m * k, |da| {
                    for i in 0..*m {
                        for j in 0..*k {
                            let mut s = 0.0;
                            for c in 0..*n {
                                s += g[i * n + c] * bv[j * n + c];
                            }
                            da[i * k + j] += s;
                        }
                    }
                });
                acc(grads, *b, k * n, |db| {
                    for i in 0..*k {
                        for j in 0..*n {
                            let mut s = 0.0;
                            for r in 0..*m {
                                s += av[r * k + i] * g[r * n + j];
                            }
                            db[i * n + j] += s;
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Exp { a, y } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log { a, av } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] / av[i];
                    }
                });
            }
            Op::Relu { a, av } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid { a, y } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Sqrt { a, y } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::ClampMin { a, av, c } => {
                acc(grads, *a, g.len(), |da| {
                    for i in 0..g.len() {
                        if av[i] >= *c {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum { a, len } => {
                acc(grads, *a, *len, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean { a, len } => {
                acc(grads, *a, *len, |da| {
                    let s = g[0] / *len as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::SumAxis1 { a, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[r];
                        }
                    }
                });
            }
            Op::MeanAxis0 { a, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    let inv = 1.0 / *rows as f64;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::MaxAxis1 { a, argmax, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        da[r * cols + argmax[r]] += g[r];
                    }
                });
            }
            Op::Softmax { a, y, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..*cols {
                            da[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a, y, rows, cols } => {
                acc(grads, *a, rows * cols, |da| {
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..*cols {
                            da[r * cols + c] += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                });
            }
            Op::GatherClass { a, labels, cols } => {
                acc(grads, *a, labels.len() * cols, |da| {
                    for (r, &l) in labels.iter().enumerate() {
                        da[r * cols + l] += g[r];
                    }
                });
            }
            Op::ConcatCols { inputs, rows } => {
                let c = inputs.len();
                for (j, input) in inputs.iter().enumerate() {
                    acc(grads, *input, *rows, |dj| {
                        for r in 0..*rows {
                            dj[r] += g[r * c + j];
                        }
                    });
                }
            }
            Op::Reshape { a, len } => {
                acc(grads, *a, *len, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
        }
    }
}

fn acc(
    grads: &mut [Option<Vec<f64>>],
    target: Option<NodeId>,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if let Some(id) = target {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
