//! Define-by-run tape: eager forward execution, reverse-order backward.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{GradError, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddConst(TensorId),
    MulConst(TensorId, f64),
    PowfConst(TensorId, f64),
    Sigmoid(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Log10(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    MaxAll(TensorId, usize),
    SumAxis(TensorId, usize),
    MeanAxis(TensorId, usize),
    SoftmaxRows(TensorId),
    Scale(TensorId, TensorId),
    SubScalar(TensorId, TensorId),
    DivScalar(TensorId, TensorId),
    RowScale(TensorId, TensorId),
    RowAdd(TensorId, TensorId),
    ConcatRows(TensorId, TensorId),
    SliceRows(TensorId, usize),
    Slice1d(TensorId, usize),
    Frame(TensorId, usize, usize),
    OverlapAdd(TensorId, usize),
    Conv1d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        dilation: usize,
        pad: usize,
        groups: usize,
        cols: Vec<f64>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    AvgPool2d {
        x: TensorId,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by
/// [`TensorId`]. Leaves inserted with `requires_grad` always have an entry,
/// zero-filled when they do not influence the loss.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.slots[id.idx()].as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> Option<Tensor> {
        self.slots[id.idx()]
            .as_ref()
            .map(|d| Tensor::new(&self.shapes[id.idx()], d.clone()).expect("grad matches shape"))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> GradError {
    GradError::ShapeMismatch { op, detail }
}

fn view2(data: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), data).expect("contiguous row-major view")
}

fn view2_mut(data: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), data).expect("contiguous row-major view")
}

fn conv_out_len(t: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    (t + 2 * pad).checked_sub(span).map(|n| n / stride + 1)
}

fn im2col1d(
    x: &[f64],
    cin: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * t_out];
    for ci in 0..cin {
        for kk in 0..k {
            let row = (ci * k + kk) * t_out;
            for t in 0..t_out {
                let src = (t * stride + kk * dilation) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    cols[row + t] = x[ci * t_in + src as usize];
                }
            }
        }
    }
    cols
}

fn col2im1d(
    dcols: &[f64],
    dx: &mut [f64],
    cin: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    t_out: usize,
) {
    for ci in 0..cin {
        for kk in 0..k {
            let row = (ci * k + kk) * t_out;
            for t in 0..t_out {
                let src = (t * stride + kk * dilation) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    dx[ci * t_in + src as usize] += dcols[row + t];
                }
            }
        }
    }
}

fn im2col2d(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; cin * kh * kw * ho * wo];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    let src_row = (ci * h + si as usize) * w;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && (sj as usize) < w {
                            cols[row + oi * wo + oj] = x[src_row + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d(
    dcols: &[f64],
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    let dst_row = (ci * h + si as usize) * w;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && (sj as usize) < w {
                            dx[dst_row + sj as usize] += dcols[row + oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad();
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), needs, Op::Leaf)
    }

    /// Leaf that does not require gradients.
    pub fn input(&mut self, tensor: Tensor) -> TensorId {
        let shape = tensor.shape().to_vec();
        let Tensor { data, .. } = tensor;
        self.push(shape, data, false, Op::Leaf)
    }

    /// Leaf that requires gradients.
    pub fn param(&mut self, tensor: Tensor) -> TensorId {
        let shape = tensor.shape().to_vec();
        let Tensor { data, .. } = tensor;
        self.push(shape, data, true, Op::Leaf)
    }

    /// Constant scalar leaf, shape `[1]`.
    pub fn constant(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.idx()].data
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.idx()];
        Tensor::new(&n.shape, n.data.clone()).expect("node data matches shape")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        TensorId((self.nodes.len() - 1) as u32)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), GradError> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected 2-D operand, got {s:?}"))),
        }
    }

    fn dims1(&self, id: TensorId, op: &'static str) -> Result<usize, GradError> {
        match self.shape(id) {
            [n] => Ok(*n),
            s => Err(shape_err(op, format!("expected 1-D operand, got {s:?}"))),
        }
    }

    fn check_scalar(&self, id: TensorId, op: &'static str) -> Result<(), GradError> {
        if self.data(id).len() != 1 {
            return Err(shape_err(
                op,
                format!("expected scalar operand, got {:?}", self.shape(id)),
            ));
        }
        Ok(())
    }

    fn check_same_shape(
        &self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
    ) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- binary / unary elementwise ----------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GradError> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GradError> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GradError> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, needs, Op::Mul(a, b)))
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::MulConst(x, c))
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.mul_const(x, -1.0)
    }

    /// `x^p` elementwise. For non-integer `p` the operand must be positive.
    pub fn powf_const(&mut self, x: TensorId, p: f64) -> Result<TensorId, GradError> {
        if p.fract() != 0.0 && self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(GradError::Domain {
                op: "powf_const",
                detail: format!("non-integer power {p} of non-positive value"),
            });
        }
        let data: Vec<f64> = self.data(x).iter().map(|v| v.powf(p)).collect();
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::PowfConst(x, p)))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Relu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.exp()).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, needs, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(GradError::Domain {
                op: "log",
                detail: "operand must be strictly positive".into(),
            });
        }
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.ln()).collect();
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::Log(x)))
    }

    pub fn log10(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(GradError::Domain {
                op: "log10",
                detail: "operand must be strictly positive".into(),
            });
        }
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.log10()).collect();
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::Log10(x)))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], needs, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len().max(1);
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s / n as f64], needs, Op::MeanAll(x))
    }

    /// Maximum over all elements. Gradient flows to the first maximizer.
    pub fn max_all(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        let data = self.data(x);
        if data.is_empty() {
            return Err(GradError::Domain {
                op: "max_all",
                detail: "empty operand".into(),
            });
        }
        let (mut arg, mut best) = (0usize, data[0]);
        for (i, &v) in data.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![best], needs, Op::MaxAll(x, arg)))
    }

    /// Sum of a 2-D tensor along `axis` (0 collapses rows, 1 collapses cols).
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "sum_axis")?;
        if axis > 1 {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range")));
        }
        let data = self.data(x);
        let out = if axis == 0 {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    acc[j] += data[i * c + j];
                }
            }
            acc
        } else {
            let mut acc = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    acc[i] += data[i * c + j];
                }
            }
            acc
        };
        let len = out.len();
        let needs = self.needs(x);
        Ok(self.push(vec![len], out, needs, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "mean_axis")?;
        if axis > 1 {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range")));
        }
        let count = if axis == 0 { r } else { c } as f64;
        let data = self.data(x);
        let mut out = vec![0.0; if axis == 0 { c } else { r }];
        for i in 0..r {
            for j in 0..c {
                out[if axis == 0 { j } else { i }] += data[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= count;
        }
        let len = out.len();
        let needs = self.needs(x);
        Ok(self.push(vec![len], out, needs, Op::MeanAxis(x, axis)))
    }

    /// Row-wise softmax of a 2-D tensor (normalizes along axis 1).
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if c == 0 {
            return Err(shape_err("softmax_rows", "zero-width rows".into()));
        }
        let data = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], out, needs, Op::SoftmaxRows(x)))
    }

    // ---- scalar-tensor broadcasts --------------------------------------

    /// `x * s` with `s` a `[1]` tensor (layer scale).
    pub fn scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, GradError> {
        self.check_scalar(s, "scale")?;
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::Scale(x, s)))
    }

    /// `x - s` broadcast, `s` shape `[1]`.
    pub fn sub_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, GradError> {
        self.check_scalar(s, "sub_scalar")?;
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v - sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::SubScalar(x, s)))
    }

    /// `x / s` broadcast, `s` shape `[1]`, `s != 0`.
    pub fn div_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, GradError> {
        self.check_scalar(s, "div_scalar")?;
        let sv = self.data(s)[0];
        if sv == 0.0 {
            return Err(GradError::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        let data: Vec<f64> = self.data(x).iter().map(|v| v / sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), data, needs, Op::DivScalar(x, s)))
    }

    /// Multiply row `r` of 2-D `x` by `v[r]`.
    pub fn row_scale(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "row_scale")?;
        let n = self.dims1(v, "row_scale")?;
        if n != r {
            return Err(shape_err("row_scale", format!("[{r}x{c}] rows vs [{n}]")));
        }
        let (xd, vd) = (self.data(x), self.data(v));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * vd[i];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(vec![r, c], out, needs, Op::RowScale(x, v)))
    }

    /// Add `v[r]` to every element of row `r` of 2-D `x`.
    pub fn row_add(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "row_add")?;
        let n = self.dims1(v, "row_add")?;
        if n != r {
            return Err(shape_err("row_add", format!("[{r}x{c}] rows vs [{n}]")));
        }
        let (xd, vd) = (self.data(x), self.data(v));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + vd[i];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(vec![r, c], out, needs, Op::RowAdd(x, v)))
    }

    // ---- structure ------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GradError> {
        let (ra, ca) = self.dims2(a, "matmul")?;
        let (rb, cb) = self.dims2(b, "matmul")?;
        if ca != rb {
            return Err(shape_err("matmul", format!("[{ra}x{ca}] x [{rb}x{cb}]")));
        }
        let mut out = vec![0.0; ra * cb];
        general_mat_mul(
            1.0,
            &view2(self.data(a), ra, ca),
            &view2(self.data(b), rb, cb),
            0.0,
            &mut view2_mut(&mut out, ra, cb),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![ra, cb], out, needs, Op::Matmul(a, b)))
    }

    /// `w [out,in] . x [in,t] + bias [out]` broadcast along rows.
    pub fn dense(
        &mut self,
        w: TensorId,
        x: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId, GradError> {
        let (wo, wi) = self.dims2(w, "dense")?;
        let (xi, _) = self.dims2(x, "dense")?;
        if wi != xi {
            return Err(shape_err(
                "dense",
                format!("weight {:?} vs input {:?}", self.shape(w), self.shape(x)),
            ));
        }
        if let Some(b) = bias {
            let n = self.dims1(b, "dense")?;
            if n != wo {
                return Err(shape_err("dense", format!("bias [{n}] vs {wo} outputs")));
            }
        }
        let y = self.matmul(w, x)?;
        match bias {
            Some(b) => self.row_add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let data = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], out, needs, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, GradError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape(x)))
    }

    /// Stack two 2-D tensors with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GradError> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(shape_err(
                "concat_rows",
                format!("[{ra}x{ca}] over [{rb}x{cb}]"),
            ));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![ra + rb, ca], data, needs, Op::ConcatRows(a, b)))
    }

    /// Rows `r0..r1` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: TensorId, r0: usize, r1: usize) -> Result<TensorId, GradError> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if r0 >= r1 || r1 > r {
            return Err(shape_err(
                "slice_rows",
                format!("rows {r0}..{r1} of [{r}x{c}]"),
            ));
        }
        let data = self.data(x)[r0 * c..r1 * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![r1 - r0, c], data, needs, Op::SliceRows(x, r0)))
    }

    /// Elements `i0..i1` of a 1-D tensor.
    pub fn slice1d(&mut self, x: TensorId, i0: usize, i1: usize) -> Result<TensorId, GradError> {
        let n = self.dims1(x, "slice1d")?;
        if i0 >= i1 || i1 > n {
            return Err(shape_err("slice1d", format!("range {i0}..{i1} of [{n}]")));
        }
        let data = self.data(x)[i0..i1].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![i1 - i0], data, needs, Op::Slice1d(x, i0)))
    }

    /// Split a 1-D signal into overlapping frames of length `win` every
    /// `hop` samples; the tail frame is zero padded. Output `[n_frames, win]`.
    pub fn frame(&mut self, x: TensorId, win: usize, hop: usize) -> Result<TensorId, GradError> {
        let n = self.dims1(x, "frame")?;
        if win == 0 || hop == 0 || hop > win {
            return Err(shape_err("frame", format!("win {win}, hop {hop}")));
        }
        if n < win {
            return Err(shape_err("frame", format!("input [{n}] shorter than window {win}")));
        }
        let n_frames = (n - win).div_ceil(hop) + 1;
        let data = self.data(x);
        let mut out = vec![0.0; n_frames * win];
        for f in 0..n_frames {
            let start = f * hop;
            for i in 0..win {
                if start + i < n {
                    out[f * win + i] = data[start + i];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n_frames, win], out, needs, Op::Frame(x, win, hop)))
    }

    /// Overlap-add rows of `[n_frames, win]` at the given hop. Output length
    /// is `(n_frames - 1) * hop + win`.
    pub fn overlap_add(&mut self, x: TensorId, hop: usize) -> Result<TensorId, GradError> {
        let (f, win) = self.dims2(x, "overlap_add")?;
        if hop == 0 || hop > win {
            return Err(shape_err("overlap_add", format!("win {win}, hop {hop}")));
        }
        let out_len = (f - 1) * hop + win;
        let data = self.data(x);
        let mut out = vec![0.0; out_len];
        for fi in 0..f {
            let start = fi * hop;
            for i in 0..win {
                out[start + i] += data[fi * win + i];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![out_len], out, needs, Op::OverlapAdd(x, hop)))
    }

    // ---- convolutions and pooling --------------------------------------

    /// 1-D convolution over `x [cin, t]` with `w [cout, cin/groups, k]`,
    /// optional `bias [cout]`, zero padding `pad` on both ends.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        dilation: usize,
        pad: usize,
        groups: usize,
    ) -> Result<TensorId, GradError> {
        let (cin, t_in) = self.dims2(x, "conv1d")?;
        let wshape = self.shape(w).to_vec();
        let [cout, cg, k] = wshape.as_slice() else {
            return Err(shape_err("conv1d", format!("weight must be 3-D, got {wshape:?}")));
        };
        let (cout, cg, k) = (*cout, *cg, *k);
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(shape_err(
                "conv1d",
                format!("stride {stride}, dilation {dilation}, groups {groups}"),
            ));
        }
        if cin % groups != 0 || cout % groups != 0 || cg != cin / groups {
            return Err(shape_err(
                "conv1d",
                format!("input [{cin}x{t_in}], weight {wshape:?}, groups {groups}"),
            ));
        }
        if let Some(b) = bias {
            let n = self.dims1(b, "conv1d")?;
            if n != cout {
                return Err(shape_err("conv1d", format!("bias [{n}] vs {cout} outputs")));
            }
        }
        let t_out = conv_out_len(t_in, k, stride, dilation, pad).filter(|&t| t > 0).ok_or_else(
            || shape_err("conv1d", format!("kernel {k} dilation {dilation} exceeds input {t_in} + 2*{pad}")),
        )?;
        let cols = im2col1d(self.data(x), cin, t_in, k, stride, dilation, pad, t_out);
        let mut out = vec![0.0; cout * t_out];
        let cog = cout / groups;
        for g in 0..groups {
            let wg = &self.data(w)[g * cog * cg * k..(g + 1) * cog * cg * k];
            let colg = &cols[g * cg * k * t_out..(g + 1) * cg * k * t_out];
            general_mat_mul(
                1.0,
                &view2(wg, cog, cg * k),
                &view2(colg, cg * k, t_out),
                0.0,
                &mut view2_mut(&mut out[g * cog * t_out..(g + 1) * cog * t_out], cog, t_out),
            );
        }
        if let Some(b) = bias {
            let bd = self.data(b).to_vec();
            for c in 0..cout {
                for t in 0..t_out {
                    out[c * t_out + t] += bd[c];
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            vec![cout, t_out],
            out,
            needs,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                dilation,
                pad,
                groups,
                cols,
            },
        ))
    }

    /// 2-D convolution over `x [cin, h, w]` with `weight [cout, cin, kh, kw]`,
    /// square stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, GradError> {
        let xshape = self.shape(x).to_vec();
        let [cin, h, wd] = xshape.as_slice() else {
            return Err(shape_err("conv2d", format!("input must be 3-D, got {xshape:?}")));
        };
        let (cin, h, wd) = (*cin, *h, *wd);
        let wshape = self.shape(w).to_vec();
        let [cout, wcin, kh, kw] = wshape.as_slice() else {
            return Err(shape_err("conv2d", format!("weight must be 4-D, got {wshape:?}")));
        };
        let (cout, wcin, kh, kw) = (*cout, *wcin, *kh, *kw);
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input {xshape:?} vs weight {wshape:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        if let Some(b) = bias {
            let n = self.dims1(b, "conv2d")?;
            if n != cout {
                return Err(shape_err("conv2d", format!("bias [{n}] vs {cout} outputs")));
            }
        }
        let ho = conv_out_len(h, kh, stride, 1, pad).filter(|&v| v > 0);
        let wo = conv_out_len(wd, kw, stride, 1, pad).filter(|&v| v > 0);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel [{kh}x{kw}] exceeds padded input [{h}x{wd}]"),
                ))
            }
        };
        let cols = im2col2d(self.data(x), cin, h, wd, kh, kw, stride, pad, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        general_mat_mul(
            1.0,
            &view2(self.data(w), cout, cin * kh * kw),
            &view2(&cols, cin * kh * kw, ho * wo),
            0.0,
            &mut view2_mut(&mut out, cout, ho * wo),
        );
        if let Some(b) = bias {
            let bd = self.data(b).to_vec();
            for c in 0..cout {
                for i in 0..ho * wo {
                    out[c * ho * wo + i] += bd[c];
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            vec![cout, ho, wo],
            out,
            needs,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Average pooling over `x [c, h, w]`; trailing rows/cols that do not
    /// fill a window are dropped.
    pub fn avg_pool2d(
        &mut self,
        x: TensorId,
        kh: usize,
        kw: usize,
        sh: usize,
        sw: usize,
    ) -> Result<TensorId, GradError> {
        let xshape = self.shape(x).to_vec();
        let [c, h, w] = xshape.as_slice() else {
            return Err(shape_err("avg_pool2d", format!("input must be 3-D, got {xshape:?}")));
        };
        let (c, h, w) = (*c, *h, *w);
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return Err(shape_err(
                "avg_pool2d",
                format!("kernel [{kh}x{kw}] stride [{sh}x{sw}] on [{h}x{w}]"),
            ));
        }
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;
        let data = self.data(x);
        let inv = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            acc += data[(ci * h + oi * sh + i) * w + oj * sw + j];
                        }
                    }
                    out[(ci * ho + oi) * wo + oj] = acc * inv;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![c, ho, wo],
            out,
            needs,
            Op::AvgPool2d { x, kh, kw, sh, sw },
        ))
    }

    // ---- composites -----------------------------------------------------

    /// Global layer normalization: `(x - mean) / sqrt(var + eps)` over all
    /// elements, built from primitive ops.
    pub fn global_ln(&mut self, x: TensorId, eps: f64) -> Result<TensorId, GradError> {
        let m = self.mean_all(x);
        let centered = self.sub_scalar(x, m)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_all(sq);
        let var_eps = self.add_const(var, eps);
        let std = self.powf_const(var_eps, 0.5)?;
        self.div_scalar(centered, std)
    }

    /// Numerically stable `log(1 + exp(x))`.
    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId, GradError> {
        let pos = self.relu(x);
        let negx = self.neg(x);
        let neg_part = self.relu(negx);
        // |x| = relu(x) + relu(-x); exp(-|x|) is in (0, 1]
        let absx = self.add(pos, neg_part)?;
        let neg_abs = self.neg(absx);
        let e = self.exp(neg_abs);
        let one_p = self.add_const(e, 1.0);
        let l = self.log(one_p)?;
        self.add(pos, l)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns per-node gradients;
    /// every `requires_grad` leaf receives an entry (zero when unused).
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, GradError> {
        let ln = &self.nodes[loss.idx()];
        if ln.data.len() != 1 {
            return Err(GradError::NonScalarLoss {
                shape: ln.shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                slots[i] = Some(vec![0.0; node.data.len()]);
            }
        }
        slots[loss.idx()] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (gin, gout) = slots.split_at_mut(idx);
            let Some(dy) = gout[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, dy, gin);
        }

        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { slots, shapes })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], gin: &mut [Option<Vec<f64>>]) {
        let len_of = |id: TensorId| self.nodes[id.idx()].data.len();
        macro_rules! slot {
            ($id:expr) => {
                gin[$id.idx()]
                    .get_or_insert_with(|| vec![0.0; len_of($id)])
                    .as_mut_slice()
            };
        }
        let y = &node.data;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ra, ca) = (self.nodes[a.idx()].shape[0], self.nodes[a.idx()].shape[1]);
                let (rb, cb) = (self.nodes[b.idx()].shape[0], self.nodes[b.idx()].shape[1]);
                let dyv = view2(dy, ra, cb);
                if self.needs(*a) {
                    let bv = view2(self.data(*b), rb, cb);
                    general_mat_mul(1.0, &dyv, &bv.t(), 1.0, &mut view2_mut(slot!(*a), ra, ca));
                }
                if self.needs(*b) {
                    let av = view2(self.data(*a), ra, ca);
                    general_mat_mul(1.0, &av.t(), &dyv, 1.0, &mut view2_mut(slot!(*b), rb, cb));
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let dx = slot!(*x);
                    for i in 0..c {
                        for j in 0..r {
                            dx[j * c + i] += dy[i * r + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for (g, d) in dx.iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    for (g, d) in slot!(*a).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.needs(*b) {
                    for (g, d) in slot!(*b).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    for (g, d) in slot!(*a).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.needs(*b) {
                    for (g, d) in slot!(*b).iter_mut().zip(dy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let da = slot!(*a);
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bd[i];
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let db = slot!(*b);
                    for i in 0..dy.len() {
                        db[i] += dy[i] * ad[i];
                    }
                }
            }
            Op::AddConst(x) => {
                if self.needs(*x) {
                    for (g, d) in slot!(*x).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if self.needs(*x) {
                    for (g, d) in slot!(*x).iter_mut().zip(dy) {
                        *g += c * d;
                    }
                }
            }
            Op::PowfConst(x, p) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * p * xd[i].powf(p - 1.0);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        if xd[i] > 0.0 {
                            dx[i] += dy[i];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * y[i];
                    }
                }
            }
            Op::Log(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / xd[i];
                    }
                }
            }
            Op::Log10(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let dx = slot!(*x);
                    let ln10 = std::f64::consts::LN_10;
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / (xd[i] * ln10);
                    }
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let d = dy[0];
                    for g in slot!(*x).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = len_of(*x).max(1);
                    let d = dy[0] / n as f64;
                    for g in slot!(*x).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::MaxAll(x, arg) => {
                if self.needs(*x) {
                    slot!(*x)[*arg] += dy[0];
                }
            }
            Op::SumAxis(x, axis) => {
                if self.needs(*x) {
                    let (r, c) = (self.nodes[x.idx()].shape[0], self.nodes[x.idx()].shape[1]);
                    let dx = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += if *axis == 0 { dy[j] } else { dy[i] };
                        }
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.needs(*x) {
                    let (r, c) = (self.nodes[x.idx()].shape[0], self.nodes[x.idx()].shape[1]);
                    let count = if *axis == 0 { r } else { c } as f64;
                    let dx = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += if *axis == 0 { dy[j] } else { dy[i] } / count;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let dx = slot!(*x);
                    for i in 0..r {
                        let (ys, dys) = (&y[i * c..(i + 1) * c], &dy[i * c..(i + 1) * c]);
                        let dot: f64 = ys.iter().zip(dys).map(|(s, d)| s * d).sum();
                        for j in 0..c {
                            dx[i * c + j] += ys[j] * (dys[j] - dot);
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] * sv;
                    }
                }
                if self.needs(*s) {
                    let xd = self.data(*x);
                    let mut acc = 0.0;
                    for i in 0..dy.len() {
                        acc += dy[i] * xd[i];
                    }
                    slot!(*s)[0] += acc;
                }
            }
            Op::SubScalar(x, s) => {
                if self.needs(*x) {
                    for (g, d) in slot!(*x).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.needs(*s) {
                    let acc: f64 = dy.iter().sum();
                    slot!(*s)[0] -= acc;
                }
            }
            Op::DivScalar(x, s) => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for i in 0..dy.len() {
                        dx[i] += dy[i] / sv;
                    }
                }
                if self.needs(*s) {
                    let mut acc = 0.0;
                    for i in 0..dy.len() {
                        acc += dy[i] * y[i];
                    }
                    slot!(*s)[0] -= acc / sv;
                }
            }
            Op::RowScale(x, v) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if self.needs(*x) {
                    let vd = self.data(*v);
                    let dx = slot!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dy[i * c + j] * vd[i];
                        }
                    }
                }
                if self.needs(*v) {
                    let xd = self.data(*x);
                    let dv = slot!(*v);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += dy[i * c + j] * xd[i * c + j];
                        }
                        dv[i] += acc;
                    }
                }
            }
            Op::RowAdd(x, v) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                if self.needs(*x) {
                    for (g, d) in slot!(*x).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.needs(*v) {
                    let dv = slot!(*v);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += dy[i * c + j];
                        }
                        dv[i] += acc;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let c = node.shape[1];
                let ra = self.nodes[a.idx()].shape[0];
                if self.needs(*a) {
                    for (g, d) in slot!(*a).iter_mut().zip(&dy[..ra * c]) {
                        *g += d;
                    }
                }
                if self.needs(*b) {
                    for (g, d) in slot!(*b).iter_mut().zip(&dy[ra * c..]) {
                        *g += d;
                    }
                }
            }
            Op::SliceRows(x, r0) => {
                if self.needs(*x) {
                    let c = node.shape[1];
                    let dx = slot!(*x);
                    for (i, d) in dy.iter().enumerate() {
                        dx[r0 * c + i] += d;
                    }
                }
            }
            Op::Slice1d(x, i0) => {
                if self.needs(*x) {
                    let dx = slot!(*x);
                    for (i, d) in dy.iter().enumerate() {
                        dx[i0 + i] += d;
                    }
                }
            }
            Op::Frame(x, win, hop) => {
                if self.needs(*x) {
                    let n = len_of(*x);
                    let frames = node.shape[0];
                    let dx = slot!(*x);
                    for f in 0..frames {
                        let start = f * hop;
                        for i in 0..*win {
                            if start + i < n {
                                dx[start + i] += dy[f * win + i];
                            }
                        }
                    }
                }
            }
            Op::OverlapAdd(x, hop) => {
                if self.needs(*x) {
                    let (frames, win) =
                        (self.nodes[x.idx()].shape[0], self.nodes[x.idx()].shape[1]);
                    let dx = slot!(*x);
                    for f in 0..frames {
                        let start = f * hop;
                        for i in 0..win {
                            dx[f * win + i] += dy[start + i];
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                dilation,
                pad,
                groups,
                cols,
            } => {
                let (cin, t_in) = (self.nodes[x.idx()].shape[0], self.nodes[x.idx()].shape[1]);
                let wsh = &self.nodes[w.idx()].shape;
                let (cout, cg, k) = (wsh[0], wsh[1], wsh[2]);
                let t_out = node.shape[1];
                let cog = cout / groups;
                if self.needs(*w) {
                    let dw = slot!(*w);
                    for g in 0..*groups {
                        let dyg = view2(&dy[g * cog * t_out..(g + 1) * cog * t_out], cog, t_out);
                        let colg =
                            view2(&cols[g * cg * k * t_out..(g + 1) * cg * k * t_out], cg * k, t_out);
                        general_mat_mul(
                            1.0,
                            &dyg,
                            &colg.t(),
                            1.0,
                            &mut view2_mut(&mut dw[g * cog * cg * k..(g + 1) * cog * cg * k], cog, cg * k),
                        );
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; cols.len()];
                    for g in 0..*groups {
                        let wg = view2(
                            &self.data(*w)[g * cog * cg * k..(g + 1) * cog * cg * k],
                            cog,
                            cg * k,
                        );
                        let dyg = view2(&dy[g * cog * t_out..(g + 1) * cog * t_out], cog, t_out);
                        general_mat_mul(
                            1.0,
                            &wg.t(),
                            &dyg,
                            0.0,
                            &mut view2_mut(
                                &mut dcols[g * cg * k * t_out..(g + 1) * cg * k * t_out],
                                cg * k,
                                t_out,
                            ),
                        );
                    }
                    col2im1d(&dcols, slot!(*x), cin, t_in, k, *stride, *dilation, *pad, t_out);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = slot!(*b);
                        for c in 0..cout {
                            let mut acc = 0.0;
                            for t in 0..t_out {
                                acc += dy[c * t_out + t];
                            }
                            db[c] += acc;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xsh = &self.nodes[x.idx()].shape;
                let (cin, h, wd) = (xsh[0], xsh[1], xsh[2]);
                let wsh = &self.nodes[w.idx()].shape;
                let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let patch = cin * kh * kw;
                let dyv = view2(dy, cout, ho * wo);
                if self.needs(*w) {
                    general_mat_mul(
                        1.0,
                        &dyv,
                        &view2(cols, patch, ho * wo).t(),
                        1.0,
                        &mut view2_mut(slot!(*w), cout, patch),
                    );
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; cols.len()];
                    general_mat_mul(
                        1.0,
                        &view2(self.data(*w), cout, patch).t(),
                        &dyv,
                        0.0,
                        &mut view2_mut(&mut dcols, patch, ho * wo),
                    );
                    col2im2d(&dcols, slot!(*x), cin, h, wd, kh, kw, *stride, *pad, ho, wo);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let db = slot!(*b);
                        for c in 0..cout {
                            let mut acc = 0.0;
                            for i in 0..ho * wo {
                                acc += dy[c * ho * wo + i];
                            }
                            db[c] += acc;
                        }
                    }
                }
            }
            Op::AvgPool2d { x, kh, kw, sh, sw } => {
                if self.needs(*x) {
                    let xsh = &self.nodes[x.idx()].shape;
                    let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
                    let (ho, wo) = (node.shape[1], node.shape[2]);
                    let inv = 1.0 / (kh * kw) as f64;
                    let dx = slot!(*x);
                    for ci in 0..c {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let d = dy[(ci * ho + oi) * wo + oj] * inv;
                                for i in 0..*kh {
                                    for j in 0..*kw {
                                        dx[(ci * h + oi * sh + i) * w + oj * sw + j] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t1(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        assert_eq!(g.data(loss), &[14.0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_value_and_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t1(&[0.0]));
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        assert_eq!(g.data(y), &[0.5]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t1(&[1.0, 2.0]));
        let unused = g.param(t1(&[5.0]));
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0]);
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_known_values_and_gradients() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let b = g.param(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap().with_grad());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[17.0, 39.0]);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        // dA = 1 . b^T per row, dB = A^T . 1
        assert_eq!(grads.get(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_operator() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap());
        let b = g.input(Tensor::new(&[2, 2], vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn conv1d_identity_kernel_preserves_signal() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap());
        let w = g.input(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv1d(x, w, None, 1, 1, 0, 1).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn conv1d_matches_direct_computation() {
        // x: 2 channels, kernel 2, stride 1, no pad
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 0.5, 1.5, 2.5, 3.5]).unwrap());
        let w = g.input(Tensor::new(&[1, 2, 2], vec![1.0, -1.0, 2.0, 0.5]).unwrap());
        let y = g.conv1d(x, w, None, 1, 1, 0, 1).unwrap();
        // y[t] = 1*x0[t] - 1*x0[t+1] + 2*x1[t] + 0.5*x1[t+1]
        let expect = [
            1.0 - 2.0 + 1.0 + 0.75,
            2.0 - 3.0 + 3.0 + 1.25,
            3.0 - 4.0 + 5.0 + 1.75,
        ];
        for (a, b) in g.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn depthwise_conv_groups_keep_channels_independent() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap());
        let w = g.input(Tensor::new(&[2, 1, 1], vec![2.0, 0.5]).unwrap());
        let y = g.conv1d(x, w, None, 1, 1, 0, 2).unwrap();
        assert_eq!(g.data(y), &[2.0, 4.0, 6.0, 5.0, 10.0, 15.0]);
    }

    #[test]
    fn dilated_conv_same_padding_keeps_length() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 10], vec![1.0; 10]).unwrap());
        let w = g.input(Tensor::new(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        for dilation in [1usize, 2, 4] {
            let y = g.conv1d(x, w, None, 1, dilation, dilation, 1).unwrap();
            assert_eq!(g.shape(y), &[1, 10], "dilation {dilation}");
        }
    }

    #[test]
    fn frame_then_overlap_add_doubles_interior_at_half_hop() {
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let f = g.frame(x, 4, 2).unwrap();
        assert_eq!(g.shape(f), &[2, 4]);
        let y = g.overlap_add(f, 2).unwrap();
        // interior samples covered by win/hop = 2 frames
        assert_eq!(g.data(y), &[1.0, 2.0, 6.0, 8.0, 5.0, 6.0]);
    }

    #[test]
    fn frame_rejects_short_input() {
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 2.0]));
        assert!(g.frame(x, 4, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mean_pool_matches() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        let d = g.data(s);
        for i in 0..2 {
            let row: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn global_ln_zero_mean_unit_var() {
        let mut g = Graph::new();
        let x = g.param(t1(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.global_ln(x, 1e-8).unwrap();
        let d = g.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 5.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softplus_matches_reference_and_is_stable() {
        let mut g = Graph::new();
        let x = g.param(t1(&[-40.0, -1.0, 0.0, 1.0, 40.0]));
        let y = g.softplus(x).unwrap();
        let d = g.data(y);
        for (i, &xi) in [-40.0f64, -1.0, 0.0, 1.0, 40.0].iter().enumerate() {
            let reference = if xi > 0.0 {
                xi + (-xi).exp().ln_1p()
            } else {
                xi.exp().ln_1p()
            };
            assert!((d[i] - reference).abs() < 1e-12, "x={xi}: {} vs {reference}", d[i]);
            assert!(d[i].is_finite() && d[i] >= 0.0);
        }
    }

    #[test]
    fn avg_pool_halves_each_dimension() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = g.avg_pool2d(x, 2, 2, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2]);
        assert_eq!(g.data(y), &[3.5, 5.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t1(&[1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(GradError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn log_rejects_nonpositive_input() {
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(GradError::Domain { .. })));
    }

    #[test]
    fn shared_operand_accumulates_both_paths() {
        // f(x) = x*x + x => f'(x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(t1(&[3.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0]);
    }
}
