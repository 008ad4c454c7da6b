use super::gemm::gemm;
use super::tensor::{numel, strides};
use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Ln(Var),
    Exp(Var),
    Pow {
        x: Var,
        exponent: f64,
    },
    ClampMin {
        x: Var,
        floor: f64,
    },
    /// `map[i]` is the output slot that input element `i` reduces into.
    Sum {
        x: Var,
        map: Vec<usize>,
    },
    Mean {
        x: Var,
        map: Vec<usize>,
        count: f64,
    },
    /// `argmax[j]` is the input element selected for output element `j`.
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Gap {
        x: Var,
        plane: usize,
    },
    /// `map[j]` is the input element broadcast into output element `j`.
    Broadcast {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Every primitive appends one node; node order is a valid topological
/// order, so the backward pass simply walks the nodes in reverse. A tape
/// supports exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t`; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, DiffError> {
        if numel(shape) != data.len() {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on non-scalar of shape {:?}", n.shape);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward root w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `target`'s grad buffer.
    pub fn accumulate_grad(&self, v: Var, target: &mut Tensor) -> Result<(), DiffError> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op,
                shapes: vec![self.shape(a).to_vec(), self.shape(b).to_vec()],
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, rg)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Ln(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), f64::exp)
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        self.map_unary(x, Op::Pow { x, exponent }, |v| v.powf(exponent))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.map_unary(x, Op::ClampMin { x, floor }, |v| v.max(floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Zero-padded 2-D cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kH, kW]` kernel and optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let mismatch = |extra: Option<Vec<usize>>| {
            let mut shapes = vec![si.clone(), sw.clone()];
            shapes.extend(extra);
            DiffError::ShapeMismatch { op: "conv2d", shapes }
        };
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] || stride == 0 {
            return Err(mismatch(None));
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch(None));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch(Some(self.shape(b).to_vec())));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (r, p) = (geom.rows(), geom.positions());
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(p).zip(self.value(b)) {
                row.fill(bv);
            }
        }
        gemm(cout, r, p, self.value(weight), (r, 1), &cols, (p, 1), &mut out, 1.0);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![cout, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let (out_shape, map) = reduction_map("sum", self.shape(x), axes)?;
        let mut out = vec![0.0; numel(&out_shape)];
        for (&v, &m) in self.value(x).iter().zip(&map) {
            out[m] += v;
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Sum { x, map }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes).expect("all axes are valid")
    }

    /// Mean over `axes`, removing them from the shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let (out_shape, map) = reduction_map("mean", self.shape(x), axes)?;
        let out_len = numel(&out_shape);
        let count = (self.value(x).len() / out_len.max(1)) as f64;
        let mut out = vec![0.0; out_len];
        for (&v, &m) in self.value(x).iter().zip(&map) {
            out[m] += v;
        }
        out.iter_mut().for_each(|v| *v /= count);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Mean { x, map, count }, rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes).expect("all axes are valid")
    }

    /// Maximum along `axis`, removing it. Ties route the gradient to the first maximum.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("max", &shape, axis)?;
        if len == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "max",
                shapes: vec![shape],
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for j in 1..len {
                    let at = (o * len + j) * inner + i;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Max { x, argmax }, rg))
    }

    /// Spatial mean over the trailing two axes: `[.., H, W] -> [..]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] * shape[shape.len() - 1] == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "global_avg_pool",
                shapes: vec![shape],
            });
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let out = self
            .value(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(shape[..shape.len() - 2].to_vec(), out, Op::Gap { x, plane }, rg))
    }

    /// Right-aligned broadcast of `x` to `target`; extents must match or be 1.
    pub fn broadcast(&mut self, x: Var, target: &[usize]) -> Result<Var, DiffError> {
        let src_shape = self.shape(x).to_vec();
        let err = || DiffError::ShapeMismatch {
            op: "broadcast",
            shapes: vec![src_shape.clone(), target.to_vec()],
        };
        if src_shape.len() > target.len() {
            return Err(err());
        }
        let offset = target.len() - src_shape.len();
        let src_strides = strides(&src_shape);
        let mut eff = vec![0usize; target.len()];
        for (i, &ext) in src_shape.iter().enumerate() {
            let t = target[offset + i];
            if ext == t {
                eff[offset + i] = src_strides[i];
            } else if ext != 1 {
                return Err(err());
            }
        }
        let map = strided_indices(target, &eff);
        let src = self.value(x);
        let out = map.iter().map(|&m| src[m]).collect();
        let rg = self.rg(x);
        Ok(self.push(target.to_vec(), out, Op::Broadcast { x, map }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        if numel(shape) != self.value(x).len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape(x).to_vec(), shape.to_vec()],
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = inputs.first().ok_or(DiffError::ShapeMismatch {
            op: "concat",
            shapes: vec![],
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let compatible = inputs.iter().all(|&v| {
            let s = self.shape(v);
            s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b)
        });
        if !compatible {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                shapes: inputs.iter().map(|&v| self.shape(v).to_vec()).collect(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `root`. Gradients accumulate
    /// additively over every path and stay readable through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let root_node = self.node(root);
        if root_node.value.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_node.shape.clone(),
            });
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize), DiffError> {
    if axis >= shape.len() {
        return Err(DiffError::InvalidAxis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// For every element of `shape` in row-major order, the flat offset under `eff` strides.
fn strided_indices(shape: &[usize], eff: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn reduction_map(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>), DiffError> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduced[a] {
            return Err(DiffError::InvalidAxis {
                op,
                axis: a,
                rank: shape.len(),
            });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&e, _)| e)
        .collect();
    let out_strides = strides(&out_shape);
    let mut eff = vec![0usize; shape.len()];
    let mut k = 0;
    for d in 0..shape.len() {
        if !reduced[d] {
            eff[d] = out_strides[k];
            k += 1;
        }
    }
    Ok((out_shape, strided_indices(shape, &eff)))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.rows() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-initialised gradient slot for `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(nodes, grads, v) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), o) in s.iter_mut().zip(g).zip(vb) {
                    *s += g * o;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, g), o) in s.iter_mut().zip(g).zip(va) {
                    *s += g * o;
                }
            }
        }
        Op::Scale(x, k) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k);
            }
        }
        Op::AddScalar(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                gemm(m, n, k, g, (n, 1), vb, (1, n), s, 1.0);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                gemm(k, m, n, va, (1, k), g, (n, 1), s, 1.0);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (r, p, co) = (geom.rows(), geom.positions(), geom.cout);
            if let Some(s) = slot(nodes, grads, *weight) {
                gemm(co, p, r, g, (p, 1), cols, (1, p), s, 1.0);
            }
            if let Some(b) = bias {
                if let Some(s) = slot(nodes, grads, *b) {
                    for (s, row) in s.iter_mut().zip(g.chunks(p)) {
                        *s += row.iter().sum::<f64>();
                    }
                }
            }
            if nodes[input.0].requires_grad {
                let mut dcols = vec![0.0; r * p];
                gemm(r, co, p, val(*weight), (1, r), g, (p, 1), &mut dcols, 0.0);
                let s = slot(nodes, grads, *input).expect("input requires grad");
                col2im_add(&dcols, geom, s);
            }
        }
        Op::Relu(x) => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &xv) in s.iter_mut().zip(g).zip(vx) {
                    if xv > 0.0 {
                        *s += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &yv) in s.iter_mut().zip(g).zip(y) {
                    *s += g * yv * (1.0 - yv);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis("softmax", &node.shape, *axis).expect("validated on forward");
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Ln(x) => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &xv) in s.iter_mut().zip(g).zip(vx) {
                    *s += g / xv;
                }
            }
        }
        Op::Exp(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &yv) in s.iter_mut().zip(g).zip(y) {
                    *s += g * yv;
                }
            }
        }
        Op::Pow { x, exponent } => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &xv) in s.iter_mut().zip(g).zip(vx) {
                    *s += g * exponent * xv.powf(exponent - 1.0);
                }
            }
        }
        Op::ClampMin { x, floor } => {
            let vx = val(*x);
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), &xv) in s.iter_mut().zip(g).zip(vx) {
                    if xv > *floor {
                        *s += g;
                    }
                }
            }
        }
        Op::Sum { x, map } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (s, &m) in s.iter_mut().zip(map) {
                    *s += g[m];
                }
            }
        }
        Op::Mean { x, map, count } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (s, &m) in s.iter_mut().zip(map) {
                    *s += g[m] / count;
                }
            }
        }
        Op::Max { x, argmax } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (&src, g) in argmax.iter().zip(g) {
                    s[src] += g;
                }
            }
        }
        Op::Gap { x, plane } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let scale = 1.0 / *plane as f64;
                for (chunk, g) in s.chunks_mut(*plane).zip(g) {
                    chunk.iter_mut().for_each(|v| *v += g * scale);
                }
            }
        }
        Op::Broadcast { x, map } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (&m, g) in map.iter().zip(g) {
                    s[m] += g;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let row = node.shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = nodes[v.0].shape[*axis] * inner;
                if let Some(s) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        s[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                }
                offset += chunk;
            }
        }
    }
}
