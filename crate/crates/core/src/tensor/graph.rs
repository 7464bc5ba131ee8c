use std::sync::Arc;

use super::scalar::{matmul, MatRef, Scalar};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

const STD_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map along the flattened spatial axis: output position
/// `j` is `sum(weight * input[src])` over its entries (CSR layout).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    pub offsets: Vec<usize>,
    pub src: Vec<u32>,
    pub weight: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[j]..self.offsets[j + 1];
        self.src[r.clone()]
            .iter()
            .zip(&self.weight[r])
            .map(|(&s, &w)| (s as usize, w))
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Maximum { a: Var, b: Var, a_wins: Vec<bool> },
    Reshape(Var),
    Gather { src: Var, index: Arc<[u32]> },
    Concat(Vec<Var>),
    Conv2d { input: Var, kernel: Var, geo: ConvGeometry, cols: Vec<T> },
    SymConv2d { input: Var, kernel: Var, geo: ConvGeometry, cols: Vec<T>, a_wins: Vec<bool> },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Pointwise { input: Var, weight: Var, bias: Option<Var> },
    AxisMax { input: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    InstanceStd { input: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SparseMix { input: Var, map: Arc<SparseMap<T>> },
    Sum(Var),
    Mean(Var),
    SixdToMatrix { input: Var, frame: SixdFrame<T> },
    ConstMatMul { x: Var, m: Vec<T>, rows: usize },
    Distance { input: Var, target: Vec<T> },
    Focal { input: Var, labels: Vec<bool>, alpha: T, gamma: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Maximum { .. } => "maximum",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::Conv2d { .. } => "conv2d_valid",
            Op::SymConv2d { .. } => "sym_conv2d",
            Op::Linear { .. } => "linear",
            Op::Pointwise { .. } => "pointwise",
            Op::AxisMax { .. } => "axis_max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::InstanceStd { .. } => "instance_standardize",
            Op::SparseMix { .. } => "sparse_mix",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SixdToMatrix { .. } => "sixd_to_matrix",
            Op::ConstMatMul { .. } => "const_matmul",
            Op::Distance { .. } => "distance",
            Op::Focal { .. } => "focal",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

struct SixdFrame<T> {
    norm_a: T,
    norm_r: T,
    c1: [T; 3],
    c2: [T; 3],
    b: [T; 3],
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`] for the leaf nodes.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Per-sample differentiation tape. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid reverse topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("{op}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn flip_index(r: usize, k: usize) -> usize {
    let kj = r % k;
    r - kj + (k - 1 - kj)
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let l = g.positions();
    let mut cols = vec![T::zero(); g.patch() * l];
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let src_row = &plane[(oy * g.stride + ki) * g.w..];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        out.copy_from_slice(&src_row[kj..kj + g.ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src_row[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let l = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let base = (oy * g.stride + ki) * g.w + kj;
                    for ox in 0..g.ow {
                        plane[base + ox * g.stride] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

fn conv_geometry(input: &[usize], kernel: &[usize], stride: usize) -> Result<ConvGeometry> {
    if input.len() != 3 || kernel.len() != 4 {
        return invalid(format!(
            "conv2d expects C×H×W input and Cout×Cin×K×K kernel, got {input:?} and {kernel:?}"
        ));
    }
    let (c_in, h, w) = (input[0], input[1], input[2]);
    let (c_out, kc, k) = (kernel[0], kernel[1], kernel[2]);
    if kernel[3] != k || k % 2 == 0 {
        return invalid(format!("conv2d kernel must be square with odd size, got {kernel:?}"));
    }
    if kc != c_in {
        return invalid(format!("conv2d kernel expects {kc} input channels, input has {c_in}"));
    }
    if stride == 0 {
        return invalid("conv2d stride must be at least 1");
    }
    if h < k || w < k {
        return invalid(format!("conv2d kernel {k}×{k} larger than input {h}×{w}"));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        k,
        stride,
        oh: (h - k) / stride + 1,
        ow: (w - k) / stride + 1,
    })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn focal_bounds<T: Scalar>() -> (T, T) {
    (T::from_f64(1e-7), T::one() - T::from_f64(1e-7))
}

/// Probability of the true class after clamping, and whether the clamp was
/// active.
fn focal_target_prob<T: Scalar>(y: T, label: bool) -> (T, bool) {
    let (lo, hi) = focal_bounds::<T>();
    let clamped = y < lo || y > hi;
    let yc = y.max(lo).min(hi);
    (if label { yc } else { T::one() - yc }, clamped)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Leaf node holding `t`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf node bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.tensor(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Error naming the first node (in evaluation order) whose value is not
    /// finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pos) = node.value.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "node {i} ({}) shape {:?} entry {pos} = {}",
                    node.op.name(),
                    node.value.shape(),
                    node.value.data()[pos]
                )));
            }
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(self.value(a), self.value(b), name)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties select `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "maximum")?;
        let a_wins: Vec<bool> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x >= y).collect();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .zip(&a_wins)
            .map(|((&x, &y), &w)| if w { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Maximum { a, b, a_wins }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return invalid(format!("reshape {:?} to {shape:?}", self.shape(a)));
        }
        let t = Tensor::from_parts(shape.to_vec(), self.data(a).to_vec());
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// `out[i] = src[index[i]]` with output shape `shape`.
    pub fn gather(&mut self, src: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return invalid(format!("gather: {} indices for shape {shape:?}", index.len()));
        }
        let s = self.data(src);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= s.len()) {
            return invalid(format!("gather index {bad} out of range {}", s.len()));
        }
        let data = index.iter().map(|&i| s[i as usize]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { src, index }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return invalid(format!("concat: shape {s:?} incompatible with trailing {tail:?}"));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Valid (unpadded) cross-correlation of a `C_in×H×W` input with a
    /// `C_out×C_in×K×K` kernel.
    pub fn conv2d_valid(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geo = conv_geometry(self.shape(input), self.shape(kernel), stride)?;
        let cols = im2col(self.data(input), &geo);
        let mut out = vec![T::zero(); geo.c_out * geo.positions()];
        matmul(
            MatRef::new(self.data(kernel), geo.c_out, geo.patch()),
            MatRef::new(&cols, geo.patch(), geo.positions()),
            &mut out,
            false,
        );
        let t = Tensor::from_parts(vec![geo.c_out, geo.oh, geo.ow], out);
        Ok(self.push(t, Op::Conv2d { input, kernel, geo, cols }))
    }

    /// `max(conv(input, kernel), conv(input, flip(kernel)))` in one pass,
    /// where `flip` reverses the kernel's last axis; ties select the
    /// unflipped kernel.
    pub fn sym_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geo = conv_geometry(self.shape(input), self.shape(kernel), stride)?;
        let cols = im2col(self.data(input), &geo);
        let stacked = stacked_kernels(self.data(kernel), &geo);
        let l = geo.positions();
        let mut both = vec![T::zero(); 2 * geo.c_out * l];
        matmul(
            MatRef::new(&stacked, 2 * geo.c_out, geo.patch()),
            MatRef::new(&cols, geo.patch(), l),
            &mut both,
            false,
        );
        let (plain, flipped) = both.split_at(geo.c_out * l);
        let a_wins: Vec<bool> = plain.iter().zip(flipped).map(|(a, b)| a >= b).collect();
        let out = plain.iter().zip(flipped).map(|(&a, &b)| if a >= b { a } else { b }).collect();
        let t = Tensor::from_parts(vec![geo.c_out, geo.oh, geo.ow], out);
        Ok(self.push(t, Op::SymConv2d { input, kernel, geo, cols, a_wins }))
    }

    /// Affine map along the trailing axis: `...×C_in → ...×C_out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(input).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return invalid(format!("linear: input {xs:?} vs weight {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return invalid(format!("linear: bias {:?} vs {} outputs", self.shape(b), ws[0]));
            }
        }
        let rows = self.value(input).len() / ws[1];
        let mut out = vec![T::zero(); rows * ws[0]];
        if let Some(b) = bias {
            for row in out.chunks_mut(ws[0]) {
                row.copy_from_slice(self.data(b));
            }
        }
        matmul(
            MatRef::new(self.data(input), rows, ws[1]),
            MatRef::new(self.data(weight), ws[0], ws[1]).t(),
            &mut out,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = ws[0];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { input, weight, bias }))
    }

    /// Affine map along the leading (channel) axis: `C_in×... → C_out×...`.
    pub fn pointwise(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(input).to_vec();
        if ws.len() != 2 || xs.first() != Some(&ws[1]) {
            return invalid(format!("pointwise: input {xs:?} vs weight {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return invalid(format!("pointwise: bias {:?} vs {} outputs", self.shape(b), ws[0]));
            }
        }
        let l = self.value(input).len() / ws[1];
        let mut out = vec![T::zero(); ws[0] * l];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(l).zip(self.data(b)) {
                row.fill(bv);
            }
        }
        matmul(
            MatRef::new(self.data(weight), ws[0], ws[1]),
            MatRef::new(self.data(input), ws[1], l),
            &mut out,
            true,
        );
        let mut shape = xs;
        shape[0] = ws[0];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Pointwise { input, weight, bias }))
    }

    /// Maximum over one axis; ties select the lowest index.
    pub fn axis_max_pool(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return invalid(format!("axis_max_pool: axis {axis} of shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(input);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for a in 1..len {
                    let idx = base + a * inner;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::AxisMax { input, argmax }))
    }

    /// Mean over all but the leading axis: `C×... → C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return invalid(format!("global_avg_pool: shape {shape:?}"));
        }
        let c = shape[0];
        let l = self.value(input).len() / c;
        let inv = T::from_f64(1.0 / l as f64);
        let out = self.data(input).chunks(l).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(input)))
    }

    /// Per-channel spatial standardization followed by a per-channel affine.
    pub fn instance_standardize(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let c = *shape.first().unwrap_or(&0);
        if shape.len() < 2 || self.shape(scale) != [c] || self.shape(shift) != [c] {
            return invalid(format!(
                "instance_standardize: input {shape:?}, scale {:?}, shift {:?}",
                self.shape(scale),
                self.shape(shift)
            ));
        }
        let l = self.value(input).len() / c;
        if l < 2 {
            return invalid("instance_standardize needs at least two positions per channel");
        }
        let n = T::from_f64(l as f64);
        let eps = T::from_f64(STD_EPS);
        let mut xhat = Vec::with_capacity(c * l);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * l);
        for (ci, ch) in self.data(input).chunks(l).enumerate() {
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let (g, b) = (self.data(scale)[ci], self.data(shift)[ci]);
            for &x in ch {
                let xh = (x - mean) * inv;
                xhat.push(xh);
                out.push(g * xh + b);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::InstanceStd { input, scale, shift, xhat, inv_std },
        ))
    }

    /// Applies a [`SparseMap`] to every channel of a `C×...` input.
    pub fn sparse_mix(&mut self, input: Var, map: Arc<SparseMap<T>>) -> Result<Var> {
        let shape = self.shape(input);
        let c = *shape.first().unwrap_or(&0);
        if shape.len() < 2 || self.value(input).len() != c * map.in_len {
            return invalid(format!("sparse_mix: input {shape:?} vs map input length {}", map.in_len));
        }
        let out_len = map.out_len();
        let mut out = vec![T::zero(); c * out_len];
        for (src, dst) in self.data(input).chunks(map.in_len).zip(out.chunks_mut(out_len)) {
            for (j, o) in dst.iter_mut().enumerate() {
                *o = map.row(j).map(|(s, w)| w * src[s]).sum();
            }
        }
        let mut out_shape = vec![c];
        out_shape.extend_from_slice(&map.out_shape);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SparseMix { input, map }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.data(a).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Gram–Schmidt of a 6-vector into a row-major `3×3` rotation matrix.
    pub fn sixd_to_matrix(&mut self, input: Var) -> Result<Var> {
        let d = self.data(input);
        if d.len() != 6 {
            return invalid(format!("sixd_to_matrix: {} values", d.len()));
        }
        let d64: [f64; 6] = std::array::from_fn(|i| d[i].as_f64());
        // Validation and degeneracy diagnostics live in the geometry version.
        crate::geometry::sixd_to_rotation(&d64)?;
        let a = [d[0], d[1], d[2]];
        let b = [d[3], d[4], d[5]];
        let norm_a = dot3(&a, &a).sqrt();
        let c1 = a.map(|x| x / norm_a);
        let p = dot3(&c1, &b);
        let r: [T; 3] = std::array::from_fn(|i| b[i] - p * c1[i]);
        let norm_r = dot3(&r, &r).sqrt();
        let c2 = r.map(|x| x / norm_r);
        let c3 = cross3(&c1, &c2);
        let mut m = vec![T::zero(); 9];
        for i in 0..3 {
            m[i * 3] = c1[i];
            m[i * 3 + 1] = c2[i];
            m[i * 3 + 2] = c3[i];
        }
        let frame = SixdFrame { norm_a, norm_r, c1, c2, b };
        Ok(self.push(Tensor::from_parts(vec![3, 3], m), Op::SixdToMatrix { input, frame }))
    }

    /// `m · x` for a constant row-major `rows×k` matrix and a `k×n` node.
    pub fn const_matmul(&mut self, m: &[T], rows: usize, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || rows == 0 || m.len() != rows * xs[0] {
            return invalid(format!("const_matmul: {} entries / {rows} rows vs {xs:?}", m.len()));
        }
        let mut out = vec![T::zero(); rows * xs[1]];
        matmul(MatRef::new(m, rows, xs[0]), MatRef::new(self.data(x), xs[0], xs[1]), &mut out, false);
        Ok(self.push(
            Tensor::from_parts(vec![rows, xs[1]], out),
            Op::ConstMatMul { x, m: m.to_vec(), rows },
        ))
    }

    /// Euclidean (Frobenius) distance to a constant target.
    pub fn distance(&mut self, input: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(input).len() {
            return invalid(format!("distance: {} vs {} entries", self.value(input).len(), target.len()));
        }
        let d = self
            .data(input)
            .iter()
            .zip(target)
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum::<T>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Distance { input, target: target.to_vec() }))
    }

    /// Mean focal loss of per-entry probabilities against binary labels.
    pub fn focal(&mut self, input: Var, labels: &[bool], alpha: f64, gamma: f64) -> Result<Var> {
        let n = self.value(input).len();
        if labels.len() != n || n == 0 {
            return invalid(format!("focal: {n} probabilities vs {} labels", labels.len()));
        }
        let (alpha, gamma) = (T::from_f64(alpha), T::from_f64(gamma));
        let total: T = self
            .data(input)
            .iter()
            .zip(labels)
            .map(|(&y, &l)| {
                let (yt, _) = focal_target_prob(y, l);
                -alpha * (T::one() - yt).powf(gamma) * yt.ln()
            })
            .sum();
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal { input, labels: labels.to_vec(), alpha, gamma },
        ))
    }

    /// Reverse-mode sweep from a single-element root.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return invalid(format!("backward from non-scalar shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
        }
        Ok(Grads { grads })
    }

    /// Adds parameter gradients from `grads` into `out` (indexed by parameter).
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, out: &mut [Vec<T>]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                for (o, &x) in out[id.index()].iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(acc(grads, self, *a), gout);
                add_into(acc(grads, self, *b), gout);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, self, *a), gout);
                for (g, &d) in acc(grads, self, *b).iter_mut().zip(gout) {
                    *g -= d;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                for ((g, &d), &y) in acc(grads, self, *a).iter_mut().zip(gout).zip(bv) {
                    *g += d * y;
                }
                for ((g, &d), &x) in acc(grads, self, *b).iter_mut().zip(gout).zip(av) {
                    *g += d * x;
                }
            }
            Op::Scale(a, c) => {
                for (g, &d) in acc(grads, self, *a).iter_mut().zip(gout) {
                    *g += d * *c;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                for ((g, &d), &xv) in acc(grads, self, *a).iter_mut().zip(gout).zip(x) {
                    if xv > T::zero() {
                        *g += d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                for ((g, &d), &yv) in acc(grads, self, *a).iter_mut().zip(gout).zip(y) {
                    *g += d * yv * (T::one() - yv);
                }
            }
            Op::Maximum { a, b, a_wins } => {
                for ((g, &d), &w) in acc(grads, self, *a).iter_mut().zip(gout).zip(a_wins) {
                    if w {
                        *g += d;
                    }
                }
                for ((g, &d), &w) in acc(grads, self, *b).iter_mut().zip(gout).zip(a_wins) {
                    if !w {
                        *g += d;
                    }
                }
            }
            Op::Reshape(a) => add_into(acc(grads, self, *a), gout),
            Op::Gather { src, index } => {
                let g = acc(grads, self, *src);
                for (&ix, &d) in index.iter().zip(gout) {
                    g[ix as usize] += d;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(acc(grads, self, p), &gout[off..off + n]);
                    off += n;
                }
            }
            Op::Conv2d { input, kernel, geo, cols } => {
                let (p, l) = (geo.patch(), geo.positions());
                matmul(
                    MatRef::new(gout, geo.c_out, l),
                    MatRef::new(cols, p, l).t(),
                    acc(grads, self, *kernel),
                    true,
                );
                let mut dcols = vec![T::zero(); p * l];
                matmul(
                    MatRef::new(self.data(*kernel), geo.c_out, p).t(),
                    MatRef::new(gout, geo.c_out, l),
                    &mut dcols,
                    false,
                );
                col2im(&dcols, geo, acc(grads, self, *input));
            }
            Op::SymConv2d { input, kernel, geo, cols, a_wins } => {
                let (p, l, co) = (geo.patch(), geo.positions(), geo.c_out);
                let mut dboth = vec![T::zero(); 2 * co * l];
                {
                    let (dplain, dflip) = dboth.split_at_mut(co * l);
                    for (j, (&d, &w)) in gout.iter().zip(a_wins).enumerate() {
                        if w {
                            dplain[j] = d;
                        } else {
                            dflip[j] = d;
                        }
                    }
                }
                let mut dstacked = vec![T::zero(); 2 * co * p];
                matmul(
                    MatRef::new(&dboth, 2 * co, l),
                    MatRef::new(cols, p, l).t(),
                    &mut dstacked,
                    false,
                );
                let dk = acc(grads, self, *kernel);
                for o in 0..co {
                    for r in 0..p {
                        dk[o * p + r] += dstacked[o * p + r] + dstacked[(co + o) * p + flip_index(r, geo.k)];
                    }
                }
                let stacked = stacked_kernels(self.data(*kernel), geo);
                let mut dcols = vec![T::zero(); p * l];
                matmul(
                    MatRef::new(&stacked, 2 * co, p).t(),
                    MatRef::new(&dboth, 2 * co, l),
                    &mut dcols,
                    false,
                );
                col2im(&dcols, geo, acc(grads, self, *input));
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (co, ci) = (ws[0], ws[1]);
                let rows = gout.len() / co;
                matmul(
                    MatRef::new(gout, rows, co),
                    MatRef::new(self.data(*weight), co, ci),
                    acc(grads, self, *input),
                    true,
                );
                matmul(
                    MatRef::new(gout, rows, co).t(),
                    MatRef::new(self.data(*input), rows, ci),
                    acc(grads, self, *weight),
                    true,
                );
                if let Some(b) = bias {
                    let gb = acc(grads, self, *b);
                    for row in gout.chunks(co) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Pointwise { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (co, ci) = (ws[0], ws[1]);
                let l = gout.len() / co;
                matmul(
                    MatRef::new(self.data(*weight), co, ci).t(),
                    MatRef::new(gout, co, l),
                    acc(grads, self, *input),
                    true,
                );
                matmul(
                    MatRef::new(gout, co, l),
                    MatRef::new(self.data(*input), ci, l).t(),
                    acc(grads, self, *weight),
                    true,
                );
                if let Some(b) = bias {
                    for (g, row) in acc(grads, self, *b).iter_mut().zip(gout.chunks(l)) {
                        *g += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::AxisMax { input, argmax } => {
                let g = acc(grads, self, *input);
                for (&ix, &d) in argmax.iter().zip(gout) {
                    g[ix as usize] += d;
                }
            }
            Op::GlobalAvgPool(a) => {
                let c = gout.len();
                let l = self.value(*a).len() / c;
                let inv = T::from_f64(1.0 / l as f64);
                for (ch, &d) in acc(grads, self, *a).chunks_mut(l).zip(gout) {
                    for g in ch {
                        *g += d * inv;
                    }
                }
            }
            Op::InstanceStd { input, scale, shift, xhat, inv_std } => {
                let c = inv_std.len();
                let l = gout.len() / c;
                let n = T::from_f64(l as f64);
                let gamma = self.data(*scale);
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); c * l];
                for ci in 0..c {
                    let r = ci * l..(ci + 1) * l;
                    let (dy, xh) = (&gout[r.clone()], &xhat[r.clone()]);
                    let sum_dy: T = dy.iter().copied().sum();
                    let sum_dy_xh: T = dy.iter().zip(xh).map(|(&d, &x)| d * x).sum();
                    dscale[ci] = sum_dy_xh;
                    dshift[ci] = sum_dy;
                    let k = gamma[ci] * inv_std[ci] / n;
                    for ((o, &d), &x) in dx[r].iter_mut().zip(dy).zip(xh) {
                        *o = k * (n * d - sum_dy - x * sum_dy_xh);
                    }
                }
                add_into(acc(grads, self, *input), &dx);
                add_into(acc(grads, self, *scale), &dscale);
                add_into(acc(grads, self, *shift), &dshift);
            }
            Op::SparseMix { input, map } => {
                let out_len = map.out_len();
                let g = acc(grads, self, *input);
                for (dst, src) in g.chunks_mut(map.in_len).zip(gout.chunks(out_len)) {
                    for (j, &d) in src.iter().enumerate() {
                        for (s, w) in map.row(j) {
                            dst[s] += w * d;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let d = gout[0];
                for g in acc(grads, self, *a) {
                    *g += d;
                }
            }
            Op::Mean(a) => {
                let g = acc(grads, self, *a);
                let d = gout[0] / T::from_f64(g.len() as f64);
                for x in g {
                    *x += d;
                }
            }
            Op::SixdToMatrix { input, frame } => {
                let gcol = |j: usize| -> [T; 3] { std::array::from_fn(|i| gout[i * 3 + j]) };
                let (g1, g2, g3) = (gcol(0), gcol(1), gcol(2));
                let SixdFrame { norm_a, norm_r, c1, c2, b } = frame;
                // c3 = c1 × c2
                let mut dc1 = add3(&g1, &cross3(c2, &g3));
                let dc2 = add3(&g2, &cross3(&g3, c1));
                // c2 = r / |r|
                let p2 = dot3(c2, &dc2);
                let dr: [T; 3] = std::array::from_fn(|i| (dc2[i] - p2 * c2[i]) / *norm_r);
                // r = b − (c1·b) c1
                let c1b = dot3(c1, b);
                let c1dr = dot3(c1, &dr);
                let db: [T; 3] = std::array::from_fn(|i| dr[i] - c1dr * c1[i]);
                for i in 0..3 {
                    dc1[i] -= c1dr * b[i] + c1b * dr[i];
                }
                // c1 = a / |a|
                let p1 = dot3(c1, &dc1);
                let da: [T; 3] = std::array::from_fn(|i| (dc1[i] - p1 * c1[i]) / *norm_a);
                let g = acc(grads, self, *input);
                for i in 0..3 {
                    g[i] += da[i];
                    g[3 + i] += db[i];
                }
            }
            Op::ConstMatMul { x, m, rows } => {
                let xs = self.shape(*x);
                matmul(
                    MatRef::new(m, *rows, xs[0]).t(),
                    MatRef::new(gout, *rows, xs[1]),
                    acc(grads, self, *x),
                    true,
                );
            }
            Op::Distance { input, target } => {
                let d = node.value.data()[0];
                if d > T::zero() {
                    let k = gout[0] / d;
                    let x = self.data(*input);
                    for ((g, &xv), &t) in acc(grads, self, *input).iter_mut().zip(x).zip(target) {
                        *g += k * (xv - t);
                    }
                }
            }
            Op::Focal { input, labels, alpha, gamma } => {
                let y = self.data(*input);
                let scale = gout[0] / T::from_f64(y.len() as f64);
                let g = acc(grads, self, *input);
                for ((gi, &yv), &l) in g.iter_mut().zip(y).zip(labels) {
                    let (yt, clamped) = focal_target_prob(yv, l);
                    if clamped {
                        continue;
                    }
                    let one_m = T::one() - yt;
                    // d/dyt of −α(1−yt)^γ ln(yt)
                    let mut d = -*alpha * one_m.powf(*gamma) / yt;
                    if *gamma != T::zero() {
                        d += *alpha * *gamma * one_m.powf(*gamma - T::one()) * yt.ln();
                    }
                    *gi += if l { d * scale } else { -d * scale };
                }
            }
        }
    }
}

fn stacked_kernels<T: Scalar>(kernel: &[T], geo: &ConvGeometry) -> Vec<T> {
    let p = geo.patch();
    let mut stacked = Vec::with_capacity(2 * geo.c_out * p);
    stacked.extend_from_slice(kernel);
    for o in 0..geo.c_out {
        let row = &kernel[o * p..(o + 1) * p];
        stacked.extend((0..p).map(|r| row[flip_index(r, geo.k)]));
    }
    stacked
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], graph: &Graph<T>, v: Var) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); graph.nodes[v.0].value.len()])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn cross3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
