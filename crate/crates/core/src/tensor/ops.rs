//! Differentiable operations recorded on a [`Tape`].

use super::gemm::gemm;
use super::tape::{accumulate, grad_slot, Node, Tape, Var};
use super::{axis_split, Tensor};
use crate::error::{shape_err, Error, Result};

/// Stabilizer added to vector norms in gradient formulas.
pub const NORM_EPS: f64 = 1e-8;

/// Which operand of a binary op is a broadcast scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Softmax(usize, usize),
    Reshape(usize),
    Rows(usize, usize),
    Conv2d(usize, usize, usize, ConvGeom),
    MaxPool2d(usize, Vec<usize>),
    ChannelsLast(usize),
    Squash(usize),
    CapsulePredict(usize, usize),
    RouteSum(usize, usize),
    Agreement(usize, usize),
    PairDistance(usize, usize),
    SoftmaxNll(usize, Vec<usize>, Vec<f64>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Softmax(..) => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Rows(..) => "rows",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2d(..) => "maxpool2d",
            Op::ChannelsLast(..) => "channels_last",
            Op::Squash(..) => "squash",
            Op::CapsulePredict(..) => "capsule_predict",
            Op::RouteSum(..) => "route_sum",
            Op::Agreement(..) => "agreement",
            Op::PairDistance(..) => "pair_distance",
            Op::SoftmaxNll(..) => "softmax_nll",
        }
    }

    /// Propagates the output gradient `g` of a node with value `out` into
    /// the gradient slots of its inputs.
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |i: usize| nodes[i].value.data();
        match *self {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                binary_back(nodes, grads, a, b, bc, g, |_, _| (1.0, 1.0));
            }
            Op::Sub(a, b, bc) => {
                binary_back(nodes, grads, a, b, bc, g, |_, _| (1.0, -1.0));
            }
            Op::Mul(a, b, bc) => {
                binary_back(nodes, grads, a, b, bc, g, |x, y| (y, x));
            }
            Op::Scale(x, c) => {
                accumulate(nodes, grads, x, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) => accumulate(nodes, grads, x, g.to_vec()),
            Op::Relu(x) => {
                let d = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(nodes, grads, x, d);
            }
            Op::LeakyRelu(x, a) => {
                let d = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { a * gv })
                    .collect();
                accumulate(nodes, grads, x, d);
            }
            Op::Square(x) => {
                let d = val(x).iter().zip(g).map(|(&v, &gv)| 2.0 * v * gv).collect();
                accumulate(nodes, grads, x, d);
            }
            Op::Sqrt(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| 0.5 * gv / y)
                    .collect();
                accumulate(nodes, grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| y * (1.0 - y) * gv)
                    .collect();
                accumulate(nodes, grads, x, d);
            }
            Op::Sum(x) => {
                accumulate(nodes, grads, x, vec![g[0]; nodes[x].value.numel()]);
            }
            Op::Mean(x) => {
                let n = nodes[x].value.numel();
                accumulate(nodes, grads, x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(nodes[x].value.shape(), axis).unwrap();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                if let Some(da) = grad_slot(nodes, grads, a) {
                    gemm(false, true, m, k, n, 1.0, g, &bv, 1.0, da);
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    gemm(true, false, k, n, m, 1.0, &av, g, 1.0, db);
                }
            }
            Op::AddBias(x, b) => {
                accumulate(nodes, grads, x, g.to_vec());
                let f = nodes[b].value.numel();
                if let Some(db) = grad_slot(nodes, grads, b) {
                    for row in g.chunks(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), axis).unwrap();
                let y = out.data();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => accumulate(nodes, grads, x, g.to_vec()),
            Op::Rows(x, start) => {
                let stride: usize = nodes[x].value.shape()[1..].iter().product();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (d, v) in dx[start * stride..].iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Conv2d(x, w, b, geom) => conv2d_backward(nodes, grads, x, w, b, &geom, g),
            Op::MaxPool2d(x, ref argmax) => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::ChannelsLast(x) => {
                let s = nodes[x].value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ni in 0..n {
                        for p in 0..hw {
                            for ci in 0..c {
                                dx[(ni * c + ci) * hw + p] += g[(ni * hw + p) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::Squash(x) => {
                let d = *nodes[x].value.shape().last().unwrap();
                let xv = val(x);
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((gx, gg), dd) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let n2: f64 = gx.iter().map(|v| v * v).sum();
                        let n = n2.sqrt();
                        let s = n / (1.0 + n2);
                        let ds = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                        let dot: f64 = gx.iter().zip(gg).map(|(a, b)| a * b).sum();
                        let coef = ds / (n + NORM_EPS) * dot;
                        for k in 0..d {
                            dd[k] += s * gg[k] + coef * gx[k];
                        }
                    }
                }
            }
            Op::CapsulePredict(u, w) => {
                let ws = nodes[w].value.shape();
                let (np, j, d, p) = (ws[0], ws[1], ws[2], ws[3]);
                let bsz = nodes[u].value.shape()[0];
                let (uv, wv) = (val(u).to_vec(), val(w).to_vec());
                if let Some(dw) = grad_slot(nodes, grads, w) {
                    for b in 0..bsz {
                        for i in 0..np {
                            let ui = &uv[(b * np + i) * p..][..p];
                            for jd in 0..j * d {
                                let gv = g[(b * np + i) * j * d + jd];
                                let row = &mut dw[(i * j * d + jd) * p..][..p];
                                for l in 0..p {
                                    row[l] += gv * ui[l];
                                }
                            }
                        }
                    }
                }
                if let Some(du) = grad_slot(nodes, grads, u) {
                    for b in 0..bsz {
                        for i in 0..np {
                            let dui = &mut du[(b * np + i) * p..][..p];
                            for jd in 0..j * d {
                                let gv = g[(b * np + i) * j * d + jd];
                                let row = &wv[(i * j * d + jd) * p..][..p];
                                for l in 0..p {
                                    dui[l] += gv * row[l];
                                }
                            }
                        }
                    }
                }
            }
            Op::RouteSum(c, u) => {
                let us = nodes[u].value.shape();
                let (bsz, np, j, d) = (us[0], us[1], us[2], us[3]);
                let (cv, uv) = (val(c).to_vec(), val(u).to_vec());
                if let Some(dc) = grad_slot(nodes, grads, c) {
                    for b in 0..bsz {
                        for i in 0..np {
                            for jj in 0..j {
                                let urow = &uv[((b * np + i) * j + jj) * d..][..d];
                                let grow = &g[(b * j + jj) * d..][..d];
                                dc[(b * np + i) * j + jj] +=
                                    urow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(du) = grad_slot(nodes, grads, u) {
                    for b in 0..bsz {
                        for i in 0..np {
                            for jj in 0..j {
                                let cij = cv[(b * np + i) * j + jj];
                                let grow = &g[(b * j + jj) * d..][..d];
                                let drow = &mut du[((b * np + i) * j + jj) * d..][..d];
                                for k in 0..d {
                                    drow[k] += cij * grow[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::Agreement(u, v) => {
                let us = nodes[u].value.shape();
                let (bsz, np, j, d) = (us[0], us[1], us[2], us[3]);
                let (uv, vv) = (val(u).to_vec(), val(v).to_vec());
                if let Some(du) = grad_slot(nodes, grads, u) {
                    for b in 0..bsz {
                        for i in 0..np {
                            for jj in 0..j {
                                let gv = g[(b * np + i) * j + jj];
                                let vrow = &vv[(b * j + jj) * d..][..d];
                                let drow = &mut du[((b * np + i) * j + jj) * d..][..d];
                                for k in 0..d {
                                    drow[k] += gv * vrow[k];
                                }
                            }
                        }
                    }
                }
                if let Some(dv) = grad_slot(nodes, grads, v) {
                    for b in 0..bsz {
                        for i in 0..np {
                            for jj in 0..j {
                                let gv = g[(b * np + i) * j + jj];
                                let urow = &uv[((b * np + i) * j + jj) * d..][..d];
                                let drow = &mut dv[(b * j + jj) * d..][..d];
                                for k in 0..d {
                                    drow[k] += gv * urow[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::PairDistance(a, b) => {
                let d = nodes[a].value.shape()[1];
                let diff: Vec<f64> = val(a).iter().zip(val(b)).map(|(x, y)| x - y).collect();
                let mut da = vec![0.0; diff.len()];
                for (row, (dist, gv)) in out.data().iter().zip(g).enumerate() {
                    let coef = gv / (dist + NORM_EPS);
                    for k in 0..d {
                        da[row * d + k] = coef * diff[row * d + k];
                    }
                }
                let db = da.iter().map(|v| -v).collect();
                accumulate(nodes, grads, a, da);
                accumulate(nodes, grads, b, db);
            }
            Op::SoftmaxNll(x, ref labels, ref probs) => {
                let k = nodes[x].value.shape()[1];
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (row, (&label, gv)) in labels.iter().zip(g).enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dx[row * k + c] += gv * (probs[row * k + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn binary_back(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
    bc: Bcast,
    g: &[f64],
    partials: impl Fn(f64, f64) -> (f64, f64),
) {
    let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
    let n = g.len();
    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    let mut da = vec![0.0; n];
    let mut db = vec![0.0; n];
    for i in 0..n {
        let (pa, pb) = partials(at(av, i), at(bv, i));
        da[i] = pa * g[i];
        db[i] = pb * g[i];
    }
    let reduce = |v: Vec<f64>| vec![v.iter().sum()];
    match bc {
        Bcast::None => {
            accumulate(nodes, grads, a, da);
            accumulate(nodes, grads, b, db);
        }
        Bcast::Lhs => {
            accumulate(nodes, grads, a, reduce(da));
            accumulate(nodes, grads, b, db);
        }
        Bcast::Rhs => {
            accumulate(nodes, grads, a, da);
            accumulate(nodes, grads, b, reduce(db));
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut [f64]) {
    let ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..][..wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    b: usize,
    geom: &ConvGeom,
    g: &[f64],
) {
    let ConvGeom {
        n, c, h, o, kh, kw, ..
    } = *geom;
    let width = geom.w;
    let ck = c * kh * kw;
    let plane = geom.ho * geom.wo;
    let xv = nodes[x].value.data();
    let wv = nodes[w].value.data().to_vec();
    let need_x = nodes[x].requires_grad;
    let mut cols = vec![0.0; ck * plane];
    let mut dcols = vec![0.0; ck * plane];
    let mut dw = nodes[w].requires_grad.then(|| vec![0.0; o * ck]);
    let mut dx = need_x.then(|| vec![0.0; n * c * h * width]);
    for ni in 0..n {
        let gout = &g[ni * o * plane..][..o * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&xv[ni * c * h * width..][..c * h * width], geom, &mut cols);
            gemm(false, true, o, ck, plane, 1.0, gout, &cols, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(true, false, ck, plane, o, 1.0, &wv, gout, 0.0, &mut dcols);
            col2im(&dcols, geom, &mut dx[ni * c * h * width..][..c * h * width]);
        }
    }
    if let Some(dw) = dw {
        accumulate(nodes, grads, w, dw);
    }
    if let Some(dx) = dx {
        accumulate(nodes, grads, x, dx);
    }
    if let Some(db) = grad_slot(nodes, grads, b) {
        for ni in 0..n {
            for oi in 0..o {
                db[oi] += g[(ni * o + oi) * plane..][..plane].iter().sum::<f64>();
            }
        }
    }
}

impl Tape {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (shape, bc) = if av.shape() == bv.shape() {
            (av.shape().to_vec(), Bcast::None)
        } else if bv.numel() == 1 {
            (av.shape().to_vec(), Bcast::Rhs)
        } else if av.numel() == 1 {
            (bv.shape().to_vec(), Bcast::Lhs)
        } else {
            return Err(shape_err!(
                "{name}: shapes {:?} and {:?} are not broadcast-compatible",
                av.shape(),
                bv.shape()
            ));
        };
        let (ad, bd) = (av.data(), bv.data());
        let data = match bc {
            Bcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Lhs => bd.iter().map(|&y| f(ad[0], y)).collect(),
        };
        let value = Tensor::new(shape, data)?;
        self.record(value, make(ia, ib, bc), &[ia, ib])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.record(value, op(ix), &[ix])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, leak: f64) -> Result<Var> {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { leak * v },
            |i| Op::LeakyRelu(i, leak),
        )
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.nodes[ix].value.data();
        if v.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.record(Tensor::scalar(m), Op::Mean(ix), &[ix])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += d[(o * len + a) * inner + i];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        self.record(Tensor::new(shape, data)?, Op::SumAxis(ix, axis), &[ix])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err!(
                "matmul: {:?} · {:?} is undefined",
                av.shape(),
                bv.shape()
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = vec![0.0; m * n];
        gemm(false, false, m, n, k, 1.0, av.data(), bv.data(), 0.0, &mut data);
        self.record(Tensor::new(vec![m, n], data)?, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let f = bv.numel();
        if bv.rank() != 1 || xv.shape().last() != Some(&f) {
            return Err(shape_err!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(f) {
            for (d, b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.record(value, Op::AddBias(ix, ib), &[ix, ib])
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = softmax_values(&self.nodes[ix].value, axis)?;
        self.record(value, Op::Softmax(ix, axis), &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.clone().reshape(shape)?;
        self.record(value, Op::Reshape(ix), &[ix])
    }

    /// Slice `[start, start + len)` along the first axis.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes[ix].value.rows(start, len)?;
        self.record(value, Op::Rows(ix, start), &[ix])
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]` plus bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xv, wv, bv) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(shape_err!(
                "conv2d expects [N,C,H,W] input and [O,C,kh,kw] weights, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (n, c, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if wc != c {
            return Err(shape_err!("conv2d: input has {c} channels, kernel expects {wc}"));
        }
        if bv.shape() != [o] {
            return Err(shape_err!("conv2d: bias {:?} for {o} filters", bv.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (ho, wo) = conv_out(h, width, kh, kw, stride, pad)?;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: width,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let ck = c * kh * kw;
        let plane = ho * wo;
        let mut cols = vec![0.0; ck * plane];
        let mut data = vec![0.0; n * o * plane];
        for ni in 0..n {
            im2col(&xv.data()[ni * c * h * width..][..c * h * width], &geom, &mut cols);
            let out = &mut data[ni * o * plane..][..o * plane];
            for (oi, row) in out.chunks_mut(plane).enumerate() {
                row.fill(bv.data()[oi]);
            }
            gemm(false, false, o, plane, ck, 1.0, wv.data(), &cols, 1.0, out);
        }
        let value = Tensor::new(vec![n, o, ho, wo], data)?;
        self.record(value, Op::Conv2d(ix, iw, ib, geom), &[ix, iw, ib])
    }

    /// Max pooling over `[N,C,H,W]`; gradient goes to the first maximum.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 4 {
            return Err(shape_err!("maxpool2d expects [N,C,H,W], got {:?}", xv.shape()));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(shape_err!(
                "maxpool2d: window {window} (stride {stride}) does not fit {h}x{w}"
            ));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let d = xv.data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..window {
                        for kx in 0..window {
                            let at = base + (oy * stride + ky) * w + ox * stride + kx;
                            if d[at] > d[best] {
                                best = at;
                            }
                        }
                    }
                    data.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], data)?;
        self.record(value, Op::MaxPool2d(ix, argmax), &[ix])
    }

    /// Permutes `[N,C,H,W]` to `[N,H,W,C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 4 {
            return Err(shape_err!("channels_last expects [N,C,H,W], got {:?}", xv.shape()));
        }
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let hw = h * w;
        let d = xv.data();
        let mut data = vec![0.0; d.len()];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    data[(ni * hw + p) * c + ci] = d[(ni * c + ci) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n, h, w, c], data)?;
        self.record(value, Op::ChannelsLast(ix), &[ix])
    }

    /// Capsule squashing over the last axis: `g·‖g‖/(1+‖g‖²)`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = squash_values(&self.nodes[ix].value)?;
        self.record(value, Op::Squash(ix), &[ix])
    }

    /// Capsule predictions `u_hat[b,i,j] = W[i,j]·u[b,i]` for
    /// `u: [B,N,P]` and `W: [N,J,D,P]`, giving `[B,N,J,D]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (iu, iw) = (self.check(u)?, self.check(w)?);
        let (uv, wv) = (&self.nodes[iu].value, &self.nodes[iw].value);
        if uv.rank() != 3 || wv.rank() != 4 || uv.shape()[1] != wv.shape()[0] || uv.shape()[2] != wv.shape()[3] {
            return Err(shape_err!(
                "capsule_predict: u {:?} incompatible with W {:?}",
                uv.shape(),
                wv.shape()
            ));
        }
        let (bsz, np, p) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
        let (j, d) = (wv.shape()[1], wv.shape()[2]);
        let (ud, wd) = (uv.data(), wv.data());
        let mut data = vec![0.0; bsz * np * j * d];
        for b in 0..bsz {
            for i in 0..np {
                let ui = &ud[(b * np + i) * p..][..p];
                let out = &mut data[(b * np + i) * j * d..][..j * d];
                for (jd, o) in out.iter_mut().enumerate() {
                    let row = &wd[(i * j * d + jd) * p..][..p];
                    *o = row.iter().zip(ui).map(|(x, y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(vec![bsz, np, j, d], data)?;
        self.record(value, Op::CapsulePredict(iu, iw), &[iu, iw])
    }

    /// Coupling-weighted sum `s[b,j] = Σ_i c[b,i,j]·u_hat[b,i,j]`.
    pub fn route_sum(&mut self, c: Var, u_hat: Var) -> Result<Var> {
        let (ic, iu) = (self.check(c)?, self.check(u_hat)?);
        let (cv, uv) = (&self.nodes[ic].value, &self.nodes[iu].value);
        if uv.rank() != 4 || cv.shape() != &uv.shape()[..3] {
            return Err(shape_err!(
                "route_sum: couplings {:?} incompatible with predictions {:?}",
                cv.shape(),
                uv.shape()
            ));
        }
        let s = uv.shape();
        let (bsz, np, j, d) = (s[0], s[1], s[2], s[3]);
        let (cd, ud) = (cv.data(), uv.data());
        let mut data = vec![0.0; bsz * j * d];
        for b in 0..bsz {
            for i in 0..np {
                for jj in 0..j {
                    let cij = cd[(b * np + i) * j + jj];
                    let urow = &ud[((b * np + i) * j + jj) * d..][..d];
                    let out = &mut data[(b * j + jj) * d..][..d];
                    for k in 0..d {
                        out[k] += cij * urow[k];
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, j, d], data)?;
        self.record(value, Op::RouteSum(ic, iu), &[ic, iu])
    }

    /// Routing agreement `a[b,i,j] = u_hat[b,i,j]·v[b,j]`.
    pub fn agreement(&mut self, u_hat: Var, v: Var) -> Result<Var> {
        let (iu, iv) = (self.check(u_hat)?, self.check(v)?);
        let (uv, vv) = (&self.nodes[iu].value, &self.nodes[iv].value);
        let s = uv.shape();
        if s.len() != 4 || vv.shape() != [s[0], s[2], s[3]] {
            return Err(shape_err!(
                "agreement: predictions {:?} incompatible with outputs {:?}",
                uv.shape(),
                vv.shape()
            ));
        }
        let (bsz, np, j, d) = (s[0], s[1], s[2], s[3]);
        let (ud, vd) = (uv.data(), vv.data());
        let mut data = vec![0.0; bsz * np * j];
        for b in 0..bsz {
            for i in 0..np {
                for jj in 0..j {
                    let urow = &ud[((b * np + i) * j + jj) * d..][..d];
                    let vrow = &vd[(b * j + jj) * d..][..d];
                    data[(b * np + i) * j + jj] = urow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(vec![bsz, np, j], data)?;
        self.record(value, Op::Agreement(iu, iv), &[iu, iv])
    }

    /// Row-wise Euclidean distance between `[B,d]` embeddings.
    pub fn pair_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() || av.rank() != 2 {
            return Err(shape_err!(
                "pair_distance: embeddings {:?} and {:?} must be equal [B,d]",
                av.shape(),
                bv.shape()
            ));
        }
        let d = av.shape()[1];
        if d == 0 {
            return Err(shape_err!("pair_distance: zero-dimensional embeddings"));
        }
        let data = av
            .data()
            .chunks(d)
            .zip(bv.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![av.shape()[0]], data)?;
        self.record(value, Op::PairDistance(ia, ib), &[ia, ib])
    }

    /// Per-row negative log-likelihood of softmax over `logits: [B,K]`.
    pub fn softmax_nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ix = self.check(logits)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 2 || xv.shape()[0] != labels.len() {
            return Err(shape_err!(
                "softmax_nll: logits {:?} for {} labels",
                xv.shape(),
                labels.len()
            ));
        }
        let k = xv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside 0..{k}")));
        }
        let probs = softmax_values(xv, 1)?;
        let nll = xv
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &l)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .collect();
        let value = Tensor::new(vec![labels.len()], nll)?;
        let op = Op::SoftmaxNll(ix, labels.to_vec(), probs.into_data());
        self.record(value, op, &[ix])
    }
}

pub(crate) fn conv_out(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if kh == 0 || kw == 0 || kh > hp || kw > wp {
        return Err(shape_err!(
            "kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
        ));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(shape_err!("softmax over an empty axis"));
    }
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (d[at(a)] - m).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[at(a)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn squash_values(x: &Tensor) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err!("squash needs at least one axis"))?;
    if d == 0 {
        return Err(shape_err!("squash over an empty capsule axis"));
    }
    let mut out = x.data().to_vec();
    for v in out.chunks_mut(d) {
        let n2: f64 = v.iter().map(|a| a * a).sum();
        let s = n2.sqrt() / (1.0 + n2);
        for a in v.iter_mut() {
            *a *= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
