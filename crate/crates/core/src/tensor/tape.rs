use super::conv::{self, ConvGeom};
use super::window::{plane_ssim, SsimConstants, SSIM_WINDOW};
use super::{Conv2dSpec, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input ops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    Tanh,
    Sigmoid,
    Square,
    /// `sqrt(x + eps)`.
    SqrtEps(f64),
    Abs,
    /// `s·x`.
    Scale(f64),
    /// `x + c`.
    Offset(f64),
}

/// Elementwise same-shape two-input ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Pointwise, Var),
    Binary(Binary, Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample { x: Var, planes: usize, h: usize, w: usize },
    Concat { a: Var, b: Var, n: usize, ca: usize, cb: usize, plane: usize },
    Mean(Var),
    DiffX(Var),
    DiffY(Var),
    Ssim { x: Var, y: Var, k: SsimConstants },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Unary(_, x) | Op::Mean(x) | Op::DiffX(x) | Op::DiffY(x) => vec![x],
            Op::Upsample { x, .. } => vec![x],
            Op::Binary(_, a, b) | Op::Concat { a, b, .. } => vec![a, b],
            Op::Ssim { x, y, .. } => vec![x, y],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, shape: &[usize], delta: Vec<T>) {
    match slot {
        Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(Tensor::new(shape, delta).expect("gradient shape")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: &[usize], data: Vec<T>, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_raw(value, requires_grad, op))
    }

    pub fn unary(&mut self, kind: Pointwise, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let data: Vec<T> = match kind {
            Pointwise::Relu => xv.data().iter().map(|&v| v.max(T::zero())).collect(),
            Pointwise::Tanh => xv.data().iter().map(|&v| v.tanh()).collect(),
            Pointwise::Sigmoid => xv.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect(),
            Pointwise::Square => xv.data().iter().map(|&v| v * v).collect(),
            Pointwise::SqrtEps(eps) => {
                let e = T::lit(eps);
                xv.data().iter().map(|&v| (v + e).sqrt()).collect()
            }
            Pointwise::Abs => xv.data().iter().map(|&v| v.abs()).collect(),
            Pointwise::Scale(s) => {
                let s = T::lit(s);
                xv.data().iter().map(|&v| v * s).collect()
            }
            Pointwise::Offset(c) => {
                let c = T::lit(c);
                xv.data().iter().map(|&v| v + c).collect()
            }
        };
        self.push(&format!("{kind:?}"), &shape, data, Op::Unary(kind, x))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("binary", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |p, q| p + q,
            Binary::Sub => |p, q| p - q,
            Binary::Mul => |p, q| p * q,
            Binary::Div => |p, q| p / q,
        };
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = av.shape().to_vec();
        self.push(&format!("{kind:?}"), &shape, data, Op::Binary(kind, a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Pointwise::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Pointwise::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Pointwise::Sigmoid, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Pointwise::Square, x)
    }

    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(Pointwise::SqrtEps(eps), x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Pointwise::Abs, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Pointwise::Scale(s), x)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Pointwise::Offset(c), x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `Σ wᵢ·xᵢ` over scalar-or-same-shape nodes; terms with zero weight are
    /// still recorded so the graph shape does not depend on the weights.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let (&(w0, v0), rest) = terms.split_first().ok_or(Error::Empty("weighted_sum"))?;
        let mut acc = self.scale(v0, w0)?;
        for &(w, v) in rest {
            let t = self.scale(v, w)?;
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Cross-correlation of `x` (`C×H×W` or `N×C×H×W`) with `weight`
    /// (`Cout×Cin×k×k`) plus an optional per-channel `bias`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        let dims = xv.nchw()?;
        let [cout, cin, k, k2] = *wv.shape() else {
            return Err(Error::shape("conv2d", format!("weight must be 4-D, got {:?}", wv.shape())));
        };
        if k != k2 || cin != dims.1 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.shape() != [cout] {
                return Err(Error::shape("conv2d", "bias must have one value per output channel"));
            }
        }
        let geom = ConvGeom::new(dims, cout, k, spec)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {k} does not fit {:?}", xv.shape())))?;
        let out = conv::conv2d_forward(&geom, xv.data(), wv.data(), bias.map(|b| self.nodes[b.0].value.data()));
        let shape = if xv.shape().len() == 4 {
            vec![geom.n, cout, geom.ho, geom.wo]
        } else {
            vec![cout, geom.ho, geom.wo]
        };
        self.push("conv2d", &shape, out, Op::Conv { x, w: weight, b: bias, geom })
    }

    /// Bilinear 2x upsampling with half-pixel centres and edge clamping.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let r = xv.shape().len();
        if r < 2 {
            return Err(Error::shape("upsample2x", "need at least 2 dims"));
        }
        let (h, w) = xv.hw();
        if h == 0 || w == 0 {
            return Err(Error::Empty("upsample2x"));
        }
        let planes = xv.len() / (h * w);
        let out = conv::upsample2x_forward(xv.data(), planes, h, w);
        let mut shape = xv.shape().to_vec();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        self.push("upsample2x", &shape, out, Op::Upsample { x, planes, h, w })
    }

    /// Concatenates along the channel axis (`C×H×W` or `N×C×H×W`).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (na, ca, ha, wa) = av.nchw()?;
        let (nb, cb, hb, wb) = bv.nchw()?;
        if av.shape().len() != bv.shape().len() || na != nb || ha != hb || wa != wb {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..na {
            out.extend_from_slice(&av.data()[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let mut shape = av.shape().to_vec();
        let r = shape.len();
        shape[r - 3] = ca + cb;
        self.push("concat_channels", &shape, out, Op::Concat { a, b, n: na, ca, cb, plane })
    }

    /// Arithmetic mean over all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = xv.mean_f64();
        self.push("mean", &[], vec![T::lit(m)], Op::Mean(x))
    }

    /// Forward difference along the last axis: `x[.., j+1] - x[.., j]`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (h, w) = xv.hw();
        if w < 2 || xv.shape().len() < 2 {
            return Err(Error::shape("diff_x", format!("width must be >= 2, got {:?}", xv.shape())));
        }
        let planes = xv.len() / (h * w);
        let mut out = Vec::with_capacity(planes * h * (w - 1));
        for row in xv.data().chunks(w) {
            out.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() -= 1;
        self.push("diff_x", &shape, out, Op::DiffX(x))
    }

    /// Forward difference along the second-to-last axis.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (h, w) = xv.hw();
        if h < 2 || xv.shape().len() < 2 {
            return Err(Error::shape("diff_y", format!("height must be >= 2, got {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(xv.len() - xv.len() / h);
        for plane in xv.data().chunks(h * w) {
            for y in 0..h - 1 {
                out.extend((0..w).map(|i| plane[(y + 1) * w + i] - plane[y * w + i]));
            }
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] -= 1;
        self.push("diff_y", &shape, out, Op::DiffY(x))
    }

    /// Mean Gaussian-window SSIM over all valid windows of all planes.
    pub fn ssim(&mut self, x: Var, y: Var, k: SsimConstants) -> Result<Var> {
        let (xv, yv) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        if xv.shape() != yv.shape() {
            return Err(Error::shape("ssim", format!("{:?} vs {:?}", xv.shape(), yv.shape())));
        }
        let (h, w) = xv.hw();
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            return Err(Error::shape("ssim", format!("grid {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
        }
        let xs: Vec<f64> = xv.data().iter().map(|v| v.as_f64()).collect();
        let ys: Vec<f64> = yv.data().iter().map(|v| v.as_f64()).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for (px, py) in xs.chunks(h * w).zip(ys.chunks(h * w)) {
            let s = plane_ssim(px, py, h, w, k, false);
            total += s.sum;
            count += s.windows;
        }
        self.push("ssim", &[], vec![T::lit(total / count as f64)], Op::Ssim { x, y, k })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes.get(loss.0).ok_or_else(|| Error::invalid("loss is not on this tape"))?.value;
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for inp in node.op.inputs() {
                assert!(inp.0 < i, "tape is not topologically ordered");
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(x);
                let y = node.value.data();
                let d: Vec<T> = match kind {
                    Pointwise::Relu => {
                        xv.data().iter().zip(gd).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect()
                    }
                    Pointwise::Tanh => y.iter().zip(gd).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                    Pointwise::Sigmoid => y.iter().zip(gd).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                    Pointwise::Square => xv.data().iter().zip(gd).map(|(&v, &g)| g * (v + v)).collect(),
                    Pointwise::SqrtEps(_) => y.iter().zip(gd).map(|(&y, &g)| g / (y + y)).collect(),
                    Pointwise::Abs => xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| {
                            if v > T::zero() {
                                g
                            } else if v < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Pointwise::Scale(s) => {
                        let s = T::lit(s);
                        gd.iter().map(|&g| g * s).collect()
                    }
                    Pointwise::Offset(_) => gd.to_vec(),
                };
                accumulate(&mut grads[x.0], xv.shape(), d);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().zip(bv.data()).map(|(&g, &q)| g * q).collect(),
                        Binary::Div => gd.iter().zip(bv.data()).map(|(&g, &q)| g / q).collect(),
                    };
                    accumulate(&mut grads[a.0], av.shape(), d);
                }
                if self.wants(b) {
                    let d: Vec<T> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&g| -g).collect(),
                        Binary::Mul => gd.iter().zip(av.data()).map(|(&g, &p)| g * p).collect(),
                        Binary::Div => gd
                            .iter()
                            .zip(av.data().iter().zip(bv.data()))
                            .map(|(&g, (&p, &q))| -g * p / (q * q))
                            .collect(),
                    };
                    accumulate(&mut grads[b.0], bv.shape(), d);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let cg = conv::conv2d_backward(&geom, self.value(x).data(), self.value(w).data(), gd, self.wants(x));
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[x.0], self.value(x).shape(), dx);
                }
                if self.wants(w) {
                    accumulate(&mut grads[w.0], self.value(w).shape(), cg.dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    accumulate(&mut grads[b.0], self.value(b).shape(), cg.db);
                }
            }
            Op::Upsample { x, planes, h, w } => {
                let d = conv::upsample2x_backward(gd, planes, h, w);
                accumulate(&mut grads[x.0], self.value(x).shape(), d);
            }
            Op::Concat { a, b, n, ca, cb, plane } => {
                let (sa, sb) = (ca * plane, cb * plane);
                if self.wants(a) {
                    let d = (0..n).flat_map(|i| gd[i * (sa + sb)..][..sa].iter().copied()).collect();
                    accumulate(&mut grads[a.0], self.value(a).shape(), d);
                }
                if self.wants(b) {
                    let d = (0..n).flat_map(|i| gd[i * (sa + sb) + sa..][..sb].iter().copied()).collect();
                    accumulate(&mut grads[b.0], self.value(b).shape(), d);
                }
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let share = gd[0] / T::lit(xv.len() as f64);
                accumulate(&mut grads[x.0], xv.shape(), vec![share; xv.len()]);
            }
            Op::DiffX(x) => {
                let xv = self.value(x);
                let (_, w) = xv.hw();
                let mut d = vec![T::zero(); xv.len()];
                for (row, grow) in d.chunks_mut(w).zip(gd.chunks(w - 1)) {
                    for (j, &g) in grow.iter().enumerate() {
                        row[j + 1] += g;
                        row[j] -= g;
                    }
                }
                accumulate(&mut grads[x.0], xv.shape(), d);
            }
            Op::DiffY(x) => {
                let xv = self.value(x);
                let (h, w) = xv.hw();
                let mut d = vec![T::zero(); xv.len()];
                for (plane, gplane) in d.chunks_mut(h * w).zip(gd.chunks((h - 1) * w)) {
                    for y in 0..h - 1 {
                        for i in 0..w {
                            let g = gplane[y * w + i];
                            plane[(y + 1) * w + i] += g;
                            plane[y * w + i] -= g;
                        }
                    }
                }
                accumulate(&mut grads[x.0], xv.shape(), d);
            }
            Op::Ssim { x, y, k } => {
                let (xv, yv) = (self.value(x), self.value(y));
                let (h, w) = xv.hw();
                let xs: Vec<f64> = xv.data().iter().map(|v| v.as_f64()).collect();
                let ys: Vec<f64> = yv.data().iter().map(|v| v.as_f64()).collect();
                let planes = xs.len() / (h * w);
                let count = planes * (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW);
                let scale = gd[0].as_f64() / count as f64;
                let mut dx = Vec::with_capacity(xs.len());
                let mut dy = Vec::with_capacity(ys.len());
                for (px, py) in xs.chunks(h * w).zip(ys.chunks(h * w)) {
                    let (gx, gy) = plane_ssim(px, py, h, w, k, true).grad.expect("requested gradient");
                    dx.extend(gx.into_iter().map(|v| T::lit(v * scale)));
                    dy.extend(gy.into_iter().map(|v| T::lit(v * scale)));
                }
                if self.wants(x) {
                    accumulate(&mut grads[x.0], xv.shape(), dx);
                }
                if self.wants(y) {
                    accumulate(&mut grads[y.0], yv.shape(), dy);
                }
            }
        }
        Ok(())
    }
}
