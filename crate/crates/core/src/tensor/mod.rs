//! Minimal reverse-mode autodiff over `ndarray`, sized for this project.
//!
//! A [`Tape`] owns the computation graph of one forward pass. Nodes store
//! their value plus whatever context the backward pass needs; [`Var`] is a
//! plain index into the tape. Inputs that never need gradients are pruned
//! from the backward walk, and fused loss nodes carry their analytic input
//! gradient computed during the forward pass.

pub mod conv;
pub mod gradcheck;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulScalarVar { x: Var, s: Var },
    Grl { x: Var, lambda: f64 },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Option<Array2<f64>> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Arr, inv_std: Vec<f64> },
    Upsample2 { x: Var },
    MulMapConst { x: Var, map: Array2<f64> },
    MulMapVar { x: Var, m: Var },
    ChannelMax { x: Var, argmax: Array2<usize> },
    ChannelSum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    /// Scalar node whose gradient w.r.t. its single input was precomputed
    /// during the forward pass (used by the fused loss functions).
    ScalarWithGrad { x: Var, grad: Arr },
}

struct Node {
    value: Arr,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        val[IxDyn(&[])]
    }

    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(y, self.needs(x), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(sigmoid);
        self.push(y, self.needs(x), Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.nodes[x.0].value.mapv(f64::exp);
        self.push(y, self.needs(x), Op::Exp { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(y, self.needs(a) || self.needs(b), Op::Add { a, b })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(y, self.needs(a) || self.needs(b), Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(y, self.needs(x), Op::Scale { x, c })
    }

    /// Multiply a tensor by a 0-d scalar variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let y = self.nodes[x.0].value.mapv(|v| v * sv);
        self.push(y, self.needs(x) || self.needs(s), Op::MulScalarVar { x, s })
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let y = self.nodes[x.0].value.clone();
        self.push(y, self.needs(x), Op::Grl { x, lambda })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv input must be [C,H,W]");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight must be [Cout,Cin,k,k]");
        let bias = b.map(|bv| {
            self.nodes[bv.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("conv bias must be [Cout]")
                .to_owned()
        });
        let (y, cols) = conv::conv2d_forward(&xv, &wv, bias.as_ref(), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        let cols = needs.then_some(cols);
        self.push(y.into_dyn(), needs, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dim3(xv);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let cg = c / groups;
        let n = (cg * h * w) as f64;
        let gammav = &self.nodes[gamma.0].value;
        let betav = &self.nodes[beta.0].value;
        let mut xhat = Arr::zeros(IxDyn(&[c, h, w]));
        let mut y = Arr::zeros(IxDyn(&[c, h, w]));
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let lo = g * cg;
            let hi = lo + cg;
            let slice = xv.slice(ndarray::s![lo..hi, .., ..]);
            let mean = slice.sum() / n;
            let var = slice.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for ci in lo..hi {
                let gcoef = gammav[IxDyn(&[ci])];
                let bcoef = betav[IxDyn(&[ci])];
                for yy in 0..h {
                    for xx in 0..w {
                        let xh = (xv[IxDyn(&[ci, yy, xx])] - mean) * is;
                        xhat[IxDyn(&[ci, yy, xx])] = xh;
                        y[IxDyn(&[ci, yy, xx])] = gcoef * xh + bcoef;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(y, needs, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std })
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dim3(xv);
        let mut y = Arr::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = xv[IxDyn(&[ci, yy, xx])];
                    y[IxDyn(&[ci, 2 * yy, 2 * xx])] = v;
                    y[IxDyn(&[ci, 2 * yy, 2 * xx + 1])] = v;
                    y[IxDyn(&[ci, 2 * yy + 1, 2 * xx])] = v;
                    y[IxDyn(&[ci, 2 * yy + 1, 2 * xx + 1])] = v;
                }
            }
        }
        self.push(y, self.needs(x), Op::Upsample2 { x })
    }

    /// Multiply `[C,H,W]` features by a constant `[H,W]` map (broadcast over channels).
    pub fn mul_map_const(&mut self, x: Var, map: Array2<f64>) -> Var {
        let y = mul_map(&self.nodes[x.0].value, &map);
        self.push(y, self.needs(x), Op::MulMapConst { x, map })
    }

    /// Multiply `[C,H,W]` features by a `[H,W]` map variable (broadcast over channels).
    pub fn mul_map_var(&mut self, x: Var, m: Var) -> Var {
        let mv = self.nodes[m.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("map must be [H,W]")
            .to_owned();
        let y = mul_map(&self.nodes[x.0].value, &mv);
        self.push(y, self.needs(x) || self.needs(m), Op::MulMapVar { x, m })
    }

    /// Per-location max over the channel axis: `[C,H,W] -> [H,W]`.
    /// Gradient routes to the first channel attaining the max.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dim3(xv);
        let mut y = Array2::<f64>::zeros((h, w));
        let mut argmax = Array2::<usize>::zeros((h, w));
        for yy in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ci in 0..c {
                    let v = xv[IxDyn(&[ci, yy, xx])];
                    if v > best {
                        best = v;
                        bi = ci;
                    }
                }
                y[[yy, xx]] = best;
                argmax[[yy, xx]] = bi;
            }
        }
        self.push(y.into_dyn(), self.needs(x), Op::ChannelMax { x, argmax })
    }

    /// Sum over the channel axis: `[C,H,W] -> [H,W]`. With a single channel
    /// this is the squeeze used on discriminator outputs.
    pub fn channel_sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (_, h, w) = dim3(xv);
        let y = xv.sum_axis(Axis(0));
        debug_assert_eq!(y.shape(), [h, w]);
        self.push(y, self.needs(x), Op::ChannelSum { x })
    }

    /// Weighted sum of 0-d scalar variables.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total: f64 = terms.iter().map(|(v, w)| self.scalar(*v) * w).sum();
        let needs = terms.iter().any(|(v, _)| self.needs(*v));
        self.push(scalar_arr(total), needs, Op::WeightedSum { terms })
    }

    /// Scalar node with a precomputed gradient w.r.t. `x` (fused losses).
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Arr) -> Var {
        debug_assert_eq!(grad.shape(), self.nodes[x.0].value.shape());
        self.push(scalar_arr(value), self.needs(x), Op::ScalarWithGrad { x, grad })
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// participates; leaves that were created with `needs_grad = false` are
    /// skipped.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(scalar_arr(1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backstep(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Arr>], v: Var, delta: Arr) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backstep(&self, id: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut d = g.clone();
                d.zip_mut_with(xv, |gv, &xval| {
                    if xval <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accum(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                self.accum(grads, *x, d);
            }
            Op::Exp { x } => {
                let y = &self.nodes[id].value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= yv);
                self.accum(grads, *x, d);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                self.accum(grads, *a, g * &self.nodes[b.0].value);
                self.accum(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale { x, c } => {
                self.accum(grads, *x, g.mapv(|v| v * c));
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.scalar(*s);
                self.accum(grads, *x, g.mapv(|v| v * sv));
                let ds: f64 = (g * &self.nodes[x.0].value).sum();
                self.accum(grads, *s, scalar_arr(ds));
            }
            Op::Grl { x, lambda } => {
                self.accum(grads, *x, g.mapv(|v| v * -lambda));
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let cols = cols.as_ref().expect("conv cols saved when grads needed");
                let dy = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("conv grad is [C,H,W]");
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let (c, h, win) = dim3(&self.nodes[x.0].value);
                let out = conv::conv2d_backward(&dy, (c, h, win), &wv, &cols.view(), *stride, *pad);
                self.accum(grads, *x, out.dx.into_dyn());
                self.accum(grads, *w, out.dw.into_dyn());
                if let Some(bv) = b {
                    self.accum(grads, *bv, out.db.into_dyn());
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let (c, h, w) = dim3(&self.nodes[x.0].value);
                let cg = c / groups;
                let n = (cg * h * w) as f64;
                let gammav = &self.nodes[gamma.0].value;
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for yy in 0..h {
                        for xx in 0..w {
                            let gv = g[IxDyn(&[ci, yy, xx])];
                            sg += gv * xhat[IxDyn(&[ci, yy, xx])];
                            sb += gv;
                        }
                    }
                    dgamma[ci] = sg;
                    dbeta[ci] = sb;
                }
                for gi in 0..*groups {
                    let lo = gi * cg;
                    let hi = lo + cg;
                    let is = inv_std[gi];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ci in lo..hi {
                        let gc = gammav[IxDyn(&[ci])];
                        for yy in 0..h {
                            for xx in 0..w {
                                let dxh = g[IxDyn(&[ci, yy, xx])] * gc;
                                s1 += dxh;
                                s2 += dxh * xhat[IxDyn(&[ci, yy, xx])];
                            }
                        }
                    }
                    for ci in lo..hi {
                        let gc = gammav[IxDyn(&[ci])];
                        for yy in 0..h {
                            for xx in 0..w {
                                let dxh = g[IxDyn(&[ci, yy, xx])] * gc;
                                let xh = xhat[IxDyn(&[ci, yy, xx])];
                                dx[IxDyn(&[ci, yy, xx])] = is * (dxh - (s1 + xh * s2) / n);
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *gamma, dgamma.into_dyn());
                self.accum(grads, *beta, dbeta.into_dyn());
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = dim3(&self.nodes[x.0].value);
                let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[IxDyn(&[ci, yy, xx])] = g[IxDyn(&[ci, 2 * yy, 2 * xx])]
                                + g[IxDyn(&[ci, 2 * yy, 2 * xx + 1])]
                                + g[IxDyn(&[ci, 2 * yy + 1, 2 * xx])]
                                + g[IxDyn(&[ci, 2 * yy + 1, 2 * xx + 1])];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::MulMapConst { x, map } => {
                self.accum(grads, *x, mul_map(g, map));
            }
            Op::MulMapVar { x, m } => {
                let mv = self.nodes[m.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                self.accum(grads, *x, mul_map(g, &mv));
                let xv = &self.nodes[x.0].value;
                let prod = g * xv;
                let dm = prod.sum_axis(Axis(0));
                self.accum(grads, *m, dm);
            }
            Op::ChannelMax { x, argmax } => {
                let (c, h, w) = dim3(&self.nodes[x.0].value);
                let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
                for yy in 0..h {
                    for xx in 0..w {
                        dx[IxDyn(&[argmax[[yy, xx]], yy, xx])] = g[IxDyn(&[yy, xx])];
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::ChannelSum { x } => {
                let (c, h, w) = dim3(&self.nodes[x.0].value);
                let mut dx = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[IxDyn(&[ci, yy, xx])] = g[IxDyn(&[yy, xx])];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::WeightedSum { terms } => {
                let gv = g[IxDyn(&[])];
                for (v, w) in terms {
                    self.accum(grads, *v, scalar_arr(gv * w));
                }
            }
            Op::ScalarWithGrad { x, grad } => {
                let gv = g[IxDyn(&[])];
                self.accum(grads, *x, grad.mapv(|v| v * gv));
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn scalar_arr(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}

fn dim3(a: &Arr) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected a [C,H,W] array, got shape {s:?}");
    (s[0], s[1], s[2])
}

fn mul_map(x: &Arr, map: &Array2<f64>) -> Arr {
    let (c, h, w) = dim3(x);
    assert_eq!((h, w), map.dim(), "map size must match feature size");
    let mut y = x.clone();
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                y[IxDyn(&[ci, yy, xx])] *= map[[yy, xx]];
            }
        }
    }
    y
}
