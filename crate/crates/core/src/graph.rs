//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only recording: every operation pushes a node
//! holding its forward value and the information its backward rule needs.
//! Nodes can only reference earlier nodes, so the node vector is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use rectseg::graph::Graph;
//! use rectseg::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(&Tensor::from_vec(vec![1.0, -2.0]).unwrap().with_grad());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Elementwise operation kinds accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Relu,
    Scale(f64),
}

/// Second operand of a binary elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    LogSoftmax(Var),
    /// Multiplicative mask (0 or 1/(1-rate)).
    Dropout(Var, Vec<f64>),
    Sum(Var),
    SumLast(Var),
    GatherLast(Var, Vec<usize>),
    MaskedMean(Var, Vec<bool>, usize),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation. Single use: one backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn broadcast_len(a: &Node, b: &Node, op: &'static str) -> Result<()> {
    if a.shape == b.shape || b.value.len() == 1 {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)))
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
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

    /// Records a copy of `t` as a leaf. Gradients are tracked iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, false))
    }

    /// Copies the value of `v` into a fresh constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are valid tensors")
    }

    /// Gradient of the last backward loss with respect to `v`, when tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    // ---- elementwise ------------------------------------------------------

    /// Generic dispatcher over the elementwise kinds.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Operand>) -> Result<Var> {
        match (kind, b) {
            (Elementwise::Add, Some(Operand::Var(b))) => self.add(a, b),
            (Elementwise::Add, Some(Operand::Scalar(s))) => Ok(self.add_scalar(a, s)),
            (Elementwise::Sub, Some(Operand::Var(b))) => self.sub(a, b),
            (Elementwise::Sub, Some(Operand::Scalar(s))) => Ok(self.add_scalar(a, -s)),
            (Elementwise::Mul, Some(Operand::Var(b))) => self.mul(a, b),
            (Elementwise::Mul, Some(Operand::Scalar(s))) => Ok(self.scale(a, s)),
            (Elementwise::Scale(s), None) => Ok(self.scale(a, s)),
            (Elementwise::Exp, None) => Ok(self.exp(a)),
            (Elementwise::Log, None) => Ok(self.log(a)),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (k, b) => Err(Error::invalid(format!(
                "elementwise {k:?} does not take operand {b:?}"
            ))),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        broadcast_len(na, nb, name)?;
        let value: Vec<f64> = if nb.value.len() == 1 && na.value.len() != 1 {
            let s = nb.value[0];
            na.value.iter().map(|&x| f(x, s)).collect()
        } else {
            na.value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x + s).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|x| x * s).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(a, PROB_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(PROB_FLOOR).ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `max(a, lo)`; gradient passes only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    // ---- structured ops ---------------------------------------------------

    /// Same-padded 2-D convolution over channels-last input `[.., H, W, Cin]`
    /// with kernel `[kh, kw, Cin, Cout]` and bias `[Cout]`. Leading axes are
    /// treated as a batch.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (nx, nk, nb) = (self.node(x), self.node(k), self.node(b));
        if nx.shape.len() < 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} is not [..,H,W,C]", nx.shape),
            ));
        }
        if nk.shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} is not 4-D", nk.shape),
            ));
        }
        let r = nx.shape.len();
        let (h, w, cin) = (nx.shape[r - 3], nx.shape[r - 2], nx.shape[r - 1]);
        let (kh, kw, kcin, cout) = (nk.shape[0], nk.shape[1], nk.shape[2], nk.shape[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} must be odd"),
            ));
        }
        if nb.value.len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} entries, kernel has {cout} outputs",
                    nb.value.len()
                ),
            ));
        }
        let batch = nx.shape[..r - 3].iter().product::<usize>();
        let geom = ConvGeom {
            batch,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
        };
        let value = conv_forward(&nx.value, &nk.value, &nb.value, geom);
        let mut shape = nx.shape.clone();
        shape[r - 1] = cout;
        let rg = nx.requires_grad || nk.requires_grad || nb.requires_grad;
        Ok(self.push(shape, value, Op::Conv2d { x, k, b, geom }, rg))
    }

    /// Log-softmax along the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let c = *n.shape.last().unwrap_or(&0);
        if c < 2 {
            return Err(Error::shape("log_softmax", format!("class axis {c} < 2")));
        }
        let mut value = n.value.clone();
        for row in value.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::LogSoftmax(x), rg))
    }

    /// Inverted dropout. Eval mode (or rate 0) is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.node(x);
        let mask: Vec<f64> = (0..n.value.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let n = self.node(x);
        let value = n.value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Dropout(x, mask), rg))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Sum over the last axis; the axis is dropped.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() < 2 {
            return Err(Error::shape(
                "sum_last",
                format!("{:?} has no outer axes", n.shape),
            ));
        }
        let c = *n.shape.last().unwrap();
        let value = n.value.chunks(c).map(|r| r.iter().sum()).collect();
        let shape = n.shape[..n.shape.len() - 1].to_vec();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, Op::SumLast(x), rg))
    }

    /// Picks `x[.., idx[i]]` from each row of the last axis; the axis is dropped.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() < 2 {
            return Err(Error::shape(
                "gather_last",
                format!("{:?} has no outer axes", n.shape),
            ));
        }
        let c = *n.shape.last().unwrap();
        let rows = n.value.len() / c;
        if idx.len() != rows {
            return Err(Error::shape(
                "gather_last",
                format!("{} indices for {rows} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::invalid(format!("gather index {bad} >= {c}")));
        }
        let value = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| n.value[r * c + i])
            .collect();
        let shape = n.shape[..n.shape.len() - 1].to_vec();
        let rg = n.requires_grad;
        Ok(self.push(shape, value, Op::GatherLast(x, idx.to_vec()), rg))
    }

    /// Mean over entries where `mask` is true. An empty mask is an error.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.node(x);
        if mask.len() != n.value.len() {
            return Err(Error::shape(
                "masked_mean",
                format!("mask len {} vs {}", mask.len(), n.value.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask(
                "masked_mean over zero valid entries".into(),
            ));
        }
        let s: f64 = n
            .value
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .sum();
        let rg = n.requires_grad;
        Ok(self.push(
            vec![1],
            vec![s / count as f64],
            Op::MaskedMean(x, mask.to_vec(), count),
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.node(x).value.len();
        let mask = vec![true; len];
        self.masked_mean(x, &mask).expect("non-empty tensor")
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    /// Leaves that require a gradient but are unreachable from `loss` get
    /// zeros. The recording is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward called twice on one recording".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            let Some(g) = grads[idx].take() else { continue };
            if !is_leaf {
                self.propagate(idx, &g, &mut grads);
            }
            if is_leaf || idx == loss.0 {
                grads[idx] = Some(g);
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_into(gb, g, |gi, _| gi));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_into(gb, g, |gi, _| -gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let bscalar = vb.len() == 1 && va.len() != 1;
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * if bscalar { vb[0] } else { vb[i] };
                    }
                });
                acc(*b, &mut |gb| reduce_into(gb, g, |gi, i| gi * va[i]));
            }
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * s)
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(&node.value)
                    .for_each(|((x, gi), y)| *x += gi * y)
            }),
            Op::Log(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > PROB_FLOOR {
                            *x += gi / v;
                        }
                    }
                })
            }
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *x += gi;
                        }
                    }
                })
            }
            Op::ClampMin(a, lo) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(va) {
                        if v > lo {
                            *x += gi;
                        }
                    }
                })
            }
            Op::Conv2d { x, k, b, geom } => {
                let (vx, vk) = (&nodes[x.0].value, &nodes[k.0].value);
                acc(*b, &mut |gb| {
                    for row in g.chunks(geom.cout) {
                        add_into(gb, row);
                    }
                });
                acc(*k, &mut |gk| conv_grad_kernel(vx, g, gk, *geom));
                acc(*x, &mut |gx| conv_grad_input(vk, g, gx, *geom));
            }
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c))
                    {
                        let gsum: f64 = gy.iter().sum();
                        for i in 0..c {
                            gx[i] += gy[i] - y[i].exp() * gsum;
                        }
                    }
                })
            }
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(mask)
                    .for_each(|((x, gi), m)| *x += gi * m)
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumLast(a) => {
                let c = *nodes[a.0].shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for (row, gi) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                })
            }
            Op::GatherLast(a, idx) => {
                let c = *nodes[a.0].shape.last().unwrap();
                acc(*a, &mut |ga| {
                    for (r, (&i, gi)) in idx.iter().zip(g).enumerate() {
                        ga[r * c + i] += gi;
                    }
                })
            }
            Op::MaskedMean(a, mask, count) => {
                let w = g[0] / *count as f64;
                acc(*a, &mut |ga| {
                    for (x, &m) in ga.iter_mut().zip(mask) {
                        if m {
                            *x += w;
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Accumulates into a possibly scalar-broadcast operand gradient.
fn reduce_into(dst: &mut [f64], g: &[f64], f: impl Fn(f64, usize) -> f64) {
    if dst.len() == 1 && g.len() != 1 {
        dst[0] += g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum::<f64>();
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += f(g[i], i);
        }
    }
}

/// Calls `f(out_offset, x_offset, k_offset)` for every in-bounds tap of a
/// same-padded convolution.
#[inline]
fn for_each_tap(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom {
        batch,
        h,
        w,
        cin,
        cout,
        kh,
        kw,
    } = geom;
    let (ph, pw) = (kh / 2, kw / 2);
    for n in 0..batch {
        for i in 0..h {
            let di_lo = ph.saturating_sub(i);
            let di_hi = kh.min(h + ph - i);
            for j in 0..w {
                let out = ((n * h + i) * w + j) * cout;
                let dj_lo = pw.saturating_sub(j);
                let dj_hi = kw.min(w + pw - j);
                for di in di_lo..di_hi {
                    let ii = i + di - ph;
                    for dj in dj_lo..dj_hi {
                        let jj = j + dj - pw;
                        let xo = ((n * h + ii) * w + jj) * cin;
                        let ko = (di * kw + dj) * cin * cout;
                        f(out, xo, ko);
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], k: &[f64], b: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (cin, cout) = (geom.cin, geom.cout);
    let mut out = vec![0.0; geom.batch * geom.h * geom.w * cout];
    for row in out.chunks_mut(cout) {
        row.copy_from_slice(b);
    }
    for_each_tap(geom, |o, xo, ko| {
        let orow = &mut out[o..o + cout];
        for ci in 0..cin {
            let xv = x[xo + ci];
            if xv == 0.0 {
                continue;
            }
            let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
            for (ov, kv) in orow.iter_mut().zip(krow) {
                *ov += xv * kv;
            }
        }
    });
    out
}

fn conv_grad_kernel(x: &[f64], g: &[f64], gk: &mut [f64], geom: ConvGeom) {
    let (cin, cout) = (geom.cin, geom.cout);
    for_each_tap(geom, |o, xo, ko| {
        let grow = &g[o..o + cout];
        for ci in 0..cin {
            let xv = x[xo + ci];
            if xv == 0.0 {
                continue;
            }
            let krow = &mut gk[ko + ci * cout..ko + (ci + 1) * cout];
            for (kv, gv) in krow.iter_mut().zip(grow) {
                *kv += xv * gv;
            }
        }
    });
}

fn conv_grad_input(k: &[f64], g: &[f64], gx: &mut [f64], geom: ConvGeom) {
    let (cin, cout) = (geom.cin, geom.cout);
    for_each_tap(geom, |o, xo, ko| {
        let grow = &g[o..o + cout];
        for ci in 0..cin {
            let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
            let d: f64 = krow.iter().zip(grow).map(|(a, b)| a * b).sum();
            gx[xo + ci] += d;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn add_and_exp_examples() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(&t(vec![2], vec![3.0, 4.0]));
        let s = g
            .elementwise(Elementwise::Add, a, Some(Operand::Var(b)))
            .unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let z = g.leaf(&t(vec![2], vec![0.0, 0.0]));
        let e = g.exp(z);
        assert_eq!(g.value(e), &[1.0, 1.0]);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![1], vec![0.7]));
        let e = g.exp(a);
        let l = g.log(e);
        assert!((g.value(l)[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn log_clamps_nonpositive() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2], vec![0.0, -3.0]));
        let l = g.log(a);
        assert!(g
            .value(l)
            .iter()
            .all(|v| (v - PROB_FLOOR.ln()).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2], vec![1.0, 2.0]));
        let b = g.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(err.kind(), "shape");
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).with_grad());
        let s = g.leaf(&t(vec![1], vec![2.0]).with_grad());
        let m = g.mul(a, s).unwrap();
        assert_eq!(g.value(m), &[2.0, 4.0, 6.0]);
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (0..18).map(|i| i as f64 * 0.1).collect();
        let x = g.leaf(&t(vec![3, 3, 2], xs.clone()));
        let k = g.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(&t(vec![2], vec![0.0, 0.0]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y), xs.as_slice());
    }

    #[test]
    fn conv_all_ones_on_constant_image() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(vec![4, 4, 1], 2.0));
        let k = g.leaf(&Tensor::full(vec![3, 3, 1, 1], 1.0));
        let b = g.leaf(&Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 8.0);
        assert_eq!(v[3], 8.0);
        assert_eq!(v[5], 18.0);
        assert_eq!(v[10], 18.0);
        assert_eq!(v[1], 12.0);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![4, 4, 2]));
        let k = g.leaf(&Tensor::zeros(vec![3, 3, 3, 1]));
        let b = g.leaf(&Tensor::zeros(vec![1]));
        assert!(g.conv2d(x, k, b).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![0.0, 0.0]).with_grad());
        let y = g.log_softmax(x).unwrap();
        assert!((g.value(y)[0] - 0.5f64.ln()).abs() < 1e-12);
        let y0 = g.gather_last(y, &[0]);
        assert!(y0.is_err(), "1-D input has no row axis");

        let mut g = Graph::new();
        let x = g.leaf(&t(vec![1, 2], vec![0.0, 0.0]).with_grad());
        let y = g.log_softmax(x).unwrap();
        let y0 = g.gather_last(y, &[0]).unwrap();
        let l = g.sum(y0);
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap()[0] - 0.5).abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 0.0]));
        let y = g.log_softmax(x).unwrap();
        let lse = (1f64.exp() + 1.0).ln();
        assert!((g.value(y)[0] - (1.0 - lse)).abs() < 1e-12);
        assert!((g.value(y)[1] + lse).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![3], vec![100.0, -100.0, 99.0]));
        let y = g.log_softmax(x).unwrap();
        let s: f64 = g.value(y).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(vec![100_000], 1.0));
        assert_eq!(g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        let d0 = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(d0), g.value(x));
        let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = g.value(d).iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![3], vec![0.3, -1.0, 2.0]).with_grad());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_reuse_and_nonscalar() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0]).with_grad());
        assert!(g.backward(x).is_err());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0]).with_grad());
        let y = g.leaf(&t(vec![2], vec![1.0, 2.0]).with_grad());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0]).with_grad());
        let d = g.detach(x);
        let m = g.mul(x, d).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_mean_rejects_empty() {
        let mut g = Graph::new();
        let x = g.leaf(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            g.masked_mean(x, &[false, false]),
            Err(Error::EmptyMask(_))
        ));
        let m = g.masked_mean(x, &[false, true]).unwrap();
        assert_eq!(g.scalar_value(m), 2.0);
    }
}
