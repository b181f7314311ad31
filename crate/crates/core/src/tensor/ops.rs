use super::kernels::{self, ConvGeometry, ResizeAxis};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Relu,
    Square,
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

/// Which operand of a binary op, if any, is a broadcast scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    Binary(ElementwiseKind, Broadcast),
    Unary(ElementwiseKind),
    ClampMin(f64),
    Scale(f64),
    Sum,
    Mean,
    MaskedMean { weights: Vec<f64>, total: f64 },
    SumChannels { batch: usize, channels: usize, plane: usize },
    Gather { channels: usize, plane: usize, index: Vec<usize> },
    Softmax { batch: usize, channels: usize, plane: usize },
    Conv2d(ConvGeometry),
    Resize { batch_channels: usize, rows: ResizeAxis, cols: ResizeAxis },
}

fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects [N,C,H,W], got {shape:?}"))),
    }
}

impl Tape {
    /// Elementwise op. Binary kinds take `b`; operands must share a shape or
    /// one of them must hold a single element.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (true, None) => Err(Error::Shape(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Shape(format!("{kind:?} takes one operand"))),
            (false, None) => self.unary(kind, a),
        }
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bcast, shape) = if ta.shape == tb.shape {
            (Broadcast::None, ta.shape.clone())
        } else if tb.numel() == 1 {
            (Broadcast::RightScalar, ta.shape.clone())
        } else if ta.numel() == 1 {
            (Broadcast::LeftScalar, tb.shape.clone())
        } else {
            return Err(Error::Shape(format!(
                "{kind:?} of {:?} and {:?}",
                ta.shape, tb.shape
            )));
        };
        let f = |x: f64, y: f64| match kind {
            ElementwiseKind::Add => x + y,
            ElementwiseKind::Sub => x - y,
            _ => x * y,
        };
        let data: Vec<f64> = match bcast {
            Broadcast::None => ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightScalar => {
                let y = tb.data[0];
                ta.data.iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::LeftScalar => {
                let x = ta.data[0];
                tb.data.iter().map(|&y| f(x, y)).collect()
            }
        };
        let needs = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, bcast),
            vec![a.0, b.0],
            needs,
        ))
    }

    fn unary(&mut self, kind: ElementwiseKind, a: Var) -> Result<Var> {
        let t = self.value(a);
        if kind == ElementwiseKind::Log {
            if let Some(bad) = t.data.iter().find(|&&x| x <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let data = t
            .data
            .iter()
            .map(|&x| match kind {
                ElementwiseKind::Exp => x.exp(),
                ElementwiseKind::Log => x.ln(),
                // Written out rather than `max` so NaN propagates.
                ElementwiseKind::Relu => {
                    if x < 0.0 {
                        0.0
                    } else {
                        x
                    }
                }
                _ => x * x,
            })
            .collect();
        Ok(self.push_unary(a, Op::Unary(kind), data))
    }

    fn push_unary(&mut self, a: Var, op: Op, data: Vec<f64>) -> Var {
        let shape = self.value(a).shape.clone();
        self.push_with_shape(a, op, shape, data)
    }

    fn push_with_shape(&mut self, a: Var, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::from_parts(shape, data), op, vec![a.0], needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Relu, a).expect("relu is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(ElementwiseKind::Square, a).expect("square is total")
    }

    /// `max(x, floor)`, with NaN passed through; gradient passes only where
    /// `x >= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let data = self.data(a).iter().map(|&x| if x < floor { floor } else { x }).collect();
        self.push_unary(a, Op::ClampMin(floor), data)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        self.push_unary(a, Op::Scale(factor), data)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push_with_shape(a, Op::Sum, Vec::new(), vec![total])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let value = d.iter().sum::<f64>() / d.len() as f64;
        self.push_with_shape(a, Op::Mean, Vec::new(), vec![value])
    }

    /// `Σ wᵢ xᵢ / Σ wᵢ` with constant weights; 0 when every weight is 0.
    pub fn masked_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let d = self.data(a);
        if weights.len() != d.len() {
            return Err(Error::Shape(format!(
                "mask of length {} for {} values",
                weights.len(),
                d.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        let value = if total > 0.0 {
            d.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total
        } else {
            0.0
        };
        let op = Op::MaskedMean {
            weights: weights.to_vec(),
            total,
        };
        Ok(self.push_with_shape(a, op, Vec::new(), vec![value]))
    }

    /// Sums `[N,C,H,W]` over channels into `[N,H,W]`.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(a), "sum_channels")?;
        let plane = h * w;
        let src = self.data(a);
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                dst.iter_mut().zip(s).for_each(|(d, x)| *d += x);
            }
        }
        let op = Op::SumChannels {
            batch: n,
            channels: c,
            plane,
        };
        Ok(self.push_with_shape(a, op, vec![n, h, w], out))
    }

    /// Picks channel `index[n·H·W + p]` at every pixel of `[N,C,H,W]`, giving `[N,H,W]`.
    pub fn gather_channels(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(a), "gather_channels")?;
        let plane = h * w;
        if index.len() != n * plane {
            return Err(Error::Shape(format!(
                "{} indices for {n}x{h}x{w} pixels",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= c) {
            return Err(Error::Shape(format!("channel index {bad} with {c} channels")));
        }
        let src = self.data(a);
        let out = index
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let (b, p) = (i / plane, i % plane);
                src[(b * c + k) * plane + p]
            })
            .collect();
        let op = Op::Gather {
            channels: c,
            plane,
            index: index.to_vec(),
        };
        Ok(self.push_with_shape(a, op, vec![n, h, w], out))
    }

    /// Per-pixel softmax over the channel axis of `[N,C,H,W]` logits.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(a), "softmax_channels")?;
        if c < 2 {
            return Err(Error::Shape(format!("softmax needs at least 2 channels, got {c}")));
        }
        let plane = h * w;
        let out = kernels::softmax_channels(self.data(a), n, c, plane);
        let op = Op::Softmax {
            batch: n,
            channels: c,
            plane,
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push_with_shape(a, op, shape, out))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]` plus a per-channel bias.
    ///
    /// Output extent is `(H + 2·padding − kh) / stride + 1` with floor division.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(input),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(weight), self.data(bias));
        let shape = geom.output_shape().to_vec();
        let needs = self.needs_grad(&[input.0, weight.0, bias.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d(geom),
            vec![input.0, weight.0, bias.0],
            needs,
        ))
    }

    /// Bilinear resize of `[N,C,H,W]` to `[N,C,out_h,out_w]` using half-pixel centers.
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(a), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("resize to or from an empty extent".into()));
        }
        let rows = ResizeAxis::new(h, out_h);
        let cols = ResizeAxis::new(w, out_w);
        let out = kernels::resize_forward(self.data(a), n * c, &rows, &cols);
        let op = Op::Resize {
            batch_channels: n * c,
            rows,
            cols,
        };
        Ok(self.push_with_shape(a, op, vec![n, c, out_h, out_w], out))
    }
}

fn reduce_scalar(g: Vec<f64>) -> Vec<f64> {
    vec![g.iter().sum()]
}

/// Input adjoints of node `id` given its output adjoint. One entry per parent,
/// `None` for parents that do not need gradient.
pub(super) fn backward_rule(tape: &Tape, id: usize, up: &[f64]) -> Vec<Option<Vec<f64>>> {
    let node = &tape.nodes[id];
    let parent = |k: usize| &tape.nodes[node.parents[k]];
    let wants = |k: usize| parent(k).needs_grad;
    let input = |k: usize| parent(k).value.data.as_slice();

    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary(kind, bcast) => {
            let (a, b) = (input(0), input(1));
            let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
            let ga = wants(0).then(|| {
                let g: Vec<f64> = match kind {
                    ElementwiseKind::Mul => up.iter().enumerate().map(|(i, g)| g * at(b, i)).collect(),
                    _ => up.to_vec(),
                };
                if *bcast == Broadcast::LeftScalar { reduce_scalar(g) } else { g }
            });
            let gb = wants(1).then(|| {
                let g: Vec<f64> = match kind {
                    ElementwiseKind::Mul => up.iter().enumerate().map(|(i, g)| g * at(a, i)).collect(),
                    ElementwiseKind::Sub => up.iter().map(|g| -g).collect(),
                    _ => up.to_vec(),
                };
                if *bcast == Broadcast::RightScalar { reduce_scalar(g) } else { g }
            });
            vec![ga, gb]
        }
        Op::Unary(kind) => {
            let x = input(0);
            let y = &node.value.data;
            let g = up
                .iter()
                .enumerate()
                .map(|(i, g)| match kind {
                    ElementwiseKind::Exp => g * y[i],
                    ElementwiseKind::Log => g / x[i],
                    ElementwiseKind::Relu => {
                        if x[i] > 0.0 {
                            *g
                        } else {
                            0.0
                        }
                    }
                    _ => 2.0 * x[i] * g,
                })
                .collect();
            vec![Some(g)]
        }
        Op::ClampMin(floor) => {
            let x = input(0);
            let g = up
                .iter()
                .zip(x)
                .map(|(g, &x)| if x >= *floor { *g } else { 0.0 })
                .collect();
            vec![Some(g)]
        }
        Op::Scale(f) => vec![Some(up.iter().map(|g| g * f).collect())],
        Op::Sum => vec![Some(vec![up[0]; input(0).len()])],
        Op::Mean => {
            let n = input(0).len();
            vec![Some(vec![up[0] / n as f64; n])]
        }
        Op::MaskedMean { weights, total } => {
            let g = if *total > 0.0 {
                weights.iter().map(|w| up[0] * w / total).collect()
            } else {
                vec![0.0; weights.len()]
            };
            vec![Some(g)]
        }
        Op::SumChannels {
            batch,
            channels,
            plane,
        } => {
            let mut g = vec![0.0; batch * channels * plane];
            for b in 0..*batch {
                let src = &up[b * plane..(b + 1) * plane];
                for c in 0..*channels {
                    g[(b * channels + c) * plane..][..*plane].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }
        Op::Gather {
            channels,
            plane,
            index,
        } => {
            let mut g = vec![0.0; input(0).len()];
            for (i, (&k, &u)) in index.iter().zip(up).enumerate() {
                let (b, p) = (i / plane, i % plane);
                g[(b * channels + k) * plane + p] += u;
            }
            vec![Some(g)]
        }
        Op::Softmax {
            batch,
            channels,
            plane,
        } => {
            let y = &node.value.data;
            let mut g = vec![0.0; y.len()];
            for b in 0..*batch {
                let base = b * channels * plane;
                for p in 0..*plane {
                    let dot: f64 = (0..*channels)
                        .map(|c| y[base + c * plane + p] * up[base + c * plane + p])
                        .sum();
                    for c in 0..*channels {
                        let i = base + c * plane + p;
                        g[i] = y[i] * (up[i] - dot);
                    }
                }
            }
            vec![Some(g)]
        }
        Op::Conv2d(geom) => {
            let (x, w) = (input(0), input(1));
            vec![
                wants(0).then(|| kernels::conv2d_backward_input(geom, up, w)),
                wants(1).then(|| kernels::conv2d_backward_weight(geom, up, x)),
                wants(2).then(|| kernels::conv2d_backward_bias(geom, up)),
            ]
        }
        Op::Resize {
            batch_channels,
            rows,
            cols,
        } => vec![Some(kernels::resize_backward(up, *batch_channels, rows, cols))],
    }
}
