//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows one [`ParamSet`] immutably, records every op as it is
//! applied, and [`Graph::backward`] accumulates parameter gradients into a
//! [`Grads`] buffer. Each graph processes a single image (`[C, H, W]`) or a
//! row batch (`[N, D]`); batching across images happens above this layer.

use crate::{matmul, Grads, ParamId, ParamSet, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        /// im2col buffer; `None` for pointwise (1x1, stride 1, no pad) convs.
        cols: Option<Vec<F>>,
    },
    Relu(Var),
    Add(Var, Var),
    Upsample2x(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Gather {
        x: Var,
        cells: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::zeros(&[0]), Op::Param(id), true)
    }

    /// 2-d convolution, weight `[Co, C, k, k]`, optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Co, C, k, k]");
        assert_eq!(ws[1], c, "conv input channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (co, k) = (ws[0], ws[2]);
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "input smaller than kernel"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            None
        } else {
            Some(im2col(
                self.value(x).data(),
                c,
                h,
                wd,
                k,
                stride,
                pad,
                ho,
                wo,
            ))
        };
        let mut out = vec![F::zero(); co * ho * wo];
        {
            let colsref: &[F] = match &cols {
                Some(v) => v,
                None => self.value(x).data(),
            };
            matmul(
                false,
                false,
                co,
                c * k * k,
                ho * wo,
                self.value(w).data(),
                colsref,
                F::zero(),
                &mut out,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[co, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(F::zero())).collect();
        let out = Tensor::from_vec(t.shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Nearest-neighbour 2x upsampling to an explicit `(h, w)` target, which
    /// must satisfy `ceil(h / 2) == H_in` and `ceil(w / 2) == W_in`.
    pub fn upsample2x(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        let (c, hi, wi) = t.chw();
        assert_eq!(h.div_ceil(2), hi, "upsample height");
        assert_eq!(w.div_ceil(2), wi, "upsample width");
        let src = t.data();
        let mut out = vec![F::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let srow = &src[(ch * hi + y / 2) * wi..][..wi];
                let drow = &mut out[(ch * h + y) * w..][..w];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Upsample2x(x), rg)
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool3s2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let src = t.data();
        let mut out = vec![F::zero(); c * ho * wo];
        let mut argmax = vec![0u32; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ch * h + iy as usize) * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[c, ho, wo], out),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    /// `[C, H, W] -> [1, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let inv = F::one() / F::from_usize(h * w).unwrap();
        let data = t
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<F>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[1, c], data), Op::GlobalAvgPool(x), rg)
    }

    /// Gathers the channel vectors at flat spatial indices (`row * W + col`)
    /// into a `[n, C]` row batch.
    pub fn gather(&mut self, x: Var, cells: Vec<usize>) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let plane = h * w;
        let src = t.data();
        let mut out = vec![F::zero(); cells.len() * c];
        for (i, &cell) in cells.iter().enumerate() {
            assert!(cell < plane, "gather index {cell} outside {h}x{w} grid");
            for ch in 0..c {
                out[i * c + ch] = src[ch * plane + cell];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[cells.len(), c], out),
            Op::Gather { x, cells },
            rg,
        )
    }

    /// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).rc();
        let ws = self.value(w).shape();
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        assert_eq!(ws[1], din, "linear input width");
        let dout = ws[0];
        let mut out = vec![F::zero(); n * dout];
        matmul(
            false,
            true,
            n,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            F::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[n, dout], out),
            Op::Linear { x, w, b },
            rg,
        )
    }

    /// Scales every row of `[n, d]` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, d) = t.rc();
        let tiny = F::from_f64_lossy(1e-12);
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, d], out),
            Op::L2Normalize { x, norms },
            rg,
        )
    }

    /// Propagates the seed gradients back through the graph, adding the
    /// resulting parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(Var, &Tensor<F>)], grads: &mut Grads<F>) {
        let mut g: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, t) in seeds {
            assert_eq!(self.value(*v).shape(), t.shape(), "seed gradient shape");
            accumulate(&mut g[v.0], t);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&dy),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                    cols,
                } => {
                    let (c, h, wd) = self.value(*x).chw();
                    let (co, ho, wo) = dy.chw();
                    let ckk = c * k * k;
                    let colsref: &[F] = match cols {
                        Some(v) => v,
                        None => self.value(*x).data(),
                    };
                    if self.rg(*w) {
                        let mut dw = vec![F::zero(); co * ckk];
                        matmul(
                            false,
                            true,
                            co,
                            ho * wo,
                            ckk,
                            dy.data(),
                            colsref,
                            F::zero(),
                            &mut dw,
                        );
                        let shape = self.value(*w).shape().to_vec();
                        accumulate(&mut g[w.0], &Tensor::from_vec(&shape, dw));
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let db = dy
                                .data()
                                .chunks(ho * wo)
                                .map(|p| p.iter().copied().sum())
                                .collect();
                            accumulate(&mut g[b.0], &Tensor::from_vec(&[co], db));
                        }
                    }
                    if self.rg(*x) {
                        let mut dcols = vec![F::zero(); ckk * ho * wo];
                        matmul(
                            true,
                            false,
                            ckk,
                            co,
                            ho * wo,
                            self.value(*w).data(),
                            dy.data(),
                            F::zero(),
                            &mut dcols,
                        );
                        let dx = if cols.is_some() {
                            col2im(&dcols, c, h, wd, *k, *stride, *pad, ho, wo)
                        } else {
                            dcols
                        };
                        accumulate(&mut g[x.0], &Tensor::from_vec(&[c, h, wd], dx));
                    }
                }
                Op::Relu(x) => {
                    let y = &self.nodes[i].value;
                    let data = dy
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&d, &yv)| if yv > F::zero() { d } else { F::zero() })
                        .collect();
                    accumulate(&mut g[x.0], &Tensor::from_vec(dy.shape(), data));
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut g[a.0], &dy);
                    }
                    if self.rg(*b) {
                        accumulate(&mut g[b.0], &dy);
                    }
                }
                Op::Upsample2x(x) => {
                    let (c, hi, wi) = self.value(*x).chw();
                    let (_, h, w) = dy.chw();
                    let mut dx = vec![F::zero(); c * hi * wi];
                    let src = dy.data();
                    for ch in 0..c {
                        for y in 0..h {
                            let drow = &mut dx[(ch * hi + y / 2) * wi..][..wi];
                            let srow = &src[(ch * h + y) * w..][..w];
                            for (xx, &v) in srow.iter().enumerate() {
                                drow[xx / 2] += v;
                            }
                        }
                    }
                    accumulate(&mut g[x.0], &Tensor::from_vec(&[c, hi, wi], dx));
                }
                Op::MaxPool { x, argmax } => {
                    let shape = self.value(*x).shape().to_vec();
                    let mut dx = Tensor::zeros(&shape);
                    let d = dx.data_mut();
                    for (&src, &v) in argmax.iter().zip(dy.data()) {
                        d[src as usize] += v;
                    }
                    accumulate(&mut g[x.0], &dx);
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let inv = F::one() / F::from_usize(h * w).unwrap();
                    let mut dx = vec![F::zero(); c * h * w];
                    for (plane, &dv) in dx.chunks_mut(h * w).zip(dy.data()) {
                        plane.iter_mut().for_each(|v| *v = dv * inv);
                    }
                    accumulate(&mut g[x.0], &Tensor::from_vec(&[c, h, w], dx));
                }
                Op::Gather { x, cells } => {
                    let (c, h, w) = self.value(*x).chw();
                    let plane = h * w;
                    let mut dx = vec![F::zero(); c * plane];
                    for (r, &cell) in cells.iter().enumerate() {
                        for ch in 0..c {
                            dx[ch * plane + cell] += dy.data()[r * c + ch];
                        }
                    }
                    accumulate(&mut g[x.0], &Tensor::from_vec(&[c, h, w], dx));
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = self.value(*x).rc();
                    let (_, dout) = dy.rc();
                    if self.rg(*w) {
                        let mut dw = vec![F::zero(); dout * din];
                        matmul(
                            true,
                            false,
                            dout,
                            n,
                            din,
                            dy.data(),
                            self.value(*x).data(),
                            F::zero(),
                            &mut dw,
                        );
                        accumulate(&mut g[w.0], &Tensor::from_vec(&[dout, din], dw));
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let mut db = vec![F::zero(); dout];
                            for row in dy.data().chunks(dout) {
                                for (a, &v) in db.iter_mut().zip(row) {
                                    *a += v;
                                }
                            }
                            accumulate(&mut g[b.0], &Tensor::from_vec(&[dout], db));
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = vec![F::zero(); n * din];
                        matmul(
                            false,
                            false,
                            n,
                            dout,
                            din,
                            dy.data(),
                            self.value(*w).data(),
                            F::zero(),
                            &mut dx,
                        );
                        accumulate(&mut g[x.0], &Tensor::from_vec(&[n, din], dx));
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &self.nodes[i].value;
                    let (n, d) = y.rc();
                    let mut dx = vec![F::zero(); n * d];
                    for r in 0..n {
                        let yr = &y.data()[r * d..][..d];
                        let gr = &dy.data()[r * d..][..d];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    accumulate(&mut g[x.0], &Tensor::from_vec(&[n, d], dx));
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, t: &Tensor<F>) {
    match slot {
        Some(acc) => acc.add_assign(t),
        None => *slot = Some(t.clone()),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let mut cols = vec![F::zero(); c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let drow = &mut dst[oy * wo..][..wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let mut x = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..][..w];
                    let srow = &src[oy * wo..][..wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct (non-im2col) convolution used as an oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (c, h, wd) = x.chw();
        let s = w.shape();
        let (co, k) = (s[0], s[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[(ch * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ch) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Tensor::from_vec(&[co, ho, wo], out)
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad, h, w) in &[
            (3, 1, 1, 7, 5),
            (3, 2, 1, 9, 8),
            (1, 1, 0, 4, 6),
            (7, 2, 3, 11, 13),
        ] {
            let x = rand_tensor(&[3, h, w], &mut rng);
            let wt = rand_tensor(&[4, 3, k, k], &mut rng);
            let mut ps = ParamSet::new();
            let wid = ps.push("w", wt.clone());
            let mut g = Graph::new(&ps);
            let xv = g.input(x.clone());
            let wv = g.param(wid);
            let y = g.conv2d(xv, wv, None, stride, pad);
            let want = conv_direct(&x, &wt, stride, pad);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Scalar objective `sum(out * probe)` over a small net touching every op.
    fn net_loss(
        ps: &ParamSet<f64>,
        x: &Tensor<f64>,
        probe: &Tensor<f64>,
        grads: Option<&mut Grads<f64>>,
    ) -> f64 {
        let mut g = Graph::new(ps);
        let xv = g.input(x.clone());
        let w1 = g.param(ParamId(0));
        let b1 = g.param(ParamId(1));
        let h1 = g.conv2d(xv, w1, Some(b1), 2, 1);
        let h1 = g.relu(h1);
        let p = g.max_pool3s2(h1);
        let w2 = g.param(ParamId(2));
        let lat = g.conv2d(p, w2, None, 1, 0);
        let (_, hh, ww) = g.value(h1).chw();
        let up = g.upsample2x(lat, hh, ww);
        let sum = g.add(up, h1);
        let cells = g.gather(sum, vec![0, 3, 5]);
        let pooled = g.global_avg_pool(sum);
        let w3 = g.param(ParamId(3));
        let b3 = g.param(ParamId(4));
        let lin = g.linear(cells, w3, Some(b3));
        let z = g.l2_normalize(lin);
        let pz = g.linear(pooled, w3, None);
        let pz = g.l2_normalize(pz);
        let val: f64 = g
            .value(z)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + g.value(pz)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        if let Some(grads) = grads {
            let pz_seed = Tensor::from_vec(&[1, 5], probe.data()[..5].to_vec());
            g.backward(&[(z, probe), (pz, &pz_seed)], grads);
        }
        val
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        ps.push("w1", rand_tensor(&[4, 2, 3, 3], &mut rng));
        ps.push("b1", rand_tensor(&[4], &mut rng));
        ps.push("w2", rand_tensor(&[4, 4, 1, 1], &mut rng));
        ps.push("w3", rand_tensor(&[5, 4], &mut rng));
        ps.push("b3", rand_tensor(&[5], &mut rng));
        let x = rand_tensor(&[2, 9, 7], &mut rng);
        let probe = rand_tensor(&[3, 5], &mut rng);
        let mut grads = ps.zero_grads();
        net_loss(&ps, &x, &probe, Some(&mut grads));
        let eps = 1e-6;
        for pi in 0..ps.len() {
            let n = ps.get(ParamId(pi)).len();
            for j in 0..n {
                let mut plus = ps.clone();
                plus.get_mut(ParamId(pi)).data_mut()[j] += eps;
                let mut minus = ps.clone();
                minus.get_mut(ParamId(pi)).data_mut()[j] -= eps;
                let fd = (net_loss(&plus, &x, &probe, None) - net_loss(&minus, &x, &probe, None))
                    / (2.0 * eps);
                let an = grads.get(ParamId(pi)).data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "param {pi}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn upsample_handles_odd_targets() {
        let ps = ParamSet::<f32>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x, 3, 3);
        assert_eq!(
            g.value(y).data(),
            &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]
        );
    }
}
