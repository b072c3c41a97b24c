//! A small static computation graph over planar `C × H × W` tensors with
//! hand-written backward passes. Parameters live in one flat vector; every
//! layer owns a named slice of it.

use serde::{Deserialize, Serialize};

/// A single-sample activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// 2-D convolution; `depthwise` convolves each channel with its own filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub depthwise: bool,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }

    fn weight_len(&self) -> usize {
        if self.depthwise {
            self.out_c * self.kernel * self.kernel
        } else {
            self.out_c * self.in_c * self.kernel * self.kernel
        }
    }

    /// Output columns `ox` whose input column `ox*stride - pad + offset`
    /// lies inside `[0, n)`.
    fn valid_range(&self, offset: usize, n: usize, out_n: usize) -> (usize, usize) {
        let lo_num = self.pad as i64 - offset as i64;
        let lo = if lo_num <= 0 {
            0
        } else {
            ((lo_num + self.stride as i64 - 1) / self.stride as i64) as usize
        };
        let hi_num = n as i64 - 1 + self.pad as i64 - offset as i64;
        if hi_num < 0 {
            return (1, 0);
        }
        let hi = ((hi_num / self.stride as i64) as usize).min(out_n.saturating_sub(1));
        (lo, hi)
    }

    fn forward(&self, x: &Tensor, params: &[f64]) -> Tensor {
        if self.depthwise {
            self.forward_direct(x, params)
        } else {
            self.forward_gemm(x, params)
        }
    }

    fn backward(
        &self,
        x: &Tensor,
        gy: &Tensor,
        params: &[f64],
        gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        if self.depthwise {
            self.backward_direct(x, gy, params, gparams, want_gx)
        } else {
            self.backward_gemm(x, gy, params, gparams, want_gx)
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `x` into a `(in_c·k·k) × (oh·ow)` matrix, zero outside the
    /// image.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut col = vec![0.0; self.in_c * k * k * p];
        for ic in 0..self.in_c {
            let xin = &x.data[ic * x.plane()..(ic + 1) * x.plane()];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky * self.dilation, x.h, oh);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx * self.dilation, x.w, ow);
                    if oy0 > oy1 || ox0 > ox1 {
                        continue;
                    }
                    let row = &mut col[((ic * k + ky) * k + kx) * p..][..p];
                    let ix0 = ox0 * self.stride + kx * self.dilation - self.pad;
                    for oy in oy0..=oy1 {
                        let iy = oy * self.stride + ky * self.dilation - self.pad;
                        let src = &xin[iy * x.w..(iy + 1) * x.w];
                        let dst = &mut row[oy * ow + ox0..=oy * ow + ox1];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[ix0 + j * self.stride];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im_add(&self, col: &[f64], gx: &mut Tensor, oh: usize, ow: usize) {
        let k = self.kernel;
        let p = oh * ow;
        let (h, w) = (gx.h, gx.w);
        for ic in 0..self.in_c {
            let plane = &mut gx.data[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky * self.dilation, h, oh);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx * self.dilation, w, ow);
                    if oy0 > oy1 || ox0 > ox1 {
                        continue;
                    }
                    let row = &col[((ic * k + ky) * k + kx) * p..][..p];
                    let ix0 = ox0 * self.stride + kx * self.dilation - self.pad;
                    for oy in oy0..=oy1 {
                        let iy = oy * self.stride + ky * self.dilation - self.pad;
                        let src = &row[oy * ow + ox0..=oy * ow + ox1];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for (j, s) in src.iter().enumerate() {
                            dst[ix0 + j * self.stride] += s;
                        }
                    }
                }
            }
        }
    }

    fn forward_gemm(&self, x: &Tensor, params: &[f64]) -> Tensor {
        let oh = self.out_size(x.h);
        let ow = self.out_size(x.w);
        let p = oh * ow;
        let kk = self.in_c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        let b = &params[self.bias..self.bias + self.out_c];
        for (oc, chunk) in y.data.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[oc]);
        }
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        let w = &params[self.weight..self.weight + self.weight_len()];
        // SAFETY: all three buffers are dense row-major with the strides given.
        unsafe {
            matrixmultiply::dgemm(
                self.out_c,
                kk,
                p,
                1.0,
                w.as_ptr(),
                kk as isize,
                1,
                col.as_ptr(),
                p as isize,
                1,
                1.0,
                y.data.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        y
    }

    fn backward_gemm(
        &self,
        x: &Tensor,
        gy: &Tensor,
        params: &[f64],
        gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (gy.h, gy.w);
        let p = oh * ow;
        let kk = self.in_c * self.kernel * self.kernel;
        let owned;
        let col: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        if let Some(gp) = gparams {
            for (oc, g) in gp[self.bias..self.bias + self.out_c].iter_mut().enumerate() {
                *g += gy.data[oc * p..(oc + 1) * p].iter().sum::<f64>();
            }
            let gw = &mut gp[self.weight..self.weight + self.weight_len()];
            // SAFETY: gy is out_c × p, col is read transposed as p × kk.
            unsafe {
                matrixmultiply::dgemm(
                    self.out_c,
                    p,
                    kk,
                    1.0,
                    gy.data.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    gw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
        if !want_gx {
            return None;
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        let mut gcol = vec![0.0; kk * p];
        // SAFETY: w is read transposed as kk × out_c, gy is out_c × p.
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_c,
                p,
                1.0,
                w.as_ptr(),
                1,
                kk as isize,
                gy.data.as_ptr(),
                p as isize,
                1,
                0.0,
                gcol.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if self.is_pointwise() {
            return Some(Tensor::from_vec(x.c, x.h, x.w, gcol));
        }
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        self.col2im_add(&gcol, &mut gx, oh, ow);
        Some(gx)
    }

    fn forward_direct(&self, x: &Tensor, params: &[f64]) -> Tensor {
        let oh = self.out_size(x.h);
        let ow = self.out_size(x.w);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        let k = self.kernel;
        let w = &params[self.weight..self.weight + self.weight_len()];
        let b = &params[self.bias..self.bias + self.out_c];
        for oc in 0..self.out_c {
            let out = &mut y.data[oc * oh * ow..(oc + 1) * oh * ow];
            out.iter_mut().for_each(|v| *v = b[oc]);
            let inputs: Box<dyn Iterator<Item = usize>> = if self.depthwise {
                Box::new(std::iter::once(oc))
            } else {
                Box::new(0..self.in_c)
            };
            for ic in inputs {
                let xin = &x.data[ic * x.plane()..(ic + 1) * x.plane()];
                let wbase = if self.depthwise {
                    oc * k * k
                } else {
                    (oc * self.in_c + ic) * k * k
                };
                for ky in 0..k {
                    let (oy0, oy1) = self.valid_range(ky * self.dilation, x.h, oh);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = self.valid_range(kx * self.dilation, x.w, ow);
                        if ox0 > ox1 {
                            continue;
                        }
                        for oy in oy0..=oy1.min(oh.saturating_sub(1)) {
                            if oy0 > oy1 {
                                break;
                            }
                            let iy = oy * self.stride + ky * self.dilation - self.pad;
                            let row_out = &mut out[oy * ow + ox0..=oy * ow + ox1];
                            let ix0 = ox0 * self.stride + kx * self.dilation - self.pad;
                            let row_in = &xin[iy * x.w..(iy + 1) * x.w];
                            if self.stride == 1 {
                                let src = &row_in[ix0..ix0 + row_out.len()];
                                for (o, s) in row_out.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for (j, o) in row_out.iter_mut().enumerate() {
                                    *o += wv * row_in[ix0 + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn backward_direct(
        &self,
        x: &Tensor,
        gy: &Tensor,
        params: &[f64],
        mut gparams: Option<&mut [f64]>,
        want_gx: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (gy.h, gy.w);
        let k = self.kernel;
        let w = &params[self.weight..self.weight + self.weight_len()];
        let mut gx = want_gx.then(|| Tensor::zeros(x.c, x.h, x.w));
        if let Some(gp) = gparams.as_deref_mut() {
            let gb = &mut gp[self.bias..self.bias + self.out_c];
            for (oc, g) in gb.iter_mut().enumerate() {
                *g += gy.data[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        for oc in 0..self.out_c {
            let gout = &gy.data[oc * oh * ow..(oc + 1) * oh * ow];
            let inputs: Box<dyn Iterator<Item = usize>> = if self.depthwise {
                Box::new(std::iter::once(oc))
            } else {
                Box::new(0..self.in_c)
            };
            for ic in inputs {
                let xin = &x.data[ic * x.plane()..(ic + 1) * x.plane()];
                let wbase = if self.depthwise {
                    oc * k * k
                } else {
                    (oc * self.in_c + ic) * k * k
                };
                for ky in 0..k {
                    let (oy0, oy1) = self.valid_range(ky * self.dilation, x.h, oh);
                    if oy0 > oy1 {
                        continue;
                    }
                    for kx in 0..k {
                        let (ox0, ox1) = self.valid_range(kx * self.dilation, x.w, ow);
                        if ox0 > ox1 {
                            continue;
                        }
                        let wv = w[wbase + ky * k + kx];
                        let ix0 = ox0 * self.stride + kx * self.dilation - self.pad;
                        let mut acc = 0.0;
                        for oy in oy0..=oy1 {
                            let iy = oy * self.stride + ky * self.dilation - self.pad;
                            let g_row = &gout[oy * ow + ox0..=oy * ow + ox1];
                            let row_in = &xin[iy * x.w..(iy + 1) * x.w];
                            if self.stride == 1 {
                                let src = &row_in[ix0..ix0 + g_row.len()];
                                acc += g_row.iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx.data[ic * x.plane() + iy * x.w + ix0..][..g_row.len()];
                                    for (d, g) in dst.iter_mut().zip(g_row) {
                                        *d += wv * g;
                                    }
                                }
                            } else {
                                for (j, g) in g_row.iter().enumerate() {
                                    let ix = ix0 + j * self.stride;
                                    acc += g * row_in[ix];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data[ic * x.plane() + iy * x.w + ix] += wv * g;
                                    }
                                }
                            }
                        }
                        if let Some(gp) = gparams.as_deref_mut() {
                            gp[self.weight + wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        gx
    }
}

fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            let iy = oy * x.h / oh;
            for ox in 0..ow {
                let ix = ox * x.w / ow;
                y.data[(c * oh + oy) * ow + ox] = x.data[(c * x.h + iy) * x.w + ix];
            }
        }
    }
    y
}

fn resize_nearest_backward(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut gx = Tensor::zeros(gy.c, h, w);
    for c in 0..gy.c {
        for oy in 0..gy.h {
            let iy = oy * h / gy.h;
            for ox in 0..gy.w {
                let ix = ox * w / gy.w;
                gx.data[(c * h + iy) * w + ix] += gy.data[(c * gy.h + oy) * gy.w + ox];
            }
        }
    }
    gx
}

/// Source index pair and weight of the upper neighbour for bilinear sampling
/// with half-pixel centres.
fn bilinear_taps(o: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    let scale = in_n as f64 / out_n as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, s - i0 as f64)
}

fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, oh, ow);
    let rows: Vec<_> = (0..oh).map(|o| bilinear_taps(o, oh, x.h)).collect();
    let cols: Vec<_> = (0..ow).map(|o| bilinear_taps(o, ow, x.w)).collect();
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (1.0 - fx) + src[y0 * x.w + x1] * fx;
                let bot = src[y1 * x.w + x0] * (1.0 - fx) + src[y1 * x.w + x1] * fx;
                y.data[(c * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

fn resize_bilinear_backward(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut gx = Tensor::zeros(gy.c, h, w);
    let rows: Vec<_> = (0..gy.h).map(|o| bilinear_taps(o, gy.h, h)).collect();
    let cols: Vec<_> = (0..gy.w).map(|o| bilinear_taps(o, gy.w, w)).collect();
    for c in 0..gy.c {
        let dst = &mut gx.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gy.data[(c * gy.h + oy) * gy.w + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

/// Graph node. Sources refer to earlier nodes by index; node 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input,
    Conv { src: usize, conv: Conv2d },
    Relu { src: usize },
    LeakyRelu { src: usize, slope: f64 },
    Add { a: usize, b: usize },
    Concat { srcs: Vec<usize> },
    /// Nearest-neighbour resize to the spatial size of node `like`.
    ResizeNearest { src: usize, like: usize },
    /// Bilinear resize to the spatial size of node `like`.
    ResizeBilinear { src: usize, like: usize },
    /// Global average pool, broadcast back over the source's grid.
    GlobalPool { src: usize },
}

/// A static graph with its parameter layout; the last node is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    specs: Vec<ParamSpec>,
    /// Input channel count.
    in_c: usize,
    /// Receptive-field bookkeeping per node: (size, jump).
    rf: Vec<(usize, usize)>,
    channels: Vec<usize>,
}

/// Incremental graph construction.
pub struct GraphBuilder {
    graph: Graph,
    num_params: usize,
}

impl GraphBuilder {
    pub fn new(in_c: usize) -> Self {
        Self {
            graph: Graph {
                nodes: vec![Node::Input],
                specs: Vec::new(),
                in_c,
                rf: vec![(1, 1)],
                channels: vec![in_c],
            },
            num_params: 0,
        }
    }

    fn push(&mut self, node: Node, rf: (usize, usize), channels: usize) -> usize {
        self.graph.nodes.push(node);
        self.graph.rf.push(rf);
        self.graph.channels.push(channels);
        self.graph.nodes.len() - 1
    }

    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.num_params;
        let spec = ParamSpec {
            name,
            shape,
            offset,
        };
        self.num_params += spec.len();
        self.graph.specs.push(spec);
        offset
    }

    pub fn channels(&self, node: usize) -> usize {
        self.graph.channels[node]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        src: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> usize {
        let in_c = self.channels(src);
        let weight = self.alloc(format!("{name}.weight"), vec![out_c, in_c, kernel, kernel]);
        let bias = self.alloc(format!("{name}.bias"), vec![out_c]);
        let (size, jump) = self.graph.rf[src];
        let rf = (size + (kernel - 1) * dilation * jump, jump * stride);
        let conv = Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            dilation,
            depthwise: false,
            weight,
            bias,
        };
        self.push(Node::Conv { src, conv }, rf, out_c)
    }

    pub fn depthwise(
        &mut self,
        name: &str,
        src: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> usize {
        let c = self.channels(src);
        let weight = self.alloc(format!("{name}.weight"), vec![c, 1, kernel, kernel]);
        let bias = self.alloc(format!("{name}.bias"), vec![c]);
        let (size, jump) = self.graph.rf[src];
        let rf = (size + (kernel - 1) * dilation * jump, jump * stride);
        let conv = Conv2d {
            in_c: c,
            out_c: c,
            kernel,
            stride,
            pad,
            dilation,
            depthwise: true,
            weight,
            bias,
        };
        self.push(Node::Conv { src, conv }, rf, c)
    }

    pub fn relu(&mut self, src: usize) -> usize {
        let (rf, c) = (self.graph.rf[src], self.channels(src));
        self.push(Node::Relu { src }, rf, c)
    }

    pub fn leaky_relu(&mut self, src: usize, slope: f64) -> usize {
        let (rf, c) = (self.graph.rf[src], self.channels(src));
        self.push(Node::LeakyRelu { src, slope }, rf, c)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        assert_eq!(self.channels(a), self.channels(b), "add needs equal channels");
        let rf = merge_rf(self.graph.rf[a], self.graph.rf[b]);
        let c = self.channels(a);
        self.push(Node::Add { a, b }, rf, c)
    }

    pub fn concat(&mut self, srcs: &[usize]) -> usize {
        let c = srcs.iter().map(|&s| self.channels(s)).sum();
        let rf = srcs
            .iter()
            .map(|&s| self.graph.rf[s])
            .reduce(merge_rf)
            .expect("concat needs inputs");
        self.push(Node::Concat { srcs: srcs.to_vec() }, rf, c)
    }

    pub fn resize_nearest(&mut self, src: usize, like: usize) -> usize {
        let rf = (self.graph.rf[src].0, self.graph.rf[like].1);
        let c = self.channels(src);
        self.push(Node::ResizeNearest { src, like }, rf, c)
    }

    pub fn resize_bilinear(&mut self, src: usize, like: usize) -> usize {
        let rf = (self.graph.rf[src].0, self.graph.rf[like].1);
        let c = self.channels(src);
        self.push(Node::ResizeBilinear { src, like }, rf, c)
    }

    /// Global context branch; it does not count toward the local receptive field.
    pub fn global_pool(&mut self, src: usize) -> usize {
        let (rf, c) = (self.graph.rf[src], self.channels(src));
        self.push(Node::GlobalPool { src }, rf, c)
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

fn merge_rf(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (a.0.max(b.0), a.1.min(b.1))
}

/// Forward activations of every node, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    values: Vec<Tensor>,
}

impl Activations {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("graph has nodes")
    }

    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }
}

impl Graph {
    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("graph has nodes")
    }

    /// Receptive field (pixels) of the output along the local path.
    pub fn receptive_field(&self) -> usize {
        self.rf.last().expect("graph has nodes").0
    }

    pub fn conv_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Conv { .. })).count()
    }

    /// The convolution producing the graph output's pre-activation, if the
    /// last node is a convolution.
    pub fn last_conv(&self) -> Option<&Conv2d> {
        self.nodes.iter().rev().find_map(|n| match n {
            Node::Conv { conv, .. } => Some(conv),
            _ => None,
        })
    }

    pub fn forward(&self, params: &[f64], input: Tensor) -> Activations {
        assert_eq!(input.c, self.in_c, "input channels");
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        values.push(input);
        for node in &self.nodes[1..] {
            let out = match node {
                Node::Input => unreachable!("input appears only at index 0"),
                Node::Conv { src, conv } => conv.forward(&values[*src], params),
                Node::Relu { src } => {
                    let mut t = values[*src].clone();
                    t.data.iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v = 0.0
                        }
                    });
                    t
                }
                Node::LeakyRelu { src, slope } => {
                    let mut t = values[*src].clone();
                    t.data.iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v *= slope
                        }
                    });
                    t
                }
                Node::Add { a, b } => {
                    let mut t = values[*a].clone();
                    t.add_assign(&values[*b]);
                    t
                }
                Node::Concat { srcs } => {
                    let first = &values[srcs[0]];
                    let (h, w) = (first.h, first.w);
                    let mut data = Vec::new();
                    let mut c = 0;
                    for &s in srcs {
                        assert_eq!((values[s].h, values[s].w), (h, w), "concat sizes");
                        data.extend_from_slice(&values[s].data);
                        c += values[s].c;
                    }
                    Tensor::from_vec(c, h, w, data)
                }
                Node::ResizeNearest { src, like } => {
                    resize_nearest(&values[*src], values[*like].h, values[*like].w)
                }
                Node::ResizeBilinear { src, like } => {
                    resize_bilinear(&values[*src], values[*like].h, values[*like].w)
                }
                Node::GlobalPool { src } => {
                    let x = &values[*src];
                    let mut t = Tensor::zeros(x.c, x.h, x.w);
                    for c in 0..x.c {
                        let m = x.data[c * x.plane()..(c + 1) * x.plane()].iter().sum::<f64>()
                            / x.plane() as f64;
                        t.data[c * x.plane()..(c + 1) * x.plane()].iter_mut().for_each(|v| *v = m);
                    }
                    t
                }
            };
            values.push(out);
        }
        Activations { values }
    }

    /// Backpropagates `grad_out` through the graph. Parameter gradients are
    /// accumulated into `grad_params` when given; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        acts: &Activations,
        grad_out: Tensor,
        mut grad_params: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[n - 1] = Some(grad_out);
        let accumulate = |grads: &mut Vec<Option<Tensor>>, idx: usize, g: Tensor| match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        for i in (1..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Node::Input => unreachable!(),
                Node::Conv { src, conv } => {
                    let need_gx = *src != 0 || want_input_grad;
                    if let Some(gx) =
                        conv.backward(&acts.values[*src], &g, params, grad_params.as_deref_mut(), need_gx)
                    {
                        accumulate(&mut grads, *src, gx);
                    }
                }
                Node::Relu { src } => {
                    let mut gx = g;
                    for (d, v) in gx.data.iter_mut().zip(&acts.values[i].data) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *src, gx);
                }
                Node::LeakyRelu { src, slope } => {
                    let mut gx = g;
                    for (d, v) in gx.data.iter_mut().zip(&acts.values[*src].data) {
                        if *v < 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, *src, gx);
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Node::Concat { srcs } => {
                    let mut offset = 0;
                    for &s in srcs {
                        let len = acts.values[s].data.len();
                        let part = Tensor::from_vec(
                            acts.values[s].c,
                            g.h,
                            g.w,
                            g.data[offset..offset + len].to_vec(),
                        );
                        offset += len;
                        accumulate(&mut grads, s, part);
                    }
                }
                Node::ResizeNearest { src, .. } => {
                    let x = &acts.values[*src];
                    accumulate(&mut grads, *src, resize_nearest_backward(&g, x.h, x.w));
                }
                Node::ResizeBilinear { src, .. } => {
                    let x = &acts.values[*src];
                    accumulate(&mut grads, *src, resize_bilinear_backward(&g, x.h, x.w));
                }
                Node::GlobalPool { src } => {
                    let mut gx = Tensor::zeros(g.c, g.h, g.w);
                    let plane = g.h * g.w;
                    for c in 0..g.c {
                        let m = g.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                        gx.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = m);
                    }
                    accumulate(&mut grads, *src, gx);
                }
            }
        }
        if want_input_grad {
            grads[0].take()
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Brute-force convolution straight from the definition.
    fn naive_conv(x: &Tensor, conv: &Conv2d, params: &[f64]) -> Tensor {
        let oh = conv.out_size(x.h);
        let ow = conv.out_size(x.w);
        let mut y = Tensor::zeros(conv.out_c, oh, ow);
        let k = conv.kernel;
        for oc in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = params[conv.bias + oc];
                    let ics: Vec<usize> = if conv.depthwise { vec![oc] } else { (0..conv.in_c).collect() };
                    for ic in ics {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky * conv.dilation) as i64 - conv.pad as i64;
                                let ix = (ox * conv.stride + kx * conv.dilation) as i64 - conv.pad as i64;
                                if iy < 0 || ix < 0 || iy >= x.h as i64 || ix >= x.w as i64 {
                                    continue;
                                }
                                let widx = if conv.depthwise {
                                    oc * k * k + ky * k + kx
                                } else {
                                    ((oc * conv.in_c + ic) * k + ky) * k + kx
                                };
                                s += params[conv.weight + widx]
                                    * x.data[(ic * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    y.data[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad, dil, dw) in &[
            (3, 1, 1, 1, false),
            (3, 2, 1, 1, false),
            (4, 2, 1, 1, false),
            (3, 1, 2, 2, false),
            (1, 1, 0, 1, false),
            (3, 1, 1, 1, true),
            (3, 2, 1, 1, true),
            (3, 1, 2, 2, true),
        ] {
            let mut b = GraphBuilder::new(3);
            let node = if dw {
                b.depthwise("c", 0, k, stride, pad, dil)
            } else {
                b.conv("c", 0, 4, k, stride, pad, dil)
            };
            let g = b.finish();
            let params = random(&mut rng, g.num_params());
            for &(h, w) in &[(7, 9), (8, 8), (5, 11)] {
                let x = Tensor::from_vec(3, h, w, random(&mut rng, 3 * h * w));
                let acts = g.forward(&params, x.clone());
                let Node::Conv { conv, .. } = &g.nodes[node] else { unreachable!() };
                let expected = naive_conv(&x, conv, &params);
                assert_eq!(acts.output().data.len(), expected.data.len());
                for (a, e) in acts.output().data.iter().zip(&expected.data) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_backward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, stride, pad, dil) in &[(3, 1, 1, 1), (4, 2, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1), (3, 2, 1, 1)] {
            let conv = Conv2d {
                in_c: 3,
                out_c: 5,
                kernel: k,
                stride,
                pad,
                dilation: dil,
                depthwise: false,
                weight: 0,
                bias: 5 * 3 * k * k,
            };
            let params = random(&mut rng, conv.bias + 5);
            let x = Tensor::from_vec(3, 9, 7, random(&mut rng, 3 * 63));
            let y = conv.forward_gemm(&x, &params);
            let gy = Tensor::from_vec(y.c, y.h, y.w, random(&mut rng, y.data.len()));
            let mut ga = vec![0.0; params.len()];
            let mut gb = vec![0.0; params.len()];
            let xa = conv.backward_gemm(&x, &gy, &params, Some(&mut ga), true).unwrap();
            let xb = conv.backward_direct(&x, &gy, &params, Some(&mut gb), true).unwrap();
            for (a, b) in ga.iter().zip(&gb).chain(xa.data.iter().zip(&xb.data)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn loss_of(g: &Graph, params: &[f64], x: &Tensor, probe: &[f64]) -> f64 {
        let acts = g.forward(params, x.clone());
        acts.output().data.iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = GraphBuilder::new(2);
        let c1 = b.conv("c1", 0, 4, 3, 2, 1, 1);
        let r1 = b.relu(c1);
        let d1 = b.depthwise("d1", r1, 3, 1, 2, 2);
        let l1 = b.leaky_relu(d1, 0.2);
        let gp = b.global_pool(l1);
        let cat = b.concat(&[l1, gp]);
        let c2 = b.conv("c2", cat, 4, 1, 1, 0, 1);
        let s = b.add(c2, r1);
        let up = b.resize_nearest(s, 0);
        let c3 = b.conv("c3", up, 3, 3, 2, 1, 1);
        let _out = b.resize_bilinear(c3, 0);
        let g = b.finish();

        let params = random(&mut rng, g.num_params());
        let x = Tensor::from_vec(2, 9, 10, random(&mut rng, 180));
        let acts = g.forward(&params, x.clone());
        let probe = random(&mut rng, acts.output().data.len());
        let grad_out = Tensor::from_vec(
            acts.output().c,
            acts.output().h,
            acts.output().w,
            probe.clone(),
        );
        let mut gp_analytic = vec![0.0; params.len()];
        let gx = g
            .backward(&params, &acts, grad_out, Some(&mut gp_analytic), true)
            .unwrap();

        let h = 1e-6;
        for i in (0..params.len()).step_by(3) {
            let mut p = params.clone();
            p[i] += h;
            let up = loss_of(&g, &p, &x, &probe);
            p[i] -= 2.0 * h;
            let down = loss_of(&g, &p, &x, &probe);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - gp_analytic[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs {}",
                gp_analytic[i]
            );
        }
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss_of(&g, &params, &xp, &probe);
            xp.data[i] -= 2.0 * h;
            let down = loss_of(&g, &params, &xp, &probe);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn receptive_field_accumulates() {
        let mut b = GraphBuilder::new(1);
        let c1 = b.conv("a", 0, 1, 3, 1, 1, 1);
        let c2 = b.conv("b", c1, 1, 3, 2, 1, 1);
        b.conv("c", c2, 1, 3, 1, 2, 2);
        let g = b.finish();
        // 1 + 2 + 2 = 5 after two 3x3 convs; the dilated conv at jump 2 adds 2*2*2.
        assert_eq!(g.receptive_field(), 13);
    }
}
