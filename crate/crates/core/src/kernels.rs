//! Raw NHWC convolution loops shared by the tape's forward and backward rules.
//!
//! All loops run over one output row at a time and may fan rows out over the
//! rayon pool. Each output element is reduced in a fixed order, so parallel
//! and serial execution produce identical bits.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Below this many multiply-adds a loop stays on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

/// Geometry of a same-padded, stride-1, dilated 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(
        op: &'static str,
        input_shape: &[usize],
        kh: usize,
        kw: usize,
        dilation: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::invalid(
                op,
                format!("input must be rank 4 [B,H,W,C], got {input_shape:?}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                op,
                format!("kernel extent must be odd, got {kh}x{kw}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::invalid(op, "dilation must be >= 1"));
        }
        let reach = |k: usize| {
            (k / 2)
                .checked_mul(dilation)
                .filter(|r| *r <= isize::MAX as usize / 2)
        };
        if reach(kh).is_none() || reach(kw).is_none() {
            return Err(Error::invalid(
                op,
                format!("dilation {dilation} overflows the padded index range"),
            ));
        }
        Ok(Self {
            batch: input_shape[0],
            rows: input_shape[1],
            cols: input_shape[2],
            kh,
            kw,
            dilation,
        })
    }

    fn row_offsets(&self) -> Vec<isize> {
        taps(self.kh, self.dilation)
    }

    fn col_offsets(&self) -> Vec<isize> {
        taps(self.kw, self.dilation)
    }

    fn pixels(&self) -> usize {
        self.batch * self.rows * self.cols
    }
}

fn taps(k: usize, dilation: usize) -> Vec<isize> {
    let half = (k / 2) as isize;
    (0..k as isize)
        .map(|u| (u - half) * dilation as isize)
        .collect()
}

fn shifted(base: usize, offset: isize, len: usize) -> Option<usize> {
    let p = base as isize + offset;
    (p >= 0 && (p as usize) < len).then_some(p as usize)
}

fn for_each_row<F>(out: &mut [Scalar], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Scalar]) + Sync + Send,
{
    if work >= PARALLEL_WORK {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, chunk)| f(r, chunk));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, chunk)| f(r, chunk));
    }
}

/// Full convolution. `kernel` is `[kh, kw, cin, cout]`.
pub fn conv2d_forward(
    x: &[Scalar],
    kernel: &[Scalar],
    bias: Option<&[Scalar]>,
    g: &ConvGeometry,
    cin: usize,
    cout: usize,
) -> Vec<Scalar> {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let mut out = vec![0.0; g.pixels() * cout];
    let work = g.pixels() * cout * cin * g.kh * g.kw;
    for_each_row(&mut out, w * cout, work, |row, out_row| {
        let (b, i) = (row / h, row % h);
        for j in 0..w {
            let o = &mut out_row[j * cout..(j + 1) * cout];
            if let Some(bias) = bias {
                o.copy_from_slice(bias);
            }
            for (u, &du) in ro.iter().enumerate() {
                let Some(ii) = shifted(i, du, h) else { continue };
                for (v, &dv) in co.iter().enumerate() {
                    let Some(jj) = shifted(j, dv, w) else { continue };
                    let xs = &x[((b * h + ii) * w + jj) * cin..][..cin];
                    let ks = &kernel[(u * g.kw + v) * cin * cout..][..cin * cout];
                    for (c, &xv) in xs.iter().enumerate() {
                        for (acc, &kv) in o.iter_mut().zip(&ks[c * cout..(c + 1) * cout]) {
                            *acc += xv * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Accumulates the input gradient of [`conv2d_forward`] into `gx`.
pub fn conv2d_backward_input(
    gout: &[Scalar],
    kernel: &[Scalar],
    g: &ConvGeometry,
    cin: usize,
    cout: usize,
    gx: &mut [Scalar],
) {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let work = g.pixels() * cout * cin * g.kh * g.kw;
    for_each_row(gx, w * cin, work, |row, gx_row| {
        let (b, ii) = (row / h, row % h);
        for jj in 0..w {
            let gxs = &mut gx_row[jj * cin..(jj + 1) * cin];
            for (u, &du) in ro.iter().enumerate() {
                let Some(i) = shifted(ii, -du, h) else { continue };
                for (v, &dv) in co.iter().enumerate() {
                    let Some(j) = shifted(jj, -dv, w) else { continue };
                    let go = &gout[((b * h + i) * w + j) * cout..][..cout];
                    let ks = &kernel[(u * g.kw + v) * cin * cout..][..cin * cout];
                    for (c, acc) in gxs.iter_mut().enumerate() {
                        let kr = &ks[c * cout..(c + 1) * cout];
                        *acc += go.iter().zip(kr).map(|(a, b)| a * b).sum::<Scalar>();
                    }
                }
            }
        }
    });
}

/// Accumulates the kernel gradient of [`conv2d_forward`] into `gk`.
pub fn conv2d_backward_kernel(
    x: &[Scalar],
    gout: &[Scalar],
    g: &ConvGeometry,
    cin: usize,
    cout: usize,
    gk: &mut [Scalar],
) {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let work = g.pixels() * cout * cin * g.kh * g.kw;
    // One chunk per kernel tap.
    for_each_row(gk, cin * cout, work, |tap, gk_tap| {
        let (du, dv) = (ro[tap / g.kw], co[tap % g.kw]);
        for b in 0..g.batch {
            for i in 0..h {
                let Some(ii) = shifted(i, du, h) else { continue };
                for j in 0..w {
                    let Some(jj) = shifted(j, dv, w) else { continue };
                    let xs = &x[((b * h + ii) * w + jj) * cin..][..cin];
                    let go = &gout[((b * h + i) * w + j) * cout..][..cout];
                    for (c, &xv) in xs.iter().enumerate() {
                        for (acc, &gv) in gk_tap[c * cout..(c + 1) * cout].iter_mut().zip(go) {
                            *acc += xv * gv;
                        }
                    }
                }
            }
        }
    });
}

/// Sums `gout` over every pixel into a per-channel bias gradient.
pub fn bias_backward(gout: &[Scalar], channels: usize, gb: &mut [Scalar]) {
    for px in gout.chunks(channels) {
        for (acc, &v) in gb.iter_mut().zip(px) {
            *acc += v;
        }
    }
}

/// Per-channel convolution. `kernel` is `[kh, kw, c]`.
pub fn depthwise_forward(
    x: &[Scalar],
    kernel: &[Scalar],
    g: &ConvGeometry,
    c: usize,
) -> Vec<Scalar> {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let mut out = vec![0.0; g.pixels() * c];
    let work = g.pixels() * c * g.kh * g.kw;
    for_each_row(&mut out, w * c, work, |row, out_row| {
        let (b, i) = (row / h, row % h);
        for j in 0..w {
            let o = &mut out_row[j * c..(j + 1) * c];
            for (u, &du) in ro.iter().enumerate() {
                let Some(ii) = shifted(i, du, h) else { continue };
                for (v, &dv) in co.iter().enumerate() {
                    let Some(jj) = shifted(j, dv, w) else { continue };
                    let xs = &x[((b * h + ii) * w + jj) * c..][..c];
                    let ks = &kernel[(u * g.kw + v) * c..][..c];
                    for ((acc, &xv), &kv) in o.iter_mut().zip(xs).zip(ks) {
                        *acc += xv * kv;
                    }
                }
            }
        }
    });
    out
}

pub fn depthwise_backward_input(
    gout: &[Scalar],
    kernel: &[Scalar],
    g: &ConvGeometry,
    c: usize,
    gx: &mut [Scalar],
) {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let work = g.pixels() * c * g.kh * g.kw;
    for_each_row(gx, w * c, work, |row, gx_row| {
        let (b, ii) = (row / h, row % h);
        for jj in 0..w {
            let gxs = &mut gx_row[jj * c..(jj + 1) * c];
            for (u, &du) in ro.iter().enumerate() {
                let Some(i) = shifted(ii, -du, h) else { continue };
                for (v, &dv) in co.iter().enumerate() {
                    let Some(j) = shifted(jj, -dv, w) else { continue };
                    let go = &gout[((b * h + i) * w + j) * c..][..c];
                    let ks = &kernel[(u * g.kw + v) * c..][..c];
                    for ((acc, &gv), &kv) in gxs.iter_mut().zip(go).zip(ks) {
                        *acc += gv * kv;
                    }
                }
            }
        }
    });
}

pub fn depthwise_backward_kernel(
    x: &[Scalar],
    gout: &[Scalar],
    g: &ConvGeometry,
    c: usize,
    gk: &mut [Scalar],
) {
    let (h, w) = (g.rows, g.cols);
    let (ro, co) = (g.row_offsets(), g.col_offsets());
    let work = g.pixels() * c * g.kh * g.kw;
    for_each_row(gk, c, work, |tap, gk_tap| {
        let (du, dv) = (ro[tap / g.kw], co[tap % g.kw]);
        for b in 0..g.batch {
            for i in 0..h {
                let Some(ii) = shifted(i, du, h) else { continue };
                for j in 0..w {
                    let Some(jj) = shifted(j, dv, w) else { continue };
                    let xs = &x[((b * h + ii) * w + jj) * c..][..c];
                    let go = &gout[((b * h + i) * w + j) * c..][..c];
                    for ((acc, &xv), &gv) in gk_tap.iter_mut().zip(xs).zip(go) {
                        *acc += xv * gv;
                    }
                }
            }
        }
    });
}

/// 1x1 convolution: `[pixels, cin] x [cin, cout] (+ bias)`.
pub fn pointwise_forward(
    x: &[Scalar],
    weight: &[Scalar],
    bias: Option<&[Scalar]>,
    cin: usize,
    cout: usize,
) -> Vec<Scalar> {
    let pixels = x.len() / cin;
    let mut out = vec![0.0; pixels * cout];
    for_each_row(&mut out, cout, pixels * cin * cout, |p, o| {
        if let Some(bias) = bias {
            o.copy_from_slice(bias);
        }
        let xs = &x[p * cin..(p + 1) * cin];
        for (c, &xv) in xs.iter().enumerate() {
            for (acc, &wv) in o.iter_mut().zip(&weight[c * cout..(c + 1) * cout]) {
                *acc += xv * wv;
            }
        }
    });
    out
}

pub fn pointwise_backward_input(
    gout: &[Scalar],
    weight: &[Scalar],
    cin: usize,
    cout: usize,
    gx: &mut [Scalar],
) {
    let pixels = gx.len() / cin;
    for_each_row(gx, cin, pixels * cin * cout, |p, gxs| {
        let go = &gout[p * cout..(p + 1) * cout];
        for (c, acc) in gxs.iter_mut().enumerate() {
            *acc += go
                .iter()
                .zip(&weight[c * cout..(c + 1) * cout])
                .map(|(a, b)| a * b)
                .sum::<Scalar>();
        }
    });
}

pub fn pointwise_backward_weight(
    x: &[Scalar],
    gout: &[Scalar],
    cin: usize,
    cout: usize,
    gw: &mut [Scalar],
) {
    let pixels = x.len() / cin;
    for_each_row(gw, cout, pixels * cin * cout, |c, gw_row| {
        for p in 0..pixels {
            let xv = x[p * cin + c];
            for (acc, &gv) in gw_row.iter_mut().zip(&gout[p * cout..(p + 1) * cout]) {
                *acc += xv * gv;
            }
        }
    });
}
