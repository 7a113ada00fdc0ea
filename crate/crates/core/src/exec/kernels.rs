//! Dense f32 kernels on per-sample `[C, H, W]` buffers.

/// `c = a · b + beta · c` for logical `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe matrices that lie inside the asserted slice bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a sliding window over one spatial plane.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub size: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn is_identity(&self) -> bool {
        self.size == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate of window tap `t` at output position `o`, if inside.
    #[inline]
    fn tap(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + t).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// Unfolds `x: [C, H, W]` into `cols: [C*k*k, OH*OW]`.
pub fn im2col(x: &[f32], channels: usize, win: &Window, cols: &mut [f32]) {
    let (k, p) = (win.size, win.out_h * win.out_w);
    for c in 0..channels {
        let plane = &x[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..win.out_h {
                    let dst = &mut row[oy * win.out_w..(oy + 1) * win.out_w];
                    match Window::tap(oy, ki, win.stride, win.pad_top, win.in_h) {
                        None => dst.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * win.in_w..(iy + 1) * win.in_w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = Window::tap(ox, kj, win.stride, win.pad_left, win.in_w).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx: [C, H, W]`.
pub fn col2im(cols: &[f32], channels: usize, win: &Window, dx: &mut [f32]) {
    let (k, p) = (win.size, win.out_h * win.out_w);
    for c in 0..channels {
        let plane = &mut dx[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..win.out_h {
                    let Some(iy) = Window::tap(oy, ki, win.stride, win.pad_top, win.in_h) else { continue };
                    let src = &row[oy * win.out_w..(oy + 1) * win.out_w];
                    for (ox, &g) in src.iter().enumerate() {
                        if let Some(ix) = Window::tap(ox, kj, win.stride, win.pad_left, win.in_w) {
                            plane[iy * win.in_w + ix] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling of one plane; records the flat input index of each maximum.
pub fn max_pool(x: &[f32], win: &Window, out: &mut [f32], argmax: &mut [u32]) {
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let mut best = f32::NEG_INFINITY;
            let mut at = None;
            for ki in 0..win.size {
                let Some(iy) = Window::tap(oy, ki, win.stride, win.pad_top, win.in_h) else { continue };
                for kj in 0..win.size {
                    let Some(ix) = Window::tap(ox, kj, win.stride, win.pad_left, win.in_w) else { continue };
                    let v = x[iy * win.in_w + ix];
                    if at.is_none() || v > best {
                        best = v;
                        at = Some(iy * win.in_w + ix);
                    }
                }
            }
            out[oy * win.out_w + ox] = best;
            argmax[oy * win.out_w + ox] = at.unwrap_or(0) as u32;
        }
    }
}

/// Average pooling of one plane over the in-bounds taps of each window.
pub fn avg_pool(x: &[f32], win: &Window, out: &mut [f32]) {
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let (mut sum, mut count) = (0f32, 0u32);
            for ki in 0..win.size {
                let Some(iy) = Window::tap(oy, ki, win.stride, win.pad_top, win.in_h) else { continue };
                for kj in 0..win.size {
                    let Some(ix) = Window::tap(ox, kj, win.stride, win.pad_left, win.in_w) else { continue };
                    sum += x[iy * win.in_w + ix];
                    count += 1;
                }
            }
            out[oy * win.out_w + ox] = sum / count as f32;
        }
    }
}

pub fn avg_pool_backward(dout: &[f32], win: &Window, dx: &mut [f32]) {
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let taps = |f: &mut dyn FnMut(usize)| {
                for ki in 0..win.size {
                    let Some(iy) = Window::tap(oy, ki, win.stride, win.pad_top, win.in_h) else { continue };
                    for kj in 0..win.size {
                        if let Some(ix) = Window::tap(ox, kj, win.stride, win.pad_left, win.in_w) {
                            f(iy * win.in_w + ix);
                        }
                    }
                }
            };
            let mut count = 0u32;
            taps(&mut |_| count += 1);
            let g = dout[oy * win.out_w + ox] / count as f32;
            taps(&mut |i| dx[i] += g);
        }
    }
}
