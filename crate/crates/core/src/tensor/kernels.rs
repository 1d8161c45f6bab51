//! Raw slice kernels shared by the forward ops and their backward passes.
//!
//! All reductions accumulate in `f64` and round to `f32` once per output.

/// `c[m, n] = a[m, k] · b[k, n]`
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (acc_j, &b_pj) in acc.iter_mut().zip(b_row) {
                *acc_j += a_ip * b_pj as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `c[m, n] = a[k, m]ᵀ · b[k, n]`
pub(crate) fn gemm_at_b(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0f64; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let a_pi = a_pi as f64;
            for (acc_ij, &b_pj) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *acc_ij += a_pi * b_pj as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// `c[m, n] = a[m, k] · b[n, k]ᵀ`
pub(crate) fn gemm_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row
                .iter()
                .zip(b_row)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            out[i * n + j] = dot as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfold `[C, H, W]` into columns `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut cols = vec![0f32; g.patch_len() * p];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        dst[oy * g.out_width + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold columns back into `[C, H, W]`, summing overlaps (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut acc = vec![0f64; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        acc[dst_row + ix as usize] += src[oy * g.out_width + ox] as f64;
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Source index for nearest-neighbour resampling: `floor(i · src / dst)`.
#[inline]
pub(crate) fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
