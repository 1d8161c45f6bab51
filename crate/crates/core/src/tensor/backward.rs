//! Hand-written vector-Jacobian products for the forward ops used in training.

use super::kernels::{self, ConvGeometry};
use super::{conv_geometry, group_norm_stats, Tensor};
use crate::error::{Error, Result};

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

/// Gradients of `conv2d(x, w, b, stride, padding)`: `(dx, dw, db)`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g: ConvGeometry = conv_geometry(x, w, stride, padding)?;
    let out_ch = w.shape[0];
    if dy.shape != [out_ch, g.out_height, g.out_width] {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: vec![out_ch, g.out_height, g.out_width],
            right: dy.shape.clone(),
        });
    }
    let p = g.positions();
    let cols = kernels::im2col(&x.data, &g);
    let dw = kernels::gemm_a_bt(&dy.data, &cols, out_ch, p, g.patch_len());
    let dcols = kernels::gemm_at_b(&w.data, &dy.data, out_ch, g.patch_len(), p);
    let dx = kernels::col2im(&dcols, &g);
    let db = dy
        .data
        .chunks(p)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    Ok((
        Tensor::from_op("conv2d backward", x.shape.clone(), dx)?,
        Tensor::from_op("conv2d backward", w.shape.clone(), dw)?,
        Tensor::from_op("conv2d backward", vec![out_ch], db)?,
    ))
}

/// Gradients of `x · W + b`: `(dx, dW, db)`.
pub fn linear(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, din) = (x.shape[0], x.shape[1]);
    let dout = w.shape[1];
    if dy.shape != [n, dout] || w.shape[0] != din {
        return Err(Error::ShapeMismatch {
            op: "linear backward",
            left: x.shape.clone(),
            right: dy.shape.clone(),
        });
    }
    let dx = kernels::gemm_a_bt(&dy.data, &w.data, n, dout, din);
    let dw = kernels::gemm_at_b(&x.data, &dy.data, n, din, dout);
    let mut db = vec![0f64; dout];
    for row in dy.data.chunks(dout) {
        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
    }
    Ok((
        Tensor::from_op("linear backward", vec![n, din], dx)?,
        Tensor::from_op("linear backward", w.shape.clone(), dw)?,
        Tensor::from_op("linear backward", vec![dout], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Gradient of `silu(x)` given the pre-activation `x`.
pub fn silu(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    check_same("silu backward", x, dy)?;
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = kernels::sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::from_op("silu backward", x.shape.clone(), data)
}

/// Gradients of `group_norm(x, groups, gamma, beta, eps)`: `(dx, dgamma, dbeta)`.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_same("group_norm backward", x, dy)?;
    let stats = group_norm_stats(x, groups, eps)?;
    let c = x.shape[0];
    let plane = x.numel() / c;
    let per_group = c / groups;
    let n = (per_group * plane) as f64;
    let mut dx = vec![0f32; x.numel()];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for (gi, &(mean, inv_std)) in stats.iter().enumerate() {
        let mut sum_dxhat = 0f64;
        let mut sum_dxhat_xhat = 0f64;
        for ch in gi * per_group..(gi + 1) * per_group {
            for i in 0..plane {
                let idx = ch * plane + i;
                let xhat = (x.data[idx] as f64 - mean) * inv_std;
                let g = dy.data[idx] as f64;
                dgamma[ch] += g * xhat;
                dbeta[ch] += g;
                let dxhat = g * gamma.data[ch] as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
        }
        for ch in gi * per_group..(gi + 1) * per_group {
            for i in 0..plane {
                let idx = ch * plane + i;
                let xhat = (x.data[idx] as f64 - mean) * inv_std;
                let dxhat = dy.data[idx] as f64 * gamma.data[ch] as f64;
                dx[idx] = (inv_std / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
            }
        }
    }
    Ok((
        Tensor::from_op("group_norm backward", x.shape.clone(), dx)?,
        Tensor::from_op("group_norm backward", vec![c], dgamma.into_iter().map(|v| v as f32).collect())?,
        Tensor::from_op("group_norm backward", vec![c], dbeta.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Gradient of a nearest-neighbour resize from `source_shape` (sum over copies).
pub fn resize_nearest(source_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match source_shape {
        &[h, w] => (1, h, w),
        &[c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: source_shape.to_vec(),
                reason: "resize backward expects rank 2 or 3".into(),
            })
        }
    };
    let (h2, w2) = (dy.shape[dy.rank() - 2], dy.shape[dy.rank() - 1]);
    let mut acc = vec![0f64; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            let si = kernels::nearest_index(i, h, h2);
            for j in 0..w2 {
                let sj = kernels::nearest_index(j, w, w2);
                acc[(ch * h + si) * w + sj] += dy.data[(ch * h2 + i) * w2 + j] as f64;
            }
        }
    }
    Tensor::from_op(
        "resize backward",
        source_shape.to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Gradient of a softmax row given its output `p` and upstream `dp`.
pub(crate) fn softmax_row(p: &[f32], dp: &[f32], out: &mut [f32]) {
    let dot: f64 = p.iter().zip(dp).map(|(&a, &b)| a as f64 * b as f64).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(dp) {
        *o = (pi as f64 * (gi as f64 - dot)) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Central-difference directional derivative of `f` along `dir` at `x`.
    fn directional_fd(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, dir: &Tensor) -> f64 {
        let h = 1e-2f32;
        let plus = x.add(&dir.scale(h).unwrap()).unwrap();
        let minus = x.sub(&dir.scale(h).unwrap()).unwrap();
        (f(&plus) - f(&minus)) / (2.0 * h as f64)
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let dy = random(&[3, 3, 3], &mut rng);
        let (dx, dw, db) = conv2d(&x, &w, 2, 1, &dy).unwrap();
        let dir_x = random(x.shape(), &mut rng);
        let fx = |xx: &Tensor| dot(&xx.conv2d(&w, None, 2, 1).unwrap(), &dy);
        assert!((directional_fd(&fx, &x, &dir_x) - dot(&dx, &dir_x)).abs() < 1e-3);
        let dir_w = random(w.shape(), &mut rng);
        let fw = |ww: &Tensor| dot(&x.conv2d(ww, None, 2, 1).unwrap(), &dy);
        assert!((directional_fd(&fw, &w, &dir_w) - dot(&dw, &dir_w)).abs() < 1e-3);
        let sums: Vec<f32> = dy.data().chunks(9).map(|c| c.iter().sum()).collect();
        for (a, b) in db.data().iter().zip(&sums) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 3, 3], &mut rng);
        let gamma = random(&[4], &mut rng);
        let beta = random(&[4], &mut rng);
        let dy = random(&[4, 3, 3], &mut rng);
        let (dx, dgamma, _) = group_norm(&x, 2, &gamma, 1e-5, &dy).unwrap();
        let dir = random(x.shape(), &mut rng);
        let f = |xx: &Tensor| dot(&xx.group_norm(2, &gamma, &beta, 1e-5).unwrap(), &dy);
        assert!((directional_fd(&f, &x, &dir) - dot(&dx, &dir)).abs() < 2e-3);
        let dir_g = random(&[4], &mut rng);
        let fg = |g: &Tensor| dot(&x.group_norm(2, g, &beta, 1e-5).unwrap(), &dy);
        assert!((directional_fd(&fg, &gamma, &dir_g) - dot(&dgamma, &dir_g)).abs() < 1e-3);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 3], &mut rng);
        let dy = random(&[2, 6, 6], &mut rng);
        let dx = resize_nearest(x.shape(), &dy).unwrap();
        let lhs = dot(&x.resize_nearest((6, 6)).unwrap(), &dy);
        assert!((lhs - dot(&x, &dx)).abs() < 1e-5);
    }

    #[test]
    fn linear_and_silu_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let dy = random(&[3, 2], &mut rng);
        let (dx, dw, _) = linear(&x, &w, &dy).unwrap();
        let dir = random(x.shape(), &mut rng);
        let f = |xx: &Tensor| dot(&xx.linear(&w, None).unwrap(), &dy);
        assert!((directional_fd(&f, &x, &dir) - dot(&dx, &dir)).abs() < 1e-4);
        let dir_w = random(w.shape(), &mut rng);
        let fw = |ww: &Tensor| dot(&x.linear(ww, None).unwrap(), &dy);
        assert!((directional_fd(&fw, &w, &dir_w) - dot(&dw, &dir_w)).abs() < 1e-4);

        let dsilu = silu(&x, &Tensor::ones(x.shape()).unwrap()).unwrap();
        let fs = |xx: &Tensor| xx.silu().unwrap().sum();
        let dir = random(x.shape(), &mut rng);
        assert!((directional_fd(&fs, &x, &dir) - dot(&dsilu, &dir)).abs() < 1e-3);
    }
}
