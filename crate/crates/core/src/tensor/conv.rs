//! "Same"-padded 1D and 2D cross-correlation kernels.
//!
//! Layouts: 1D input `[len, c_in]`, weights `[k, c_in, c_out]`; 2D input
//! `[h, w, c_in]`, weights `[kh, kw, c_in, c_out]`. Bias is `[c_out]`.
//! Out-of-range input positions read as zero.

use super::Tensor;
use crate::error::{Error, Result};

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub(crate) fn check_conv1d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<()> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 2 || ws.len() != 3 || ws[1] != is[1] || ws[0] % 2 == 0 {
        return Err(mismatch("conv1d", input, weights));
    }
    if bias.shape() != [ws[2]] {
        return Err(mismatch("conv1d bias", weights, bias));
    }
    Ok(())
}

pub(crate) fn check_conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<()> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 3
        || ws.len() != 4
        || ws[2] != is[2]
        || ws[0] % 2 == 0
        || ws[1] % 2 == 0
    {
        return Err(mismatch("conv2d", input, weights));
    }
    if bias.shape() != [ws[3]] {
        return Err(mismatch("conv2d bias", weights, bias));
    }
    Ok(())
}

/// Dispatches on input rank: rank 2 is 1D, rank 3 is 2D.
pub fn conv(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    match input.rank() {
        2 => conv1d(input, weights, bias),
        3 => conv2d(input, weights, bias),
        _ => Err(mismatch("conv", input, weights)),
    }
}

pub fn conv1d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_conv1d(input, weights, bias)?;
    let (len, cin) = (input.shape()[0], input.shape()[1]);
    let (k, cout) = (weights.shape()[0], weights.shape()[2]);
    let pad = (k / 2) as isize;
    let (x, w, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0; len * cout];
    for l in 0..len {
        let o_row = &mut out[l * cout..(l + 1) * cout];
        o_row.copy_from_slice(b);
        for kk in 0..k {
            let src = l as isize + kk as isize - pad;
            if src < 0 || src >= len as isize {
                continue;
            }
            let x_row = &x[src as usize * cin..(src as usize + 1) * cin];
            for (c, &xv) in x_row.iter().enumerate() {
                let w_row = &w[(kk * cin + c) * cout..(kk * cin + c + 1) * cout];
                for (o, &wv) in o_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![len, cout], out)
}

/// Returns (grad_input, grad_weights, grad_bias); grad_input only when `need_input`.
pub fn conv1d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (len, cin) = (input.shape()[0], input.shape()[1]);
    let (k, cout) = (weights.shape()[0], weights.shape()[2]);
    let pad = (k / 2) as isize;
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for l in 0..len {
        let g_row = &g[l * cout..(l + 1) * cout];
        for (b, &gv) in gb.iter_mut().zip(g_row) {
            *b += gv;
        }
        for kk in 0..k {
            let src = l as isize + kk as isize - pad;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..cin {
                let xv = x[src * cin + c];
                let off = (kk * cin + c) * cout;
                let w_row = &w[off..off + cout];
                let gw_row = &mut gw[off..off + cout];
                let mut acc = 0.0;
                for o in 0..cout {
                    acc += g_row[o] * w_row[o];
                    gw_row[o] += xv * g_row[o];
                }
                if need_input {
                    gx[src * cin + c] += acc;
                }
            }
        }
    }
    (
        need_input.then(|| Tensor::new(input.shape().to_vec(), gx).expect("shape")),
        Tensor::new(weights.shape().to_vec(), gw).expect("shape"),
        Tensor::vector(gb),
    )
}

pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_conv2d(input, weights, bias)?;
    let (h, wd, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (weights.shape()[0], weights.shape()[1], weights.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (x, w, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0; h * wd * cout];
    for i in 0..h {
        for j in 0..wd {
            let base = (i * wd + j) * cout;
            let o_row = &mut out[base..base + cout];
            o_row.copy_from_slice(b);
            for a in 0..kh {
                let si = i as isize + a as isize - ph;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for c2 in 0..kw {
                    let sj = j as isize + c2 as isize - pw;
                    if sj < 0 || sj >= wd as isize {
                        continue;
                    }
                    let xoff = (si as usize * wd + sj as usize) * cin;
                    let x_row = &x[xoff..xoff + cin];
                    let woff = (a * kw + c2) * cin * cout;
                    for (c, &xv) in x_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let w_row = &w[woff + c * cout..woff + (c + 1) * cout];
                        for (o, &wv) in o_row.iter_mut().zip(w_row) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, wd, cout], out)
}

/// Returns (grad_input, grad_weights, grad_bias); grad_input only when `need_input`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, wd, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (weights.shape()[0], weights.shape()[1], weights.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    for i in 0..h {
        for j in 0..wd {
            let base = (i * wd + j) * cout;
            let g_row = &g[base..base + cout];
            for (b, &gv) in gb.iter_mut().zip(g_row) {
                *b += gv;
            }
            for a in 0..kh {
                let si = i as isize + a as isize - ph;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for c2 in 0..kw {
                    let sj = j as isize + c2 as isize - pw;
                    if sj < 0 || sj >= wd as isize {
                        continue;
                    }
                    let xoff = (si as usize * wd + sj as usize) * cin;
                    let woff = (a * kw + c2) * cin * cout;
                    for c in 0..cin {
                        let xv = x[xoff + c];
                        if xv == 0.0 && !need_input {
                            continue;
                        }
                        let w_row = &w[woff + c * cout..woff + (c + 1) * cout];
                        let gw_row = &mut gw[woff + c * cout..woff + (c + 1) * cout];
                        let mut acc = 0.0;
                        for o in 0..cout {
                            acc += g_row[o] * w_row[o];
                            gw_row[o] += xv * g_row[o];
                        }
                        if need_input {
                            gx[xoff + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        need_input.then(|| Tensor::new(input.shape().to_vec(), gx).expect("shape")),
        Tensor::new(weights.shape().to_vec(), gw).expect("shape"),
        Tensor::vector(gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Direct nested-loop definition with explicit zero padding.
    fn conv1d_bruteforce(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (len, cin) = (x.shape()[0], x.shape()[1]);
        let (k, cout) = (w.shape()[0], w.shape()[2]);
        let mut out = Tensor::zeros(&[len, cout]);
        for l in 0..len {
            for o in 0..cout {
                let mut s = b.data()[o];
                for kk in 0..k {
                    let src = l as i64 + kk as i64 - (k / 2) as i64;
                    for c in 0..cin {
                        let xv = if src >= 0 && (src as usize) < len {
                            x.data()[src as usize * cin + c]
                        } else {
                            0.0
                        };
                        s += xv * w.data()[(kk * cin + c) * cout + o];
                    }
                }
                out.data_mut()[l * cout + o] = s;
            }
        }
        out
    }

    fn conv2d_bruteforce(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let mut out = Tensor::zeros(&[h, wd, cout]);
        for i in 0..h {
            for j in 0..wd {
                for o in 0..cout {
                    let mut s = b.data()[o];
                    for a in 0..kh {
                        for c2 in 0..kw {
                            let si = i as i64 + a as i64 - (kh / 2) as i64;
                            let sj = j as i64 + c2 as i64 - (kw / 2) as i64;
                            if si < 0 || sj < 0 || si >= h as i64 || sj >= wd as i64 {
                                continue;
                            }
                            for c in 0..cin {
                                s += x.data()[(si as usize * wd + sj as usize) * cin + c]
                                    * w.data()[((a * kw + c2) * cin + c) * cout + o];
                            }
                        }
                    }
                    out.data_mut()[(i * wd + j) * cout + o] = s;
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_is_scalar_multiply() {
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let out = conv(&x, &w, &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn zero_padding_at_edges() {
        let (a, b, c) = (0.3, -1.7, 2.5);
        let x = Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let w = Tensor::new(vec![3, 1, 1], vec![a, b, c]).unwrap();
        let out = conv(&x, &w, &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(out.data(), &[b, a, 0.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[4, 2]);
        let w = Tensor::zeros(&[3, 3, 1]);
        let err = conv(&x, &w, &Tensor::zeros(&[1])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 2]") && msg.contains("[3, 3, 1]"), "{msg}");
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[4, 1]);
        let w = Tensor::zeros(&[2, 1, 1]);
        assert!(conv(&x, &w, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn matches_bruteforce_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = 2 * rng.gen_range(0..4) + 1;
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            if rng.gen_bool(0.5) {
                let len = rng.gen_range(1..20);
                let x = random(&[len, cin], &mut rng);
                let w = random(&[k, cin, cout], &mut rng);
                let b = random(&[cout], &mut rng);
                let fast = conv(&x, &w, &b).unwrap();
                assert!(fast.max_abs_diff(&conv1d_bruteforce(&x, &w, &b)) < 1e-12);
            } else {
                let kw = 2 * rng.gen_range(0..3) + 1;
                let (h, wd) = (rng.gen_range(1..10), rng.gen_range(1..10));
                let x = random(&[h, wd, cin], &mut rng);
                let w = random(&[k, kw, cin, cout], &mut rng);
                let b = random(&[cout], &mut rng);
                let fast = conv(&x, &w, &b).unwrap();
                assert_eq!(fast.shape(), &[h, wd, cout]);
                assert!(fast.max_abs_diff(&conv2d_bruteforce(&x, &w, &b)) < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = random(&[6, 5, 2], &mut rng);
        let x2 = random(&[6, 5, 2], &mut rng);
        let w = random(&[3, 3, 2, 2], &mut rng);
        let zero = Tensor::zeros(&[2]);
        let sum = Tensor::new(
            x1.shape().to_vec(),
            x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let lhs = conv(&sum, &w, &zero).unwrap();
        let r1 = conv(&x1, &w, &zero).unwrap();
        let r2 = conv(&x2, &w, &zero).unwrap();
        for ((l, a), b) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
            assert!((l - a - b).abs() < 1e-12);
        }
    }
}
