//! 3x3 convolutions (padding 1) and a 1x1 classifier over `H x W x C`
//! row-major tensors, with their backward passes.

use crate::scalar::Scalar;

pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Input patches kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ConvTape<T> {
    patches: Vec<T>,
    in_h: usize,
    in_w: usize,
    cin: usize,
    stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Scalar> ConvTape<T> {
    fn patch_len(&self) -> usize {
        9 * self.cin
    }
}

/// Weight layout `[cout][ky][kx][cin]`.
pub(crate) fn conv3x3_forward<T: Scalar>(
    x: &[T],
    (h, w, cin): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
    stride: usize,
) -> (Vec<T>, ConvTape<T>) {
    let cout = bias.len();
    let k = 9 * cin;
    debug_assert_eq!(weight.len(), cout * k);
    debug_assert_eq!(x.len(), h * w * cin);
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let mut patches = vec![T::zero(); oh * ow * k];
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            let patch = &mut patches[p * k..(p + 1) * k];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = (ky * 3 + kx) * cin;
                    patch[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
            let o = &mut out[p * cout..(p + 1) * cout];
            for (c, v) in o.iter_mut().enumerate() {
                *v = bias[c] + dot(&weight[c * k..(c + 1) * k], patch);
            }
        }
    }
    let tape = ConvTape {
        patches,
        in_h: h,
        in_w: w,
        cin,
        stride,
        out_h: oh,
        out_w: ow,
    };
    (out, tape)
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
pub(crate) fn conv3x3_backward<T: Scalar>(
    tape: &ConvTape<T>,
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let cout = grad_b.len();
    let k = tape.patch_len();
    let (w, cin, s) = (tape.in_w, tape.cin, tape.stride);
    let mut grad_x = want_input.then(|| vec![T::zero(); tape.in_h * w * cin]);
    let mut gpatch = vec![T::zero(); k];
    for oy in 0..tape.out_h {
        for ox in 0..tape.out_w {
            let p = oy * tape.out_w + ox;
            let g = &grad_out[p * cout..(p + 1) * cout];
            let patch = &tape.patches[p * k..(p + 1) * k];
            gpatch.iter_mut().for_each(|v| *v = T::zero());
            for (c, &gc) in g.iter().enumerate() {
                if gc == T::zero() {
                    continue;
                }
                grad_b[c] += gc;
                let gw = &mut grad_w[c * k..(c + 1) * k];
                gw.iter_mut().zip(patch).for_each(|(a, &v)| *a += gc * v);
                if want_input {
                    let wc = &weight[c * k..(c + 1) * k];
                    gpatch.iter_mut().zip(wc).for_each(|(a, &v)| *a += gc * v);
                }
            }
            if let Some(gx) = grad_x.as_mut() {
                for ky in 0..3 {
                    let iy = (oy * s + ky) as isize - 1;
                    if iy < 0 || iy >= tape.in_h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * s + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * cin;
                        let src = (ky * 3 + kx) * cin;
                        gx[dst..dst + cin]
                            .iter_mut()
                            .zip(&gpatch[src..src + cin])
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
    }
    grad_x
}

/// Per-pixel affine map `[cout][cin]`.
pub(crate) fn pointwise_forward<T: Scalar>(x: &[T], cin: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let cout = bias.len();
    let mut out = Vec::with_capacity(x.len() / cin * cout);
    for px in x.chunks_exact(cin) {
        for c in 0..cout {
            out.push(bias[c] + dot(&weight[c * cin..(c + 1) * cin], px));
        }
    }
    out
}

pub(crate) fn pointwise_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Vec<T> {
    let cout = grad_b.len();
    let mut grad_x = vec![T::zero(); x.len()];
    for (p, px) in x.chunks_exact(cin).enumerate() {
        let g = &grad_out[p * cout..(p + 1) * cout];
        let gx = &mut grad_x[p * cin..(p + 1) * cin];
        for (c, &gc) in g.iter().enumerate() {
            grad_b[c] += gc;
            let gw = &mut grad_w[c * cin..(c + 1) * cin];
            gw.iter_mut().zip(px).for_each(|(a, &v)| *a += gc * v);
            let wc = &weight[c * cin..(c + 1) * cin];
            gx.iter_mut().zip(wc).for_each(|(a, &v)| *a += gc * v);
        }
    }
    grad_x
}

pub(crate) fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

/// Zeroes gradient entries whose pre-activation was not positive.
pub(crate) fn relu_backward<T: Scalar>(pre: &[T], grad: &mut [T]) {
    grad.iter_mut()
        .zip(pre)
        .filter(|(_, &p)| p <= T::zero())
        .for_each(|(g, _)| *g = T::zero());
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
