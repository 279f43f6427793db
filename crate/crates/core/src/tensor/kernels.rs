//! Raw forward/backward kernels on contiguous buffers.
//!
//! Every output element is accumulated in a fixed order, so results do not
//! depend on how rayon splits the outer channel loop.

use rayon::prelude::*;

use super::Scalar;

pub type Shape4 = [usize; 4];

#[inline(always)]
fn axpy<T: Scalar>(acc: &mut [T], w: T, src: &[T]) {
    for (a, &x) in acc.iter_mut().zip(src) {
        *a = x.mul_add(w, *a);
    }
}

#[inline(always)]
fn axpy4<T: Scalar>(acc: [&mut [T]; 4], w: [T; 4], src: &[T]) {
    let [a0, a1, a2, a3] = acc;
    let n = src.len();
    let (a0, a1, a2, a3) = (&mut a0[..n], &mut a1[..n], &mut a2[..n], &mut a3[..n]);
    for i in 0..n {
        let x = src[i];
        a0[i] = x.mul_add(w[0], a0[i]);
        a1[i] = x.mul_add(w[1], a1[i]);
        a2[i] = x.mul_add(w[2], a2[i]);
        a3[i] = x.mul_add(w[3], a3[i]);
    }
}

#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); L];
    let full = n / L * L;
    for (ca, cb) in a[..full].chunks_exact(L).zip(b[..full].chunks_exact(L)) {
        for i in 0..L {
            lanes[i] = ca[i].mul_add(cb[i], lanes[i]);
        }
    }
    let mut s = T::zero();
    for i in full..n {
        s = a[i].mul_add(b[i], s);
    }
    let mut t = T::zero();
    for l in lanes {
        t = t + l;
    }
    t + s
}

/// Output spatial extents of a valid convolution with a `k`-wide kernel.
pub fn valid_extent(shape: [usize; 3], k: usize) -> Option<[usize; 3]> {
    if shape.iter().any(|s| *s < k) {
        return None;
    }
    Some([shape[0] - k + 1, shape[1] - k + 1, shape[2] - k + 1])
}

/// Zero-pads every spatial axis by `p` on both sides.
pub fn pad<T: Scalar>(input: &[T], shape: Shape4, p: usize) -> (Vec<T>, Shape4) {
    let [ch, a, b, c] = shape;
    let (pa, pb, pc) = (a + 2 * p, b + 2 * p, c + 2 * p);
    let mut out = vec![T::zero(); ch * pa * pb * pc];
    for ci in 0..ch {
        for z in 0..a {
            for y in 0..b {
                let s = ((ci * a + z) * b + y) * c;
                let t = ((ci * pa + z + p) * pb + y + p) * pc + p;
                out[t..t + c].copy_from_slice(&input[s..s + c]);
            }
        }
    }
    (out, [ch, pa, pb, pc])
}

/// Inverse of [`pad`]: keeps the interior.
pub fn unpad<T: Scalar>(padded: &[T], shape: Shape4, p: usize) -> Vec<T> {
    let [ch, a, b, c] = shape;
    let (pa, pb, pc) = (a + 2 * p, b + 2 * p, c + 2 * p);
    let mut out = vec![T::zero(); ch * a * b * c];
    for ci in 0..ch {
        for z in 0..a {
            for y in 0..b {
                let t = ((ci * a + z) * b + y) * c;
                let s = ((ci * pa + z + p) * pb + y + p) * pc + p;
                out[t..t + c].copy_from_slice(&padded[s..s + c]);
            }
        }
    }
    out
}

const TILE: usize = 512;

/// Valid cross-correlation. `weight` is `(cout, cin, k, k, k)`.
///
/// Each output slice is accumulated as one flat run with the input's row
/// stride; the `k - 1` trailing columns per row are scratch and dropped when
/// the slice is compacted.
pub fn conv3d_valid<T: Scalar>(
    input: &[T],
    shape: Shape4,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> (Vec<T>, Shape4) {
    let [cin, a, b, c] = shape;
    let [oa, ob, oc] = valid_extent([a, b, c], k).expect("extent checked by caller");
    let osz = oa * ob * oc;
    let isz = a * b * c;
    let k3 = k * k * k;
    let plane = ob * c;
    let len = plane - (k - 1);
    let mut out = vec![T::zero(); cout * osz];

    const BLOCK: usize = 4;
    out.par_chunks_mut(osz * BLOCK)
        .enumerate()
        .for_each(|(blk, out_blk)| {
            let co0 = blk * BLOCK;
            let nco = out_blk.len() / osz;
            let mut wide = vec![T::zero(); BLOCK * plane];
            for z in 0..oa {
                for j in 0..nco {
                    wide[j * plane..(j + 1) * plane].fill(bias[co0 + j]);
                }
                let mut t0 = 0;
                while t0 < len {
                    let tl = TILE.min(len - t0);
                    for ci in 0..cin {
                        for kz in 0..k {
                            let inp = &input[ci * isz + (z + kz) * b * c..];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let off = ky * c + kx + t0;
                                    let src = &inp[off..off + tl];
                                    let wi = ((ci * k + kz) * k + ky) * k + kx;
                                    if nco == BLOCK {
                                        let (w0, rest) = wide.split_at_mut(plane);
                                        let (w1, rest) = rest.split_at_mut(plane);
                                        let (w2, w3) = rest.split_at_mut(plane);
                                        let w = [
                                            weight[co0 * cin * k3 + wi],
                                            weight[(co0 + 1) * cin * k3 + wi],
                                            weight[(co0 + 2) * cin * k3 + wi],
                                            weight[(co0 + 3) * cin * k3 + wi],
                                        ];
                                        axpy4(
                                            [
                                                &mut w0[t0..t0 + tl],
                                                &mut w1[t0..t0 + tl],
                                                &mut w2[t0..t0 + tl],
                                                &mut w3[t0..t0 + tl],
                                            ],
                                            w,
                                            src,
                                        );
                                    } else {
                                        for j in 0..nco {
                                            let w = weight[(co0 + j) * cin * k3 + wi];
                                            axpy(&mut wide[j * plane + t0..j * plane + t0 + tl], w, src);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    t0 += tl;
                }
                for j in 0..nco {
                    for y in 0..ob {
                        let dst = &mut out_blk[j * osz + (z * ob + y) * oc..][..oc];
                        dst.copy_from_slice(&wide[j * plane + y * c..][..oc]);
                    }
                }
            }
        });
    (out, [cout, oa, ob, oc])
}

/// Gradient of a valid convolution with respect to its input: a valid
/// convolution of the `k - 1` padded output gradient with the flipped,
/// channel-transposed kernel.
pub fn conv3d_valid_grad_input<T: Scalar>(
    grad_out: &[T],
    out_shape: Shape4,
    weight: &[T],
    in_shape: Shape4,
    k: usize,
) -> Vec<T> {
    let [cout, ..] = out_shape;
    let [cin, ..] = in_shape;
    let k3 = k * k * k;
    let mut flipped = vec![T::zero(); cin * cout * k3];
    for co in 0..cout {
        for ci in 0..cin {
            let src = &weight[(co * cin + ci) * k3..][..k3];
            let dst = &mut flipped[(ci * cout + co) * k3..][..k3];
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[k3 - 1 - i];
            }
        }
    }
    let (padded, ps) = pad(grad_out, out_shape, k - 1);
    let zero_bias = vec![T::zero(); cin];
    let (gin, gs) = conv3d_valid(&padded, ps, &flipped, &zero_bias, cin, k);
    debug_assert_eq!(gs, in_shape);
    gin
}

/// Gradients of a valid convolution with respect to weight and bias.
pub fn conv3d_valid_grad_params<T: Scalar>(
    grad_out: &[T],
    out_shape: Shape4,
    input: &[T],
    in_shape: Shape4,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let [cout, oa, ob, oc] = out_shape;
    let [cin, a, b, c] = in_shape;
    let osz = oa * ob * oc;
    let isz = a * b * c;
    let k3 = k * k * k;
    let plane = ob * c;
    let len = plane - (k - 1);
    let mut gw = vec![T::zero(); cout * cin * k3];
    gw.par_chunks_mut(cin * k3).enumerate().for_each(|(co, gw_co)| {
        let g_co = &grad_out[co * osz..(co + 1) * osz];
        // output gradient re-strided to the input row length, zero in the
        // trailing columns
        let mut wide = vec![T::zero(); plane];
        for z in 0..oa {
            for y in 0..ob {
                wide[y * c..y * c + oc].copy_from_slice(&g_co[(z * ob + y) * oc..][..oc]);
            }
            let g = &wide[..len];
            for ci in 0..cin {
                for kz in 0..k {
                    let inp = &input[ci * isz + (z + kz) * b * c..];
                    for ky in 0..k {
                        for kx in 0..k {
                            let off = ky * c + kx;
                            let i = ((ci * k + kz) * k + ky) * k + kx;
                            gw_co[i] = gw_co[i] + dot(g, &inp[off..off + len]);
                        }
                    }
                }
            }
        }
    });
    let gb = (0..cout)
        .map(|co| {
            let g_co = &grad_out[co * osz..(co + 1) * osz];
            g_co.chunks(oc.max(1))
                .map(|r| r.iter().fold(T::zero(), |s, v| s + *v))
                .fold(T::zero(), |s, v| s + v)
        })
        .collect();
    let _ = a;
    (gw, gb)
}

/// 2x2x2 max pooling. Returns the flat input index of each winner; ties go
/// to the first voxel of the block in scan order.
pub fn maxpool2<T: Scalar>(input: &[T], shape: Shape4) -> (Vec<T>, Vec<usize>, Shape4) {
    let [ch, a, b, c] = shape;
    let (oa, ob, oc) = (a / 2, b / 2, c / 2);
    let mut out = Vec::with_capacity(ch * oa * ob * oc);
    let mut arg = Vec::with_capacity(ch * oa * ob * oc);
    for ci in 0..ch {
        for z in 0..oa {
            for y in 0..ob {
                for x in 0..oc {
                    let mut best = T::neg_infinity();
                    let mut bi = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((ci * a + 2 * z + dz) * b + 2 * y + dy) * c + 2 * x + dx;
                                if bi == usize::MAX || input[i] > best {
                                    best = input[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg, [ch, oa, ob, oc])
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], in_len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); in_len];
    for (go, &i) in grad_out.iter().zip(argmax) {
        g[i] = g[i] + *go;
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(input: &[T], shape: Shape4) -> (Vec<T>, Shape4) {
    let [ch, a, b, c] = shape;
    let (ua, ub, uc) = (2 * a, 2 * b, 2 * c);
    let mut out = vec![T::zero(); ch * ua * ub * uc];
    for ci in 0..ch {
        for z in 0..ua {
            for y in 0..ub {
                let src = &input[((ci * a + z / 2) * b + y / 2) * c..][..c];
                let dst = &mut out[((ci * ua + z) * ub + y) * uc..][..uc];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = src[x / 2];
                }
            }
        }
    }
    (out, [ch, ua, ub, uc])
}

pub fn upsample2_backward<T: Scalar>(grad_out: &[T], in_shape: Shape4) -> Vec<T> {
    let [ch, a, b, c] = in_shape;
    let (ua, ub, uc) = (2 * a, 2 * b, 2 * c);
    let mut g = vec![T::zero(); ch * a * b * c];
    for ci in 0..ch {
        for z in 0..ua {
            for y in 0..ub {
                let src = &grad_out[((ci * ua + z) * ub + y) * uc..][..uc];
                let dst = &mut g[((ci * a + z / 2) * b + y / 2) * c..][..c];
                for (x, s) in src.iter().enumerate() {
                    dst[x / 2] = dst[x / 2] + *s;
                }
            }
        }
    }
    g
}

/// Center-crops `skip` to the spatial size of `up` and stacks the channels
/// `[skip.., up..]`.
pub fn concat_crop<T: Scalar>(
    skip: &[T],
    skip_shape: Shape4,
    up: &[T],
    up_shape: Shape4,
) -> (Vec<T>, [usize; 3], Shape4) {
    let [cs, sa, sb, sc] = skip_shape;
    let [cu, ua, ub, uc] = up_shape;
    let off = [(sa - ua) / 2, (sb - ub) / 2, (sc - uc) / 2];
    let mut out = Vec::with_capacity((cs + cu) * ua * ub * uc);
    for ci in 0..cs {
        for z in 0..ua {
            for y in 0..ub {
                let s = ((ci * sa + z + off[0]) * sb + y + off[1]) * sc + off[2];
                out.extend_from_slice(&skip[s..s + uc]);
            }
        }
    }
    out.extend_from_slice(up);
    (out, off, [cs + cu, ua, ub, uc])
}

/// Splits the gradient of [`concat_crop`]; cropped-away skip voxels get zero.
pub fn concat_crop_backward<T: Scalar>(
    grad_out: &[T],
    skip_shape: Shape4,
    up_shape: Shape4,
    off: [usize; 3],
) -> (Vec<T>, Vec<T>) {
    let [cs, sa, sb, sc] = skip_shape;
    let [_, ua, ub, uc] = up_shape;
    let usz = ua * ub * uc;
    let mut gs = vec![T::zero(); cs * sa * sb * sc];
    for ci in 0..cs {
        for z in 0..ua {
            for y in 0..ub {
                let t = ((ci * sa + z + off[0]) * sb + y + off[1]) * sc + off[2];
                let s = ((ci * ua + z) * ub + y) * uc;
                gs[t..t + uc].copy_from_slice(&grad_out[s..s + uc]);
            }
        }
    }
    let gu = grad_out[cs * usz..].to_vec();
    (gs, gu)
}
