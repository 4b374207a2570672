//! Strided 3-D cross-correlation kernels shared by `conv3d` and its transpose.
//!
//! All three routines use the same index map between a "big" grid (the
//! convolution input) and a "small" grid (the convolution output):
//! `big = small * stride + k - pad`. Weights are laid out as
//! `[small_channels, big_channels, kd, kh, kw]`.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub big_channels: usize,
    pub small_channels: usize,
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Output extent of a forward correlation along one axis, if any.
    pub fn out_extent(big: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        let padded = big + 2 * p;
        (padded >= k).then(|| (padded - k) / s + 1)
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Range of small-grid indices whose mapped big index is in bounds.
    #[inline]
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride[axis], self.padding[axis]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let top = self.big[axis] - 1 + p;
        if top < k {
            return (0, 0);
        }
        let hi = ((top - k) / s + 1).min(self.small[axis]);
        (lo.min(hi), hi)
    }

    /// Visits every (small row, big row) pair for one kernel offset.
    /// The callback receives the flat start of a small row, the flat start
    /// of the matching big row element, and the row length.
    #[inline]
    fn rows(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (d0, d1) = self.valid(0, kd);
        let (h0, h1) = self.valid(1, kh);
        let (w0, w1) = self.valid(2, kw);
        if d0 >= d1 || h0 >= h1 || w0 >= w1 {
            return;
        }
        let [_, sh, sw] = self.small;
        let [_, bh, bw] = self.big;
        for od in d0..d1 {
            let id = od * self.stride[0] + kd - self.padding[0];
            for oh in h0..h1 {
                let ih = oh * self.stride[1] + kh - self.padding[1];
                let small_row = (od * sh + oh) * sw + w0;
                let big_row = (id * bh + ih) * bw + w0 * self.stride[2] + kw - self.padding[2];
                f(small_row, big_row, w1 - w0);
            }
        }
    }
}

/// `small[n, cs] += Σ w[cs, cb, k] · big[n, cb, ·]`
pub(crate) fn correlate<T: Scalar>(g: &ConvGeometry, big: &[T], w: &[T], small: &mut [T]) {
    let (bl, sl, kl) = (g.big_len(), g.small_len(), g.kernel_len());
    let sw = g.stride[2];
    for n in 0..g.batch {
        for cs in 0..g.small_channels {
            let out = &mut small[(n * g.small_channels + cs) * sl..][..sl];
            for cb in 0..g.big_channels {
                let inp = &big[(n * g.big_channels + cb) * bl..][..bl];
                let wk = &w[(cs * g.big_channels + cb) * kl..][..kl];
                for kd in 0..g.kernel[0] {
                    for kh in 0..g.kernel[1] {
                        for kw in 0..g.kernel[2] {
                            let wv = wk[(kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                            g.rows(kd, kh, kw, |so, bo, len| {
                                let dst = &mut out[so..so + len];
                                if sw == 1 {
                                    for (a, &b) in dst.iter_mut().zip(&inp[bo..bo + len]) {
                                        *a += wv * b;
                                    }
                                } else {
                                    for (j, a) in dst.iter_mut().enumerate() {
                                        *a += wv * inp[bo + j * sw];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
}

/// `big[n, cb, ·] += Σ w[cs, cb, k] · small[n, cs]`, the adjoint of [`correlate`].
pub(crate) fn scatter<T: Scalar>(g: &ConvGeometry, small: &[T], w: &[T], big: &mut [T]) {
    let (bl, sl, kl) = (g.big_len(), g.small_len(), g.kernel_len());
    let sw = g.stride[2];
    for n in 0..g.batch {
        for cb in 0..g.big_channels {
            let dst = &mut big[(n * g.big_channels + cb) * bl..][..bl];
            for cs in 0..g.small_channels {
                let src = &small[(n * g.small_channels + cs) * sl..][..sl];
                let wk = &w[(cs * g.big_channels + cb) * kl..][..kl];
                for kd in 0..g.kernel[0] {
                    for kh in 0..g.kernel[1] {
                        for kw in 0..g.kernel[2] {
                            let wv = wk[(kd * g.kernel[1] + kh) * g.kernel[2] + kw];
                            g.rows(kd, kh, kw, |so, bo, len| {
                                let s = &src[so..so + len];
                                if sw == 1 {
                                    for (a, &b) in dst[bo..bo + len].iter_mut().zip(s) {
                                        *a += wv * b;
                                    }
                                } else {
                                    for (j, &b) in s.iter().enumerate() {
                                        dst[bo + j * sw] += wv * b;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
}

/// `gw[cs, cb, k] += Σ_{n, o} big[n, cb, map(o, k)] · small[n, cs, o]`
pub(crate) fn weight_grad<T: Scalar>(g: &ConvGeometry, big: &[T], small: &[T], gw: &mut [T]) {
    let (bl, sl, kl) = (g.big_len(), g.small_len(), g.kernel_len());
    let sw = g.stride[2];
    for cs in 0..g.small_channels {
        for cb in 0..g.big_channels {
            let gk = &mut gw[(cs * g.big_channels + cb) * kl..][..kl];
            for n in 0..g.batch {
                let b = &big[(n * g.big_channels + cb) * bl..][..bl];
                let s = &small[(n * g.small_channels + cs) * sl..][..sl];
                for kd in 0..g.kernel[0] {
                    for kh in 0..g.kernel[1] {
                        for kw in 0..g.kernel[2] {
                            let mut acc = T::zero();
                            g.rows(kd, kh, kw, |so, bo, len| {
                                if sw == 1 {
                                    for (&x, &y) in b[bo..bo + len].iter().zip(&s[so..so + len]) {
                                        acc += x * y;
                                    }
                                } else {
                                    for (j, &y) in s[so..so + len].iter().enumerate() {
                                        acc += b[bo + j * sw] * y;
                                    }
                                }
                            });
                            gk[(kd * g.kernel[1] + kh) * g.kernel[2] + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_floor_formula() {
        assert_eq!(ConvGeometry::out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(ConvGeometry::out_extent(8, 2, 2, 0), Some(4));
        assert_eq!(ConvGeometry::out_extent(7, 3, 2, 0), Some(3));
        assert_eq!(ConvGeometry::out_extent(2, 3, 1, 0), None);
    }

    #[test]
    fn valid_range_clips_padding() {
        let g = ConvGeometry {
            batch: 1,
            big_channels: 1,
            small_channels: 1,
            big: [4, 4, 4],
            small: [4, 4, 4],
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            padding: [1, 1, 1],
        };
        assert_eq!(g.valid(0, 0), (1, 4));
        assert_eq!(g.valid(0, 1), (0, 4));
        assert_eq!(g.valid(0, 2), (0, 3));
    }
}
