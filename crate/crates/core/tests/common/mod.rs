#![allow(dead_code)]

use cascade_core::autodiff::{Graph, Var};
use cascade_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-nested-loop cross-correlation (plus batch and channel loops).
pub fn conv3d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let s = x.shape();
    let (n, cin, d, h, wd) = (s[0], s[1], s[2] as isize, s[3] as isize, s[4] as isize);
    let k = w.shape();
    let (cout, kd, kh, kw) = (k[0], k[2], k[3], k[4]);
    let od = ((d as usize + 2 * pad[0] - kd) / stride[0]) + 1;
    let oh = ((h as usize + 2 * pad[1] - kh) / stride[1]) + 1;
    let ow = ((wd as usize + 2 * pad[2] - kw) / stride[2]) + 1;
    let mut out = vec![0.0; n * cout * od * oh * ow];
    let xv = x.data();
    let wv = w.data();
    for bn in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + c) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xi = (((bn * cin + ci) as isize * d + iz) * h + iy) * wd + ix;
                                        let wi = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                        acc += xv[xi as usize] * wv[wi];
                                    }
                                }
                            }
                        }
                        out[(((bn * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, od, oh, ow], out).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub struct GradCheck {
    pub checked: usize,
    /// coordinates whose probe at the requested step crossed a branch and
    /// were compared at a smaller step instead
    pub refined: usize,
    /// coordinates that crossed a branch at every step tried
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// for every coordinate of every parameter whose analytic gradient exceeds
/// `min_grad` in magnitude. A probe whose perturbed evaluations take a
/// different branch (see `Graph::branch_pattern`) than the unperturbed one
/// straddles a kink; it is retried with the step divided by 100, down to
/// 1e-5, and skipped if it still straddles one.
pub fn grad_check(
    params: &[Tensor<f64>],
    step: f64,
    tol: f64,
    min_grad: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars);
        (g.value(loss).item(), g.branch_pattern())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars);
    let pattern = g.branch_pattern();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let mut report = GradCheck {
        checked: 0,
        refined: 0,
        skipped: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let a = grad.data()[i];
            if a.abs() <= min_grad {
                continue;
            }
            let orig = work[pi].data()[i];
            let mut h = step;
            let numeric = loop {
                work[pi].data_mut()[i] = orig + h;
                let (up, pu) = eval(&work);
                work[pi].data_mut()[i] = orig - h;
                let (down, pd) = eval(&work);
                work[pi].data_mut()[i] = orig;
                if pu == pattern && pd == pattern {
                    break Some((up - down) / (2.0 * h));
                }
                h /= 100.0;
                if h < 1e-6 {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if h != step {
                report.refined += 1;
            }
            let e = rel_err(a, numeric);
            report.checked += 1;
            report.worst = report.worst.max(e);
            if e > tol {
                report.failures.push((pi, i, a, numeric));
            }
        }
    }
    report
}
