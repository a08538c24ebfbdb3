//! Independent oracles shared by the integration tests: a brute-force DFT
//! with hand-built spectral multipliers, central-difference gradient checks
//! for every network op, and a dense solve of the confidence-map system.
#![allow(dead_code)]

use std::f64::consts::PI;

use osseon::imagecore::{Image2D, Spacing};
use osseon::neuralnet::ops::{self, ConvGeom};
use osseon::neuralnet::{CuNet, CunetArch, Network, PeNet, Tensor};
use osseon::shadow::ShadowConfig;
use osseon::specfilter::{self, FilterConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Brute-force spectral oracle
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C {
    pub re: f64,
    pub im: f64,
}

impl C {
    pub fn new(re: f64, im: f64) -> Self {
        C { re, im }
    }
    fn mul(self, o: C) -> C {
        C::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn add(self, o: C) -> C {
        C::new(self.re + o.re, self.im + o.im)
    }
    fn scale(self, s: f64) -> C {
        C::new(self.re * s, self.im * s)
    }
}

/// `X[u,v] = sum x[r,c] exp(sign * 2 pi i (u r / R + v c / C))`, O(N^4).
pub fn brute_dft(x: &[C], rows: usize, cols: usize, sign: f64) -> Vec<C> {
    let mut out = vec![C::new(0.0, 0.0); rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let mut acc = C::new(0.0, 0.0);
            for r in 0..rows {
                for c in 0..cols {
                    // reduce the phase index exactly before converting
                    let pr = (u * r) % rows;
                    let pc = (v * c) % cols;
                    let ang = sign * 2.0 * PI * (pr as f64 / rows as f64 + pc as f64 / cols as f64);
                    acc = acc.add(x[r * cols + c].mul(C::new(ang.cos(), ang.sin())));
                }
            }
            out[u * cols + v] = acc;
        }
    }
    out
}

/// Frequency of bin `k` in cycles per sample; the even-length Nyquist bin is
/// taken as negative.
pub fn oracle_freq(k: usize, n: usize) -> f64 {
    if 2 * k < n {
        k as f64 / n as f64
    } else {
        k as f64 / n as f64 - 1.0
    }
}

fn nyquist(k: usize, n: usize) -> bool {
    n % 2 == 0 && 2 * k == n
}

/// Applies a multiplier `m(fy, fx, nyq_y, nyq_x)` through the brute DFT and
/// returns the real part of the result.
pub fn oracle_filter(image: &Image2D, m: impl Fn(f64, f64, bool, bool) -> C) -> Vec<f64> {
    let (rows, cols) = image.dims();
    let x: Vec<C> = image.data().iter().map(|&v| C::new(v, 0.0)).collect();
    let spec = brute_dft(&x, rows, cols, -1.0);
    let filtered: Vec<C> = spec
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (u, v) = (i / cols, i % cols);
            z.mul(m(oracle_freq(u, rows), oracle_freq(v, cols), nyquist(u, rows), nyquist(v, cols)))
        })
        .collect();
    brute_dft(&filtered, rows, cols, 1.0)
        .into_iter()
        .map(|z| z.scale(1.0 / (rows * cols) as f64).re)
        .collect()
}

pub fn oracle_log_gabor(fy: f64, fx: f64, wavelength: f64, sigma_on_f: f64) -> f64 {
    let f = (fx * fx + fy * fy).sqrt();
    if f == 0.0 {
        return 0.0;
    }
    let f0 = 1.0 / wavelength;
    (-(f / f0).ln().powi(2) / (2.0 * sigma_on_f.ln().powi(2))).exp()
}

pub fn random_image(rows: usize, cols: usize, seed: u64) -> Image2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image2D::from_fn(rows, cols, Spacing::default(), |_, _| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation from the brute-force oracle over every size up to
/// `max_side`, per filter family.
pub fn spectral_oracle_errors(max_side: usize) -> Vec<(&'static str, f64)> {
    let cfg = FilterConfig {
        min_wavelength: 3.0,
        scale_multiplier: 1.7,
        num_scales: 2,
        ..FilterConfig::default()
    };
    let tau = 2.0 * PI;
    let zero = C::new(0.0, 0.0);
    let mut worst = [0.0f64; 4];
    for rows in 1..=max_side {
        for cols in 1..=max_side {
            let im = random_image(rows, cols, (rows * 100 + cols) as u64);

            let spec = specfilter::dft2_forward(&im);
            let x: Vec<C> = im.data().iter().map(|&v| C::new(v, 0.0)).collect();
            let brute = brute_dft(&x, rows, cols, -1.0);
            for (a, b) in spec.data().iter().zip(&brute) {
                worst[0] = worst[0].max((a.re - b.re).abs()).max((a.im - b.im).abs());
            }

            for s in 0..cfg.num_scales {
                let (even, _) = specfilter::log_gabor_bandpass(&im, &cfg, s).unwrap();
                let wl = cfg.wavelength(s);
                let o = oracle_filter(&im, |fy, fx, _, _| C::new(oracle_log_gabor(fy, fx, wl, cfg.sigma_on_f), 0.0));
                worst[1] = worst[1].max(max_abs_diff(even.data(), &o));
            }

            let (m2, m3) = specfilter::riesz_components(&im);
            let riesz = |f: f64, other: f64, nyq: bool| {
                let r = (f * f + other * other).sqrt();
                if r == 0.0 || nyq {
                    zero
                } else {
                    C::new(0.0, -f / r)
                }
            };
            let o2 = oracle_filter(&im, |fy, fx, _, nx| riesz(fx, fy, nx));
            let o3 = oracle_filter(&im, |fy, fx, ny, _| riesz(fy, fx, ny));
            worst[2] = worst[2].max(max_abs_diff(m2.data(), &o2)).max(max_abs_diff(m3.data(), &o3));

            let d = specfilter::spectral_derivatives(&im);
            let dx = |fx: f64, nx: bool| if nx { zero } else { C::new(0.0, tau * fx) };
            let lap = |fy: f64, fx: f64| -tau * tau * (fx * fx + fy * fy);
            let pairs: Vec<(&Image2D, Vec<f64>)> = vec![
                (&d.gx, oracle_filter(&im, |_, fx, _, nx| dx(fx, nx))),
                (&d.gy, oracle_filter(&im, |fy, _, ny, _| dx(fy, ny))),
                (&d.gxx, oracle_filter(&im, |_, fx, _, _| C::new(-(tau * fx).powi(2), 0.0))),
                (&d.gyy, oracle_filter(&im, |fy, _, _, _| C::new(-(tau * fy).powi(2), 0.0))),
                (
                    &d.gxy,
                    oracle_filter(&im, |fy, fx, ny, nx| {
                        if ny || nx {
                            zero
                        } else {
                            C::new(-tau * tau * fx * fy, 0.0)
                        }
                    }),
                ),
                (&d.laplacian, oracle_filter(&im, |fy, fx, _, _| C::new(lap(fy, fx), 0.0))),
                (&d.lap_x, oracle_filter(&im, |fy, fx, _, nx| dx(fx, nx).scale(lap(fy, fx)))),
                (&d.lap_y, oracle_filter(&im, |fy, fx, ny, _| dx(fy, ny).scale(lap(fy, fx)))),
            ];
            // derivative magnitudes grow like (2 pi f)^3; compare relative to
            // the oracle's own scale so the 1e-8 bound means the same thing
            for (got, want) in pairs {
                let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                worst[3] = worst[3].max(max_abs_diff(got.data(), &want) / scale);
            }
        }
    }
    vec![
        ("dft", worst[0]),
        ("log_gabor", worst[1]),
        ("riesz", worst[2]),
        ("derivatives", worst[3]),
    ]
}

// ---------------------------------------------------------------------------
// Central-difference gradient checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

pub const LINEAR_TOL: f64 = 1e-6;
pub const NONLINEAR_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)` over whole vectors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Central differences of `f` at `x` over the listed coordinates.
pub fn numeric_grad(x: &[f64], coords: &[usize], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<GradCheck>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64], tol: f64) {
        self.out.push(GradCheck {
            name: name.into(),
            rel_err: rel_err(analytic, numeric),
            tol,
        });
    }

    /// Checks a convolution geometry with respect to input, weights and bias
    /// under the loss `sum(r * y)`.
    fn conv(&mut self, name: &str, xs: [usize; 4], co: usize, g: ConvGeom) {
        let [_, ci, _, _] = xs;
        let nx: usize = xs.iter().product();
        let x = rand_vec(&mut self.rng, nx, -1.0, 1.0);
        let w = rand_vec(&mut self.rng, co * ci * g.k * g.k, -1.0, 1.0);
        let b = rand_vec(&mut self.rng, co, -1.0, 1.0);
        let fwd = |x: &[f64], w: &[f64], b: &[f64]| ops::conv2d_forward(&tensor(xs, x.to_vec()), w, b, co, g).unwrap();
        let f0 = fwd(&x, &w, &b);
        let r = rand_vec(&mut self.rng, f0.output.data().len(), -1.0, 1.0);
        let dy = tensor(f0.output.shape(), r.clone());
        let grads = ops::conv2d_backward(&dy, &w, &f0.cols, xs, g, true).unwrap();
        let h = 1e-3;
        let nxg = numeric_grad(&x, &all(x.len()), h, &mut |v| dot(fwd(v, &w, &b).output.data(), &r));
        let nwg = numeric_grad(&w, &all(w.len()), h, &mut |v| dot(fwd(&x, v, &b).output.data(), &r));
        let nbg = numeric_grad(&b, &all(b.len()), h, &mut |v| dot(fwd(&x, &w, v).output.data(), &r));
        self.record(format!("{name}/input"), grads.dx.unwrap().data(), &nxg, LINEAR_TOL);
        self.record(format!("{name}/weights"), &grads.dw, &nwg, LINEAR_TOL);
        self.record(format!("{name}/bias"), &grads.db, &nbg, LINEAR_TOL);
    }

    fn up_conv(&mut self) {
        let xs = [1, 4, 4, 4];
        let co = 2;
        let x = rand_vec(&mut self.rng, 64, -1.0, 1.0);
        let w = rand_vec(&mut self.rng, co * 4 * 4, -1.0, 1.0);
        let b = rand_vec(&mut self.rng, co, -1.0, 1.0);
        let fwd = |x: &[f64], w: &[f64]| ops::up_conv(&tensor(xs, x.to_vec()), w, &b).unwrap();
        let y = fwd(&x, &w);
        let r = rand_vec(&mut self.rng, y.data().len(), -1.0, 1.0);
        let up = ops::upsample2(&tensor(xs, x.clone()));
        let f = ops::conv2d_forward(&up, &w, &b, co, ConvGeom::SAME2X2).unwrap();
        let g = ops::conv2d_backward(&tensor(y.shape(), r.clone()), &w, &f.cols, up.shape(), ConvGeom::SAME2X2, true)
            .unwrap();
        let dx = ops::upsample2_backward(&g.dx.unwrap());
        let nx = numeric_grad(&x, &all(x.len()), 1e-3, &mut |v| dot(fwd(v, &w).data(), &r));
        let nw = numeric_grad(&w, &all(w.len()), 1e-3, &mut |v| dot(fwd(&x, v).data(), &r));
        self.record("up_conv/input", dx.data(), &nx, LINEAR_TOL);
        self.record("up_conv/weights", &g.dw, &nw, LINEAR_TOL);
    }

    fn batch_norm(&mut self) {
        let xs = [2, 3, 4, 4];
        let x = rand_vec(&mut self.rng, 96, -2.0, 2.0);
        let gamma = rand_vec(&mut self.rng, 3, 0.5, 1.5);
        let beta = rand_vec(&mut self.rng, 3, -0.5, 0.5);
        let r = rand_vec(&mut self.rng, 96, -1.0, 1.0);
        let loss = |x: &[f64], g: &[f64], b: &[f64]| {
            dot(ops::batch_norm_train(&tensor(xs, x.to_vec()), g, b).unwrap().output.data(), &r)
        };
        let f = ops::batch_norm_train(&tensor(xs, x.clone()), &gamma, &beta).unwrap();
        let g = ops::batch_norm_backward(&tensor(xs, r.clone()), &f.xhat, &f.inv_std, &gamma).unwrap();
        let h = 1e-5;
        let nx = numeric_grad(&x, &all(96), h, &mut |v| loss(v, &gamma, &beta));
        let ng = numeric_grad(&gamma, &all(3), h, &mut |v| loss(&x, v, &beta));
        let nb = numeric_grad(&beta, &all(3), h, &mut |v| loss(&x, &gamma, v));
        self.record("batch_norm/input", g.dx.data(), &nx, NONLINEAR_TOL);
        self.record("batch_norm/gamma", &g.dgamma, &ng, NONLINEAR_TOL);
        self.record("batch_norm/beta", &g.dbeta, &nb, NONLINEAR_TOL);
    }

    fn activations(&mut self) {
        let xs = [2, 2, 3, 3];
        // keep ReLU inputs away from the kink
        let x: Vec<f64> = rand_vec(&mut self.rng, 36, 0.1, 2.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 3 == 0 { -v } else { v })
            .collect();
        let r = rand_vec(&mut self.rng, 36, -1.0, 1.0);
        let y = ops::relu(&tensor(xs, x.clone()));
        let a = ops::relu_backward(&tensor(xs, r.clone()), &y);
        let n = numeric_grad(&x, &all(36), 1e-5, &mut |v| dot(ops::relu(&tensor(xs, v.to_vec())).data(), &r));
        self.record("relu", a.data(), &n, NONLINEAR_TOL);

        let y = ops::sigmoid(&tensor(xs, x.clone()));
        let a = ops::sigmoid_backward(&tensor(xs, r.clone()), &y);
        let n = numeric_grad(&x, &all(36), 1e-5, &mut |v| dot(ops::sigmoid(&tensor(xs, v.to_vec())).data(), &r));
        self.record("sigmoid", a.data(), &n, NONLINEAR_TOL);

        let logits = rand_vec(&mut self.rng, 8, -2.0, 2.0);
        let r8 = rand_vec(&mut self.rng, 8, -1.0, 1.0);
        let p = ops::softmax4(&logits).unwrap();
        let a = ops::softmax_backward(&r8, &p, 4);
        let n = numeric_grad(&logits, &all(8), 1e-5, &mut |v| dot(&ops::softmax4(v).unwrap(), &r8));
        self.record("softmax4", &a, &n, NONLINEAR_TOL);
    }

    fn pooling_fc_concat(&mut self) {
        let xs = [2, 4, 3, 3];
        let x = rand_vec(&mut self.rng, 72, -1.0, 1.0);
        let r = rand_vec(&mut self.rng, 2 * 3, -1.0, 1.0);
        let pooled = ops::global_avg_pool(&tensor(xs, x.clone()), 3).unwrap();
        assert_eq!(pooled.len(), 6);
        let a = ops::global_avg_pool_backward(&r, xs, 3);
        let n = numeric_grad(&x, &all(72), 1e-3, &mut |v| {
            dot(&ops::global_avg_pool(&tensor(xs, v.to_vec()), 3).unwrap(), &r)
        });
        self.record("global_avg_pool", a.data(), &n, LINEAR_TOL);

        let (fin, fout) = (5, 4);
        let xi = rand_vec(&mut self.rng, 2 * fin, -1.0, 1.0);
        let w = rand_vec(&mut self.rng, fin * fout, -1.0, 1.0);
        let b = rand_vec(&mut self.rng, fout, -1.0, 1.0);
        let r = rand_vec(&mut self.rng, 2 * fout, -1.0, 1.0);
        let g = ops::fc_backward(&r, &xi, &w, fin, fout);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&ops::fc_forward(x, w, b, fin, fout).unwrap(), &r);
        let nx = numeric_grad(&xi, &all(xi.len()), 1e-3, &mut |v| loss(v, &w, &b));
        let nw = numeric_grad(&w, &all(w.len()), 1e-3, &mut |v| loss(&xi, v, &b));
        let nb = numeric_grad(&b, &all(b.len()), 1e-3, &mut |v| loss(&xi, &w, v));
        self.record("fc/input", &g.dx, &nx, LINEAR_TOL);
        self.record("fc/weights", &g.dw, &nw, LINEAR_TOL);
        self.record("fc/bias", &g.db, &nb, LINEAR_TOL);

        let a_shape = [2, 2, 3, 3];
        let b_shape = [2, 3, 3, 3];
        let av = rand_vec(&mut self.rng, 36, -1.0, 1.0);
        let bv = rand_vec(&mut self.rng, 54, -1.0, 1.0);
        let r = rand_vec(&mut self.rng, 90, -1.0, 1.0);
        let (da, db) = ops::split_channels(&tensor([2, 5, 3, 3], r.clone()), 2);
        let na = numeric_grad(&av, &all(36), 1e-3, &mut |v| {
            dot(ops::concat_channels(&tensor(a_shape, v.to_vec()), &tensor(b_shape, bv.clone())).unwrap().data(), &r)
        });
        let nb = numeric_grad(&bv, &all(54), 1e-3, &mut |v| {
            dot(ops::concat_channels(&tensor(a_shape, av.clone()), &tensor(b_shape, v.to_vec())).unwrap().data(), &r)
        });
        self.record("concat/first", da.data(), &na, LINEAR_TOL);
        self.record("concat/second", db.data(), &nb, LINEAR_TOL);

        let us = [1, 2, 3, 2];
        let uv = rand_vec(&mut self.rng, 12, -1.0, 1.0);
        let r = rand_vec(&mut self.rng, 48, -1.0, 1.0);
        let a = ops::upsample2_backward(&tensor([1, 2, 6, 4], r.clone()));
        let n = numeric_grad(&uv, &all(12), 1e-3, &mut |v| dot(ops::upsample2(&tensor(us, v.to_vec())).data(), &r));
        self.record("upsample2", a.data(), &n, LINEAR_TOL);
    }

    fn losses(&mut self) {
        let p = rand_vec(&mut self.rng, 20, 0.05, 0.95);
        let y: Vec<f64> = (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (_, a) = ops::seg_bce(&p, &y).unwrap();
        let n = numeric_grad(&p, &all(20), 1e-6, &mut |v| ops::seg_bce(v, &y).unwrap().0);
        self.record("seg_bce", &a, &n, NONLINEAR_TOL);

        let z = rand_vec(&mut self.rng, 20, -3.0, 3.0);
        let (_, _, a) = ops::seg_bce_with_logits(&z, &y).unwrap();
        let n = numeric_grad(&z, &all(20), 1e-5, &mut |v| ops::seg_bce_with_logits(v, &y).unwrap().0);
        self.record("seg_bce_with_logits", &a, &n, NONLINEAR_TOL);

        let classes = [2u8, 0, 3];
        let raw = rand_vec(&mut self.rng, 12, 0.1, 1.0);
        let (_, a) = ops::cls_ce(&raw, &classes).unwrap();
        let n = numeric_grad(&raw, &all(12), 1e-6, &mut |v| ops::cls_ce(v, &classes).unwrap().0);
        self.record("cls_ce", &a, &n, NONLINEAR_TOL);

        let logits = rand_vec(&mut self.rng, 12, -2.0, 2.0);
        let (_, _, a) = ops::cls_ce_with_logits(&logits, &classes).unwrap();
        let n = numeric_grad(&logits, &all(12), 1e-5, &mut |v| ops::cls_ce_with_logits(v, &classes).unwrap().0);
        self.record("cls_ce_with_logits", &a, &n, NONLINEAR_TOL);

        let o = rand_vec(&mut self.rng, 16, 0.0, 1.0);
        let t = rand_vec(&mut self.rng, 16, 0.0, 1.0);
        let (_, a) = ops::pe_l2(&o, &t).unwrap();
        let n = numeric_grad(&o, &all(16), 1e-4, &mut |v| ops::pe_l2(v, &t).unwrap().0);
        self.record("pe_l2", &a, &n, NONLINEAR_TOL);
    }

    /// Perturbs up to `per_tensor` entries of each trainable tensor of a
    /// whole network.
    fn network<N: Network<f64>>(
        &mut self,
        name: &str,
        net: &mut N,
        per_tensor: usize,
        analytic: &mut dyn FnMut(&mut N) -> f64,
        loss: &mut dyn FnMut(&mut N) -> f64,
    ) {
        net.zero_grad();
        analytic(net);
        let names: Vec<String> = net.params().iter().filter(|p| p.is_trainable()).map(|p| p.name.clone()).collect();
        let mut a_all = Vec::new();
        let mut n_all = Vec::new();
        for pname in names {
            let (len, grad) = {
                let p = net.params().into_iter().find(|p| p.name == pname).unwrap();
                (p.len(), p.grad.clone())
            };
            let picks: Vec<usize> = if len <= per_tensor {
                all(len)
            } else {
                (0..per_tensor).map(|_| self.rng.random_range(0..len)).collect()
            };
            let h = 1e-6;
            for &i in &picks {
                let mut eval = |delta: f64, net: &mut N| {
                    let p = net.params_mut().into_iter().find(|p| p.name == pname).unwrap();
                    let orig = p.value[i];
                    p.value[i] = orig + delta;
                    let l = loss(net);
                    let p = net.params_mut().into_iter().find(|p| p.name == pname).unwrap();
                    p.value[i] = orig;
                    l
                };
                let num = (eval(h, net) - eval(-h, net)) / (2.0 * h);
                a_all.push(grad[i]);
                n_all.push(num);
            }
        }
        self.record(format!("{name}/parameters"), &a_all, &n_all, NONLINEAR_TOL);
    }

    fn pe_net(&mut self) {
        let mut net = PeNet::<f64>::new(4, 11);
        let xs = [2, 4, 6, 6];
        let x = tensor(xs, rand_vec(&mut self.rng, 288, 0.0, 1.0));
        let r = rand_vec(&mut self.rng, 72, -1.0, 1.0);
        let r2 = r.clone();
        let x2 = x.clone();
        self.network(
            "pe_net",
            &mut net,
            6,
            &mut |n| {
                let y = n.forward_train(&x).unwrap();
                n.backward(&tensor(y.shape(), r.clone())).unwrap();
                0.0
            },
            &mut |n| dot(n.forward_train(&x2).unwrap().data(), &r2),
        );
    }

    fn cunet(&mut self) {
        let arch = CunetArch {
            in_channels: 1,
            base_features: 2,
            depth: 2,
            head_fraction: 0.5,
        };
        let mut net = CuNet::<f64>::new(arch, 5).unwrap();
        let xs = [2, 1, 8, 8];
        let xv = rand_vec(&mut self.rng, 128, 0.0, 1.0);
        let mask: Vec<f64> = (0..128).map(|i| ((i / 8) % 8 == 4) as u8 as f64).collect();
        let classes = [1u8, 3];
        let loss_of = |out: &osseon::neuralnet::CunetOutput<f64>| {
            ops::seg_bce_with_logits(out.seg_logits.data(), &mask).unwrap().0
                + ops::cls_ce_with_logits(&out.class_logits, &classes).unwrap().0
        };
        let x = tensor(xs, xv.clone());
        let mut dx = Vec::new();
        self.network(
            "cunet",
            &mut net,
            5,
            &mut |n| {
                let out = n.forward_train(&x).unwrap();
                let (_, _, ds) = ops::seg_bce_with_logits(out.seg_logits.data(), &mask).unwrap();
                let (_, _, dc) = ops::cls_ce_with_logits(&out.class_logits, &classes).unwrap();
                dx = n
                    .backward(&tensor(out.seg_logits.shape(), ds), &dc, true)
                    .unwrap()
                    .unwrap()
                    .into_data();
                0.0
            },
            &mut |n| loss_of(&n.forward_train(&x).unwrap()),
        );
        let nx = numeric_grad(&xv, &all(128), 1e-6, &mut |v| loss_of(&net.forward_train(&tensor(xs, v.to_vec())).unwrap()));
        self.record("cunet/input", &dx, &nx, NONLINEAR_TOL);
    }
}

/// Runs every gradient check and returns the per-check results.
pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    s.conv("conv3x3", [1, 2, 5, 5], 3, ConvGeom::CONV3X3);
    s.conv("conv3x3_batch", [2, 4, 8, 8], 2, ConvGeom::CONV3X3);
    s.conv("down_conv", [2, 4, 8, 8], 3, ConvGeom::DOWN2X2);
    s.conv("conv1x1", [2, 4, 8, 8], 1, ConvGeom::POINTWISE);
    s.up_conv();
    s.batch_norm();
    s.activations();
    s.pooling_fc_concat();
    s.losses();
    s.pe_net();
    s.cunet();
    s.out
}

// ---------------------------------------------------------------------------
// Confidence map oracle
// ---------------------------------------------------------------------------

/// Solves the random-walk Dirichlet problem on the full pixel graph with
/// dense Gaussian elimination. Edge weights follow the definition directly.
pub fn dense_confidence_map(g: &Image2D, cfg: &ShadowConfig) -> Vec<f64> {
    let (rows, cols) = g.dims();
    let n = rows * cols;
    let att = |r: usize, c: usize| g.get(r, c) * (-cfg.alpha * r as f64 / (rows - 1) as f64).exp();
    let weight = |a: (usize, usize), b: (usize, usize)| {
        let mut w = (-cfg.beta * (att(a.0, a.1) - att(b.0, b.1)).abs()).exp();
        if a.1 != b.1 {
            w *= (-cfg.gamma).exp();
        }
        w + cfg.weight_floor
    };
    // rows of the linear system: Laplacian rows for interior nodes,
    // identity rows for the clamped top and bottom rows
    let mut a = vec![vec![0.0; n + 1]; n];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if r == 0 || r == rows - 1 {
                a[i][i] = 1.0;
                a[i][n] = if r == 0 { 1.0 } else { 0.0 };
                continue;
            }
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if cc < 0 || cc >= cols as isize {
                        continue;
                    }
                    let j = rr as usize * cols + cc as usize;
                    let w = weight((r, c), (rr as usize, cc as usize));
                    a[i][i] += w;
                    a[i][j] -= w;
                }
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for k in 0..n {
        let p = (k..n).max_by(|&x, &y| a[x][k].abs().total_cmp(&a[y][k].abs())).unwrap();
        a.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..=n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (a[k][n] - s) / a[k][k];
    }
    x
}
