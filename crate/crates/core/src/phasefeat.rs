//! Local phase features: the band-passed, depth-masked scan `US_DB`, the
//! even/odd phase tensors and LPT image, the monogenic stack, local phase
//! energy (LPE), the weighted mean phase angle (LwPA) and their product LP.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::imagecore::{normalize01, Image2D};
use crate::specfilter::{
    bandpass_at, depth_ramp, on_domain, riesz_components, spectral_derivatives,
    FilterConfig, LpeMode, LwpaMode,
};

const LWPA_GUARD: f64 = 1e-12;

thread_local! {
    static PHASE_INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`compute_phase_images`] calls made on the current thread.
pub fn phase_invocations() -> u64 {
    PHASE_INVOCATIONS.with(Cell::get)
}

/// Per-pixel symmetric 2x2 tensor `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub rows: usize,
    pub cols: usize,
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

impl TensorField {
    fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        TensorField {
            rows,
            cols,
            xx: vec![0.0; n],
            xy: vec![0.0; n],
            yy: vec![0.0; n],
        }
    }

    pub fn frobenius(&self, i: usize) -> f64 {
        (self.xx[i] * self.xx[i] + 2.0 * self.xy[i] * self.xy[i] + self.yy[i] * self.yy[i]).sqrt()
    }

    pub fn trace(&self, i: usize) -> f64 {
        self.xx[i] + self.yy[i]
    }
}

/// Even and odd tensors of one image plus the Laplacian used for polarity.
#[derive(Debug, Clone)]
pub struct PhaseTensors {
    pub even: TensorField,
    pub odd: TensorField,
    pub laplacian: Image2D,
}

#[derive(Debug, Clone)]
pub struct LptOutput {
    /// LPT rescaled to `[0, 1]`.
    pub lpt: Image2D,
    /// LPT before rescaling.
    pub lpt_raw: Image2D,
    /// Instantaneous phase in radians.
    pub phi: Image2D,
    pub even_scalar: Image2D,
    pub odd_scalar: Image2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonogenicScale {
    pub m1: Image2D,
    pub m2: Image2D,
    pub m3: Image2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonogenicStack {
    pub scales: Vec<MonogenicScale>,
}

impl MonogenicStack {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    fn dims(&self) -> Result<(usize, usize, crate::imagecore::Spacing)> {
        let first = self
            .scales
            .first()
            .ok_or_else(|| Error::Empty("monogenic stack has no scales".into()))?;
        Ok((first.m1.rows(), first.m1.cols(), first.m1.spacing()))
    }
}

#[derive(Debug, Clone)]
pub struct PhaseImages {
    pub us_db: Image2D,
    pub t_even_scalar: Image2D,
    pub t_odd_scalar: Image2D,
    pub phi: Image2D,
    pub lpt: Image2D,
    pub lpe: Image2D,
    pub lwpa: Image2D,
    pub lp: Image2D,
}

/// Band-passes `us` at the finest scale and weights the band by the depth
/// ramp, suppressing interfaces close to the transducer.
pub fn compute_us_db(us: &Image2D, cfg: &FilterConfig) -> Result<Image2D> {
    cfg.validate()?;
    let ramp = depth_ramp(us.rows(), us.cols(), cfg.ramp_power)?;
    let [band] = on_domain(us, cfg.symmetric_extension, |x| {
        [bandpass_at(x, cfg.wavelength(0), cfg.sigma_on_f).0]
    });
    band.zip_map(&ramp, |a, b| a * b)
}

/// Even tensor `H H^T` and odd tensor
/// `-0.5 (grad (grad lap)^T + (grad lap) grad^T)` at every pixel.
pub fn compute_tensors(us_db: &Image2D, cfg: &FilterConfig) -> PhaseTensors {
    let [gx, gy, gxx, gxy, gyy, lap, lx, ly] = on_domain(us_db, cfg.symmetric_extension, |x| {
        let d = spectral_derivatives(x);
        [d.gx, d.gy, d.gxx, d.gxy, d.gyy, d.laplacian, d.lap_x, d.lap_y]
    });
    let (rows, cols) = us_db.dims();
    let mut even = TensorField::zeros(rows, cols);
    let mut odd = TensorField::zeros(rows, cols);
    for i in 0..rows * cols {
        let (hxx, hxy, hyy) = (gxx.data()[i], gxy.data()[i], gyy.data()[i]);
        // H is symmetric, so H H^T = H^2
        even.xx[i] = hxx * hxx + hxy * hxy;
        even.xy[i] = hxy * (hxx + hyy);
        even.yy[i] = hxy * hxy + hyy * hyy;

        let (ax, ay) = (gx.data()[i], gy.data()[i]);
        let (bx, by) = (lx.data()[i], ly.data()[i]);
        odd.xx[i] = -ax * bx;
        odd.xy[i] = -0.5 * (ax * by + bx * ay);
        odd.yy[i] = -ay * by;
    }
    PhaseTensors {
        even,
        odd,
        laplacian: lap,
    }
}

fn atan2_zero(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        y.atan2(x)
    }
}

/// Reduces the tensors to signed scalars and forms
/// `LPT = sqrt(even^2 + odd^2) cos(phi)`, `phi = atan2(odd, even)`.
///
/// The even scalar is the Frobenius norm of `T_even` signed by ridge
/// polarity: positive where the Laplacian is negative (bright ridges).
pub fn compute_lpt(tensors: &PhaseTensors) -> LptOutput {
    let (rows, cols) = tensors.laplacian.dims();
    let sp = tensors.laplacian.spacing();
    let n = rows * cols;
    let mut even_s = vec![0.0; n];
    let mut odd_s = vec![0.0; n];
    let mut phi = vec![0.0; n];
    let mut lpt = vec![0.0; n];
    for i in 0..n {
        let polarity = -tensors.laplacian.data()[i].signum();
        let sign = if tensors.even.trace(i) > 0.0 && tensors.laplacian.data()[i] != 0.0 {
            polarity
        } else {
            0.0
        };
        let e = sign * tensors.even.frobenius(i);
        let o = tensors.odd.frobenius(i);
        let p = atan2_zero(o, e);
        even_s[i] = e;
        odd_s[i] = o;
        phi[i] = p;
        lpt[i] = (e * e + o * o).sqrt() * p.cos();
    }
    let mk = |d: Vec<f64>| Image2D::from_fn(rows, cols, sp, |r, c| d[r * cols + c]);
    let lpt_raw = mk(lpt);
    LptOutput {
        lpt: normalize01(&lpt_raw),
        lpt_raw,
        phi: mk(phi),
        even_scalar: mk(even_s),
        odd_scalar: mk(odd_s),
    }
}

/// Band-passes `lpt` at every scale and takes the Riesz pair of each band.
pub fn compute_monogenic(lpt: &Image2D, cfg: &FilterConfig) -> Result<MonogenicStack> {
    cfg.validate()?;
    let scales = (0..cfg.num_scales)
        .map(|s| {
            let [m1, m2, m3] = on_domain(lpt, cfg.symmetric_extension, |x| {
                let (m1, _) = bandpass_at(x, cfg.wavelength(s), cfg.sigma_on_f);
                let (m2, m3) = riesz_components(&m1);
                [m1, m2, m3]
            });
            MonogenicScale { m1, m2, m3 }
        })
        .collect();
    Ok(MonogenicStack { scales })
}

/// Local phase energy summed over scales.
pub fn compute_lpe(stack: &MonogenicStack, mode: LpeMode) -> Result<Image2D> {
    let (rows, cols, sp) = stack.dims()?;
    let mut out = Image2D::zeros(rows, cols, sp);
    for s in &stack.scales {
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (m1, m2, m3) = (s.m1.data()[i], s.m2.data()[i], s.m3.data()[i]);
            let odd = match mode {
                LpeMode::Corrected => (m2 * m2 + m3 * m3).sqrt(),
                // the printed cubic term can go negative; clamp under the root
                LpeMode::Literal => (m2 * m2 + m2 * m2 * m2).max(0.0).sqrt(),
            };
            *v += m1.abs() - odd;
        }
    }
    Ok(out)
}

/// Local weighted mean phase angle; always inside `(-pi/2, pi/2)`.
pub fn compute_lwpa(stack: &MonogenicStack, mode: LwpaMode) -> Result<Image2D> {
    let (rows, cols, sp) = stack.dims()?;
    let n = rows * cols;
    let mut sum_m1 = vec![0.0; n];
    let mut sum_m1_sq = vec![0.0; n];
    let mut sum_m2 = vec![0.0; n];
    let mut sum_m2_sq = vec![0.0; n];
    let mut sum_m3 = vec![0.0; n];
    for s in &stack.scales {
        for i in 0..n {
            let (m1, m2, m3) = (s.m1.data()[i], s.m2.data()[i], s.m3.data()[i]);
            sum_m1[i] += m1;
            sum_m1_sq[i] += m1 * m1;
            sum_m2[i] += m2;
            sum_m2_sq[i] += m2 * m2;
            sum_m3[i] += m3;
        }
    }
    Ok(Image2D::from_fn(rows, cols, sp, |r, c| {
        let i = r * cols + c;
        let denom = match mode {
            LwpaMode::Literal => (sum_m1_sq[i] + sum_m2_sq[i]).sqrt(),
            LwpaMode::Corrected => sum_m2[i].hypot(sum_m3[i]),
        };
        (sum_m1[i] / (denom + LWPA_GUARD)).atan()
    }))
}

/// `LP = LPT x LPE x LwPA` with every factor rescaled to `[0, 1]` first and
/// the product rescaled again.
pub fn compute_lp(lpt: &Image2D, lpe: &Image2D, lwpa: &Image2D) -> Result<Image2D> {
    if !lpt.same_dims(lpe) || !lpt.same_dims(lwpa) {
        return Err(Error::Dimension("LP factors must share dimensions".into()));
    }
    let a = normalize01(lpt);
    let b = normalize01(lpe);
    let c = normalize01(lwpa);
    let prod = a.zip_map(&b, |x, y| x * y)?.zip_map(&c, |x, y| x * y)?;
    Ok(normalize01(&prod))
}

/// Runs the whole phase stage on a B-mode image in `[0, 1]`.
pub fn compute_phase_images(us: &Image2D, cfg: &FilterConfig) -> Result<PhaseImages> {
    PHASE_INVOCATIONS.with(|c| c.set(c.get() + 1));
    let us_db = compute_us_db(us, cfg)?;
    let tensors = compute_tensors(&us_db, cfg);
    let lpt = compute_lpt(&tensors);
    let stack = compute_monogenic(&lpt.lpt, cfg)?;
    let lpe = compute_lpe(&stack, cfg.lpe_mode)?;
    let lwpa = compute_lwpa(&stack, cfg.lwpa_mode)?;
    let lp = compute_lp(&lpt.lpt, &lpe, &lwpa)?;
    Ok(PhaseImages {
        us_db,
        t_even_scalar: lpt.even_scalar,
        t_odd_scalar: lpt.odd_scalar,
        phi: lpt.phi,
        lpt: lpt.lpt,
        lpe,
        lwpa,
        lp,
    })
}
