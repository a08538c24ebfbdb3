//! Bone shadow enhancement: a random-walk confidence map over an
//! LP-guided image, the local visibility map `US_A`, and
//! `BSE = (CM - rho) / max(US_A, eps)^delta + rho`.

use crate::error::{Error, Result};
use crate::imagecore::{normalize01, Image2D};
use crate::solver::{conjugate_gradient, CsrMatrix};

/// Slack on the local mean constraint of `US_A`: a window counts as dark
/// when its mean is below `rho * USA_MEAN_SLACK`.
pub const USA_MEAN_SLACK: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowConfig {
    /// Depth attenuation of the random-walk guidance.
    pub alpha: f64,
    /// Edge weight sensitivity to intensity differences.
    pub beta: f64,
    /// Extra log-penalty on horizontal and diagonal edges.
    pub gamma: f64,
    /// Weight of LP against the B-mode image in the guidance blend.
    pub lambda_blend: f64,
    /// Tissue attenuation exponent.
    pub delta: f64,
    /// Echogenicity constant of the tissue around the bone.
    pub rho: f64,
    pub epsilon: f64,
    pub usa_window: usize,
    pub cg_tol: f64,
    /// `None` means `10 * rows * cols`.
    pub cg_max_iter: Option<usize>,
    /// Added to every edge weight so the graph never disconnects numerically.
    pub weight_floor: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            alpha: 2.0,
            beta: 90.0,
            gamma: 0.05,
            lambda_blend: 0.5,
            delta: 1.0,
            rho: 0.1,
            epsilon: 1e-6,
            usa_window: 11,
            cg_tol: 1e-8,
            cg_max_iter: None,
            weight_floor: 1e-6,
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("shadow.{what}")));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda_blend) {
            return bad("lambda_blend must lie in [0, 1]");
        }
        if !(self.delta >= 0.0) {
            return bad("delta must be non-negative");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.usa_window == 0 || self.usa_window % 2 == 0 {
            return bad("usa_window must be an odd positive integer");
        }
        if !(self.cg_tol > 0.0) {
            return bad("cg_tol must be positive");
        }
        if self.cg_max_iter == Some(0) {
            return bad("cg_max_iter must be positive");
        }
        if !(self.weight_floor >= 0.0) {
            return bad("weight_floor must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShadowImages {
    pub cm_lp: Image2D,
    pub us_a: Image2D,
    /// BSE rescaled to `[0, 1]`.
    pub bse: Image2D,
    pub bse_raw: Image2D,
}

/// `G = (1 - lambda) us + lambda lp`.
pub fn blend_guidance(us: &Image2D, lp: &Image2D, lambda_blend: f64) -> Result<Image2D> {
    if !(0.0..=1.0).contains(&lambda_blend) {
        return Err(Error::Config("lambda_blend must lie in [0, 1]".into()));
    }
    us.zip_map(lp, |u, l| (1.0 - lambda_blend) * u + lambda_blend * l)
}

const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// The Dirichlet problem behind the confidence map: unknowns are the
/// interior rows, row 0 is held at 1 and the last row at 0.
#[derive(Debug, Clone)]
pub struct ConfidenceSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    rows: usize,
    cols: usize,
}

pub fn confidence_system(g: &Image2D, cfg: &ShadowConfig) -> Result<ConfidenceSystem> {
    cfg.validate()?;
    let (rows, cols) = g.dims();
    if rows < 2 {
        return Err(Error::Dimension("confidence map needs at least two rows".into()));
    }
    let depth = (rows - 1) as f64;
    let att = |r: usize, c: usize| g.get(r, c) * (-cfg.alpha * r as f64 / depth).exp();
    let lateral = (-cfg.gamma).exp();
    let unknown = |r: usize, c: usize| (r - 1) * cols + c;
    let n = (rows - 2) * cols;

    let mut triplets = Vec::with_capacity(n * 9);
    let mut rhs = vec![0.0; n];
    for r in 1..rows.saturating_sub(1) {
        for c in 0..cols {
            let i = unknown(r, c);
            let gi = att(r, c);
            let mut diag = 0.0;
            let mut off = Vec::with_capacity(8);
            for (dr, dc) in NEIGHBOURS {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if cc < 0 || cc >= cols as isize {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                let mut w = (-cfg.beta * (gi - att(rr, cc)).abs()).exp();
                if dc != 0 {
                    w *= lateral;
                }
                w += cfg.weight_floor;
                diag += w;
                if rr == 0 {
                    rhs[i] += w;
                } else if rr + 1 < rows {
                    off.push((unknown(rr, cc), -w));
                }
                // last row is held at zero and adds nothing to rhs
            }
            off.push((i, diag));
            off.sort_by_key(|&(j, _)| j);
            triplets.extend(off.into_iter().map(|(j, v)| (i, j, v)));
        }
    }
    Ok(ConfidenceSystem {
        matrix: CsrMatrix::from_sorted_triplets(n, &triplets)?,
        rhs,
        rows,
        cols,
    })
}

impl ConfidenceSystem {
    /// Embeds an interior solution into a full image with the boundary rows.
    pub fn assemble(&self, interior: &[f64], spacing: crate::imagecore::Spacing) -> Image2D {
        let (rows, cols) = (self.rows, self.cols);
        Image2D::from_fn(rows, cols, spacing, |r, c| {
            if r == 0 {
                1.0
            } else if r + 1 == rows {
                0.0
            } else {
                interior[(r - 1) * cols + c].clamp(0.0, 1.0)
            }
        })
    }
}

/// Random-walk confidence map of the guidance image `g`.
pub fn confidence_map(g: &Image2D, cfg: &ShadowConfig) -> Result<Image2D> {
    let sys = confidence_system(g, cfg)?;
    if sys.rhs.is_empty() {
        return Ok(sys.assemble(&[], g.spacing()));
    }
    let max_iter = cfg.cg_max_iter.unwrap_or(10 * g.rows() * g.cols());
    let out = conjugate_gradient(&sys.matrix, &sys.rhs, None, cfg.cg_tol, max_iter)?;
    Ok(sys.assemble(&out.x, g.spacing()))
}

/// Local visibility map: the window maximum where the window mean stays
/// below `rho * USA_MEAN_SLACK`, else the window mean; floored at epsilon.
pub fn compute_usa(g: &Image2D, cfg: &ShadowConfig) -> Result<Image2D> {
    cfg.validate()?;
    let (rows, cols) = g.dims();
    let half = (cfg.usa_window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let area = (cfg.usa_window * cfg.usa_window) as f64;
    let limit = cfg.rho * USA_MEAN_SLACK;
    Ok(Image2D::from_fn(rows, cols, g.spacing(), |r, c| {
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for dr in -half..=half {
            let rr = clamp(r as isize + dr, rows);
            for dc in -half..=half {
                let v = g.get(rr, clamp(c as isize + dc, cols));
                sum += v;
                max = max.max(v);
            }
        }
        let mean = sum / area;
        let v = if mean < limit { max } else { mean };
        v.max(cfg.epsilon)
    }))
}

/// Raw BSE map, before any rescaling.
pub fn compute_bse_raw(cm_lp: &Image2D, us_a: &Image2D, cfg: &ShadowConfig) -> Result<Image2D> {
    cm_lp.zip_map(us_a, |cm, a| (cm - cfg.rho) / a.max(cfg.epsilon).powf(cfg.delta) + cfg.rho)
}

/// Returns `(normalized, raw)` BSE images.
pub fn compute_bse(
    cm_lp: &Image2D,
    us_a: &Image2D,
    cfg: &ShadowConfig,
) -> Result<(Image2D, Image2D)> {
    let raw = compute_bse_raw(cm_lp, us_a, cfg)?;
    Ok((normalize01(&raw), raw))
}

/// Full shadow stage on a B-mode image and its LP map.
pub fn compute_shadow(us: &Image2D, lp: &Image2D, cfg: &ShadowConfig) -> Result<ShadowImages> {
    cfg.validate()?;
    let g = blend_guidance(us, lp, cfg.lambda_blend)?;
    let cm_lp = confidence_map(&g, cfg)?;
    let us_a = compute_usa(&g, cfg)?;
    let (bse, bse_raw) = compute_bse(&cm_lp, &us_a, cfg)?;
    Ok(ShadowImages {
        cm_lp,
        us_a,
        bse,
        bse_raw,
    })
}
