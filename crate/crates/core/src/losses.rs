//! Training objective: Dice on the initial decision map plus a smooth,
//! differentiable form of the gradient-transfer metric `Q_g` on the fused image.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::imgproc::{SOBEL_X, SOBEL_Y};
use crate::tensor::{sigmoid, Tensor, Var};

/// Guard added to every ratio denominator.
pub const EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OrientationMode {
    /// `|a - b|` with subgradient 0 at the origin.
    #[default]
    Abs,
    /// `(a - b) * (2 f(a, b) - 1)` with the smooth Heaviside `f`.
    Smooth,
}

impl std::str::FromStr for OrientationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(OrientationMode::Abs),
            "smooth" => Ok(OrientationMode::Smooth),
            other => Err(Error::InvalidArgument(format!(
                "unknown orientation mode '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QgConfig {
    pub gamma_g: f64,
    pub k_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub k_a: f64,
    pub sigma_a: f64,
    /// Exponent of the edge-strength weights.
    pub gamma: f64,
    /// Steepness of the smooth Heaviside.
    pub k: f64,
    pub orientation: OrientationMode,
}

impl Default for QgConfig {
    fn default() -> Self {
        QgConfig {
            gamma_g: 1.0,
            k_g: -10.0,
            sigma_g: 0.5,
            gamma_a: 1.0,
            k_a: -20.0,
            sigma_a: 0.75,
            gamma: 1.0,
            k: 1000.0,
            orientation: OrientationMode::Abs,
        }
    }
}

impl QgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.gamma_g > 0.0 && self.gamma_a > 0.0) {
            return Err(Error::InvalidArgument(
                "Q_g needs k > 0 and positive sigmoid amplitudes".into(),
            ));
        }
        Ok(())
    }

    /// Largest attainable preservation value, reached at `G = 1`, `Δ = 1`.
    pub fn max_q(&self) -> f64 {
        let (qg, qa) = self.preservation(1.0, 1.0);
        qg * qa
    }

    /// Strength and orientation preservation for scalar inputs.
    pub fn preservation(&self, g: f64, delta: f64) -> (f64, f64) {
        (
            self.gamma_g * sigmoid(-self.k_g * (g - self.sigma_g)),
            self.gamma_a * sigmoid(-self.k_a * (delta - self.sigma_a)),
        )
    }
}

/// `1 - (2 Σ p g + 1) / (Σ p² + Σ g² + 1)`.
pub fn dice_loss<'t>(p: &Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if p.shape() != target.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
        ));
    }
    let tape = p.tape();
    let overlap = p.mul(&tape.constant(target.clone()))?.sum();
    let g2: f64 = target.data().iter().map(|g| g * g).sum();
    let num = overlap.scale(2.0).add_scalar(1.0);
    let den = p.square().sum().add_scalar(g2 + 1.0);
    Ok(num.div(&den)?.one_minus())
}

/// Sobel edge strength and orientation of one image.
pub struct EdgeField<'t> {
    pub strength: Var<'t>,
    pub orientation: Var<'t>,
}

/// Sobel responses with replicate padding.
///
/// The strength is the exact `sqrt(sx² + sy²)` (zero on flat regions); only
/// its derivative is guarded, which keeps the degenerate flat-image value
/// well defined. The orientation is `atan(sy² / (sx² + EPS))` in `[0, π/2]`.
pub fn sobel_edges<'t>(img: &Var<'t>) -> Result<EdgeField<'t>> {
    let sx2 = img.filter3x3(SOBEL_X)?.square();
    let sy2 = img.filter3x3(SOBEL_Y)?.square();
    let strength = sx2.add(&sy2)?.sqrt();
    let orientation = sy2.div(&sx2.add_scalar(EPS))?.atan();
    Ok(EdgeField {
        strength,
        orientation,
    })
}

/// `1 / (1 + e^(-k (x - y)))`; exactly complementary under swapping `x` and `y`.
pub fn smooth_heaviside(x: f64, y: f64, k: f64) -> f64 {
    sigmoid(k * (x - y))
}

fn smooth_heaviside_var<'t>(x: &Var<'t>, y: &Var<'t>, k: f64) -> Result<Var<'t>> {
    Ok(x.sub(y)?.scale(k).sigmoid())
}

/// Smooth relative strength of `g_f` against the source strength `g_a`.
pub fn relative_strength<'t>(g_a: &Var<'t>, g_f: &Var<'t>, k: f64) -> Result<Var<'t>> {
    let f = smooth_heaviside_var(g_f, g_a, k)?;
    let up = g_a.div(&g_f.add_scalar(EPS))?;
    let down = g_f.div(&g_a.add_scalar(EPS))?;
    f.mul(&up)?.add(&f.one_minus().mul(&down)?)
}

/// Scalar form of [`relative_strength`].
pub fn relative_strength_scalar(g_a: f64, g_f: f64, k: f64) -> f64 {
    let f = smooth_heaviside(g_f, g_a, k);
    f * (g_a / (g_f + EPS)) + (1.0 - f) * (g_f / (g_a + EPS))
}

pub fn orientation_preservation<'t>(
    a_a: &Var<'t>,
    a_f: &Var<'t>,
    cfg: &QgConfig,
) -> Result<Var<'t>> {
    let d = a_a.sub(a_f)?;
    let gap = match cfg.orientation {
        OrientationMode::Abs => d.abs(),
        OrientationMode::Smooth => d.mul(
            &smooth_heaviside_var(a_a, a_f, cfg.k)?
                .scale(2.0)
                .add_scalar(-1.0),
        )?,
    };
    Ok(gap.scale(1.0 / FRAC_PI_2).one_minus())
}

/// Scalar form of [`orientation_preservation`].
pub fn orientation_preservation_scalar(a_a: f64, a_f: f64, cfg: &QgConfig) -> f64 {
    let d = a_a - a_f;
    let gap = match cfg.orientation {
        OrientationMode::Abs => d.abs(),
        OrientationMode::Smooth => d * (2.0 * smooth_heaviside(a_a, a_f, cfg.k) - 1.0),
    };
    1.0 - gap / FRAC_PI_2
}

/// Strength, orientation and combined preservation values.
pub fn preservation_values<'t>(
    g: &Var<'t>,
    delta: &Var<'t>,
    cfg: &QgConfig,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let qg = g
        .add_scalar(-cfg.sigma_g)
        .scale(-cfg.k_g)
        .sigmoid()
        .scale(cfg.gamma_g);
    let qa = delta
        .add_scalar(-cfg.sigma_a)
        .scale(-cfg.k_a)
        .sigmoid()
        .scale(cfg.gamma_a);
    let q = qg.mul(&qa)?;
    Ok((qg, qa, q))
}

fn edge_preservation<'t>(
    src: &EdgeField<'t>,
    fused: &EdgeField<'t>,
    cfg: &QgConfig,
) -> Result<Var<'t>> {
    let g = relative_strength(&src.strength, &fused.strength, cfg.k)?;
    let delta = orientation_preservation(&src.orientation, &fused.orientation, cfg)?;
    Ok(preservation_values(&g, &delta, cfg)?.2)
}

fn weights<'t>(edges: &EdgeField<'t>, gamma: f64) -> Var<'t> {
    if gamma == 1.0 {
        edges.strength.clone()
    } else {
        edges.strength.powf(gamma)
    }
}

/// `1 - Q_g` with the smooth Heaviside and the configured orientation mode.
///
/// Flat inputs (all weights zero) give exactly 1.
pub fn qg_loss<'t>(a: &Var<'t>, b: &Var<'t>, fused: &Var<'t>, cfg: &QgConfig) -> Result<Var<'t>> {
    if a.shape() != b.shape() || a.shape() != fused.shape() {
        return Err(Error::shape(
            "qg_loss",
            format!(
                "{:?}, {:?} and fused {:?}",
                a.shape(),
                b.shape(),
                fused.shape()
            ),
        ));
    }
    let ea = sobel_edges(a)?;
    let eb = sobel_edges(b)?;
    let ef = sobel_edges(fused)?;
    let q_af = edge_preservation(&ea, &ef, cfg)?;
    let q_bf = edge_preservation(&eb, &ef, cfg)?;
    let (wa, wb) = (weights(&ea, cfg.gamma), weights(&eb, cfg.gamma));
    let num = q_af.mul(&wa)?.add(&q_bf.mul(&wb)?)?.sum();
    let den = wa.add(&wb)?.sum().add_scalar(EPS);
    Ok(num.div(&den)?.one_minus())
}

/// `dice + λ · qg`.
pub fn total_loss<'t>(dice: &Var<'t>, qg: &Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "λ must be non-negative, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(dice.clone());
    }
    dice.add(&qg.scale(lambda))
}
