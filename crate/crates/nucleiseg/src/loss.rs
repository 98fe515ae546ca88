//! Training objective: summed binary cross-entropy plus soft Dice, applied
//! to the two fused output maps and to all twelve side maps under deep
//! supervision, each term carrying its own weight.

use crate::error::{Error, Result};
use crate::network::NetworkOutput;
use crate::tensor::{make_op, Tensor};

/// Clamp for the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Smoothing term in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LossWeights {
    pub mask: f64,
    pub edge: f64,
    /// One weight per stage, shared between the mask-side and edge-side term.
    pub side: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            mask: 1.0,
            edge: 1.0,
            side: [1.0; 6],
        }
    }
}

fn check_same_shape(pred: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "{what}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Binary cross-entropy summed over pixels:
/// Σ −[g·ln p + (1−g)·ln(1−p)], with p clamped to [ε, 1−ε].
/// `mean` divides by the pixel count instead (off by default).
pub fn bce(pred: &Tensor, target: &Tensor, mean: bool) -> Result<Tensor> {
    check_same_shape(pred, target, "bce")?;
    let scale = if mean { 1.0 / pred.numel() as f64 } else { 1.0 };
    let pd = pred.data();
    let td = target.data().clone();
    let mut total = 0.0;
    for (&p, &g) in pd.iter().zip(&td) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    drop(pd);
    let p_parent = pred.clone();
    Ok(make_op(
        vec![1],
        vec![total * scale],
        vec![pred.clone()],
        move |gout| {
            let pd = p_parent.data();
            let delta: Vec<f64> = pd
                .iter()
                .zip(&td)
                .map(|(&p, &g)| {
                    if p < BCE_EPS || p > 1.0 - BCE_EPS {
                        0.0 // clamped region is flat
                    } else {
                        gout[0] * scale * ((1.0 - g) / (1.0 - p) - g / p)
                    }
                })
                .collect();
            drop(pd);
            p_parent.accum_grad(&delta);
        },
    ))
}

/// Global soft Dice loss: 1 − (2·Σ p·g + ε) / (Σ p² + Σ g² + ε).
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target, "dice_loss")?;
    let pd = pred.data();
    let td = target.data().clone();
    let mut inter = 0.0;
    let mut p_sq = 0.0;
    let mut g_sq = 0.0;
    for (&p, &g) in pd.iter().zip(&td) {
        inter += p * g;
        p_sq += p * p;
        g_sq += g * g;
    }
    drop(pd);
    let num = 2.0 * inter + DICE_EPS;
    let den = p_sq + g_sq + DICE_EPS;
    let p_parent = pred.clone();
    Ok(make_op(
        vec![1],
        vec![1.0 - num / den],
        vec![pred.clone()],
        move |gout| {
            let pd = p_parent.data();
            // d/dp_i of −num/den
            let delta: Vec<f64> = pd
                .iter()
                .zip(&td)
                .map(|(&p, &g)| gout[0] * (num * 2.0 * p - 2.0 * g * den) / (den * den))
                .collect();
            drop(pd);
            p_parent.accum_grad(&delta);
        },
    ))
}

/// ζ = τ = BCE + Dice on one prediction/target pair.
fn term(pred: &Tensor, target: &Tensor, mean_bce: bool) -> Result<Tensor> {
    bce(pred, target, mean_bce)?.add(&dice_loss(pred, target)?)
}

#[derive(Clone)]
pub struct LossBreakdown {
    /// Scalar tensor connected to the graph; backward starts here.
    pub total: Tensor,
    pub zeta_mask: f64,
    pub tau_edge: f64,
    pub zeta_sides: [f64; 6],
    pub tau_sides: [f64; 6],
}

impl LossBreakdown {
    pub fn total_value(&self) -> f64 {
        self.total.item()
    }

    /// Recomposes the weighted sum from the stored parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let mut s = w.mask * self.zeta_mask + w.edge * self.tau_edge;
        for i in 0..6 {
            s += w.side[i] * (self.zeta_sides[i] + self.tau_sides[i]);
        }
        s
    }
}

/// Deep-supervision objective over a full network output.
pub fn total_loss(
    out: &NetworkOutput,
    mask_gt: &Tensor,
    edge_gt: &Tensor,
    w: &LossWeights,
    mean_bce: bool,
) -> Result<LossBreakdown> {
    if out.mask_sides.len() != 6 || out.edge_sides.len() != 6 {
        return Err(Error::Usage(format!(
            "total_loss: expected 6 side maps per branch, got {} and {}",
            out.mask_sides.len(),
            out.edge_sides.len()
        )));
    }
    if w.mask < 0.0 || w.edge < 0.0 || w.side.iter().any(|&v| v < 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let zeta_mask = term(&out.s_mask, mask_gt, mean_bce)?;
    let tau_edge = term(&out.s_edge, edge_gt, mean_bce)?;
    let mut total = zeta_mask.scale(w.mask).add(&tau_edge.scale(w.edge))?;
    let mut zeta_sides = [0.0; 6];
    let mut tau_sides = [0.0; 6];
    for i in 0..6 {
        let zs = term(&out.mask_sides[i], mask_gt, mean_bce)?;
        let ts = term(&out.edge_sides[i], edge_gt, mean_bce)?;
        zeta_sides[i] = zs.item();
        tau_sides[i] = ts.item();
        total = total.add(&zs.add(&ts)?.scale(w.side[i]))?;
    }
    Ok(LossBreakdown {
        zeta_mask: zeta_mask.item(),
        tau_edge: tau_edge.item(),
        zeta_sides,
        tau_sides,
        total,
    })
}
