use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Added to the Dice denominator so an empty prediction against an empty
/// ground truth stays finite.
pub const DICE_EPS: f64 = 1e-7;

fn check(p: &[f64], g: &[f64], m: &[f64]) -> Result<()> {
    if p.len() != g.len() || p.len() != m.len() {
        return Err(Error::Shape(format!(
            "dice: prediction {} / ground truth {} / roi {} elements",
            p.len(),
            g.len(),
            m.len()
        )));
    }
    Ok(())
}

/// Masked soft Dice loss `1 - 2 Σ m·p·g / (Σ m·p + Σ m·g + ε)`, with all
/// sums accumulated in `f64` in index order.
pub fn soft_dice(p: &[f64], g: &[f64], m: &[f64]) -> Result<f64> {
    check(p, g, m)?;
    let (i, s) = sums(p.iter().copied(), g, m);
    Ok(1.0 - 2.0 * i / (s + DICE_EPS))
}

fn sums(p: impl Iterator<Item = f64>, g: &[f64], m: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for ((p, g), m) in p.zip(g).zip(m) {
        if *m != 0.0 {
            inter += p * g;
            total += p + g;
        }
    }
    (inter, total)
}

/// Records the masked soft Dice loss of prediction `p` into the graph.
/// `gt` and `roi` must match the shape of `p`.
pub fn soft_dice_loss<T: Scalar>(g: &mut Graph<T>, p: Var, gt: &Tensor<T>, roi: &Tensor<T>) -> Result<Var> {
    let pv = g.value(p);
    if pv.shape() != gt.shape() || pv.shape() != roi.shape() {
        return Err(Error::Shape(format!(
            "dice: prediction {:?}, ground truth {:?}, roi {:?}",
            pv.shape(),
            gt.shape(),
            roi.shape()
        )));
    }
    let gd: Vec<f64> = gt.data().iter().map(|v| v.as_f64()).collect();
    let md: Vec<f64> = roi.data().iter().map(|v| v.as_f64()).collect();
    let (inter, total) = sums(pv.data().iter().map(|v| v.as_f64()), &gd, &md);
    let den = total + DICE_EPS;
    let loss = 1.0 - 2.0 * inter / den;
    // dL/dp_i = -2 m_i (g_i den - inter) / den^2
    let backward = move |up: &[T]| -> Vec<T> {
        let u = up[0].as_f64();
        gd.iter()
            .zip(&md)
            .map(|(g, m)| {
                if *m == 0.0 {
                    T::zero()
                } else {
                    T::from_f64(-2.0 * u * (g * den - inter) / (den * den))
                }
            })
            .collect()
    };
    Ok(g.custom_unary(p, Tensor::scalar(T::from_f64(loss)), backward))
}
