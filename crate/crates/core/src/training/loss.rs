use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// `mean(sqrt((pred - target)^2 + eps^2))`, a smooth L1 surrogate.
pub fn charbonnier<T: Element, G: Graph<T>>(
    g: &mut G,
    pred: &G::V,
    target: &G::V,
    eps: f64,
) -> Result<G::V> {
    let (ps, ts) = (g.shape_of(pred), g.shape_of(target));
    if ps != ts {
        return Err(Error::shape("charbonnier", format!("{ps:?} vs {ts:?}")));
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(&d, &d)?;
    let shifted = g.add_scalar(&sq, eps * eps)?;
    let root = g.sqrt(&shifted)?;
    g.mean(&root)
}
