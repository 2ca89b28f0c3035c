use crate::encoders::BinaryMask;
use crate::error::{Error, Result};

/// Foreground IoU; an empty union scores 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::invalid(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        inter += usize::from(p & g);
        union += usize::from(p | g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean of per-episode IoU.
pub fn miou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no episodes to score"));
    }
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| iou(p, g)).sum::<Result<f64>>()?;
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(4, 4, f)
    }

    #[test]
    fn fixtures() {
        let gt = m(|y, _| y < 2);
        assert_eq!(miou(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap(), 1.0);
        assert_eq!(miou(&[m(|y, _| y >= 2)], std::slice::from_ref(&gt)).unwrap(), 0.0);
        // gt rows 0-1 plus an equal-area false region rows 2-3
        assert_eq!(miou(&[m(|_, _| true)], std::slice::from_ref(&gt)).unwrap(), 0.5);
        assert_eq!(iou(&m(|_, _| false), &m(|_, _| false)).unwrap(), 1.0);
        assert!(miou(std::slice::from_ref(&gt), &[]).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), 16).prop_map(|b| BinaryMask::from_fn(4, 4, move |y, x| b[y * 4 + x]))
    }

    proptest! {
        #[test]
        fn symmetric_and_order_free(pairs in prop::collection::vec((mask_strategy(), mask_strategy()), 1..6)) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = miou(&p, &g).unwrap();
            prop_assert_eq!(a, miou(&g, &p).unwrap());
            let (mut rp, mut rg) = (p.clone(), g.clone());
            rp.reverse();
            rg.reverse();
            prop_assert!((a - miou(&rp, &rg).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
