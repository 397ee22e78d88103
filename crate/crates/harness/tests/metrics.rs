#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use card_core::centers::IGNORE;
use card_harness::metrics::ConfusionMatrix;
use proptest::prelude::*;

proptest! {
    #[test]
    fn matches_confusion_oracle(
        n_class in 2usize..6,
        pixels in prop::collection::vec((0u8..6, 0u8..7), 1..200),
    ) {
        let gt: Vec<u8> = pixels.iter().map(|&(_, g)| if g as usize >= n_class { IGNORE } else { g }).collect();
        let pred: Vec<u8> = pixels.iter().map(|&(p, _)| p % n_class as u8).collect();
        prop_assume!(gt.iter().any(|&g| g != IGNORE));

        let mut m = ConfusionMatrix::new(n_class);
        m.add(&gt, &pred);
        let report = m.report().unwrap();

        let gt_o: Vec<Option<usize>> = gt.iter().map(|&g| (g != IGNORE).then_some(g as usize)).collect();
        let pred_o: Vec<usize> = pred.iter().map(|&p| p as usize).collect();
        let (per_class, mean) = oracle::miou(&pred_o, &gt_o, n_class);
        prop_assert_eq!(report.per_class.len(), per_class.len());
        for (a, b) in report.per_class.iter().zip(&per_class) {
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "presence differs: {:?} vs {:?}", a, b),
            }
        }
        prop_assert!((report.mean - mean).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&report.mean));
    }

    #[test]
    fn merge_is_order_independent(
        a in prop::collection::vec((0u8..3, 0u8..3), 1..50),
        b in prop::collection::vec((0u8..3, 0u8..3), 1..50),
    ) {
        let fill = |v: &[(u8, u8)]| {
            let mut m = ConfusionMatrix::new(3);
            let (g, p): (Vec<u8>, Vec<u8>) = v.iter().copied().unzip();
            m.add(&g, &p);
            m
        };
        let (mut ab, mut ba) = (fill(&a), fill(&b));
        ab.merge(&fill(&b));
        ba.merge(&fill(&a));
        prop_assert_eq!(ab, ba);
    }
}
