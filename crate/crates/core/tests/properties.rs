use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sspg_core::domain::{Category, ConfidenceMap, MaskGrid, PhraseTags, Plurality, PseudoLabel};
use sspg_core::eval::{average_recall_of, recall_at, recall_thresholds, EvalReport};
use sspg_core::losses::{bce_loss, dice_loss, kl_loss, unsupervised_objective, KlVariant, LossWeights};
use sspg_core::qla::{connectivity, mask_weight, pixel_weight, Connectivity, QlaConfig};

/// Component count by explicit stack flood fill.
fn flood_fill_components(mask: &MaskGrid, eight: bool) -> usize {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let offsets: &[(isize, isize)] = if eight {
        &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    } else {
        &[(-1, 0), (0, -1), (0, 1), (1, 0)]
    };
    for start in 0..h * w {
        if !mask.as_slice()[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.as_slice()[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaskGrid {
    let density = rng.gen_range(0.05..0.7);
    MaskGrid::from_fn(h, w, |_, _| rng.gen_bool(density))
}

#[test]
fn union_find_matches_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = random_mask(&mut rng, 32, 32);
        mismatches += (connectivity(&m, Connectivity::Four) != flood_fill_components(&m, false)) as usize;
        mismatches += (connectivity(&m, Connectivity::Eight) != flood_fill_components(&m, true)) as usize;
    }
    assert_eq!(mismatches, 0);
}

fn conf_map(h: usize, w: usize) -> impl Strategy<Value = ConfidenceMap> {
    prop::collection::vec(0.0..=1.0f64, h * w).prop_map(move |v| ConfidenceMap::from_values(h, w, v).unwrap())
}

fn mask_grid(h: usize, w: usize) -> impl Strategy<Value = MaskGrid> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |v| MaskGrid::from_values(h, w, v).unwrap())
}

proptest! {
    #[test]
    fn components_agree_on_small_masks(m in mask_grid(6, 9)) {
        prop_assert_eq!(connectivity(&m, Connectivity::Four), flood_fill_components(&m, false));
        prop_assert_eq!(connectivity(&m, Connectivity::Eight), flood_fill_components(&m, true));
        prop_assert!(connectivity(&m, Connectivity::Eight) <= connectivity(&m, Connectivity::Four));
    }

    #[test]
    fn losses_are_nonnegative(pred in conf_map(4, 5), teacher in conf_map(4, 5), target in mask_grid(4, 5),
                              w in prop::collection::vec(0.0..2.0f64, 20), mw in 0.0..1.0f64) {
        prop_assert!(bce_loss(&pred, &target, Some(&w)).unwrap().0 >= 0.0);
        prop_assert!(dice_loss(&pred, &target, Some(mw)).unwrap().0 >= 0.0);
        prop_assert!(kl_loss(&pred, &teacher, KlVariant::Bernoulli).unwrap().0 >= -1e-12);
    }

    #[test]
    fn bce_improves_towards_the_target(pred in conf_map(3, 3), target in mask_grid(3, 3), k in 0usize..9, step in 0.01..0.3f64) {
        let mut v = pred.as_slice().to_vec();
        let g = target.as_slice()[k];
        let moved = if g { (v[k] + step).min(1.0) } else { (v[k] - step).max(0.0) };
        let before = bce_loss(&pred, &target, None).unwrap().0;
        v[k] = moved;
        let after = bce_loss(&ConfidenceMap::from_values(3, 3, v).unwrap(), &target, None).unwrap().0;
        prop_assert!(after <= before + 1e-15);
    }

    #[test]
    fn unsupervised_total_recombines(preds in prop::collection::vec(conf_map(3, 4), 1..4),
                                     lam in (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64)) {
        let weights = LossWeights { unsup_bce: lam.0, unsup_dice: lam.1, unsup_kl: lam.2, ..LossWeights::default() };
        let teacher: Vec<ConfidenceMap> = preds.iter().rev().cloned().collect();
        let pseudo: Vec<PseudoLabel> = teacher
            .iter()
            .map(|t| PseudoLabel {
                mask: MaskGrid::from_values(3, 4, t.as_slice().iter().map(|&v| v > 0.5).collect()).unwrap(),
                pixel_weights: None,
                mask_weight: Some(0.7),
            })
            .collect();
        let obj = unsupervised_objective(&preds, &pseudo, &teacher, &weights, KlVariant::Bernoulli).unwrap();
        let b = &obj.breakdown;
        let expected = lam.0 * b.bce + lam.1 * b.dice + lam.2 * b.kl;
        prop_assert!((b.total - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn recall_is_monotone(ious in prop::collection::vec(0.0..=1.0f64, 1..40)) {
        let r: Vec<f64> = recall_thresholds().map(|t| recall_at(&ious, t)).collect();
        prop_assert!(r.windows(2).all(|w| w[1] <= w[0]));
        let ar = average_recall_of(&ious).unwrap();
        prop_assert!((0.0..=100.0).contains(&ar));
    }

    #[test]
    fn overall_ar_lies_between_thing_and_stuff(
        things in prop::collection::vec(0.0..=1.0f64, 1..10),
        stuff in prop::collection::vec(0.0..=1.0f64, 1..10),
    ) {
        let tag = |c| PhraseTags { category: c, plurality: Plurality::Singular };
        let rows = things.iter().map(|&v| (tag(Category::Thing), v))
            .chain(stuff.iter().map(|&v| (tag(Category::Stuff), v)))
            .collect();
        let r = EvalReport::from_ious(rows);
        let (a, b) = (r.thing.unwrap(), r.stuff.unwrap());
        let o = r.overall.unwrap();
        prop_assert!(o >= a.min(b) - 1e-9 && o <= a.max(b) + 1e-9);
        prop_assert_eq!(r.counts["thing"] + r.counts["stuff"], r.n_phrases());
        prop_assert_eq!(r.counts["singular"] + r.counts["plural"], r.n_phrases());
    }

    #[test]
    fn pixel_weight_is_symmetric_and_bounded(c in 0.0..=1.0f64) {
        let cfg = QlaConfig::default();
        let w = pixel_weight(c, &cfg);
        prop_assert!((w - pixel_weight(1.0 - c, &cfg)).abs() < 1e-12);
        prop_assert!((0.0..=cfg.beta).contains(&w));
    }

    #[test]
    fn mask_weight_decreases_with_components(c in 0usize..60, tau in 0.0..25.0f64) {
        prop_assert!(mask_weight(c + 1, tau) <= mask_weight(c, tau));
    }
}
