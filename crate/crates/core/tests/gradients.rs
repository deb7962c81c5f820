use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sspg_core::domain::{Category, ConfidenceMap, Image, MaskGrid, Phrase, Plurality, PseudoLabel};
use sspg_core::losses::{
    bce_loss, dice_loss, kl_loss, supervised_objective, unsupervised_objective, KlVariant,
    LossWeights,
};
use sspg_core::model::{backward, finite_diff_grad, forward, init_params, ArchDescriptor, ModelParams};
use sspg_core::qla::{connectivity, mask_weight, pixel_weight_grid, Connectivity, QlaConfig};

const H: usize = 8;
const W: usize = 8;

struct Instance {
    params: ModelParams,
    image: Image,
    phrases: Vec<Phrase>,
    pseudo: Vec<PseudoLabel>,
    teacher: Vec<ConfidenceMap>,
    truth: Vec<MaskGrid>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchDescriptor::new(H, W);
    let mut params = init_params(seed, arch).unwrap();
    // Larger weights than at init so every block carries a visible signal.
    for v in params.as_mut_slice() {
        *v = 3.0 * *v + rng.gen_range(-0.05..0.05);
    }
    let image = Image::new(H, W, (0..H * W * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let phrases = (0..2)
        .map(|id| Phrase {
            id,
            embedding: (0..arch.embed).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            category: Category::Thing,
            plurality: Plurality::Singular,
        })
        .collect();
    let qla = QlaConfig::default();
    let mut pseudo = Vec::new();
    let mut teacher = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..2 {
        let conf =
            ConfidenceMap::from_values(H, W, (0..H * W).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let mask = MaskGrid::from_values(H, W, conf.as_slice().iter().map(|&v| v > 0.5).collect()).unwrap();
        let c = connectivity(&mask, Connectivity::Eight);
        pseudo.push(PseudoLabel {
            pixel_weights: Some(pixel_weight_grid(&conf, &qla)),
            mask_weight: Some(mask_weight(c, 3.0)),
            mask,
        });
        teacher.push(conf);
        truth.push(MaskGrid::from_fn(H, W, |y, x| (x + 2 * y) % 5 < 2));
    }
    Instance {
        params,
        image,
        phrases,
        pseudo,
        teacher,
        truth,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn composed_objective_matches_central_differences() {
    let inst = instance(11);
    let weights = LossWeights {
        unsup_bce: 0.7,
        unsup_dice: 1.3,
        unsup_kl: 0.5,
        sup_bce: 1.1,
        sup_dice: 0.9,
        ..LossWeights::default()
    };
    for variant in [KlVariant::Bernoulli, KlVariant::Verbatim] {
        let loss = |maps: &[ConfidenceMap]| {
            let u = unsupervised_objective(maps, &inst.pseudo, &inst.teacher, &weights, variant).unwrap();
            let s = supervised_objective(maps, &inst.truth, &weights).unwrap();
            s.breakdown.total + weights.unsup * u.breakdown.total
        };
        let (maps, trace) = forward(&inst.params, &inst.image, &inst.phrases).unwrap();
        let u = unsupervised_objective(&maps, &inst.pseudo, &inst.teacher, &weights, variant).unwrap();
        let s = supervised_objective(&maps, &inst.truth, &weights).unwrap();
        let upstream: Vec<Vec<f64>> = u
            .grads
            .iter()
            .zip(&s.grads)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| weights.unsup * x + y).collect())
            .collect();
        let analytic = backward(&trace, &upstream).unwrap();
        let numeric = finite_diff_grad(&inst.params, &inst.image, &inst.phrases, loss, 1e-5).unwrap();
        assert!(analytic.len() >= 100);

        let arch = inst.params.arch();
        for (name, range) in arch.blocks() {
            let worst = range
                .clone()
                .map(|k| rel_err(analytic[k], numeric[k]))
                .fold(0.0, f64::max);
            assert!(worst < 1e-4, "{variant:?} block {name}: max rel err {worst:e}");
            assert!(
                range.clone().any(|k| analytic[k].abs() > 1e-4),
                "block {name} has no signal"
            );
        }
    }
}

#[test]
fn finite_difference_error_shrinks_quadratically() {
    let inst = instance(5);
    let weights = LossWeights::default();
    let loss = |maps: &[ConfidenceMap]| supervised_objective(maps, &inst.truth, &weights).unwrap().breakdown.total;
    let (maps, trace) = forward(&inst.params, &inst.image, &inst.phrases).unwrap();
    let s = supervised_objective(&maps, &inst.truth, &weights).unwrap();
    let analytic = backward(&trace, &s.grads).unwrap();
    let coord = analytic
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap()
        .0;
    let err = |h: f64| {
        let g = sspg_core::model::finite_diff_grad_at(&inst.params, &inst.image, &inst.phrases, loss, h, &[coord])
            .unwrap()[0];
        (g - analytic[coord]).abs()
    };
    let (coarse, fine) = (err(1e-2), err(1e-3));
    // Central differences: a tenfold smaller step cuts the error about 100×.
    assert!(fine < coarse / 30.0, "coarse {coarse:e} fine {fine:e}");
}

fn fd_wrt_pred<F: Fn(&ConfidenceMap) -> f64>(pred: &ConfidenceMap, f: F, k: usize) -> f64 {
    let h = 1e-6;
    let (hh, ww) = pred.dims();
    let mut v = pred.as_slice().to_vec();
    v[k] += h;
    let plus = f(&ConfidenceMap::from_values(hh, ww, v.clone()).unwrap());
    v[k] -= 2.0 * h;
    let minus = f(&ConfidenceMap::from_values(hh, ww, v).unwrap());
    (plus - minus) / (2.0 * h)
}

#[test]
fn loss_gradients_match_finite_differences() {
    let inst = instance(3);
    let pred = &inst.teacher[0];
    let target = &inst.pseudo[1].mask;
    let teacher = &inst.teacher[1];
    let pw = inst.pseudo[1].pixel_weights.clone().unwrap();

    let (_, g_bce) = bce_loss(pred, target, Some(&pw)).unwrap();
    let (_, g_dice) = dice_loss(pred, target, Some(0.8)).unwrap();
    for k in 0..pred.len() {
        let n = fd_wrt_pred(pred, |p| bce_loss(p, target, Some(&pw)).unwrap().0, k);
        assert!(rel_err(g_bce[k], n) < 1e-5, "bce pixel {k}");
        let n = fd_wrt_pred(pred, |p| dice_loss(p, target, Some(0.8)).unwrap().0, k);
        assert!(rel_err(g_dice[k], n) < 1e-5, "dice pixel {k}");
        for variant in [KlVariant::Bernoulli, KlVariant::Verbatim] {
            let (_, g) = kl_loss(pred, teacher, variant).unwrap();
            let n = fd_wrt_pred(pred, |p| kl_loss(p, teacher, variant).unwrap().0, k);
            assert!(rel_err(g[k], n) < 1e-5, "{variant:?} pixel {k}");
        }
    }
}
