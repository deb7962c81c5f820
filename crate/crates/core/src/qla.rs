//! Quality-based loss adjustment for pseudo-labels.
//!
//! Pixel weights down-weight ambiguous teacher confidences (near μ) in the
//! BCE term; mask weights penalize fragmented pseudo masks in the Dice term
//! through a shifted sigmoid of the connected-component count, with the
//! shift τ decaying over training. Entropy-based dropout is the alternative
//! that discards the most uncertain pseudo-labels outright.

use std::f64::consts::PI;

use crate::domain::{ConfidenceMap, MaskGrid, PseudoLabel};
use crate::error::{Error, Result};
use crate::losses::CLIP_EPS;

/// Pixel neighborhood used to join foreground pixels into components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QlaConfig {
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Clamp negative pixel weights to zero.
    ///
    /// With β = 1.3, σ = 0.1 the raw weight reaches about −2.69 at
    /// confidence 0.5; unclamped mode keeps that verbatim.
    pub clamp_pixel_weights: bool,
    pub connectivity: Connectivity,
    pub tau_init: f64,
    pub tau_step_drop: f64,
    pub tau_interval: u64,
    pub tau_floor: f64,
    /// Fraction of highest-entropy pseudo-labels to drop; 0 disables.
    pub eds_fraction: f64,
}

impl Default for QlaConfig {
    fn default() -> Self {
        QlaConfig {
            beta: 1.3,
            mu: 0.5,
            sigma: 0.1,
            clamp_pixel_weights: true,
            connectivity: Connectivity::Eight,
            tau_init: 20.0,
            tau_step_drop: 5.0,
            tau_interval: 3000,
            tau_floor: 0.0,
            eds_fraction: 0.0,
        }
    }
}

impl QlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Config("qla.sigma must be positive".into()));
        }
        if self.tau_interval < 1 {
            return Err(Error::Config("qla.tau_interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.eds_fraction) {
            return Err(Error::Config("qla.eds_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `β − N(conf; μ, σ)` with N the Gaussian density, clamped at 0 if configured.
pub fn pixel_weight(conf: f64, cfg: &QlaConfig) -> f64 {
    let d = conf - cfg.mu;
    let density =
        (-(d * d) / (2.0 * cfg.sigma * cfg.sigma)).exp() / ((2.0 * PI).sqrt() * cfg.sigma);
    let raw = cfg.beta - density;
    if cfg.clamp_pixel_weights {
        raw.max(0.0)
    } else {
        raw
    }
}

pub fn pixel_weight_grid(conf: &ConfidenceMap, cfg: &QlaConfig) -> Vec<f64> {
    conf.as_slice().iter().map(|&c| pixel_weight(c, cfg)).collect()
}

/// Disjoint-set forest with path halving and union by size.
struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Returns true if two distinct sets were merged.
    fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        true
    }
}

/// Number of foreground connected components.
pub fn connectivity(mask: &MaskGrid, kind: Connectivity) -> usize {
    let (h, w) = mask.dims();
    let fg = mask.as_slice();
    let mut sets = DisjointSets::new(h * w);
    let mut components = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            components += 1;
            // Already-visited neighbors: W, N, and for 8-connectivity NW, NE.
            let mut link = |j: usize, sets: &mut DisjointSets| {
                if fg[j] && sets.union(i as u32, j as u32) {
                    components -= 1;
                }
            };
            if x > 0 {
                link(i - 1, &mut sets);
            }
            if y > 0 {
                link(i - w, &mut sets);
                if kind == Connectivity::Eight {
                    if x > 0 {
                        link(i - w - 1, &mut sets);
                    }
                    if x + 1 < w {
                        link(i - w + 1, &mut sets);
                    }
                }
            }
        }
    }
    components
}

/// `1 / (1 + e^{c − τ})`.
pub fn mask_weight(components: usize, tau: f64) -> f64 {
    1.0 / (1.0 + (components as f64 - tau).exp())
}

/// `max(τ_floor, τ_init − drop · ⌊step / interval⌋)`.
pub fn tau_at(step: u64, cfg: &QlaConfig) -> f64 {
    let drops = (step / cfg.tau_interval) as f64;
    (cfg.tau_init - cfg.tau_step_drop * drops).max(cfg.tau_floor)
}

/// Mean binary entropy (nats) of a confidence map, on clipped values.
pub fn mean_entropy(conf: &ConfidenceMap) -> f64 {
    if conf.is_empty() {
        return 0.0;
    }
    let total: f64 = conf
        .as_slice()
        .iter()
        .map(|&m| {
            let m = m.clamp(CLIP_EPS, 1.0 - CLIP_EPS);
            -m * m.ln() - (1.0 - m) * (1.0 - m).ln()
        })
        .sum();
    total / conf.len() as f64
}

/// Indices (in input order) kept after dropping the ⌈fraction·N⌉
/// highest-entropy maps. Among equal entropies the earlier entry is
/// dropped first.
pub fn eds_retain(confs: &[&ConfidenceMap], fraction: f64) -> Vec<usize> {
    let n = confs.len();
    let n_drop = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_drop == 0 {
        return (0..n).collect();
    }
    let entropy: Vec<f64> = confs.iter().map(|c| mean_entropy(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: ties keep input order.
    order.sort_by(|&a, &b| entropy[b].total_cmp(&entropy[a]));
    let mut keep = vec![true; n];
    for &i in order.iter().take(n_drop.min(n)) {
        keep[i] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Drops the highest-entropy fraction of pseudo-labels.
pub fn eds_filter(
    batch: Vec<(PseudoLabel, ConfidenceMap)>,
    fraction: f64,
) -> Vec<(PseudoLabel, ConfidenceMap)> {
    let confs: Vec<&ConfidenceMap> = batch.iter().map(|(_, c)| c).collect();
    let keep = eds_retain(&confs, fraction);
    let mut keep_iter = keep.into_iter().peekable();
    batch
        .into_iter()
        .enumerate()
        .filter_map(|(i, item)| {
            if keep_iter.peek() == Some(&i) {
                keep_iter.next();
                Some(item)
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn pixel_weight_golden_values() {
        let cfg = QlaConfig::default();
        let raw = QlaConfig {
            clamp_pixel_weights: false,
            ..QlaConfig::default()
        };
        let peak = 1.0 / ((2.0 * PI).sqrt() * 0.1);
        assert!((pixel_weight(0.5, &raw) - (1.3 - peak)).abs() < 1e-12);
        assert!((pixel_weight(0.5, &raw) + 2.68942).abs() < 1e-5);
        assert_eq!(pixel_weight(0.5, &cfg), 0.0);

        let at_zero = 1.3 - peak * (-12.5f64).exp();
        assert!((pixel_weight(0.0, &cfg) - at_zero).abs() < 1e-15);
        assert!((pixel_weight(0.0, &cfg) - 1.29999).abs() < 1e-5);
        assert!((pixel_weight(1.0, &cfg) - at_zero).abs() < 1e-15);
    }

    #[test]
    fn pixel_weight_is_symmetric_and_bounded() {
        let cfg = QlaConfig {
            clamp_pixel_weights: false,
            ..QlaConfig::default()
        };
        let max = 1.3 - (-12.5f64).exp() / ((2.0 * PI).sqrt() * 0.1);
        let min = pixel_weight(0.5, &cfg);
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let w = pixel_weight(x, &cfg);
            assert!((w - pixel_weight(1.0 - x, &cfg)).abs() < 1e-12);
            assert!(w <= max + 1e-15 && w >= min - 1e-15);
        }
    }

    #[test]
    fn weight_grids() {
        let cfg = QlaConfig::default();
        let half = ConfidenceMap::constant(3, 3, 0.5).unwrap();
        assert!(pixel_weight_grid(&half, &cfg).iter().all(|&w| w == 0.0));
        let one = ConfidenceMap::constant(3, 3, 1.0).unwrap();
        assert!(pixel_weight_grid(&one, &cfg).iter().all(|&w| (w - 1.3).abs() < 1e-4));

        let vals = vec![0.1, 0.45, 0.7, 0.93];
        let flipped: Vec<f64> = vals.iter().map(|v| 1.0 - v).collect();
        let a = pixel_weight_grid(&ConfidenceMap::from_values(2, 2, vals).unwrap(), &cfg);
        let b = pixel_weight_grid(&ConfidenceMap::from_values(2, 2, flipped).unwrap(), &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn connectivity_basics() {
        assert_eq!(connectivity(&MaskGrid::empty(5, 5), Connectivity::Eight), 0);
        let rect = MaskGrid::from_fn(6, 7, |y, x| (1..4).contains(&y) && (2..6).contains(&x));
        assert_eq!(connectivity(&rect, Connectivity::Four), 1);
        assert_eq!(connectivity(&rect, Connectivity::Eight), 1);
        let diag = MaskGrid::from_fn(2, 2, |y, x| y == x);
        assert_eq!(connectivity(&diag, Connectivity::Eight), 1);
        assert_eq!(connectivity(&diag, Connectivity::Four), 2);
        let anti = MaskGrid::from_fn(2, 2, |y, x| y + x == 1);
        assert_eq!(connectivity(&anti, Connectivity::Eight), 1);
        assert_eq!(connectivity(&anti, Connectivity::Four), 2);
        // U shape merges late in the scan.
        let u = MaskGrid::from_fn(3, 3, |y, x| x != 1 || y == 2);
        assert_eq!(connectivity(&u, Connectivity::Four), 1);
    }

    #[test]
    fn mask_weight_values_and_monotonicity() {
        assert_eq!(mask_weight(20, 20.0), 0.5);
        let w1 = mask_weight(1, 20.0);
        assert!((w1 - 1.0).abs() < 1e-8 && w1 <= 1.0);
        assert!((mask_weight(25, 20.0) - 0.006693).abs() < 1e-6);
        for c in 0..40 {
            assert!(mask_weight(c + 1, 20.0) < mask_weight(c, 20.0));
            assert!(mask_weight(c, 15.0) < mask_weight(c, 20.0));
        }
    }

    #[test]
    fn tau_schedule() {
        let cfg = QlaConfig::default();
        assert_eq!(tau_at(0, &cfg), 20.0);
        assert_eq!(tau_at(2999, &cfg), 20.0);
        assert_eq!(tau_at(3000, &cfg), 15.0);
        assert_eq!(tau_at(12000, &cfg), 0.0);
        assert_eq!(tau_at(100_000, &cfg), 0.0);
        let mut prev = f64::INFINITY;
        for step in (0..20_000).step_by(250) {
            let t = tau_at(step, &cfg);
            assert!(t <= prev);
            assert_eq!(t, tau_at(step - step % 3000, &cfg));
            prev = t;
        }
    }

    fn label(h: usize, w: usize) -> PseudoLabel {
        PseudoLabel {
            mask: MaskGrid::empty(h, w),
            pixel_weights: None,
            mask_weight: None,
        }
    }

    #[test]
    fn eds_drops_highest_entropy() {
        let batch: Vec<_> = (0..10)
            .map(|i| {
                let v = 0.05 + 0.04 * i as f64;
                (label(2, 2), ConfidenceMap::constant(2, 2, v).unwrap())
            })
            .collect();
        assert_eq!(eds_filter(batch.clone(), 0.0), batch);
        let kept = eds_filter(batch.clone(), 0.2);
        assert_eq!(kept.len(), 8);
        // Entropy grows with v up to 0.5: the last two (0.41, 0.41+) go.
        assert_eq!(kept, batch[..8].to_vec());
    }

    #[test]
    fn eds_drops_one_half_maps_first_and_breaks_ties_in_order() {
        let half = ConfidenceMap::constant(2, 2, 0.5).unwrap();
        assert!((mean_entropy(&half) - LN_2).abs() < 1e-12);
        let sure = ConfidenceMap::constant(2, 2, 0.01).unwrap();
        let confs = [&sure, &half, &sure, &half];
        assert_eq!(eds_retain(&confs, 0.25), vec![0, 2, 3]);
        assert_eq!(eds_retain(&confs, 0.5), vec![0, 2]);
        for n in 1..30usize {
            let confs: Vec<&ConfidenceMap> = (0..n).map(|_| &sure).collect();
            for f in [0.0, 0.1, 0.2, 0.5, 0.9] {
                let expected = n - (f * n as f64 - 1e-9).ceil().max(0.0) as usize;
                assert_eq!(eds_retain(&confs, f).len(), expected);
            }
        }
    }
}
