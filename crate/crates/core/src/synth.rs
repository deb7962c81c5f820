//! Deterministic "shapes and narratives" dataset generator.
//!
//! Each sample is a scene of horizontal background bands (stuff) with a few
//! solid colored shapes drawn on top (things). Phrases refer to a single
//! shape, to all shapes of one type (plural), to all shapes at once (group),
//! or to one kind of background band. Embeddings are block one-hot codes, so
//! a small convolutional model can ground them without a language encoder.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::domain::{
    Category, DatasetSplit, Image, MaskGrid, Phrase, Plurality, Sample, CHANNELS,
    DEFAULT_EMBED_DIM,
};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, streams, substream, Rng};

/// Shape drawn as a thing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ThingKind {
    Circle,
    Square,
    Triangle,
}

impl ThingKind {
    pub const ALL: [ThingKind; 3] = [ThingKind::Circle, ThingKind::Square, ThingKind::Triangle];
}

/// Background band kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StuffKind {
    Sky,
    Grass,
    Sand,
}

impl StuffKind {
    pub const ALL: [StuffKind; 3] = [StuffKind::Sky, StuffKind::Grass, StuffKind::Sand];

    fn rgb(self) -> [f64; 3] {
        match self {
            StuffKind::Sky => [0.62, 0.78, 0.92],
            StuffKind::Grass => [0.44, 0.60, 0.38],
            StuffKind::Sand => [0.84, 0.78, 0.60],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorBucket {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorBucket {
    pub const ALL: [ColorBucket; 4] = [
        ColorBucket::Red,
        ColorBucket::Green,
        ColorBucket::Blue,
        ColorBucket::Yellow,
    ];

    fn rgb(self) -> [f64; 3] {
        match self {
            ColorBucket::Red => [0.88, 0.12, 0.10],
            ColorBucket::Green => [0.10, 0.80, 0.20],
            ColorBucket::Blue => [0.12, 0.20, 0.90],
            ColorBucket::Yellow => [0.95, 0.88, 0.08],
        }
    }
}

/// What a phrase points at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Referent {
    Thing(ThingKind),
    /// Every thing in the scene.
    Group,
    Stuff(StuffKind),
}

/// Layout of the phrase embedding vector.
pub mod layout {
    /// Referent type block: circle, square, triangle, group, sky, grass, sand.
    pub const TYPE_OFFSET: usize = 0;
    pub const TYPE_LEN: usize = 7;
    pub const COLOR_OFFSET: usize = TYPE_OFFSET + TYPE_LEN;
    pub const COLOR_LEN: usize = 4;
    pub const PLURAL_BIT: usize = COLOR_OFFSET + COLOR_LEN;
    /// Smallest embedding length that fits every block.
    pub const MIN_EMBED_DIM: usize = PLURAL_BIT + 1;
}

fn referent_slot(r: Referent) -> usize {
    match r {
        Referent::Thing(ThingKind::Circle) => 0,
        Referent::Thing(ThingKind::Square) => 1,
        Referent::Thing(ThingKind::Triangle) => 2,
        Referent::Group => 3,
        Referent::Stuff(StuffKind::Sky) => 4,
        Referent::Stuff(StuffKind::Grass) => 5,
        Referent::Stuff(StuffKind::Sand) => 6,
    }
}

fn color_slot(c: ColorBucket) -> usize {
    match c {
        ColorBucket::Red => 0,
        ColorBucket::Green => 1,
        ColorBucket::Blue => 2,
        ColorBucket::Yellow => 3,
    }
}

/// Block one-hot embedding of (referent type, color bucket, plurality),
/// zero-padded to `embed_dim`.
pub fn phrase_embedding(
    referent: Referent,
    color: Option<ColorBucket>,
    plurality: Plurality,
    embed_dim: usize,
) -> Vec<f64> {
    assert!(embed_dim >= layout::MIN_EMBED_DIM);
    let mut e = vec![0.0; embed_dim];
    e[layout::TYPE_OFFSET + referent_slot(referent)] = 1.0;
    if let Some(c) = color {
        e[layout::COLOR_OFFSET + color_slot(c)] = 1.0;
    }
    if plurality == Plurality::Plural {
        e[layout::PLURAL_BIT] = 1.0;
    }
    e
}

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_things: usize,
    pub stuff_bands: usize,
    pub plural_prob: f64,
    pub overlap_prob: f64,
    pub embed_dim: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            count: 200,
            height: 64,
            width: 64,
            max_things: 4,
            stuff_bands: 3,
            plural_prob: 0.3,
            overlap_prob: 0.3,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, rule: &str| Err(Error::Config(format!("gen spec `{field}` {rule}")));
        if self.count < 1 {
            return bad("count", "must be at least 1");
        }
        if self.height < 8 {
            return bad("height", "must be at least 8");
        }
        if self.width < 8 {
            return bad("width", "must be at least 8");
        }
        if self.max_things < 1 {
            return bad("max_things", "must be at least 1");
        }
        if self.stuff_bands < 1 {
            return bad("stuff_bands", "must be at least 1");
        }
        if self.stuff_bands > self.height {
            return bad("stuff_bands", "must not exceed height");
        }
        if !(0.0..=1.0).contains(&self.plural_prob) {
            return bad("plural_prob", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return bad("overlap_prob", "must lie in [0, 1]");
        }
        if self.embed_dim < layout::MIN_EMBED_DIM {
            return bad("embed_dim", "is too small for the phrase code");
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Shape {
    kind: ThingKind,
    cy: f64,
    cx: f64,
    r: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let py = y as f64 + 0.5;
        let px = x as f64 + 0.5;
        let dy = py - self.cy;
        let dx = px - self.cx;
        match self.kind {
            ThingKind::Circle => dy * dy + dx * dx <= self.r * self.r,
            ThingKind::Square => dy.abs() <= self.r * 0.85 && dx.abs() <= self.r * 0.85,
            ThingKind::Triangle => {
                let top = self.cy - self.r;
                if py < top || py > self.cy + self.r {
                    return false;
                }
                dx.abs() <= (py - top) / 2.0
            }
        }
    }
}

/// Generates `spec.count` labeled samples. Pure function of `spec`.
pub fn generate_dataset(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_substream(spec.seed, streams::DATA, i as u64);
            generate_sample(spec, &mut rng)
        })
        .collect())
}

fn generate_sample(spec: &GenSpec, rng: &mut Rng) -> Sample {
    let (h, w) = (spec.height, spec.width);

    // Background bands; interior boundaries jittered around the even split.
    let n_bands = spec.stuff_bands;
    let mut bounds = vec![0usize];
    for b in 1..n_bands {
        let even = (b * h) as f64 / n_bands as f64;
        let jitter = h as f64 / (4.0 * n_bands as f64);
        let at = (even + rng.gen_range(-jitter..=jitter)).round() as usize;
        let lo = bounds[b - 1] + 1;
        bounds.push(at.clamp(lo, h - (n_bands - b)));
    }
    bounds.push(h);
    let band_kinds: Vec<StuffKind> = (0..n_bands)
        .map(|_| *StuffKind::ALL.choose(rng).unwrap())
        .collect();
    let mut row_kind = vec![StuffKind::Sky; h];
    for b in 0..n_bands {
        for k in row_kind.iter_mut().take(bounds[b + 1]).skip(bounds[b]) {
            *k = band_kinds[b];
        }
    }

    // Thing inventory.
    let plural_here = rng.gen_bool(spec.plural_prob);
    let overlap_here = spec.max_things >= 2 && rng.gen_bool(spec.overlap_prob);
    let mut types = ThingKind::ALL.to_vec();
    types.shuffle(rng);
    // (kind, instance count)
    let mut inventory: Vec<(ThingKind, usize)> = Vec::new();
    if plural_here && spec.max_things >= 2 {
        let k = rng.gen_range(2..=spec.max_things.min(3));
        inventory.push((types[0], k));
        let others = rng.gen_range(0..=(spec.max_things - k).min(2));
        for &t in types.iter().skip(1).take(others) {
            inventory.push((t, 1));
        }
    } else {
        let cap = (spec.max_things - usize::from(overlap_here)).clamp(1, 3);
        let n = rng.gen_range(1..=cap);
        for &t in types.iter().take(n) {
            inventory.push((t, 1));
        }
    }
    let plural_kind = if plural_here { Some(inventory[0].0) } else { None };

    let mut colors = ColorBucket::ALL.to_vec();
    colors.shuffle(rng);
    let kind_color = |kind: ThingKind| -> ColorBucket {
        let pos = inventory.iter().position(|(k, _)| *k == kind).unwrap();
        colors[pos]
    };

    // Place instances, preferring low overlap.
    let min_side = h.min(w) as f64;
    let mut shapes: Vec<Shape> = Vec::new();
    for &(kind, n) in &inventory {
        for _ in 0..n {
            let r = rng.gen_range((0.08 * min_side).max(2.0)..=(0.18 * min_side).max(2.5));
            let mut best = None;
            for _ in 0..20 {
                let cy = rng.gen_range(r..=(h as f64 - r).max(r));
                let cx = rng.gen_range(r..=(w as f64 - r).max(r));
                let clear = shapes.iter().all(|s| {
                    let d = ((s.cy - cy).powi(2) + (s.cx - cx).powi(2)).sqrt();
                    d >= 0.8 * (s.r + r)
                });
                best = Some((cy, cx));
                if clear {
                    break;
                }
            }
            let (cy, cx) = best.unwrap();
            shapes.push(Shape { kind, cy, cx, r });
        }
    }
    shapes.shuffle(rng);

    // Paint: later shapes occlude earlier ones.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for (si, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.contains(y, x) {
                    owner[y * w + x] = Some(si);
                }
            }
        }
    }

    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let base = match owner[y * w + x] {
                Some(si) => kind_color(shapes[si].kind).rgb(),
                None => row_kind[y].rgb(),
            };
            for v in base {
                data.push((v + rng.gen_range(-0.04..=0.04)).clamp(0.0, 1.0));
            }
        }
    }
    let image = Image::new(h, w, data).expect("image dims");

    let mut phrases = Vec::new();
    let mut truth = Vec::new();
    let mut push = |referent, color, category, plurality, mask: MaskGrid| {
        phrases.push(Phrase {
            id: phrases.len() as u32,
            embedding: phrase_embedding(referent, color, plurality, spec.embed_dim),
            category,
            plurality,
        });
        truth.push(mask);
    };

    for &(kind, _) in &inventory {
        let mask = MaskGrid::from_fn(h, w, |y, x| {
            owner[y * w + x].is_some_and(|si| shapes[si].kind == kind)
        });
        let plurality = if plural_kind == Some(kind) {
            Plurality::Plural
        } else {
            Plurality::Singular
        };
        push(
            Referent::Thing(kind),
            Some(kind_color(kind)),
            Category::Thing,
            plurality,
            mask,
        );
    }

    if overlap_here {
        let mask = MaskGrid::from_fn(h, w, |y, x| owner[y * w + x].is_some());
        push(
            Referent::Group,
            None,
            Category::Thing,
            Plurality::Plural,
            mask,
        );
    }

    for kind in StuffKind::ALL {
        let runs = (0..n_bands)
            .filter(|&b| band_kinds[b] == kind && (b == 0 || band_kinds[b - 1] != kind))
            .count();
        if runs == 0 {
            continue;
        }
        let plurality = if runs >= 2 {
            Plurality::Plural
        } else {
            Plurality::Singular
        };
        let mask = MaskGrid::from_fn(h, w, |y, x| {
            row_kind[y] == kind && owner[y * w + x].is_none()
        });
        push(
            Referent::Stuff(kind),
            None,
            Category::Stuff,
            plurality,
            mask,
        );
    }

    Sample {
        image,
        phrases,
        truth: Some(truth),
    }
}

/// Shuffles by `seed` and keeps truth on the first ⌈ratio·N⌉ samples only.
pub fn split_dataset(samples: &[Sample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::spec(format!("split ratio {ratio} outside (0, 1]")));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, streams::SPLIT));
    // Tolerance keeps e.g. 0.1 * 200 = 20.000000000000004 from rounding up.
    let n_labeled = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_labeled = n_labeled.min(n);

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    for (rank, &i) in order.iter().enumerate() {
        let s = &samples[i];
        if rank < n_labeled {
            if s.truth.is_none() {
                return Err(Error::spec(format!(
                    "sample {i} has no truth and cannot be labeled"
                )));
            }
            labeled.push(s.clone());
        } else {
            unlabeled.push(s.unlabeled());
        }
    }
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_sample;
    use std::collections::HashSet;

    fn small_spec() -> GenSpec {
        GenSpec {
            seed: 7,
            count: 10,
            height: 32,
            width: 32,
            ..GenSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 8;
        assert_ne!(a, generate_dataset(&other).unwrap());
    }

    #[test]
    fn generated_samples_are_valid() {
        let spec = small_spec();
        for s in generate_dataset(&spec).unwrap() {
            assert!(validate_sample(&s, spec.embed_dim).is_ok());
            let n = s.phrases.len();
            assert!(n >= 2 && n <= spec.max_things + spec.stuff_bands, "{n} phrases");
        }
    }

    #[test]
    fn phrase_count_bound_holds_under_pressure() {
        for max_things in 1..=5 {
            for stuff_bands in 1..=3 {
                let spec = GenSpec {
                    seed: 11,
                    count: 40,
                    height: 16,
                    width: 16,
                    max_things,
                    stuff_bands,
                    plural_prob: 0.5,
                    overlap_prob: 0.5,
                    ..GenSpec::default()
                };
                for s in generate_dataset(&spec).unwrap() {
                    let n = s.phrases.len();
                    assert!(n >= 2 && n <= max_things + stuff_bands);
                }
            }
        }
    }

    #[test]
    fn plural_prob_one_gives_a_plural_phrase_everywhere() {
        let spec = GenSpec {
            plural_prob: 1.0,
            ..small_spec()
        };
        for s in generate_dataset(&spec).unwrap() {
            assert!(s.phrases.iter().any(|p| p.plurality == Plurality::Plural));
        }
    }

    #[test]
    fn overlap_prob_one_gives_multi_label_pixels() {
        let spec = GenSpec {
            overlap_prob: 1.0,
            max_things: 3,
            ..small_spec()
        };
        for s in generate_dataset(&spec).unwrap() {
            let truth = s.truth.as_ref().unwrap();
            let (h, w) = s.image.dims();
            let multi = (0..h * w).any(|k| {
                truth
                    .iter()
                    .filter(|m| m.as_slice()[k])
                    .count()
                    >= 2
            });
            assert!(multi);
        }
    }

    #[test]
    fn default_spec_covers_all_tag_combinations() {
        let spec = GenSpec {
            count: 100,
            ..GenSpec::default()
        };
        let tags: HashSet<_> = generate_dataset(&spec)
            .unwrap()
            .iter()
            .flat_map(|s| s.phrases.iter().map(|p| p.tags()).collect::<Vec<_>>())
            .collect();
        assert_eq!(tags.len(), 4, "{tags:?}");
    }

    #[test]
    fn embeddings_depend_only_on_type_color_plurality() {
        let a = phrase_embedding(
            Referent::Thing(ThingKind::Square),
            Some(ColorBucket::Blue),
            Plurality::Plural,
            16,
        );
        assert_eq!(a.iter().filter(|&&v| v == 1.0).count(), 3);
        assert_eq!(a[1], 1.0);
        assert_eq!(a[layout::COLOR_OFFSET + 2], 1.0);
        assert_eq!(a[layout::PLURAL_BIT], 1.0);
        assert!(a[layout::MIN_EMBED_DIM..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_spec_names_the_field() {
        let err = generate_dataset(&GenSpec {
            height: 4,
            ..GenSpec::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = generate_dataset(&GenSpec {
            count: 0,
            ..GenSpec::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("count"));
    }

    #[test]
    fn split_sizes_and_truth() {
        let samples = generate_dataset(&GenSpec {
            count: 100,
            height: 8,
            width: 8,
            ..GenSpec::default()
        })
        .unwrap();
        let split = split_dataset(&samples, 0.1, 3).unwrap();
        assert_eq!(split.labeled.len(), 10);
        assert_eq!(split.unlabeled.len(), 90);
        assert!(split.labeled.iter().all(Sample::is_labeled));
        assert!(split.unlabeled.iter().all(|s| !s.is_labeled()));
        assert_eq!(split, split_dataset(&samples, 0.1, 3).unwrap());

        let all = split_dataset(&samples, 1.0, 3).unwrap();
        assert_eq!(all.labeled.len(), 100);
        assert!(all.unlabeled.is_empty());
    }

    #[test]
    fn split_ratio_from_float_products_does_not_round_up() {
        let samples = generate_dataset(&GenSpec {
            count: 200,
            height: 8,
            width: 8,
            ..GenSpec::default()
        })
        .unwrap();
        assert_eq!(split_dataset(&samples, 0.1, 0).unwrap().labeled.len(), 20);
        assert_eq!(split_dataset(&samples, 0.3, 0).unwrap().labeled.len(), 60);
        assert_eq!(split_dataset(&samples, 0.01, 0).unwrap().labeled.len(), 2);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        assert!(split_dataset(&[], 0.0, 0).is_err());
        assert!(split_dataset(&[], 1.5, 0).is_err());
        assert!(split_dataset(&[], f64::NAN, 0).is_err());
    }
}
