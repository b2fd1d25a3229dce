//! Deterministic synthetic knowledge source and image world.
//!
//! Every concept carries a binary attribute code. Names are built from one
//! syllable per active attribute, definitions enumerate one descriptor word
//! per active attribute, and images draw one fixed procedural primitive per
//! active attribute. Attribute codes therefore tie text and pixels together:
//! a concept whose code is the union of two others looks like both of them.
//!
//! Primitive layout: the image is tiled into a `ceil(sqrt(A))`-column grid
//! of cells, attribute `a` owns cell `a` in row-major order, and draws one of
//! four patterns (`a % 4`): horizontal stripes, vertical stripes, a disc, or
//! an L-shaped corner. Cells never overlap, so primitive supports are
//! pairwise disjoint.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LabelRecord, LabeledDataset, LabeledSample, MIN_IMAGE_SIDE};
use crate::error::{Error, Result};

const SYLLABLES: [&str; 16] = [
    "bron", "pneu", "card", "effu", "nodu", "fibr", "cons", "atel", "emph", "pleu", "calc", "infi",
    "mass", "hern", "lesi", "opac",
];

const DESCRIPTORS: [&str; 16] = [
    "striated", "ribbed", "rounded", "angular", "hazy", "reticular", "patchy", "linear", "cavitary",
    "lobar", "calcified", "fluffy", "diffuse", "focal", "dense", "wedged",
];

/// Name fragment contributed by attribute `a`.
pub fn attribute_syllable(a: usize) -> String {
    let root = SYLLABLES[a % SYLLABLES.len()];
    match a / SYLLABLES.len() {
        0 => root.to_string(),
        k => format!("{root}{k}"),
    }
}

/// Definition word contributed by attribute `a`.
pub fn attribute_descriptor(a: usize) -> String {
    let root = DESCRIPTORS[a % DESCRIPTORS.len()];
    match a / DESCRIPTORS.len() {
        0 => root.to_string(),
        k => format!("{root}{k}"),
    }
}

/// A named concept with its definition and semantic attribute code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub id: String,
    pub name: String,
    pub definition: String,
    #[serde(with = "bit_string")]
    pub attributes: Vec<bool>,
}

mod bit_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!("attribute bit `{other}`"))),
            })
            .collect()
    }
}

impl Concept {
    /// Builds a concept whose name and definition are derived from `code`.
    pub fn from_code(id: impl Into<String>, code: Vec<bool>) -> Self {
        let active: Vec<usize> = active_bits(&code);
        let name = if active.is_empty() {
            "unremarkable".to_string()
        } else {
            active.iter().map(|&a| attribute_syllable(a)).collect::<Vec<_>>().join("-")
        };
        let definition = match active.as_slice() {
            [] => "A finding with no distinctive features.".to_string(),
            [one] => format!("A finding with {} features.", attribute_descriptor(*one)),
            [init @ .., last] => format!(
                "A finding with {} and {} features.",
                init.iter().map(|&a| attribute_descriptor(a)).collect::<Vec<_>>().join(", "),
                attribute_descriptor(*last)
            ),
        };
        Self {
            id: id.into(),
            name,
            definition,
            attributes: code,
        }
    }

    pub fn active_attributes(&self) -> Vec<usize> {
        active_bits(&self.attributes)
    }
}

fn active_bits(code: &[bool]) -> Vec<usize> {
    code.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// `a ⊆ b` over attribute codes.
pub fn code_subset(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).all(|(&x, &y)| !x || y)
}

fn code_union(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(&x, &y)| x || y).collect()
}

/// Ordered concept list; the knowledge source for contrastive training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptCatalog {
    pub concepts: Vec<Concept>,
    pub seed: u64,
}

impl ConceptCatalog {
    pub fn new(concepts: Vec<Concept>, seed: u64) -> Result<Self> {
        let attr_len = concepts.first().map_or(0, |c| c.attributes.len());
        let mut ids = std::collections::HashSet::new();
        for c in &concepts {
            if c.name.trim().is_empty() || c.definition.trim().is_empty() {
                return Err(Error::Parameter(format!("concept `{}` has empty text", c.id)));
            }
            if c.attributes.len() != attr_len {
                return Err(Error::Parameter("attribute codes differ in length".into()));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Parameter(format!("duplicate concept id `{}`", c.id)));
            }
        }
        Ok(Self { concepts, seed })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn attribute_len(&self) -> usize {
        self.concepts.first().map_or(0, |c| c.attributes.len())
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// One JSON object per line with fields `id`, `name`, `definition`,
    /// `attributes` in that order; attributes as a `0`/`1` string.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for c in &self.concepts {
            let line = serde_json::to_string(c).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("<catalog>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, seed: u64) -> Result<Self> {
        let mut concepts = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<catalog>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let c: Concept = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("catalog line {}: {e}", i + 1)))?;
            concepts.push(c);
        }
        Self::new(concepts, seed)
    }
}

fn sample_code(attribute_len: usize, max_active: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = rng.random_range(1..=max_active.min(attribute_len));
    let mut idx: Vec<usize> = (0..attribute_len).collect();
    idx.shuffle(rng);
    let mut code = vec![false; attribute_len];
    for &a in &idx[..k] {
        code[a] = true;
    }
    code
}

fn binomial_prefix(n: usize, k_max: usize) -> u128 {
    let mut total: u128 = 0;
    let mut c: u128 = 1;
    for k in 1..=k_max.min(n) {
        c = c * (n - k + 1) as u128 / k as u128;
        total += c;
    }
    total
}

/// Catalog of `num_concepts` distinct, nonzero random attribute codes with
/// one to three active attributes each (more when the small-code space is
/// exhausted).
pub fn generate_catalog(num_concepts: usize, attribute_len: usize, seed: u64) -> Result<ConceptCatalog> {
    if num_concepts < 2 {
        return Err(Error::Parameter("num_concepts must be at least 2".into()));
    }
    if attribute_len < 2 {
        return Err(Error::Parameter("attribute_len must be at least 2".into()));
    }
    let space = if attribute_len >= 127 {
        u128::MAX
    } else {
        (1u128 << attribute_len) - 1
    };
    if num_concepts as u128 > space {
        return Err(Error::Parameter(format!(
            "{num_concepts} distinct nonzero codes do not fit in {attribute_len} bits"
        )));
    }
    let max_active = if binomial_prefix(attribute_len, 3) >= num_concepts as u128 {
        3
    } else {
        attribute_len
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut concepts = Vec::with_capacity(num_concepts);
    while concepts.len() < num_concepts {
        let code = sample_code(attribute_len, max_active, &mut rng);
        if seen.insert(code.clone()) {
            concepts.push(Concept::from_code(format!("C{:04}", concepts.len()), code));
        }
    }
    ConceptCatalog::new(concepts, seed)
}

/// Class catalog for zero-shot experiments: `num_seen` random codes that
/// jointly cover every attribute, followed by `num_unseen` codes that are
/// unions of two seen codes. No class code contains an unseen code other
/// than that unseen class itself, so unseen positives are exactly the
/// images rendered for it.
pub fn compositional_catalog(
    num_seen: usize,
    num_unseen: usize,
    attribute_len: usize,
    seed: u64,
) -> Result<ConceptCatalog> {
    if num_seen < 2 || attribute_len < 2 {
        return Err(Error::Parameter("need at least 2 seen classes and 2 attributes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..1000 {
        let mut codes: Vec<Vec<bool>> = Vec::new();
        let mut guard = 0;
        while codes.len() < num_seen && guard < 10_000 {
            guard += 1;
            let code = sample_code(attribute_len, 2, &mut rng);
            if !codes.contains(&code) {
                codes.push(code);
            }
        }
        let covered = (0..attribute_len).all(|a| codes.iter().any(|c| c[a]));
        if codes.len() < num_seen || !covered {
            continue;
        }
        let mut pairs: Vec<(usize, usize)> = (0..num_seen)
            .flat_map(|i| (i + 1..num_seen).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(&mut rng);
        let mut unseen: Vec<Vec<bool>> = Vec::new();
        for (i, j) in pairs {
            if unseen.len() == num_unseen {
                break;
            }
            if codes[i].iter().zip(&codes[j]).any(|(&a, &b)| a && b) {
                continue;
            }
            let u = code_union(&codes[i], &codes[j]);
            let clash = codes.iter().chain(&unseen).any(|c| code_subset(&u, c))
                || unseen.iter().any(|c| code_subset(c, &u));
            if !clash {
                unseen.push(u);
            }
        }
        if unseen.len() < num_unseen {
            continue;
        }
        let concepts = codes
            .into_iter()
            .chain(unseen)
            .enumerate()
            .map(|(i, code)| Concept::from_code(format!("C{i:04}"), code))
            .collect();
        return ConceptCatalog::new(concepts, seed);
    }
    Err(Error::Parameter(format!(
        "could not build {num_seen} seen + {num_unseen} unseen compositional classes over {attribute_len} attributes"
    )))
}

/// Appends up to `extra` knowledge-only concepts over the same attributes,
/// with codes distinct from every existing concept. They get ids after the
/// existing ones and are never rendered when `num_classes` stops at the
/// original length. Fewer are added when the code space runs out.
pub fn extend_catalog(catalog: &ConceptCatalog, extra: usize, seed: u64) -> Result<ConceptCatalog> {
    let attr_len = catalog.attribute_len();
    let mut concepts = catalog.concepts.clone();
    let mut codes: std::collections::HashSet<Vec<bool>> = concepts.iter().map(|c| c.attributes.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = concepts.len() + extra;
    let max_active = attr_len.min(3);
    // bounded retries; duplicates get common once most short codes are taken
    for _ in 0..extra.saturating_mul(50) {
        if concepts.len() == target {
            break;
        }
        let code = sample_code(attr_len, max_active, &mut rng);
        if codes.insert(code.clone()) {
            concepts.push(Concept::from_code(format!("K{:04}", concepts.len()), code));
        }
    }
    ConceptCatalog::new(concepts, catalog.seed)
}

/// Rendering parameters for the synthetic image world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 16,
            samples_per_class: 200,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIDE {
            return Err(Error::Parameter(format!(
                "image_size must be at least {MIN_IMAGE_SIDE}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Parameter("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Pixel bounds `(y0, y1, x0, x1)` of the grid cell owned by an attribute.
fn cell_bounds(attr: usize, attribute_len: usize, size: usize) -> (usize, usize, usize, usize) {
    let cols = (attribute_len as f64).sqrt().ceil() as usize;
    let rows = attribute_len.div_ceil(cols);
    let (r, c) = (attr / cols, attr % cols);
    (r * size / rows, (r + 1) * size / rows, c * size / cols, (c + 1) * size / cols)
}

/// Intensity pattern in `[0, 1]` of one attribute primitive.
pub fn primitive(attr: usize, attribute_len: usize, size: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    let (y0, y1, x0, x1) = cell_bounds(attr, attribute_len, size);
    // one-pixel margin on every side of the cell
    let (y0, y1, x0, x1) = (y0 + 1, y1.saturating_sub(1), x0 + 1, x1.saturating_sub(1));
    if y1 <= y0 || x1 <= x0 {
        return img;
    }
    let (cy, cx) = ((y0 + y1 - 1) as f64 / 2.0, (x0 + x1 - 1) as f64 / 2.0);
    let radius = ((y1 - y0).min(x1 - x0) as f64) / 2.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let on = match attr % 4 {
                0 => (y - y0) % 2 == 0,
                1 => (x - x0) % 2 == 0,
                2 => {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    dy * dy + dx * dx <= radius * radius
                }
                _ => y - y0 < 2 || x - x0 < 2,
            };
            if on {
                img[y * size + x] = 1.0;
            }
        }
    }
    img
}

/// Pixel support of one attribute primitive.
pub fn primitive_support(attr: usize, attribute_len: usize, size: usize) -> Vec<bool> {
    primitive(attr, attribute_len, size).iter().map(|&p| p > 0.0).collect()
}

/// Token-grid cells whose pixel block meets the support of any active
/// primitive of `code`. Cell `(r, c)` covers rows `r * size / gh ..
/// (r + 1) * size / gh` and likewise for columns.
pub fn grid_support(code: &[bool], size: usize, grid: (usize, usize)) -> Vec<bool> {
    let (gh, gw) = grid;
    let mut pixels = vec![false; size * size];
    for a in active_bits(code) {
        for (p, q) in pixels.iter_mut().zip(primitive_support(a, code.len(), size)) {
            *p |= q;
        }
    }
    let mut cells = vec![false; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            cells[r * gw + c] = (r * size / gh..(r + 1) * size / gh)
                .any(|y| (c * size / gw..(c + 1) * size / gw).any(|x| pixels[y * size + x]));
        }
    }
    cells
}

/// Noise-free image with unit amplitude for the given attribute code.
pub fn render_code(code: &[bool], size: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    for a in active_bits(code) {
        for (p, q) in img.iter_mut().zip(primitive(a, code.len(), size)) {
            *p = p.max(q);
        }
    }
    img
}

/// Labels implied by an image's active attributes: class `k` is present
/// when its code is nonempty and contained in `active`, and always for the
/// class the image was rendered for.
pub fn implied_labels(catalog: &ConceptCatalog, num_classes: usize, primary: usize, active: &[bool]) -> Vec<i8> {
    (0..num_classes)
        .map(|k| {
            let code = &catalog.concepts[k].attributes;
            let present = k == primary || (code.iter().any(|&b| b) && code_subset(code, active));
            i8::from(present)
        })
        .collect()
}

pub const AMPLITUDE_RANGE: (f32, f32) = (0.6, 1.0);

/// Renders `samples_per_class` images for each of the first
/// `num_classes` catalog concepts. Each active primitive gets an amplitude
/// drawn from [`AMPLITUDE_RANGE`], then Gaussian noise is added and pixels
/// are clipped to `[0, 1]`. Labels are complete.
pub fn render_dataset(catalog: &ConceptCatalog, spec: &SyntheticWorldSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    if spec.num_classes > catalog.len() {
        return Err(Error::Parameter(format!(
            "{} classes requested from a catalog of {}",
            spec.num_classes,
            catalog.len()
        )));
    }
    let size = spec.image_size;
    let attr_len = catalog.attribute_len();
    let prims: Vec<Vec<f32>> = (0..attr_len).map(|a| primitive(a, attr_len, size)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let code = &catalog.concepts[class].attributes;
        let labels = LabelRecord::new(implied_labels(catalog, spec.num_classes, class, code))?;
        for s in 0..spec.samples_per_class {
            let mut img = vec![0.0f32; size * size];
            for a in active_bits(code) {
                let amp = rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
                for (p, &q) in img.iter_mut().zip(&prims[a]) {
                    *p = p.max(amp * q);
                }
            }
            if spec.noise_sigma > 0.0 {
                for p in img.iter_mut() {
                    *p = (*p + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            samples.push(LabeledSample {
                image: ImageSample::new(format!("s{class:03}-{s:04}"), size, size, img)?,
                labels: labels.clone(),
            });
        }
    }
    Ok(LabeledDataset {
        class_names: catalog.concepts[..spec.num_classes].iter().map(|c| c.name.clone()).collect(),
        samples,
    })
}

/// Replaces labels of every class outside `visible` with `-1`.
pub fn hide_labels(dataset: &LabeledDataset, visible: &[String]) -> Result<LabeledDataset> {
    let mut keep = vec![false; dataset.class_names.len()];
    for name in visible {
        let i = dataset
            .class_index(name)
            .ok_or_else(|| Error::Vocabulary(name.clone()))?;
        keep[i] = true;
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        for (k, &visible) in keep.iter().enumerate() {
            if !visible {
                s.labels.set(k, crate::data::MISSING)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(noise: f64) -> (ConceptCatalog, SyntheticWorldSpec) {
        let catalog = generate_catalog(6, 12, 3).unwrap();
        let spec = SyntheticWorldSpec {
            image_size: 32,
            num_classes: 6,
            samples_per_class: 5,
            noise_sigma: noise,
            seed: 11,
        };
        (catalog, spec)
    }

    #[test]
    fn small_catalog_is_valid_and_deterministic() {
        let a = generate_catalog(2, 2, 0).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a.concepts[0].id, a.concepts[1].id);
        assert!(a.concepts.iter().all(|c| c.attributes.len() == 2));
        assert_eq!(a, generate_catalog(2, 2, 0).unwrap());
    }

    #[test]
    fn catalog_parameter_errors() {
        assert!(matches!(generate_catalog(1, 4, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_catalog(4, 1, 0), Err(Error::Parameter(_))));
        assert!(matches!(generate_catalog(4, 2, 0), Err(Error::Parameter(_))));
        assert!(generate_catalog(3, 2, 0).is_ok());
    }

    #[test]
    fn sixteen_concepts_share_attributes() {
        let cat = generate_catalog(16, 12, 7).unwrap();
        assert_eq!(cat.len(), 16);
        let mut sharing = 0;
        for i in 0..16 {
            for j in i + 1..16 {
                let (a, b) = (&cat.concepts[i].attributes, &cat.concepts[j].attributes);
                if a.iter().zip(b).any(|(&x, &y)| x && y) {
                    sharing += 1;
                }
            }
        }
        assert!(sharing >= 1);
    }

    #[test]
    fn definitions_mention_every_active_attribute() {
        let cat = generate_catalog(10, 12, 5).unwrap();
        for c in &cat.concepts {
            for a in c.active_attributes() {
                assert!(c.definition.contains(&attribute_descriptor(a)));
                assert!(c.name.contains(&attribute_syllable(a)));
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_field_order() {
        let cat = generate_catalog(4, 6, 1).unwrap();
        let mut buf = Vec::new();
        cat.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        let pos = |k: &str| first.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("id") < pos("name") && pos("name") < pos("definition") && pos("definition") < pos("attributes"));
        assert!(!text.contains('\t'));
        let back = ConceptCatalog::read_jsonl(&buf[..], 1).unwrap();
        assert_eq!(back, cat);
    }

    #[test]
    fn zero_code_renders_blank_image() {
        let c = Concept::from_code("Z", vec![false; 12]);
        let cat = ConceptCatalog::new(vec![c], 0).unwrap();
        let spec = SyntheticWorldSpec {
            num_classes: 1,
            samples_per_class: 2,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = render_dataset(&cat, &spec).unwrap();
        assert!(ds.samples.iter().all(|s| s.image.pixels.iter().all(|&p| p == 0.0)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let (cat, spec) = world(0.2);
        assert_eq!(render_dataset(&cat, &spec).unwrap(), render_dataset(&cat, &spec).unwrap());
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let (cat, mut spec) = world(0.0);
        spec.num_classes = 7;
        assert!(matches!(render_dataset(&cat, &spec), Err(Error::Parameter(_))));
        spec.num_classes = 2;
        spec.image_size = 4;
        assert!(render_dataset(&cat, &spec).is_err());
    }

    fn class_mean_support(ds: &LabeledDataset, class: usize, per_class: usize) -> Vec<bool> {
        let imgs = &ds.samples[class * per_class..(class + 1) * per_class];
        let n = imgs[0].image.pixels.len();
        (0..n)
            .map(|i| imgs.iter().map(|s| s.image.pixels[i]).sum::<f32>() > 0.0)
            .collect()
    }

    #[test]
    fn class_mean_support_is_union_of_primitives() {
        let (cat, spec) = world(0.0);
        let ds = render_dataset(&cat, &spec).unwrap();
        for class in 0..spec.num_classes {
            let support = class_mean_support(&ds, class, spec.samples_per_class);
            let mut expected = vec![false; support.len()];
            for a in cat.concepts[class].active_attributes() {
                for (e, s) in expected.iter_mut().zip(primitive_support(a, 12, 32)) {
                    *e |= s;
                }
            }
            assert_eq!(support, expected, "class {class}");
        }
    }

    #[test]
    fn disjoint_codes_have_disjoint_supports() {
        let mut a = vec![false; 12];
        a[0] = true;
        a[5] = true;
        let mut b = vec![false; 12];
        b[1] = true;
        b[6] = true;
        b[11] = true;
        let cat = ConceptCatalog::new(vec![Concept::from_code("A", a), Concept::from_code("B", b)], 0).unwrap();
        let spec = SyntheticWorldSpec {
            num_classes: 2,
            samples_per_class: 3,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = render_dataset(&cat, &spec).unwrap();
        let sa = class_mean_support(&ds, 0, 3);
        let sb = class_mean_support(&ds, 1, 3);
        assert!(sa.iter().any(|&x| x) && sb.iter().any(|&x| x));
        assert!(sa.iter().zip(&sb).all(|(&x, &y)| !(x && y)));
    }

    #[test]
    fn hide_labels_cases() {
        let labels = LabelRecord::new(vec![1, 0, 1]).unwrap();
        let ds = LabeledDataset {
            class_names: vec!["c1".into(), "c2".into(), "c3".into()],
            samples: vec![LabeledSample {
                image: ImageSample::new("x", 8, 8, vec![0.0; 64]).unwrap(),
                labels,
            }],
        };
        let all = ds.class_names.clone();
        assert_eq!(hide_labels(&ds, &all).unwrap(), ds);
        let none = hide_labels(&ds, &[]).unwrap();
        assert_eq!(none.samples[0].labels.values(), &[-1, -1, -1]);
        let one = hide_labels(&ds, &["c1".to_string()]).unwrap();
        assert_eq!(one.samples[0].labels.values(), &[1, -1, -1]);
        assert_eq!(hide_labels(&one, &["c1".to_string()]).unwrap(), one);
        assert!(matches!(hide_labels(&ds, &["c9".to_string()]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn grid_support_covers_the_primitive() {
        let code = vec![true, false, false, false];
        let cells = grid_support(&code, 16, (4, 4));
        // attribute 0 lives in the top-left quadrant of a 2x2 layout
        let on: Vec<usize> = (0..16).filter(|&i| cells[i]).collect();
        assert!(!on.is_empty());
        assert!(on.iter().all(|&i| i / 4 < 2 && i % 4 < 2), "{on:?}");
        assert!(grid_support(&[false; 4], 16, (4, 4)).iter().all(|&b| !b));
    }

    #[test]
    fn extended_catalog_keeps_the_prefix() {
        let base = compositional_catalog(6, 2, 8, 4).unwrap();
        let ext = extend_catalog(&base, 40, 9).unwrap();
        assert_eq!(ext.concepts[..base.len()], base.concepts[..]);
        assert_eq!(ext.len(), base.len() + 40);
        let codes: std::collections::HashSet<_> = ext.concepts.iter().map(|c| &c.attributes).collect();
        assert_eq!(codes.len(), ext.len());
        assert_eq!(ext, extend_catalog(&base, 40, 9).unwrap());
        // 2 attributes leave 3 nonzero codes, so only the missing ones are added
        let tiny = generate_catalog(2, 2, 0).unwrap();
        assert_eq!(extend_catalog(&tiny, 10, 0).unwrap().len(), 3);
    }

    #[test]
    fn compositional_unseen_codes_are_unions() {
        let cat = compositional_catalog(12, 4, 12, 0).unwrap();
        assert_eq!(cat.len(), 16);
        let seen = &cat.concepts[..12];
        for u in &cat.concepts[12..] {
            let found = (0..12).any(|i| {
                (i + 1..12).any(|j| code_union(&seen[i].attributes, &seen[j].attributes) == u.attributes)
            });
            assert!(found, "{} is not a union of two seen codes", u.name);
            for other in &cat.concepts {
                if other.id != u.id {
                    assert!(!code_subset(&u.attributes, &other.attributes));
                }
            }
        }
        for a in 0..12 {
            assert!(seen.iter().any(|c| c.attributes[a]));
        }
    }
}
