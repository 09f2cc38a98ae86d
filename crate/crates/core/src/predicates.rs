//! Built-in photo predicates and the name-keyed registry that binds a
//! [`PredicateSpec`] to an evaluator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::photo::Photo;
use crate::query::{Param, PredicateSpec, QuerySpec};

/// Smallest unit of simulated cpu time, in milliseconds.
pub const TICK_MS: f64 = 0.001;

pub mod names {
    pub const ALL_ACCEPT: &str = "All_Accept";
    pub const RGB_THRESHOLD: &str = "RGB threshold";
    pub const RGB_HISTOGRAM: &str = "RGB histogram";
    pub const TEXTURE: &str = "Texture";
    pub const SYNTHETIC: &str = "Synthetic";
    pub const FACE_FRONT: &str = "Face (front)";
    pub const BODY: &str = "Body";
}

#[derive(Debug, Error, PartialEq)]
pub enum PredicateError {
    #[error("unknown predicate {0:?}")]
    Unknown(String),
    #[error("bad parameters for {predicate:?}: {message}")]
    Parameter { predicate: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredicateVerdict {
    pub accepted: bool,
    /// Normalized score in [0, 1], monotone in the raw score.
    pub score: f64,
    /// Simulated device cpu time in milliseconds.
    pub cpu_ms: f64,
}

/// Reference statistics for texture matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexturePatch {
    pub mean: f64,
    pub std_dev: f64,
    pub gradient: f64,
}

impl TexturePatch {
    /// Bright, smooth, slightly mottled: an overcast sky.
    pub const CLOUDY_SKY: TexturePatch = TexturePatch { mean: 150.0, std_dev: 10.0, gradient: 3.0 };

    pub fn new(mean: f64, std_dev: f64, gradient: f64) -> Result<Self, String> {
        if !(std_dev >= 0.0 && gradient >= 0.0 && mean.is_finite()) {
            return Err(format!("texture patch needs std_dev >= 0 and gradient >= 0, got ({mean}, {std_dev}, {gradient})"));
        }
        Ok(TexturePatch { mean, std_dev, gradient })
    }

    /// Similarity in (0, 1]; `exp(-d)` with d the normalized distance.
    pub fn similarity(&self, mean: f64, std_dev: f64, gradient: f64) -> f64 {
        let dm = (mean - self.mean) / 255.0;
        let ds = (std_dev - self.std_dev) / 64.0;
        let dg = (gradient - self.gradient) / 32.0;
        (-(dm * dm + ds * ds + dg * dg).sqrt()).exp()
    }
}

/// Parameters of the deterministic hash-driven predicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub selectivity: f64,
    pub cost_ms: f64,
    pub salt: u64,
}

impl SyntheticParams {
    pub const FACE: SyntheticParams = SyntheticParams { selectivity: 0.25, cost_ms: 30.0, salt: 0xFACE };
    pub const BODY: SyntheticParams = SyntheticParams { selectivity: 0.3, cost_ms: 25.0, salt: 0xB0D1 };

    /// Position of the photo in [0, 1).
    pub fn unit(&self, photo_id: &str) -> f64 {
        unit_hash(photo_id, self.salt)
    }

    /// Upper bound on `unit` for acceptance at raw-score threshold `t`.
    /// The raw score lives in [0, 2]; `t = 1` accepts exactly a `selectivity`
    /// fraction of ids.
    pub fn cutoff(&self, threshold: f64) -> f64 {
        let s = self.selectivity;
        if threshold >= 1.0 {
            s * (2.0 - threshold)
        } else {
            1.0 - threshold * (1.0 - s)
        }
    }

    pub fn evaluate(&self, photo_id: &str, threshold: f64) -> PredicateVerdict {
        let s = self.selectivity;
        let u = self.unit(photo_id);
        // accepted ids fill [0.5, 1], rejected ones [0, 0.5)
        let score = if u < s { 0.5 + 0.5 * (s - u) / s } else { 0.5 * (1.0 - u) / (1.0 - s) };
        PredicateVerdict { accepted: u < self.cutoff(threshold), score, cpu_ms: self.cost_ms }
    }
}

/// FNV-1a over the id bytes, salted and finished with the splitmix64 mixer.
/// Stable across runs, platforms and builds.
pub fn hash64(id: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(salt))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn unit_hash(id: &str, salt: u64) -> f64 {
    // top 53 bits, so the result is exact and strictly below 1
    (hash64(id, salt) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Template {
    AllAccept,
    RgbThreshold,
    RgbHistogram,
    Texture,
    Synthetic,
    Fixed(&'static str),
}

/// Registry entry.
#[derive(Debug, Clone)]
pub struct PredicateDef {
    pub name: String,
    pub min_params: usize,
    pub max_params: usize,
    /// Inclusive range of the raw score a threshold is compared against.
    pub score_range: (f64, f64),
    /// Nominal cpu cost in simulated ms per megapixel. Zero for predicates
    /// whose cost does not depend on the raster.
    pub nominal_ms_per_mp: f64,
    pub default_threshold: f64,
    template: Template,
    fixed: Option<SyntheticParams>,
}

#[derive(Debug, Clone)]
pub struct PredicateRegistry {
    defs: BTreeMap<String, PredicateDef>,
}

impl Default for PredicateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PredicateRegistry {
    pub fn builtin() -> Self {
        let mut defs = BTreeMap::new();
        let mut add = |name: &'static str, params: (usize, usize), range: (f64, f64), ms_per_mp: f64, default_threshold: f64, template: Template, fixed: Option<SyntheticParams>| {
            defs.insert(
                name.to_string(),
                PredicateDef {
                    name: name.to_string(),
                    min_params: params.0,
                    max_params: params.1,
                    score_range: range,
                    nominal_ms_per_mp: ms_per_mp,
                    default_threshold,
                    template,
                    fixed,
                },
            );
        };
        add(names::ALL_ACCEPT, (0, 0), (0.0, 1.0), 0.0, 0.0, Template::AllAccept, None);
        add(names::RGB_THRESHOLD, (0, 1), (0.0, 255.0), 40.0, 128.0, Template::RgbThreshold, None);
        add(names::RGB_HISTOGRAM, (48, 48), (0.0, 1.0), 60.0, 0.5, Template::RgbHistogram, None);
        add(names::TEXTURE, (0, 3), (0.0, 1.0), 250.0, 0.5, Template::Texture, None);
        add(names::SYNTHETIC, (1, 3), (0.0, 2.0), 0.0, 1.0, Template::Synthetic, None);
        // Haar-cascade parameters are accepted and ignored
        add(names::FACE_FRONT, (0, 6), (0.0, 2.0), 0.0, 1.0, Template::Fixed(names::FACE_FRONT), Some(SyntheticParams::FACE));
        add(names::BODY, (0, 6), (0.0, 2.0), 0.0, 1.0, Template::Fixed(names::BODY), Some(SyntheticParams::BODY));
        PredicateRegistry { defs }
    }

    pub fn get(&self, name: &str) -> Option<&PredicateDef> {
        self.defs.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.defs.keys().map(String::as_str)
    }

    pub fn bind(&self, spec: &PredicateSpec) -> Result<BoundPredicate, PredicateError> {
        let def = self.get(&spec.name).ok_or_else(|| PredicateError::Unknown(spec.name.clone()))?;
        let bad = |message: String| PredicateError::Parameter { predicate: spec.name.clone(), message };
        let n = spec.parameters.len();
        if n < def.min_params || n > def.max_params {
            return Err(bad(format!("expected {}..={} parameters, got {n}", def.min_params, def.max_params)));
        }
        let numbers = || -> Result<Vec<f64>, PredicateError> {
            spec.parameters
                .iter()
                .map(|p| p.as_f64().ok_or_else(|| bad(format!("parameter {p} is not numeric"))))
                .collect()
        };
        let kind = match def.template {
            Template::AllAccept => Evaluator::AllAccept,
            Template::RgbThreshold => {
                let channel = match spec.parameters.first() {
                    None => 2,
                    Some(Param::Text(t)) => match t.trim() {
                        "R" | "r" => 0,
                        "G" | "g" => 1,
                        "B" | "b" => 2,
                        other => return Err(bad(format!("unknown channel {other:?}"))),
                    },
                    Some(Param::Number(v)) if [0.0, 1.0, 2.0].contains(v) => *v as usize,
                    Some(Param::Number(v)) => return Err(bad(format!("channel index {v} not in 0..=2"))),
                };
                Evaluator::RgbThreshold { channel }
            }
            Template::RgbHistogram => {
                let values = numbers()?;
                let mut reference = [[0.0; 16]; 3];
                for (c, bins) in reference.iter_mut().enumerate() {
                    bins.copy_from_slice(&values[16 * c..16 * (c + 1)]);
                    if bins.iter().any(|&b| b < 0.0) {
                        return Err(bad(format!("channel {c} has a negative bin")));
                    }
                    let sum: f64 = bins.iter().sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(bad(format!("channel {c} sums to {sum}, expected 1")));
                    }
                }
                Evaluator::RgbHistogram { reference: Box::new(reference) }
            }
            Template::Texture => {
                let patch = match numbers()?.as_slice() {
                    [] => TexturePatch::CLOUDY_SKY,
                    [m, s, g] => TexturePatch::new(*m, *s, *g).map_err(bad)?,
                    _ => return Err(bad("texture takes 0 or 3 parameters".into())),
                };
                Evaluator::Texture { patch }
            }
            Template::Synthetic => {
                let values = numbers()?;
                let selectivity = values[0];
                if !(0.0..=1.0).contains(&selectivity) {
                    return Err(bad(format!("selectivity {selectivity} not in [0, 1]")));
                }
                let cost_ms = values.get(1).copied().unwrap_or(1.0);
                if !(cost_ms >= 0.0 && cost_ms.is_finite()) {
                    return Err(bad(format!("cost {cost_ms} must be a finite non-negative number")));
                }
                let salt = values.get(2).copied().unwrap_or(0.0);
                if salt < 0.0 || salt.fract() != 0.0 || salt >= 2f64.powi(53) {
                    return Err(bad(format!("salt {salt} must be a non-negative integer")));
                }
                Evaluator::Synthetic(SyntheticParams { selectivity, cost_ms, salt: salt as u64 })
            }
            Template::Fixed(_) => Evaluator::Synthetic(def.fixed.expect("fixed template carries parameters")),
        };
        Ok(BoundPredicate {
            name: spec.name.clone(),
            threshold: spec.threshold.unwrap_or(def.default_threshold),
            nominal_ms_per_mp: def.nominal_ms_per_mp,
            kind,
        })
    }

    /// Binds every leaf of `query` in document order.
    pub fn bind_all(&self, query: &QuerySpec) -> Result<Vec<BoundPredicate>, PredicateError> {
        query.leaves().into_iter().map(|p| self.bind(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Evaluator {
    AllAccept,
    RgbThreshold { channel: usize },
    RgbHistogram { reference: Box<[[f64; 16]; 3]> },
    Texture { patch: TexturePatch },
    Synthetic(SyntheticParams),
}

/// A predicate resolved against the registry with its parameters checked.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundPredicate {
    pub name: String,
    pub threshold: f64,
    nominal_ms_per_mp: f64,
    kind: Evaluator,
}

impl BoundPredicate {
    pub fn evaluate(&self, photo: &Photo) -> PredicateVerdict {
        let t = self.threshold;
        match &self.kind {
            Evaluator::AllAccept => PredicateVerdict { accepted: true, score: 1.0, cpu_ms: TICK_MS },
            Evaluator::RgbThreshold { channel } => {
                let mean = channel_mean(photo, *channel);
                PredicateVerdict { accepted: mean >= t, score: mean / 255.0, cpu_ms: self.raster_cost(photo) }
            }
            Evaluator::RgbHistogram { reference } => {
                let score = histogram_intersection(&rgb_histogram(photo), reference);
                PredicateVerdict { accepted: score >= t, score, cpu_ms: self.raster_cost(photo) }
            }
            Evaluator::Texture { patch } => {
                let score = texture_score(photo, patch);
                PredicateVerdict { accepted: score >= t, score, cpu_ms: self.raster_cost(photo) }
            }
            Evaluator::Synthetic(params) => params.evaluate(&photo.id, t),
        }
    }

    /// Cost estimate before any observation, for a photo of `megapixels`.
    pub fn nominal_cost_ms(&self, megapixels: f64) -> f64 {
        match &self.kind {
            Evaluator::AllAccept => TICK_MS,
            Evaluator::Synthetic(p) => p.cost_ms,
            _ => ticks(self.nominal_ms_per_mp * megapixels),
        }
    }

    pub fn synthetic_params(&self) -> Option<SyntheticParams> {
        match &self.kind {
            Evaluator::Synthetic(p) => Some(*p),
            _ => None,
        }
    }

    fn raster_cost(&self, photo: &Photo) -> f64 {
        ticks(self.nominal_ms_per_mp * photo.megapixels())
    }
}

/// Rounds up to a whole number of ticks, never below one.
fn ticks(ms: f64) -> f64 {
    ((ms / TICK_MS).ceil().max(1.0)) * TICK_MS
}

pub fn channel_mean(photo: &Photo, channel: usize) -> f64 {
    let sum: u64 = photo.pixels().chunks_exact(3).map(|p| u64::from(p[channel])).sum();
    sum as f64 / photo.pixel_count() as f64
}

/// Normalized 16-bin histogram per channel; bin = value / 16.
pub fn rgb_histogram(photo: &Photo) -> [[f64; 16]; 3] {
    let mut counts = [[0u64; 16]; 3];
    for p in photo.pixels().chunks_exact(3) {
        for c in 0..3 {
            counts[c][usize::from(p[c] / 16)] += 1;
        }
    }
    let n = photo.pixel_count() as f64;
    counts.map(|bins| bins.map(|k| k as f64 / n))
}

/// Mean over channels of the sum of per-bin minima.
pub fn histogram_intersection(a: &[[f64; 16]; 3], b: &[[f64; 16]; 3]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| p.min(*q)).sum::<f64>())
        .sum();
    (total / 3.0).clamp(0.0, 1.0)
}

/// Per-block grayscale statistics on a 4x4 grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStats {
    pub mean: f64,
    pub std_dev: f64,
    pub gradient: f64,
}

/// Statistics of the non-empty blocks in row-major order. Gradients are
/// forward differences clamped at the right and bottom border.
pub fn block_stats(photo: &Photo) -> Vec<BlockStats> {
    let (w, h) = (photo.width() as usize, photo.height() as usize);
    let gray = photo.grayscale();
    let at = |x: usize, y: usize| f64::from(gray[y * w + x]);
    let mut out = Vec::with_capacity(16);
    for by in 0..4 {
        let (y0, y1) = (by * h / 4, (by + 1) * h / 4);
        for bx in 0..4 {
            let (x0, x1) = (bx * w / 4, (bx + 1) * w / 4);
            let n = (y1 - y0) * (x1 - x0);
            if n == 0 {
                continue;
            }
            let (mut sum, mut sum_sq, mut grad) = (0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = at(x, y);
                    sum += v;
                    sum_sq += v * v;
                    let gx = at((x + 1).min(w - 1), y) - v;
                    let gy = at(x, (y + 1).min(h - 1)) - v;
                    grad += (gx * gx + gy * gy).sqrt();
                }
            }
            let n = n as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            out.push(BlockStats { mean, std_dev: var.sqrt(), gradient: grad / n });
        }
    }
    out
}

pub fn texture_score(photo: &Photo, patch: &TexturePatch) -> f64 {
    block_stats(photo)
        .iter()
        .map(|b| patch.similarity(b.mean, b.std_dev, b.gradient))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photo::PhotoMeta;
    use proptest::prelude::*;

    fn reg() -> PredicateRegistry {
        PredicateRegistry::builtin()
    }

    fn bind(name: &str, params: Vec<Param>, threshold: Option<f64>) -> BoundPredicate {
        let mut spec = PredicateSpec::new(name);
        spec.parameters = params;
        spec.threshold = threshold;
        reg().bind(&spec).unwrap()
    }

    fn half_blue_half_black() -> Photo {
        let mut px = Vec::new();
        for i in 0..8 {
            px.extend_from_slice(if i < 4 { &[0, 0, 255] } else { &[0, 0, 0] });
        }
        Photo::new("hb", 4, 2, px, PhotoMeta::default()).unwrap()
    }

    #[test]
    fn rgb_threshold_examples() {
        let b128 = bind(names::RGB_THRESHOLD, vec!["B".into()], Some(128.0));
        let v = b128.evaluate(&Photo::uniform("b", 8, 8, [0, 0, 255]));
        assert!(v.accepted);
        assert_eq!(v.score, 1.0);
        let v = b128.evaluate(&Photo::uniform("r", 8, 8, [255, 0, 0]));
        assert!(!v.accepted);
        assert_eq!(v.score, 0.0);
        let v = b128.evaluate(&half_blue_half_black());
        assert!(!v.accepted);
        assert_eq!(v.score, 0.5);
        assert_eq!(channel_mean(&half_blue_half_black(), 2), 127.5);
    }

    #[test]
    fn rgb_threshold_channel_parsing() {
        let red = bind(names::RGB_THRESHOLD, vec![Param::Number(0.0)], Some(100.0));
        assert!(red.evaluate(&Photo::uniform("r", 2, 2, [255, 0, 0])).accepted);
        let mut spec = PredicateSpec::new(names::RGB_THRESHOLD).with_params(["Q"]);
        spec.threshold = Some(1.0);
        assert!(matches!(reg().bind(&spec), Err(PredicateError::Parameter { .. })));
    }

    fn flatten(h: &[[f64; 16]; 3]) -> Vec<Param> {
        h.iter().flatten().map(|&v| Param::Number(v)).collect()
    }

    #[test]
    fn histogram_self_match() {
        let p = Photo::new("m", 3, 1, vec![10, 200, 30, 90, 90, 250, 255, 0, 128], PhotoMeta::default()).unwrap();
        let pred = bind(names::RGB_HISTOGRAM, flatten(&rgb_histogram(&p)), Some(1.0));
        let v = pred.evaluate(&p);
        assert!((v.score - 1.0).abs() < 1e-12);
        assert!(v.accepted);
    }

    #[test]
    fn histogram_blue_vs_red() {
        // Blue (0,0,255) and red (255,0,0) are deltas: R bins 0 vs 15 (0),
        // G bins 0 vs 0 (1), B bins 15 vs 0 (0); mean over channels is 1/3.
        let red = Photo::uniform("r", 4, 4, [255, 0, 0]);
        let pred = bind(names::RGB_HISTOGRAM, flatten(&rgb_histogram(&red)), Some(0.0));
        let v = pred.evaluate(&Photo::uniform("b", 4, 4, [0, 0, 255]));
        assert!((v.score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_against_flat_reference() {
        let p = Photo::new("m", 2, 2, vec![0, 17, 34, 51, 68, 85, 102, 119, 136, 153, 170, 187], PhotoMeta::default()).unwrap();
        let flat = [[1.0 / 16.0; 16]; 3];
        let pred = bind(names::RGB_HISTOGRAM, flatten(&flat), Some(0.0));
        // brute force: per channel, each pixel in a distinct bin holds mass 1/4,
        // min(1/4, 1/16) = 1/16 per occupied bin
        let mut expect = 0.0;
        for c in 0..3 {
            let mut bins = std::collections::BTreeMap::<u8, f64>::new();
            for px in p.pixels().chunks(3) {
                *bins.entry(px[c] >> 4).or_default() += 0.25;
            }
            expect += bins.values().map(|m| m.min(1.0 / 16.0)).sum::<f64>();
        }
        expect /= 3.0;
        assert!((pred.evaluate(&p).score - expect).abs() < 1e-12);
    }

    #[test]
    fn histogram_requires_normalized_reference() {
        let mut bad = [[1.0 / 16.0; 16]; 3];
        bad[1][0] += 0.01;
        let mut spec = PredicateSpec::new(names::RGB_HISTOGRAM);
        spec.parameters = flatten(&bad);
        match reg().bind(&spec) {
            Err(PredicateError::Parameter { message, .. }) => assert!(message.contains("channel 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn texture_exact_patch_scores_one() {
        let p = Photo::uniform("c", 8, 8, [100, 100, 100]);
        let patch = [Param::Number(100.0), Param::Number(0.0), Param::Number(0.0)];
        let pred = bind(names::TEXTURE, patch.to_vec(), Some(0.99));
        let v = pred.evaluate(&p);
        assert_eq!(v.score, 1.0);
        assert!(v.accepted);
    }

    #[test]
    fn texture_constant_photo_against_rough_patch() {
        let p = Photo::uniform("c", 8, 8, [200, 200, 200]);
        let gray = f64::from(p.grayscale()[0]);
        let pred = bind(names::TEXTURE, vec![120.0.into(), 50.0.into(), 10.0.into()], Some(0.0));
        let d = (((gray - 120.0) / 255.0).powi(2) + (50.0f64 / 64.0).powi(2) + (10.0f64 / 32.0).powi(2)).sqrt();
        let v = pred.evaluate(&p);
        assert!((v.score - (-d).exp()).abs() < 1e-12);
        assert!(v.accepted);
    }

    #[test]
    fn texture_block_grid_on_small_raster() {
        // 2x2 raster: only 4 of the 16 blocks hold pixels
        let p = Photo::uniform("t", 2, 2, [50, 50, 50]);
        assert_eq!(block_stats(&p).len(), 4);
        let p = Photo::uniform("t", 9, 5, [50, 50, 50]);
        assert_eq!(block_stats(&p).len(), 16);
    }

    #[test]
    fn texture_gradient_matches_hand_computation() {
        // 4x1 raster: one pixel per block horizontally, all in the first
        // block row; gray values 0, 10, 30, 30
        let px = [0u8, 10, 30, 30].iter().flat_map(|&g| [g, g, g]).collect();
        let p = Photo::new("g", 4, 1, px, PhotoMeta::default()).unwrap();
        let stats = block_stats(&p);
        // h=1: block rows 0..=2 are empty, row 3 covers y=0
        let grads: Vec<f64> = stats.iter().map(|b| b.gradient).collect();
        assert_eq!(grads, [10.0, 20.0, 0.0, 0.0]);
    }

    #[test]
    fn all_accept_accepts_anything() {
        let pred = bind(names::ALL_ACCEPT, vec![], None);
        for p in [Photo::uniform("x", 1, 1, [0, 0, 0]), Photo::uniform("y", 64, 48, [9, 9, 9])] {
            let v = pred.evaluate(&p);
            assert!(v.accepted);
            assert_eq!(v.score, 1.0);
            assert_eq!(v.cpu_ms, TICK_MS);
        }
    }

    fn synthetic(s: f64, cost: f64, salt: u64) -> BoundPredicate {
        bind(names::SYNTHETIC, vec![s.into(), cost.into(), (salt as f64).into()], None)
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("photo_{i:05}")).collect()
    }

    fn accepts(pred: &BoundPredicate, ids: &[String]) -> Vec<bool> {
        ids.iter().map(|id| pred.evaluate(&Photo::uniform(id.as_str(), 1, 1, [0, 0, 0])).accepted).collect()
    }

    #[test]
    fn synthetic_extremes() {
        let ids = ids(500);
        assert!(accepts(&synthetic(1.0, 5.0, 1), &ids).iter().all(|&a| a));
        assert!(accepts(&synthetic(0.0, 5.0, 1), &ids).iter().all(|&a| !a));
    }

    #[test]
    fn synthetic_selectivity_over_ten_thousand_ids() {
        let ids = ids(10_000);
        let n = accepts(&synthetic(0.3, 5.0, 7), &ids).iter().filter(|&&a| a).count();
        let frac = n as f64 / 10_000.0;
        assert!((frac - 0.3).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn synthetic_cost_and_score_bands() {
        let pred = synthetic(0.4, 12.5, 3);
        for id in ids(300) {
            let v = pred.evaluate(&Photo::uniform(id.as_str(), 1, 1, [0, 0, 0]));
            assert_eq!(v.cpu_ms, 12.5);
            assert_eq!(v.accepted, v.score >= 0.5);
            assert!((0.0..=1.0).contains(&v.score));
        }
    }

    #[test]
    fn synthetic_threshold_cutoff_matches_raw_score() {
        // accepted iff raw = 2 * score exceeds the threshold
        let params = SyntheticParams { selectivity: 0.35, cost_ms: 1.0, salt: 11 };
        for t in [0.0, 0.3, 0.99, 1.0, 1.2, 1.7, 2.0] {
            for id in ids(400) {
                let v = params.evaluate(&id, t);
                let raw = 2.0 * v.score;
                if (raw - t).abs() > 1e-9 {
                    assert_eq!(v.accepted, raw > t, "id {id} t {t} raw {raw}");
                }
            }
        }
    }

    #[test]
    fn different_salts_are_independent() {
        let ids = ids(10_000);
        let a = accepts(&synthetic(0.4, 1.0, 101), &ids);
        let b = accepts(&synthetic(0.5, 1.0, 202), &ids);
        let s1 = a.iter().filter(|&&x| x).count() as f64 / ids.len() as f64;
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let s1_given_2 = both / b.iter().filter(|&&y| y).count() as f64;
        assert!((s1_given_2 - s1).abs() <= 0.03, "{s1_given_2} vs {s1}");
    }

    #[test]
    fn same_salt_gives_nested_sets() {
        let ids = ids(5_000);
        let wide = accepts(&synthetic(0.6, 1.0, 9), &ids);
        let narrow = accepts(&synthetic(0.2, 1.0, 9), &ids);
        assert!(wide.iter().zip(&narrow).all(|(w, n)| *w || !*n));
        let n1 = wide.iter().filter(|&&x| x).count() as f64;
        let n2 = narrow.iter().filter(|&&x| x).count() as f64;
        // brute force: s(p2 / p1) = |A2 ∩ A1| / |A1| = |A2| / |A1|
        assert!((n2 / n1 - 0.2 / 0.6).abs() < 0.03);
    }

    #[test]
    fn hash_is_stable() {
        // pinned so a change to the hash shows up as a test failure
        assert_eq!(hash64("", 0), splitmix64(0xcbf2_9ce4_8422_2325 ^ splitmix64(0)));
        assert_eq!(hash64("photo_00001", 5), hash64("photo_00001", 5));
        assert_ne!(hash64("photo_00001", 5), hash64("photo_00001", 6));
    }

    #[test]
    fn face_ignores_haar_parameters() {
        let spec = PredicateSpec::new(names::FACE_FRONT).with_params([1.2, 24.0, 24.0, 1.0, 1.0, 4.0]).with_threshold(1.0);
        let pred = reg().bind(&spec).unwrap();
        assert_eq!(pred.synthetic_params(), Some(SyntheticParams::FACE));
        assert_eq!(pred.nominal_cost_ms(3.0), 30.0);
    }

    #[test]
    fn raster_costs_scale_with_pixels() {
        let pred = bind(names::TEXTURE, vec![], None);
        let small = pred.evaluate(&Photo::uniform("a", 100, 100, [1, 2, 3])).cpu_ms;
        let big = pred.evaluate(&Photo::uniform("a", 200, 200, [1, 2, 3])).cpu_ms;
        assert!((big - 4.0 * small).abs() <= TICK_MS + 1e-12);
        assert!((small - 250.0 * 0.01).abs() <= TICK_MS);
    }

    #[test]
    fn synthetic_selectivity_within_three_sigma() {
        let n = 5000;
        for (i, s) in [0.05, 0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 0.95].into_iter().enumerate() {
            for salt in [i as u64, 1000 + i as u64] {
                let params = SyntheticParams { selectivity: s, cost_ms: 1.0, salt };
                let k = (0..n).filter(|j| params.evaluate(&format!("id{j}"), 1.0).accepted).count();
                let bound = 3.0 * (s * (1.0 - s) / n as f64).sqrt();
                assert!((k as f64 / n as f64 - s).abs() <= bound, "s={s} salt={salt} k={k}");
            }
        }
    }

    proptest! {
        #[test]
        fn predicates_are_pure(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            let px: Vec<u8> = (0..3 * w * h).map(|i| (splitmix64(seed ^ u64::from(i)) & 0xff) as u8).collect();
            let photo = Photo::new(format!("p{seed}"), w, h, px, PhotoMeta::default()).unwrap();
            let preds = [
                bind(names::RGB_THRESHOLD, vec![], Some(100.0)),
                bind(names::TEXTURE, vec![], Some(0.3)),
                bind(names::RGB_HISTOGRAM, flatten(&[[1.0 / 16.0; 16]; 3]), Some(0.2)),
                synthetic(0.5, 3.0, 1),
            ];
            for p in &preds {
                let a = p.evaluate(&photo);
                prop_assert_eq!(a, p.evaluate(&photo));
                prop_assert!((0.0..=1.0).contains(&a.score));
            }
        }

    }
}
