//! Explanation-quality measures: attribution localization, input perturbation
//! curves and map comparison.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attribute::{AttributionMap, Method};
use crate::dataset::{bbox_union_fraction, BBox};
use crate::error::{Error, Result};
use crate::ir::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationRecord {
    pub sample_id: String,
    /// `None` when the map has no positive attribution at all.
    pub mu: Option<f32>,
    pub bbox_area_fraction: f32,
    pub method: Method,
    pub canonized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationCurve {
    pub sample_id: String,
    pub scores: Vec<f32>,
    pub steps: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    /// Most relevant pixel first.
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    All,
    Below50,
    Below25,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::All, Bucket::Below50, Bucket::Below25];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::All => "all",
            Bucket::Below50 => "lt_0.5",
            Bucket::Below25 => "lt_0.25",
        }
    }

    pub fn contains(self, area_fraction: f32) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Below50 => area_fraction < 0.5,
            Bucket::Below25 => area_fraction < 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketMean {
    pub mean_mu: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationSummary {
    pub method: Method,
    pub canonized: bool,
    /// Buckets with no qualifying record are absent.
    pub buckets: BTreeMap<&'static str, BucketMean>,
    pub undefined: usize,
}

/// Channel-summed `[H, W]` values of a `[C, H, W]` (or `[1, C, H, W]`) map.
fn pixel_sums(values: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let s = values.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape("map", format!("expected [C, H, W], got {:?}", s))),
    };
    let mut out = vec![0f64; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&values.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v as f64;
        }
    }
    Ok((h, w, out))
}

/// Share of positive attribution that falls inside the union of `bboxes`.
pub fn localization_score(
    map: &AttributionMap,
    bboxes: &[BBox],
    sample_id: &str,
    canonized: bool,
) -> Result<LocalizationRecord> {
    if bboxes.is_empty() {
        return Err(Error::InvalidArgument("localization needs at least one box".into()));
    }
    let (h, w, pixels) = pixel_sums(&map.values)?;
    for b in bboxes {
        b.validate(w, h)?;
    }
    let (mut inside, mut total) = (0f64, 0f64);
    for (i, &v) in pixels.iter().enumerate() {
        if v > 0.0 {
            total += v;
            if bboxes.iter().any(|b| b.contains(i % w, i / w)) {
                inside += v;
            }
        }
    }
    Ok(LocalizationRecord {
        sample_id: sample_id.to_string(),
        mu: (total > 0.0).then(|| (inside / total) as f32),
        bbox_area_fraction: bbox_union_fraction(bboxes, h, w),
        method: map.method,
        canonized,
    })
}

/// Mean μ per (method, canonized) and area bucket; undefined records are counted, not averaged.
pub fn aggregate_localization(records: &[LocalizationRecord]) -> Vec<LocalizationSummary> {
    let mut groups: BTreeMap<(String, bool), (Method, Vec<&LocalizationRecord>)> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method.name().to_string(), r.canonized))
            .or_insert_with(|| (r.method, Vec::new()))
            .1
            .push(r);
    }
    groups
        .into_iter()
        .map(|((_, canonized), (method, rs))| {
            let mut buckets = BTreeMap::new();
            for bucket in Bucket::ALL {
                let mus: Vec<f64> = rs
                    .iter()
                    .filter(|r| bucket.contains(r.bbox_area_fraction))
                    .filter_map(|r| r.mu.map(f64::from))
                    .collect();
                if !mus.is_empty() {
                    buckets.insert(
                        bucket.as_str(),
                        BucketMean {
                            mean_mu: mus.iter().sum::<f64>() / mus.len() as f64,
                            count: mus.len(),
                        },
                    );
                }
            }
            LocalizationSummary {
                method,
                canonized,
                buckets,
                undefined: rs.iter().filter(|r| r.mu.is_none()).count(),
            }
        })
        .collect()
}

/// Per-sample stream seed, independent of evaluation order.
pub fn derive_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Pixel indices sorted by channel-summed attribution; ties by flat index.
pub fn pixel_ranking(values: &Tensor, order: Order) -> Result<Vec<usize>> {
    let (_, _, pixels) = pixel_sums(values)?;
    let mut idx: Vec<usize> = (0..pixels.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = match order {
            Order::Descending => pixels[b].total_cmp(&pixels[a]),
            Order::Ascending => pixels[a].total_cmp(&pixels[b]),
        };
        ord.then(a.cmp(&b))
    });
    Ok(idx)
}

pub fn perturbation_curve(
    g: &ModelGraph,
    map: &AttributionMap,
    x: &Tensor,
    target: usize,
    steps: usize,
    seed: u64,
    sample_id: &str,
) -> Result<PerturbationCurve> {
    perturbation_curve_ordered(g, map, x, target, steps, seed, sample_id, Order::Descending)
}

/// Replacement values for `pixels` successive pixels of `channels` channels.
pub fn replacement_draws(seed: u64, pixels: usize, channels: usize, range: (f32, f32)) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pixels * channels).map(|_| rng.gen_range(range.0..range.1)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn perturbation_curve_ordered(
    g: &ModelGraph,
    map: &AttributionMap,
    x: &Tensor,
    target: usize,
    steps: usize,
    seed: u64,
    sample_id: &str,
    order: Order,
) -> Result<PerturbationCurve> {
    let x = g.batched(x)?;
    let shape = x.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape("input", format!("expected [1, C, H, W], got {:?}", shape)));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if map.values.len() != x.len() {
        return Err(Error::shape("map", format!("{:?} does not match input {:?}", map.values.shape(), shape)));
    }
    if steps > h * w {
        return Err(Error::InvalidArgument(format!(
            "{} perturbation steps exceed {} pixels",
            steps,
            h * w
        )));
    }
    let ranking = pixel_ranking(&map.values, order)?;
    let draws = replacement_draws(seed, steps, c, g.input_range());

    let mut current = x.data().to_vec();
    let mut batch = Vec::with_capacity((steps + 1) * x.len());
    batch.extend_from_slice(&current);
    for (k, &p) in ranking.iter().take(steps).enumerate() {
        for ch in 0..c {
            current[ch * h * w + p] = draws[k * c + ch];
        }
        batch.extend_from_slice(&current);
    }
    let logits = g.forward(&Tensor::new(vec![steps + 1, c, h, w], batch)?)?;
    let classes = logits.shape()[1];
    if target >= classes {
        return Err(Error::InvalidArgument(format!("target {} out of range for {} classes", target, classes)));
    }
    let f0 = logits.data()[target];
    let scores = (0..=steps).map(|k| f0 - logits.data()[k * classes + target]).collect();
    Ok(PerturbationCurve {
        sample_id: sample_id.to_string(),
        scores,
        steps,
        rng_seed: seed,
    })
}

/// `plain - canon`, elementwise: negative where the canonized curve is higher.
pub fn curve_difference(canon: &PerturbationCurve, plain: &PerturbationCurve) -> Result<Vec<f32>> {
    if canon.scores.len() != plain.scores.len() {
        return Err(Error::InvalidArgument(format!(
            "curve lengths differ: {} vs {}",
            canon.scores.len(),
            plain.scores.len()
        )));
    }
    Ok(plain.scores.iter().zip(&canon.scores).map(|(p, c)| p - c).collect())
}

/// `1 - cos(a, b)` over the flattened maps.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "map",
            format!("cannot compare {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0) as f32)
}
