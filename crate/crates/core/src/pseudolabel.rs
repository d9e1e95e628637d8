//! Ensemble pseudo-labels for random image pairs of an unlabelled pool.
//!
//! Every image is cropped once, scored once by each ensemble member, and the
//! scores are joined onto sampled ordered pairs. A member's opinion on a pair
//! is the sigmoid of its score difference; the pseudo-label is the mean of
//! those probabilities over the ensemble.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_short_side_and_center_crop, DatasetManifest, Patch};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scorer::{score, ScorerParams};

/// `1 / (1 + exp(q_y - q_x))`, evaluated without overflow.
pub fn relative_prob(q_x: f64, q_y: f64) -> f64 {
    let d = q_x - q_y;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Arithmetic mean of the per-model probabilities.
pub fn ensemble_pseudolabel(per_model: &[f64]) -> Result<f64> {
    if per_model.is_empty() {
        return Err(Error::invalid("ensemble has no members"));
    }
    Ok(per_model.iter().sum::<f64>() / per_model.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberProvenance {
    /// Name of the dataset the member was trained on.
    pub source: String,
    /// SHA-256 of the member's model file, when it came from one.
    pub model_hash: String,
}

#[derive(Clone, Debug)]
pub struct EnsembleMember {
    pub provenance: MemberProvenance,
    pub params: Arc<ScorerParams>,
}

#[derive(Clone, Debug)]
pub struct EnsembleSnapshot {
    members: Vec<EnsembleMember>,
}

impl EnsembleSnapshot {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
        let size = first.params.config().patch_size;
        if let Some(m) = members
            .iter()
            .find(|m| m.params.config().patch_size != size)
        {
            return Err(Error::invalid(format!(
                "ensemble member from {} uses patch size {}, expected {size}",
                m.provenance.source,
                m.params.config().patch_size
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn patch_size(&self) -> usize {
        self.members[0].params.config().patch_size
    }

    pub fn provenance(&self) -> Vec<MemberProvenance> {
        self.members.iter().map(|m| m.provenance.clone()).collect()
    }
}

/// The fixed preprocessing applied to pool images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub short_side: usize,
    pub crop: usize,
}

/// Central crop of every record, keyed by id.
pub fn pool_crops(pool: &DatasetManifest, prep: Preprocess) -> Result<BTreeMap<String, Patch>> {
    pool.records()
        .par_iter()
        .map(|r| {
            Ok((
                r.id.clone(),
                resize_short_side_and_center_crop(r, prep.short_side, prep.crop)?,
            ))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// `scores[model][image]`, images in the order of `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn get(&self, model: usize, id: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == id)?;
        Some(self.scores[model][i])
    }
}

/// Scores each image once per ensemble member on its preprocessed crop.
pub fn score_pool(
    snapshot: &EnsembleSnapshot,
    ids: &[String],
    crops: &BTreeMap<String, Patch>,
) -> Result<ScoreTable> {
    let patches: Vec<&Patch> = ids
        .iter()
        .map(|id| crops.get(id).ok_or_else(|| Error::MissingImage(id.clone())))
        .collect::<Result<_>>()?;
    let scores = snapshot
        .members
        .iter()
        .map(|m| {
            patches
                .par_iter()
                .map(|p| score(&m.params, p))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ScoreTable {
        ids: ids.to_vec(),
        scores,
    })
}

/// A keyed bijection on `[0, domain)`: a four-round balanced Feistel network
/// over the smallest even bit width covering the domain, with cycle walking.
#[derive(Clone, Debug)]
pub struct IndexPermutation {
    domain: u64,
    half_bits: u32,
    keys: [u64; 4],
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl IndexPermutation {
    pub fn new(domain: u64, seed: u64) -> Self {
        let bits = (64 - domain.saturating_sub(1).leading_zeros()).max(2);
        let half_bits = bits.div_ceil(2);
        let keys = std::array::from_fn(|r| derive_seed(seed, &format!("pair-permutation/{r}")));
        Self {
            domain,
            half_bits,
            keys,
        }
    }

    fn round_trip(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let (mut l, mut r) = (x >> self.half_bits, x & mask);
        for k in self.keys {
            let f = mix64(r ^ k) & mask;
            (l, r) = (r, l ^ f);
        }
        (l << self.half_bits) | r
    }

    pub fn apply(&self, i: u64) -> u64 {
        debug_assert!(i < self.domain);
        let mut y = self.round_trip(i);
        while y >= self.domain {
            y = self.round_trip(y);
        }
        y
    }
}

/// Ordered pairs `(x, y)` with `x != y`, drawn uniformly without replacement.
/// Pair `k` is the `k`-th image of a keyed permutation of the pair index
/// space, so the first `n` pairs do not depend on how many are requested.
pub fn sample_pair_indices(
    n_images: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if n_images < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 images, got {n_images}"
        )));
    }
    let m = n_images - 1;
    let capacity = (n_images as u64) * (m as u64);
    if n_pairs as u64 > capacity {
        return Err(Error::invalid(format!(
            "{n_pairs} pairs requested but {n_images} images only form {capacity} ordered pairs"
        )));
    }
    let perm = IndexPermutation::new(capacity, seed);
    Ok((0..n_pairs as u64)
        .map(|k| {
            let idx = perm.apply(k);
            let x = (idx / m as u64) as usize;
            let r = (idx % m as u64) as usize;
            (x, if r < x { r } else { r + 1 })
        })
        .collect())
}

pub fn sample_pairs(ids: &[String], n_pairs: usize, seed: u64) -> Result<Vec<(String, String)>> {
    Ok(sample_pair_indices(ids.len(), n_pairs, seed)?
        .into_iter()
        .map(|(x, y)| (ids[x].clone(), ids[y].clone()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub x_id: String,
    pub y_id: String,
    pub p_r: f64,
    pub per_model: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub pool: String,
    pub n_pairs: usize,
    pub seed: u64,
    pub ensemble: Vec<MemberProvenance>,
    #[serde(skip)]
    pub pairs: Vec<PairSample>,
}

impl PairManifest {
    /// The first `n` pairs, as if generated with `n_pairs = n`.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.pairs.len() {
            return Err(Error::invalid(format!(
                "prefix {n} exceeds {} pairs",
                self.pairs.len()
            )));
        }
        Ok(Self {
            n_pairs: n,
            pairs: self.pairs[..n].to_vec(),
            ..self.clone()
        })
    }

    pub fn to_csv(&self) -> String {
        let per_model = self
            .pairs
            .first()
            .and_then(|p| p.per_model.as_ref())
            .map_or(0, Vec::len);
        let mut out = String::from("x_id,y_id,p_r");
        for i in 1..=per_model {
            write!(out, ",p_r_{i}").unwrap();
        }
        out.push('\n');
        for p in &self.pairs {
            write!(out, "{},{},{}", p.x_id, p.y_id, p.p_r).unwrap();
            for v in p.per_model.iter().flatten() {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pair manifest header serializes")
    }

    /// Writes the CSV at `path` and the JSON sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, self.sidecar_json()).map_err(|e| Error::io(&side, e))?;
        Ok(side)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut manifest: PairManifest = serde_json::from_str(&text)?;
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "x_id" || &header[1] != "y_id" || &header[2] != "p_r" {
            return Err(Error::invalid(format!(
                "{}: expected header x_id,y_id,p_r",
                path.display()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::invalid(format!("{}: {s:?} is not a number", path.display())))
        };
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let p_r = parse(&row[2])?;
            let per_model = if row.len() > 3 {
                Some(row.iter().skip(3).map(parse).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            manifest.pairs.push(PairSample {
                x_id: row[0].to_string(),
                y_id: row[1].to_string(),
                p_r,
                per_model,
            });
        }
        if manifest.pairs.len() != manifest.n_pairs {
            return Err(Error::invalid(format!(
                "{}: sidecar says {} pairs, file has {}",
                path.display(),
                manifest.n_pairs,
                manifest.pairs.len()
            )));
        }
        Ok(manifest)
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Scores the pool, samples ordered pairs over the lexicographically sorted
/// ids and labels each pair with the ensemble-mean relative probability.
/// Labels are kept strictly inside `(0, 1)` by clamping at one ulp from the
/// ends, which only matters for score gaps beyond about 36.
pub fn generate_pair_manifest(
    snapshot: &EnsembleSnapshot,
    pool: &DatasetManifest,
    prep: Preprocess,
    n_pairs: usize,
    seed: u64,
    keep_per_model: bool,
) -> Result<PairManifest> {
    if prep.crop != snapshot.patch_size() {
        return Err(Error::invalid(format!(
            "crop {} differs from the ensemble patch size {}",
            prep.crop,
            snapshot.patch_size()
        )));
    }
    let mut ids: Vec<String> = pool.ids().map(str::to_string).collect();
    ids.sort();
    let index = sample_pair_indices(ids.len(), n_pairs, seed)?;
    let crops = pool_crops(pool, prep)?;
    let table = score_pool(snapshot, &ids, &crops)?;
    let lo = f64::EPSILON / 2.0;
    let hi = 1.0 - f64::EPSILON / 2.0;
    let pairs = index
        .par_iter()
        .map(|&(x, y)| {
            let per: Vec<f64> = table
                .scores
                .iter()
                .map(|s| relative_prob(s[x], s[y]))
                .collect();
            let p_r = ensemble_pseudolabel(&per)?.clamp(lo, hi);
            Ok(PairSample {
                x_id: ids[x].clone(),
                y_id: ids[y].clone(),
                p_r,
                per_model: keep_per_model.then_some(per),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairManifest {
        pool: pool.name.clone(),
        n_pairs,
        seed,
        ensemble: snapshot.provenance(),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::scorer::{init_params, ScorerConfig};
    use crate::synthbench::{
        build_biased_dataset, BiasedDatasetConfig, DegradationKind, LabelRemap,
    };
    use proptest::prelude::*;
    use rand::Rng as _;
    use std::collections::HashSet;

    #[test]
    fn relative_prob_examples() {
        assert_eq!(relative_prob(0.3, 0.3), 0.5);
        // 1 / (1 + e^-1) to 16 digits
        assert!((relative_prob(1.0, 0.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((relative_prob(0.0, 1.0) - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((relative_prob(1.0, 0.0) + relative_prob(0.0, 1.0) - 1.0).abs() <= f64::EPSILON);
        assert!(relative_prob(1e4, 0.0) == 1.0 && relative_prob(0.0, 1e4) >= 0.0);
        assert!(relative_prob(0.0, 700.0) > 0.0);
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_pseudolabel(&[0.62; 4]).unwrap(), 0.62);
        assert_eq!(ensemble_pseudolabel(&[0.3, 0.7]).unwrap(), 0.5);
        assert_eq!(ensemble_pseudolabel(&[0.2, 0.4, 0.6, 0.8]).unwrap(), 0.5);
        assert!(ensemble_pseudolabel(&[]).is_err());
    }

    proptest! {
        #[test]
        fn relative_prob_is_monotone(qy in -5.0f64..5.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            prop_assume!(a < b);
            prop_assert!(relative_prob(a, qy) < relative_prob(b, qy));
        }

        #[test]
        fn ensemble_mean_is_bounded_and_order_free(v in proptest::collection::vec(0.001f64..0.999, 1..8)) {
            let m = ensemble_pseudolabel(&v).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-15 && m <= hi + 1e-15);
            let mut r = v.clone();
            r.reverse();
            prop_assert!((ensemble_pseudolabel(&r).unwrap() - m).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_sampling_contract() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let mut pairs = sample_pairs(&ids, 2, 1).unwrap();
        pairs.sort();
        assert_eq!(
            pairs,
            vec![("a".into(), "b".into()), ("b".into(), "a".into())]
        );
        assert!(sample_pairs(&ids, 3, 1).is_err());
        assert!(sample_pairs(&ids[..1], 0, 1).is_err());

        let a = sample_pair_indices(50, 2000, 9).unwrap();
        assert_eq!(a, sample_pair_indices(50, 2000, 9).unwrap());
        assert_ne!(a, sample_pair_indices(50, 2000, 10).unwrap());
        assert!(a.iter().all(|(x, y)| x != y && *x < 50 && *y < 50));
        let uniq: HashSet<_> = a.iter().collect();
        assert_eq!(uniq.len(), a.len());
        // prefix property
        assert_eq!(&sample_pair_indices(50, 300, 9).unwrap()[..], &a[..300]);
    }

    #[test]
    fn exhaustive_sampling_covers_every_pair() {
        for n in [2usize, 3, 7, 12] {
            let all = sample_pair_indices(n, n * (n - 1), 4).unwrap();
            let uniq: HashSet<_> = all.iter().collect();
            assert_eq!(uniq.len(), n * (n - 1));
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        for domain in [1u64, 2, 5, 64, 1000, 4097] {
            let p = IndexPermutation::new(domain, 77);
            let mut seen = vec![false; domain as usize];
            for i in 0..domain {
                let j = p.apply(i) as usize;
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    fn pool(n: usize) -> DatasetManifest {
        build_biased_dataset(&BiasedDatasetConfig {
            name: "pool".into(),
            n_images: n,
            allowed_kinds: DegradationKind::ALL.to_vec(),
            label_remap: LabelRemap::Identity,
            seed: 3,
            image_size: 12,
        })
        .unwrap()
        .0
    }

    fn member(seed: u64, source: &str) -> EnsembleMember {
        let cfg = ScorerConfig {
            patch_size: 8,
            conv_blocks: vec![3],
            hidden: 4,
            ..ScorerConfig::default()
        };
        EnsembleMember {
            provenance: MemberProvenance {
                source: source.into(),
                model_hash: format!("{seed:x}"),
            },
            params: Arc::new(init_params(&cfg, seed).unwrap()),
        }
    }

    const PREP: Preprocess = Preprocess {
        short_side: 10,
        crop: 8,
    };

    #[test]
    fn score_pool_matches_direct_scoring() {
        let p = pool(3);
        let snap = EnsembleSnapshot::new(vec![member(1, "A"), member(1, "B")]).unwrap();
        let ids: Vec<String> = p.ids().map(str::to_string).collect();
        let crops = pool_crops(&p, PREP).unwrap();
        let t = score_pool(&snap, &ids, &crops).unwrap();
        assert_eq!(t.scores[0].len(), 3);
        assert_eq!(t.scores[0], t.scores[1]);
        for id in &ids {
            let c = resize_short_side_and_center_crop(p.record(id).unwrap(), 10, 8).unwrap();
            assert_eq!(
                t.get(0, id),
                Some(score(&snap.members()[0].params, &c).unwrap())
            );
        }
        assert_eq!(t, score_pool(&snap, &ids, &crops).unwrap());
        assert!(score_pool(&snap, &["zz".to_string()], &crops).is_err());
    }

    #[test]
    fn manifest_generation_and_round_trip() {
        let p = pool(20);
        let snap =
            EnsembleSnapshot::new(vec![member(1, "A"), member(2, "B"), member(3, "C")]).unwrap();
        let m = generate_pair_manifest(&snap, &p, PREP, 100, 5, true).unwrap();
        assert_eq!(m.pairs.len(), 100);
        let sources: Vec<&str> = m.ensemble.iter().map(|e| e.source.as_str()).collect();
        assert_eq!(sources, ["A", "B", "C"]);
        for pair in &m.pairs {
            assert!(pair.p_r > 0.0 && pair.p_r < 1.0);
            assert_ne!(pair.x_id, pair.y_id);
            let per = pair.per_model.as_ref().unwrap();
            assert_eq!(pair.p_r, ensemble_pseudolabel(per).unwrap());
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        m.write(&path).unwrap();
        assert_eq!(PairManifest::read(&path).unwrap(), m);

        let again = generate_pair_manifest(&snap, &p, PREP, 100, 5, true).unwrap();
        assert_eq!(again.to_csv(), m.to_csv());
        let short = generate_pair_manifest(&snap, &p, PREP, 40, 5, true).unwrap();
        assert_eq!(short.pairs[..], m.pairs[..40]);
        assert_eq!(m.prefix(40).unwrap(), short);

        let lean = generate_pair_manifest(&snap, &p, PREP, 10, 5, false).unwrap();
        assert_eq!(lean.to_csv().lines().next().unwrap(), "x_id,y_id,p_r");
        assert!(generate_pair_manifest(&snap, &p, PREP, 20 * 19 + 1, 5, false).is_err());
    }

    #[test]
    fn unit_range_scores_give_bounded_probabilities() {
        let mut rng = rng_from_seed(2);
        for _ in 0..10_000 {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            let p = relative_prob(a, b);
            assert!((0.268_941..=0.731_059).contains(&p));
        }
    }

    #[test]
    fn snapshot_requires_matching_patch_sizes() {
        let mut other = member(1, "X");
        let cfg = ScorerConfig {
            patch_size: 16,
            conv_blocks: vec![3],
            hidden: 4,
            ..ScorerConfig::default()
        };
        other.params = Arc::new(init_params(&cfg, 1).unwrap());
        assert!(EnsembleSnapshot::new(vec![member(1, "A"), other]).is_err());
        assert!(EnsembleSnapshot::new(vec![]).is_err());
    }
}
