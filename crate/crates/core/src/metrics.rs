//! Retrieval evaluation: distances, CMC/mAP, trial-averaged protocols and
//! cross-modal distance histograms.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    Euclidean,
    CosineDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub metric: Metric,
}

/// Full `Q×G` distance matrix between query and gallery rows.
pub fn pairwise_distances(
    query: ArrayView2<'_, f64>,
    gallery: ArrayView2<'_, f64>,
    metric: Metric,
) -> Result<DistanceMatrix> {
    if query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} vs gallery dim {}",
            query.ncols(),
            gallery.ncols()
        )));
    }
    if query.iter().chain(gallery.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let values = match metric {
        Metric::Euclidean => {
            let mut d = Array2::zeros((query.nrows(), gallery.nrows()));
            for (i, q) in query.outer_iter().enumerate() {
                for (j, g) in gallery.outer_iter().enumerate() {
                    d[[i, j]] = q
                        .iter()
                        .zip(g)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                }
            }
            d
        }
        Metric::CosineDistance => {
            let unit = |m: ArrayView2<'_, f64>, side: &str| -> Result<Array2<f64>> {
                let mut out = m.to_owned();
                for (i, mut r) in out.outer_iter_mut().enumerate() {
                    let n = r.dot(&r).sqrt();
                    if n == 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "{side} row {i} has zero norm; cosine distance is undefined"
                        )));
                    }
                    r /= n;
                }
                Ok(out)
            };
            let sim = unit(query, "query")?.dot(&unit(gallery, "gallery")?.t());
            sim.mapv(|s| (1.0 - s).clamp(0.0, 2.0))
        }
    };
    Ok(DistanceMatrix { values, metric })
}

/// Outcome of one ranking pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// CMC at each reported rank, keyed by rank.
    pub cmc: BTreeMap<usize, f64>,
    pub map: f64,
    /// Queries with at least one correct gallery item.
    pub valid_queries: usize,
}

/// Full CMC curve (length `G`) and mAP for one distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub curve: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
}

impl Ranking {
    /// CMC at rank `k` (1-based); ranks past the gallery size saturate.
    pub fn at(&self, k: usize) -> f64 {
        if self.curve.is_empty() || k == 0 {
            return 0.0;
        }
        self.curve[k.min(self.curve.len()) - 1]
    }

    pub fn summarize(&self, ranks: &[usize]) -> TrialResult {
        TrialResult {
            cmc: ranks.iter().map(|&k| (k, self.at(k))).collect(),
            map: self.map,
            valid_queries: self.valid_queries,
        }
    }
}

/// Cameras of both sides, for protocols that drop same-camera matches.
#[derive(Debug, Clone, Copy)]
pub struct Cameras<'a> {
    pub query: &'a [u32],
    pub gallery: &'a [u32],
}

/// Rank the gallery for every query (ascending distance, ties by gallery
/// index) and score it. With `same_camera_filter`, gallery items sharing
/// both identity and camera with the query are skipped. Queries without a
/// correct gallery item count towards neither CMC nor mAP.
pub fn cmc_map(
    dist: &DistanceMatrix,
    q_ids: &[u64],
    g_ids: &[u64],
    cameras: Option<Cameras<'_>>,
    same_camera_filter: bool,
) -> Result<Ranking> {
    let (nq, ng) = dist.values.dim();
    if q_ids.len() != nq || g_ids.len() != ng {
        return Err(Error::Shape(format!(
            "{}×{} distances for {} queries and {} gallery items",
            nq,
            ng,
            q_ids.len(),
            g_ids.len()
        )));
    }
    let cams = match (same_camera_filter, cameras) {
        (true, None) => {
            return Err(Error::InvalidInput(
                "same-camera filtering needs query and gallery cameras".into(),
            ))
        }
        (true, Some(c)) if c.query.len() != nq || c.gallery.len() != ng => {
            return Err(Error::Shape(
                "camera arrays do not match the distance matrix".into(),
            ))
        }
        (true, Some(c)) => Some(c),
        (false, _) => None,
    };
    let mut hits = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for (i, row) in dist.values.outer_iter().enumerate() {
        order.clear();
        order.extend((0..ng).filter(|&j| {
            cams.is_none_or(|c| !(g_ids[j] == q_ids[i] && c.gallery[j] == c.query[i]))
        }));
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (r, &j) in order.iter().enumerate() {
            if g_ids[j] == q_ids[i] {
                found += 1;
                precision_sum += found as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        if let Some(r) = first {
            valid += 1;
            hits[r] += 1;
            ap_sum += precision_sum / found as f64;
        }
    }
    let mut curve = Vec::with_capacity(ng);
    let mut acc = 0;
    for h in hits {
        acc += h;
        curve.push(if valid == 0 {
            0.0
        } else {
            acc as f64 / valid as f64
        });
    }
    Ok(Ranking {
        curve,
        map: if valid == 0 {
            0.0
        } else {
            ap_sum / valid as f64
        },
        valid_queries: valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SearchMode {
    All,
    Indoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Shot {
    Single,
    Multi,
}

impl Shot {
    pub fn images_per_camera(self) -> usize {
        match self {
            Shot::Single => 1,
            Shot::Multi => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub query_modality: Modality,
    pub gallery_modality: Modality,
    pub mode: SearchMode,
    pub shot: Shot,
    /// Gallery cameras searched in ALL mode; empty means every camera.
    pub all_cameras: Vec<u32>,
    /// Gallery cameras searched in INDOOR mode.
    pub indoor_cameras: Vec<u32>,
    /// Overrides the shot's images per identity and camera.
    pub shots_per_id_per_camera: Option<usize>,
    pub trials: usize,
    pub ranks: Vec<usize>,
    pub metric: Metric,
    pub same_camera_filter: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            query_modality: Modality::Ir,
            gallery_modality: Modality::Vis,
            mode: SearchMode::All,
            shot: Shot::Single,
            all_cameras: Vec::new(),
            indoor_cameras: vec![0],
            shots_per_id_per_camera: None,
            trials: 10,
            ranks: vec![1, 5, 10, 20],
            metric: Metric::CosineDistance,
            same_camera_filter: false,
        }
    }
}

impl ProtocolConfig {
    /// Flat `key = value` text; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_modality == self.gallery_modality {
            return Err(Error::Config(
                "query and gallery modalities must differ".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.ranks.contains(&0) {
            return Err(Error::Config("CMC ranks are 1-based".into()));
        }
        if self.shots_per_id_per_camera == Some(0) {
            return Err(Error::Config(
                "shots per identity and camera must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn gallery_cameras(&self) -> &[u32] {
        match self.mode {
            SearchMode::All => &self.all_cameras,
            SearchMode::Indoor => &self.indoor_cameras,
        }
    }

    pub fn shots(&self) -> usize {
        self.shots_per_id_per_camera
            .unwrap_or(self.shot.images_per_camera())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean CMC over trials, keyed by rank.
    pub cmc: BTreeMap<usize, f64>,
    pub map: f64,
    pub per_trial: Vec<TrialResult>,
    pub protocol: ProtocolConfig,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.get(&1).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draw one trial's gallery: restrict to the mode's cameras, then take up to
/// `shots` images per (identity, camera) without replacement.
pub fn sample_gallery<R: Rng + ?Sized>(
    gallery: &Manifest,
    protocol: &ProtocolConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let cams = protocol.gallery_cameras();
    let mut groups: BTreeMap<(usize, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in gallery.records.iter().enumerate() {
        if r.modality == protocol.gallery_modality && (cams.is_empty() || cams.contains(&r.camera))
        {
            groups.entry((r.identity, r.camera)).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no {} gallery images on cameras {:?}",
            protocol.gallery_modality, cams
        )));
    }
    let shots = protocol.shots();
    let mut picked = Vec::new();
    for members in groups.values() {
        if members.len() <= shots {
            picked.extend_from_slice(members);
        } else {
            let mut chosen: Vec<usize> = index::sample(rng, members.len(), shots)
                .into_iter()
                .map(|k| members[k])
                .collect();
            chosen.sort_unstable();
            picked.extend(chosen);
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Evaluate precomputed embeddings (`query_features` rows follow
/// `query.records`, likewise for the gallery). Identities are matched by
/// their original labels so the two manifests may index them differently.
pub fn evaluate_features<R: Rng + ?Sized>(
    query_features: &Array2<f64>,
    gallery_features: &Array2<f64>,
    query: &Manifest,
    gallery: &Manifest,
    protocol: &ProtocolConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    protocol.validate()?;
    if query_features.nrows() != query.len() || gallery_features.nrows() != gallery.len() {
        return Err(Error::Shape(
            "feature rows do not match manifest records".into(),
        ));
    }
    let q_rows: Vec<usize> = (0..query.len())
        .filter(|&i| query.records[i].modality == protocol.query_modality)
        .collect();
    if q_rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no {} query images",
            protocol.query_modality
        )));
    }
    let q_ids: Vec<u64> = q_rows
        .iter()
        .map(|&i| query.original_ids[query.records[i].identity])
        .collect();
    let q_cams: Vec<u32> = q_rows.iter().map(|&i| query.records[i].camera).collect();
    let qf = query_features.select(Axis(0), &q_rows);

    let mut per_trial = Vec::with_capacity(protocol.trials);
    for _ in 0..protocol.trials {
        let g_rows = sample_gallery(gallery, protocol, rng)?;
        let g_ids: Vec<u64> = g_rows
            .iter()
            .map(|&i| gallery.original_ids[gallery.records[i].identity])
            .collect();
        let g_cams: Vec<u32> = g_rows.iter().map(|&i| gallery.records[i].camera).collect();
        let dist = pairwise_distances(
            qf.view(),
            gallery_features.select(Axis(0), &g_rows).view(),
            protocol.metric,
        )?;
        let cams = Cameras {
            query: &q_cams,
            gallery: &g_cams,
        };
        let ranking = cmc_map(
            &dist,
            &q_ids,
            &g_ids,
            Some(cams),
            protocol.same_camera_filter,
        )?;
        per_trial.push(ranking.summarize(&protocol.ranks));
    }
    let t = per_trial.len() as f64;
    let cmc = protocol
        .ranks
        .iter()
        .map(|&k| (k, per_trial.iter().map(|r| r.cmc[&k]).sum::<f64>() / t))
        .collect();
    let map = per_trial.iter().map(|r| r.map).sum::<f64>() / t;
    Ok(EvalReport {
        cmc,
        map,
        per_trial,
        protocol: protocol.clone(),
    })
}

/// Embed both manifests with `features_fn` and evaluate.
pub fn run_protocol<R, E>(
    mut features_fn: E,
    query: &Manifest,
    gallery: &Manifest,
    protocol: &ProtocolConfig,
    rng: &mut R,
) -> Result<EvalReport>
where
    R: Rng + ?Sized,
    E: FnMut(&Manifest) -> Result<Array2<f64>>,
{
    protocol.validate()?;
    let qf = features_fn(query)?;
    let gf = features_fn(gallery)?;
    evaluate_features(&qf, &gf, query, gallery, protocol, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub intra_count: usize,
    pub inter_count: usize,
}

/// Cross-modal pair distances binned by same vs different identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub bins: Vec<HistogramBin>,
    pub intra_mean: f64,
    pub inter_mean: f64,
    pub metric: Metric,
}

impl DistanceHistogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        for b in &self.bins {
            w.serialize(b)
                .map_err(|e| Error::InvalidInput(format!("histogram csv: {e}")))?;
        }
        w.flush()
            .map_err(|e| Error::InvalidInput(format!("histogram csv: {e}")))
    }
}

/// Distances between every visible and every infrared row, split into
/// same-identity and different-identity pairs, binned uniformly over
/// `[0, max]`. A group without pairs has a NaN mean.
pub fn distance_histograms(
    features: ArrayView2<'_, f64>,
    identities: &[usize],
    modalities: &[Modality],
    bins: usize,
    metric: Metric,
) -> Result<DistanceHistogram> {
    let n = features.nrows();
    if bins < 1 {
        return Err(Error::InvalidInput(
            "at least one histogram bin is needed".into(),
        ));
    }
    if n < 2 || identities.len() != n || modalities.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} feature rows with {} identities and {} modalities",
            identities.len(),
            modalities.len()
        )));
    }
    let vis: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Vis).collect();
    let ir: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Ir).collect();
    if vis.is_empty() || ir.is_empty() {
        return Err(Error::InvalidInput(
            "cross-modal distances need rows of both modalities".into(),
        ));
    }
    let d = pairwise_distances(
        features.select(Axis(0), &vis).view(),
        features.select(Axis(0), &ir).view(),
        metric,
    )?;
    let mut pairs = Vec::with_capacity(vis.len() * ir.len());
    for (a, &i) in vis.iter().enumerate() {
        for (b, &j) in ir.iter().enumerate() {
            pairs.push((d.values[[a, b]], identities[i] == identities[j]));
        }
    }
    let hi = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let mut table: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_lo: b as f64 * width,
            bin_hi: (b + 1) as f64 * width,
            intra_count: 0,
            inter_count: 0,
        })
        .collect();
    let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
    for &(v, same) in &pairs {
        let b = ((v / width) as usize).min(bins - 1);
        if same {
            table[b].intra_count += 1;
        } else {
            table[b].inter_count += 1;
        }
        sums[same as usize] += v;
        counts[same as usize] += 1;
    }
    Ok(DistanceHistogram {
        bins: table,
        intra_mean: sums[1] / counts[1] as f64,
        inter_mean: sums[0] / counts[0] as f64,
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::nn::Init;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn dm(values: Array2<f64>) -> DistanceMatrix {
        DistanceMatrix {
            values,
            metric: Metric::Euclidean,
        }
    }

    #[test]
    fn distance_cases() {
        let q = array![[1.0, 2.0, 0.5]];
        let g = array![[0.0, 1.0, 1.0], [1.0, 2.0, 0.5]];
        for m in [Metric::Euclidean, Metric::CosineDistance] {
            assert!(
                pairwise_distances(q.view(), g.view(), m).unwrap().values[[0, 1]].abs() < 1e-12
            );
        }
        let d = pairwise_distances(
            array![[1.0, 0.0]].view(),
            array![[0.0, 3.0]].view(),
            Metric::CosineDistance,
        )
        .unwrap();
        assert!((d.values[[0, 0]] - 1.0).abs() < 1e-12);

        let q = Init::new(1)
            .normal::<f64>(&[3, 4], 1.0)
            .into_dimensionality()
            .unwrap();
        let g = Init::new(2)
            .normal::<f64>(&[5, 4], 1.0)
            .into_dimensionality()
            .unwrap();
        let e = pairwise_distances(q.view(), g.view(), Metric::Euclidean).unwrap();
        let c = pairwise_distances(q.view(), g.view(), Metric::CosineDistance).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let (mut dot, mut nq, mut ng, mut sq) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..4 {
                    dot += q[[i, k]] * g[[j, k]];
                    nq += q[[i, k]] * q[[i, k]];
                    ng += g[[j, k]] * g[[j, k]];
                    sq += (q[[i, k]] - g[[j, k]]).powi(2);
                }
                assert!((e.values[[i, j]] - sq.sqrt()).abs() < 1e-7);
                assert!((c.values[[i, j]] - (1.0 - dot / (nq.sqrt() * ng.sqrt()))).abs() < 1e-7);
                assert!((0.0..=2.0).contains(&c.values[[i, j]]));
            }
        }
        assert!(pairwise_distances(
            array![[0.0, 0.0]].view(),
            g.view().slice_move(ndarray::s![.., ..2]),
            Metric::CosineDistance
        )
        .is_err());
        assert!(pairwise_distances(q.view(), array![[1.0]].view(), Metric::Euclidean).is_err());
    }

    #[test]
    fn ranking_cases() {
        let r = cmc_map(
            &dm(array![[0.1, 0.5, 0.7, 0.9, 1.0]]),
            &[1],
            &[1, 2, 3, 4, 5],
            None,
            false,
        )
        .unwrap();
        assert_eq!((r.at(1), r.map), (1.0, 1.0));

        let r = cmc_map(
            &dm(array![[0.1, 0.5, 0.7, 0.9]]),
            &[1],
            &[1, 2, 1, 3],
            None,
            false,
        )
        .unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        let r = cmc_map(&dm(array![[0.1, 0.5]]), &[9], &[1, 2], None, false).unwrap();
        assert_eq!((r.valid_queries, r.map, r.at(1)), (0, 0.0, 0.0));

        // Ties resolve towards the lower gallery index.
        let r = cmc_map(&dm(array![[0.5, 0.5]]), &[2], &[1, 2], None, false).unwrap();
        assert_eq!((r.at(1), r.at(2)), (0.0, 1.0));

        assert!(cmc_map(&dm(array![[0.5]]), &[2], &[2], None, true).is_err());
        let cams = Cameras {
            query: &[2],
            gallery: &[2, 0],
        };
        let r = cmc_map(&dm(array![[0.1, 0.5]]), &[4], &[4, 4], Some(cams), true).unwrap();
        assert_eq!(r.curve.len(), 2);
        assert!((r.map - 1.0).abs() < 1e-12);
        assert_eq!(r.at(1), 1.0);
    }

    /// Ranks by counting, with precision enumerated at every correct item.
    fn brute_force(d: &Array2<f64>, q: &[u64], g: &[u64]) -> (Vec<f64>, f64, usize) {
        let (nq, ng) = d.dim();
        let mut cmc = vec![0.0; ng];
        let (mut ap, mut valid) = (0.0, 0);
        for i in 0..nq {
            let rank = |j: usize| {
                (0..ng)
                    .filter(|&k| d[[i, k]] < d[[i, j]] || (d[[i, k]] == d[[i, j]] && k < j))
                    .count()
            };
            let mut correct: Vec<usize> = (0..ng).filter(|&j| g[j] == q[i]).map(rank).collect();
            if correct.is_empty() {
                continue;
            }
            correct.sort_unstable();
            valid += 1;
            for c in cmc.iter_mut().skip(correct[0]) {
                *c += 1.0;
            }
            ap += correct
                .iter()
                .enumerate()
                .map(|(h, &r)| (h + 1) as f64 / (r + 1) as f64)
                .sum::<f64>()
                / correct.len() as f64;
        }
        if valid == 0 {
            return (vec![0.0; ng], 0.0, 0);
        }
        (
            cmc.iter().map(|c| c / valid as f64).collect(),
            ap / valid as f64,
            valid,
        )
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(
            nq in 1usize..10,
            ng in 1usize..30,
            ids in 1u64..6,
            seed in 0u64..10_000,
            coarse in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values force plenty of ties.
            let d = Array2::from_shape_fn((nq, ng), |_| {
                let v: f64 = rng.random();
                if coarse { (v * 4.0).floor() } else { v }
            });
            let q: Vec<u64> = (0..nq).map(|_| rng.random_range(0..ids)).collect();
            let g: Vec<u64> = (0..ng).map(|_| rng.random_range(0..ids)).collect();
            let r = cmc_map(&dm(d.clone()), &q, &g, None, false).unwrap();
            let (cmc, map, valid) = brute_force(&d, &q, &g);
            prop_assert_eq!(r.valid_queries, valid);
            prop_assert!((r.map - map).abs() < 1e-12);
            for (a, b) in r.curve.iter().zip(&cmc) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(r.curve.windows(2).all(|w| w[0] <= w[1]));
            if valid > 0 {
                prop_assert_eq!(r.at(ng), 1.0);
            }
            prop_assert!((0.0..=1.0).contains(&r.map));

            let warped = cmc_map(&dm(d.mapv(|v| (3.0 * v).exp() + 1.0)), &q, &g, None, false).unwrap();
            prop_assert_eq!(warped, r);
        }
    }

    fn toy(ids: u64, per_cam: usize, cams: &[u32], modality: Modality) -> Manifest {
        let mut raw = Vec::new();
        for id in 0..ids {
            for &c in cams {
                for j in 0..per_cam {
                    raw.push((
                        PathBuf::from(format!("{id}_{c}_{j}")),
                        id + 100,
                        modality,
                        c,
                    ));
                }
            }
        }
        Manifest::from_raw(raw, Split::Gallery)
    }

    fn one_hot(m: &Manifest) -> Result<Array2<f64>> {
        let d = 8;
        Ok(Array2::from_shape_fn((m.len(), d), |(i, k)| {
            (m.original_ids[m.records[i].identity] as usize % d == k) as u8 as f64
        }))
    }

    #[test]
    fn perfect_features_score_perfectly_under_every_protocol() {
        let mut query = toy(5, 2, &[2, 3], Modality::Ir);
        query.split = Split::Query;
        let gallery = toy(5, 12, &[0, 1], Modality::Vis);
        for mode in [SearchMode::All, SearchMode::Indoor] {
            for shot in [Shot::Single, Shot::Multi] {
                let p = ProtocolConfig {
                    mode,
                    shot,
                    ..ProtocolConfig::default()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let r = run_protocol(one_hot, &query, &gallery, &p, &mut rng).unwrap();
                assert_eq!((r.rank1(), r.map), (1.0, 1.0));
                assert_eq!(r.per_trial.len(), 10);
            }
        }
    }

    #[test]
    fn gallery_sampling_rules() {
        let single = toy(3, 1, &[0, 1], Modality::Vis);
        let p = ProtocolConfig {
            trials: 1,
            ..ProtocolConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_gallery(&single, &p, &mut rng).unwrap(),
            (0..6).collect::<Vec<_>>()
        );

        let multi = toy(3, 12, &[0, 1], Modality::Vis);
        let picked = sample_gallery(&multi, &p, &mut rng).unwrap();
        assert_eq!(picked.len(), 6);
        let indoor = ProtocolConfig {
            mode: SearchMode::Indoor,
            shot: Shot::Multi,
            ..p.clone()
        };
        let picked = sample_gallery(&multi, &indoor, &mut rng).unwrap();
        assert_eq!(picked.len(), 30);
        assert!(picked.iter().all(|&i| multi.records[i].camera == 0));

        let nowhere = ProtocolConfig {
            all_cameras: vec![7],
            ..p
        };
        assert!(sample_gallery(&multi, &nowhere, &mut rng).is_err());
    }

    #[test]
    fn seeded_trials_are_reproducible() {
        let query = toy(4, 3, &[2], Modality::Ir);
        let gallery = toy(4, 6, &[0, 1], Modality::Vis);
        let noisy = |m: &Manifest| -> Result<Array2<f64>> {
            Ok(Init::new(m.len() as u64)
                .normal::<f64>(&[m.len(), 6], 1.0)
                .into_dimensionality()
                .unwrap())
        };
        let p = ProtocolConfig::default();
        let a = run_protocol(
            noisy,
            &query,
            &gallery,
            &p,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = run_protocol(
            noisy,
            &query,
            &gallery,
            &p,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b);
        let json: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        for key in ["cmc", "map", "per_trial", "protocol"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let cmc: Vec<f64> = a.cmc.values().copied().collect();
        assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!(ProtocolConfig {
            trials: 0,
            ..p.clone()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            gallery_modality: Modality::Ir,
            ..p
        }
        .validate()
        .is_err());
    }

    #[test]
    fn histogram_cases() {
        use Modality::{Ir, Vis};
        let same = Array2::from_elem((4, 3), 0.5);
        let h = distance_histograms(
            same.view(),
            &[0, 0, 1, 1],
            &[Vis, Ir, Vis, Ir],
            5,
            Metric::Euclidean,
        )
        .unwrap();
        let occupied: Vec<_> = h
            .bins
            .iter()
            .filter(|b| b.intra_count + b.inter_count > 0)
            .collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!((h.intra_mean, h.inter_mean), (0.0, 0.0));

        let f = array![[0.0, 0.0], [0.01, 0.0], [3.0, 4.0], [3.0, 4.01]];
        let h = distance_histograms(
            f.view(),
            &[0, 0, 1, 1],
            &[Vis, Ir, Vis, Ir],
            10,
            Metric::Euclidean,
        )
        .unwrap();
        assert!((h.inter_mean - 5.0).abs() < 0.02);
        assert!(h.intra_mean < 0.02);

        let f: Array2<f64> = Init::new(3)
            .normal::<f64>(&[9, 4], 1.0)
            .into_dimensionality()
            .unwrap();
        let ids = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let mods = [Vis, Vis, Vis, Ir, Ir, Ir, Vis, Ir, Ir];
        let h = distance_histograms(f.view(), &ids, &mods, 7, Metric::CosineDistance).unwrap();
        let (mut intra, mut inter) = (0, 0);
        for i in 0..9 {
            for j in 0..9 {
                if mods[i] == Vis && mods[j] == Ir {
                    if ids[i] == ids[j] {
                        intra += 1;
                    } else {
                        inter += 1;
                    }
                }
            }
        }
        assert_eq!(h.bins.iter().map(|b| b.intra_count).sum::<usize>(), intra);
        assert_eq!(h.bins.iter().map(|b| b.inter_count).sum::<usize>(), inter);

        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,intra_count,inter_count\n"));
        assert_eq!(text.lines().count(), 8);
        assert!(distance_histograms(f.view(), &ids, &mods, 0, Metric::Euclidean).is_err());
        assert!(distance_histograms(f.view(), &ids, &[Vis; 9], 4, Metric::Euclidean).is_err());
    }

    #[test]
    fn protocol_file_keys_match_fields() {
        let p = ProtocolConfig::from_toml(
            "mode = \"INDOOR\"\nshot = \"MULTI\"\ntrials = 3\nmetric = \"EUCLIDEAN\"\n",
        )
        .unwrap();
        assert_eq!(
            (p.mode, p.shot, p.trials, p.metric),
            (SearchMode::Indoor, Shot::Multi, 3, Metric::Euclidean)
        );
        assert_eq!(p.query_modality, Modality::Ir);
        assert!(ProtocolConfig::from_toml("trails = 3\n").is_err());
        assert!(ProtocolConfig::from_toml("gallery_modality = \"IR\"\n").is_err());
        let back = ProtocolConfig::from_toml(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
