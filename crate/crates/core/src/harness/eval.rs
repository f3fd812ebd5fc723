use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{generate_synthetic, ImageCache, Manifest, Modality, Split, SyntheticConfig};
use crate::error::Result;
use crate::metrics::{
    distance_histograms, run_protocol, DistanceHistogram, EvalReport, Metric, ProtocolConfig,
};
use crate::model::Model;

/// Eval-mode `(pooled, bn)` features for every record of `manifest`.
pub fn embed_manifest(
    model: &Model<f32>,
    manifest: &Manifest,
    size: (usize, usize),
    batch: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let cache = ImageCache::load(manifest, size.0, size.1)?;
    let mut x = Array4::<f32>::zeros((manifest.len(), 3, size.0, size.1));
    for (i, img) in cache.images.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&img.data());
    }
    let mods: Vec<Modality> = manifest.records.iter().map(|r| r.modality).collect();
    model.embed(&x.into_dyn(), &mods, batch)
}

/// Retrieval on BN-neck features. `seed` drives the gallery draws.
pub fn evaluate(
    model: &Model<f32>,
    query: &Manifest,
    gallery: &Manifest,
    protocol: &ProtocolConfig,
    size: (usize, usize),
    batch: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run_protocol(
        |m: &Manifest| embed_manifest(model, m, size, batch).map(|(_, bn)| bn),
        query,
        gallery,
        protocol,
        &mut rng,
    )
}

/// Cross-modal distance histogram of BN-neck features over `manifest`.
pub fn distance_report(
    model: &Model<f32>,
    manifest: &Manifest,
    bins: usize,
    metric: Metric,
    size: (usize, usize),
    batch: usize,
) -> Result<DistanceHistogram> {
    let (_, bn) = embed_manifest(model, manifest, size, batch)?;
    let ids: Vec<usize> = manifest.records.iter().map(|r| r.identity).collect();
    let mods: Vec<Modality> = manifest.records.iter().map(|r| r.modality).collect();
    distance_histograms(bn.view(), &ids, &mods, bins, metric)
}

/// Synthetic training set plus a closed-set test split: the same identities
/// rendered under a different nuisance seed, queried IR→VIS.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Manifest,
    pub query: Manifest,
    pub gallery: Manifest,
}

/// Seed offset between the training render and the test render.
const TEST_SEED_OFFSET: u64 = 10_007;

pub fn synthetic_benchmark(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let train = generate_synthetic(cfg, dir.join("train"))?;
    let test_cfg = SyntheticConfig {
        seed: cfg.seed.wrapping_add(TEST_SEED_OFFSET),
        ..cfg.clone()
    };
    let test = generate_synthetic(&test_cfg, dir.join("test"))?;
    let query = test.filter_modality(Modality::Ir, Split::Query);
    let gallery = test.filter_modality(Modality::Vis, Split::Gallery);
    query.save(dir.join("query.csv"))?;
    gallery.save(dir.join("gallery.csv"))?;
    Ok(Benchmark {
        train,
        query,
        gallery,
    })
}
