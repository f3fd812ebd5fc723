use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, Modality, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity per batch, split evenly across modalities.
    pub k: usize,
    pub seed: u64,
    /// Read `k` as images per identity *per modality* (batch `2·P·K`).
    #[serde(default)]
    pub k_per_modality: bool,
}

impl SamplerConfig {
    pub fn new(p: usize, k: usize, seed: u64) -> Self {
        Self {
            p,
            k,
            seed,
            k_per_modality: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Config(format!(
                "P must be at least 2, got {}",
                self.p
            )));
        }
        if self.k < 2 && !self.k_per_modality {
            return Err(Error::Config(format!(
                "K must be at least 2, got {}",
                self.k
            )));
        }
        if self.k_per_modality && self.k < 1 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !self.k_per_modality && self.k % 2 != 0 {
            return Err(Error::Config(format!(
                "K must be even so each modality gets K/2 images, got {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn per_modality(&self) -> usize {
        if self.k_per_modality {
            self.k
        } else {
            self.k / 2
        }
    }

    pub fn batch_size(&self) -> usize {
        2 * self.p * self.per_modality()
    }
}

/// Record indices of one PK batch with their labels. For every chosen
/// identity the batch holds its visible images followed by its infrared ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

/// Draw `P` distinct identities uniformly, then `K/2` images per modality for
/// each. Images are drawn without replacement when the identity has enough,
/// with replacement otherwise. Identities lacking a modality are never drawn.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    manifest: &Manifest,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PkBatch> {
    if manifest.split != Split::Train {
        return Err(Error::InvalidInput(
            "PK sampling needs a TRAIN manifest".into(),
        ));
    }
    cfg.validate()?;
    let mut pools: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; manifest.num_identities()];
    for (i, r) in manifest.records.iter().enumerate() {
        pools[r.identity][r.modality.index()].push(i);
    }
    let eligible: Vec<usize> = (0..pools.len())
        .filter(|&id| pools[id].iter().all(|p| !p.is_empty()))
        .collect();
    if cfg.p > eligible.len() {
        return Err(Error::InvalidInput(format!(
            "P={} exceeds the {} identities present in both modalities",
            cfg.p,
            eligible.len()
        )));
    }
    let per = cfg.per_modality();
    let mut batch = PkBatch {
        indices: Vec::with_capacity(cfg.batch_size()),
        identities: Vec::with_capacity(cfg.batch_size()),
        modalities: Vec::with_capacity(cfg.batch_size()),
    };
    for pick in index::sample(rng, eligible.len(), cfg.p) {
        let id = eligible[pick];
        for modality in Modality::BOTH {
            let pool = &pools[id][modality.index()];
            let chosen: Vec<usize> = if pool.len() >= per {
                index::sample(rng, pool.len(), per)
                    .into_iter()
                    .map(|j| pool[j])
                    .collect()
            } else {
                (0..per)
                    .map(|_| pool[rng.random_range(0..pool.len())])
                    .collect()
            };
            for i in chosen {
                batch.indices.push(i);
                batch.identities.push(id);
                batch.modalities.push(modality);
            }
        }
    }
    Ok(batch)
}
