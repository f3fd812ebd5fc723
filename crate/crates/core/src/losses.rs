//! Identity clues guided loss, identity cross-entropy and a batch-hard
//! triplet baseline.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Var};
use crate::dataset::Modality;
use crate::error::{Error, Result};

/// Pooled and BN-neck features of one batch with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<F: Real> {
    /// `N×D`, before the BN neck.
    pub pooled: Var<F>,
    /// `N×D`, after the BN neck.
    pub bn: Var<F>,
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl<F: Real> EmbeddingBatch<F> {
    pub fn new(
        pooled: Var<F>,
        bn: Var<F>,
        identities: Vec<usize>,
        modalities: Vec<Modality>,
    ) -> Result<Self> {
        let n = identities.len();
        if pooled.ndim() != 2
            || pooled.shape() != bn.shape()
            || pooled.shape()[0] != n
            || modalities.len() != n
        {
            return Err(Error::Shape(format!(
                "pooled {:?}, bn {:?} with {} identities and {} modalities",
                pooled.shape(),
                bn.shape(),
                n,
                modalities.len()
            )));
        }
        Ok(Self {
            pooled,
            bn,
            identities,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Margin of the pull towards the opposite-modality center.
    pub rho1: f64,
    /// Margin of the push away from other identities' centers.
    pub rho2: f64,
    /// Weight of the metric term in the total.
    pub lambda: f64,
    /// Count same-identity pairs in the push term too.
    pub push_same_identity: bool,
    pub use_icg: bool,
    pub use_triplet: bool,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho1: 0.01,
            rho2: 0.7,
            lambda: 1.0,
            push_same_identity: false,
            use_icg: true,
            use_triplet: false,
            triplet_margin: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.rho1, self.rho2, self.lambda, self.triplet_margin]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.rho1 < 0.0
            || self.rho2 <= 0.0
            || self.lambda < 0.0
            || self.triplet_margin < 0.0
        {
            return Err(Error::Config(format!(
                "need rho1 >= 0, rho2 > 0, lambda >= 0, triplet margin >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-identity feature centers of a batch, one row per identity in
/// ascending label order.
#[derive(Debug, Clone)]
pub struct CenterSet<F: Real> {
    pub identities: Vec<usize>,
    pub vis: Var<F>,
    pub ir: Var<F>,
    pub both: Var<F>,
    /// Rows per identity over both modalities.
    pub counts: Vec<usize>,
    /// Row of each batch sample's identity.
    pub group_of: Vec<usize>,
}

impl<F: Real> CenterSet<F> {
    pub fn for_modality(&self, m: Modality) -> &Var<F> {
        match m {
            Modality::Vis => &self.vis,
            Modality::Ir => &self.ir,
        }
    }
}

fn averaging(groups: &[usize], members: &[Vec<usize>], n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((groups.len(), n));
    for (g, rows) in members.iter().enumerate() {
        for &i in rows {
            m[[g, i]] = 1.0 / rows.len() as f64;
        }
    }
    m
}

/// Means of the pooled features per identity and modality. Gradients flow
/// back through the means.
pub fn compute_centers<F: Real>(batch: &EmbeddingBatch<F>) -> Result<CenterSet<F>> {
    let n = batch.len();
    let mut groups: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
    for (i, (&y, &m)) in batch.identities.iter().zip(&batch.modalities).enumerate() {
        groups.entry(y).or_default()[m.index()].push(i);
    }
    if let Some((y, _)) = groups.iter().find(|(_, g)| g.iter().any(Vec::is_empty)) {
        return Err(Error::InvalidInput(format!(
            "identity {y} is missing a modality in the batch"
        )));
    }
    let identities: Vec<usize> = groups.keys().copied().collect();
    let index: BTreeMap<usize, usize> = identities
        .iter()
        .enumerate()
        .map(|(g, &y)| (y, g))
        .collect();
    let pick = |m: usize| groups.values().map(|g| g[m].clone()).collect::<Vec<_>>();
    let all: Vec<Vec<usize>> = groups
        .values()
        .map(|g| [g[0].clone(), g[1].clone()].concat())
        .collect();
    let f = &batch.pooled;
    let mean = |members: &[Vec<usize>]| {
        let m = averaging(&identities, members, n).mapv(|v| F::from_f64(v).unwrap());
        f.constant_like(m.into_dyn()).matmul(f)
    };
    Ok(CenterSet {
        vis: mean(&pick(0)),
        ir: mean(&pick(1)),
        both: mean(&all),
        counts: all.iter().map(Vec::len).collect(),
        group_of: batch.identities.iter().map(|y| index[y]).collect(),
        identities,
    })
}

/// `N×P` distances from each row of `x` (`N×D`) to each row of `c` (`P×D`).
fn distances<F: Real>(x: &Var<F>, c: &Var<F>) -> Var<F> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let p = c.shape()[0];
    x.reshape(&[n, 1, d])
        .sub(&c.reshape(&[1, p, d]))
        .norm_last()
        .reshape(&[n, p])
}

/// Pull each sample to its identity's center in the other modality, and push
/// it at least `rho2` away from the centers of other identities.
pub fn icg_loss<F: Real>(batch: &EmbeddingBatch<F>, cfg: &LossConfig) -> Result<Var<F>> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "metric loss needs at least 2 samples, got {n}"
        )));
    }
    let centers = compute_centers(batch)?;
    let f = &batch.pooled;
    let c = |v: f64| F::from_f64(v).unwrap();

    let opposite: Vec<usize> = (0..n)
        .map(|i| {
            centers.group_of[i]
                + if batch.modalities[i] == Modality::Vis {
                    centers.identities.len()
                } else {
                    0
                }
        })
        .collect();
    let stacked = Var::concat(&[&centers.vis, &centers.ir], 0).select_rows(&opposite);
    let pull = f
        .sub(&stacked)
        .norm_last()
        .add_scalar(c(-cfg.rho1))
        .relu()
        .mean_all();

    // Summing over partners j groups them by identity, so each center is
    // weighted by how many partners share it.
    let p = centers.identities.len();
    let mut weights = Array2::<F>::zeros((n, p));
    for i in 0..n {
        for g in 0..p {
            let own = centers.group_of[i] == g;
            let k = match (own, cfg.push_same_identity) {
                (false, _) => centers.counts[g],
                (true, true) => centers.counts[g] - 1,
                (true, false) => 0,
            };
            weights[[i, g]] = c(k as f64);
        }
    }
    let hinge = distances(f, &centers.both)
        .neg()
        .add_scalar(c(cfg.rho2))
        .relu();
    let push = hinge
        .mul(&f.constant_like(weights.into_dyn()))
        .sum_all()
        .scale(c(2.0 / (n * (n + 1)) as f64));
    Ok(pull.add(&push))
}

/// Mean softmax cross-entropy of `N×P` logits.
pub fn id_loss<F: Real>(logits: &Var<F>, identities: &[usize]) -> Result<Var<F>> {
    if logits.ndim() != 2 || logits.shape()[0] != identities.len() || identities.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            identities.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&y) = identities.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    let mut onehot = ArrayD::<F>::zeros(IxDyn(logits.shape()));
    for (i, &y) in identities.iter().enumerate() {
        onehot[[i, y]] = F::one();
    }
    let n = F::from_usize(identities.len()).unwrap();
    Ok(logits
        .log_softmax()
        .mul(&logits.constant_like(onehot))
        .sum_all()
        .scale(-F::one() / n))
}

/// Batch-hard triplet loss on pooled features.
pub fn triplet_loss<F: Real>(
    features: &Var<F>,
    identities: &[usize],
    margin: f64,
) -> Result<Var<F>> {
    let n = identities.len();
    if features.ndim() != 2 || features.shape()[0] != n {
        return Err(Error::Shape(format!(
            "features {:?} for {n} labels",
            features.shape()
        )));
    }
    let has_both = (0..n).all(|i| {
        let pos = (0..n).any(|j| j != i && identities[j] == identities[i]);
        let neg = (0..n).any(|j| identities[j] != identities[i]);
        pos && neg
    });
    if !has_both {
        return Err(Error::InvalidInput(
            "every anchor needs a positive and a negative in the batch".into(),
        ));
    }
    let d = distances(features, features);
    let big = F::from_f64(1e6).unwrap();
    let mut pos_mask = ArrayD::<F>::zeros(IxDyn(&[n, n]));
    let mut neg_mask = ArrayD::<F>::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        for j in 0..n {
            if identities[i] == identities[j] {
                neg_mask[[i, j]] = -big;
            } else {
                pos_mask[[i, j]] = -big;
            }
        }
    }
    let hardest_pos = d.add(&d.constant_like(pos_mask)).max_axis(1);
    let hardest_neg = d.neg().add(&d.constant_like(neg_mask)).max_axis(1).neg();
    Ok(hardest_pos
        .sub(&hardest_neg)
        .add_scalar(F::from_f64(margin).unwrap())
        .relu()
        .mean_all())
}

/// `ce + lambda · metric`.
pub fn total_loss<F: Real>(ce: &Var<F>, metric: &Var<F>, cfg: &LossConfig) -> Var<F> {
    ce.add(&metric.scale(F::from_f64(cfg.lambda).unwrap()))
}

/// Scalar terms of one training step.
#[derive(Debug, Clone)]
pub struct LossTerms<F: Real> {
    pub ce: Var<F>,
    pub icg: Option<Var<F>>,
    pub triplet: Option<Var<F>>,
    pub total: Var<F>,
}

/// Cross-entropy plus whichever metric terms `cfg` enables, each weighted
/// by `lambda`.
pub fn objective<F: Real>(
    batch: &EmbeddingBatch<F>,
    logits: &Var<F>,
    cfg: &LossConfig,
) -> Result<LossTerms<F>> {
    cfg.validate()?;
    let ce = id_loss(logits, &batch.identities)?;
    let icg = cfg.use_icg.then(|| icg_loss(batch, cfg)).transpose()?;
    let triplet = cfg
        .use_triplet
        .then(|| triplet_loss(&batch.pooled, &batch.identities, cfg.triplet_margin))
        .transpose()?;
    let mut total = ce.clone();
    for m in icg.iter().chain(triplet.iter()) {
        total = total_loss(&total, m, cfg);
    }
    if !total.scalar().is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossTerms {
        ce,
        icg,
        triplet,
        total,
    })
}
