use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{LossKind, TrainConfig};
use super::eval::evaluate;
use super::train::train;
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::metrics::ProtocolConfig;

pub const ABLATION_CSV_HEADER: &str = "BASE,MPFR,SDCE,L_TRI,L_ICG,R1,mAP";

/// One component setting. The cascade only runs on top of the refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub mpfr_on: bool,
    #[serde(default)]
    pub sdce_on: bool,
    pub loss: LossKind,
}

impl AblationRow {
    pub fn sdce_active(&self) -> bool {
        self.mpfr_on && self.sdce_on
    }

    /// Position in the component table: modules first, then TRI before ICG.
    fn order_key(&self) -> (bool, bool, bool) {
        (self.mpfr_on, self.sdce_active(), self.loss == LossKind::Icg)
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            mpfr_on: self.mpfr_on,
            sdce_on: self.sdce_active(),
            loss: self.loss,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        let mut s = String::from("BASE");
        if self.mpfr_on {
            s.push_str("+MPFR");
        }
        if self.sdce_active() {
            s.push_str("+SDCE");
        }
        s.push_str(match self.loss {
            LossKind::Tri => "+L_TRI",
            LossKind::Icg => "+L_ICG",
        });
        s
    }
}

/// Settings to train, seeds to repeat them over, and optionally the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(rename = "row")]
    pub rows: Vec<AblationRow>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub query_manifest: Option<PathBuf>,
    #[serde(default)]
    pub gallery_manifest: Option<PathBuf>,
    #[serde(default)]
    pub protocol: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl AblationGrid {
    /// The six rows of the component table.
    pub fn component_table(seeds: Vec<u64>) -> Self {
        let mut rows = Vec::new();
        for (mpfr_on, sdce_on) in [(false, false), (true, false), (true, true)] {
            for loss in [LossKind::Tri, LossKind::Icg] {
                rows.push(AblationRow {
                    mpfr_on,
                    sdce_on,
                    loss,
                });
            }
        }
        Self {
            rows,
            seeds,
            train_manifest: None,
            query_manifest: None,
            gallery_manifest: None,
            protocol: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if g.rows.is_empty() || g.seeds.is_empty() {
            return Err(Error::Config(
                "an ablation grid needs rows and seeds".into(),
            ));
        }
        Ok(g)
    }

    /// Read a grid; relative data paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut g = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut g.train_manifest,
            &mut g.query_manifest,
            &mut g.gallery_manifest,
            &mut g.protocol,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    pub param_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub label: String,
    /// Medians over seeds.
    pub rank1: f64,
    pub map: f64,
    pub per_seed: Vec<SeedScore>,
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Train and evaluate every row for every seed, in component-table order.
/// `progress` sees each finished (row, seed).
pub fn ablate(
    base: &TrainConfig,
    grid: &AblationGrid,
    train_set: &Manifest,
    query: &Manifest,
    gallery: &Manifest,
    protocol: &ProtocolConfig,
    mut progress: impl FnMut(&AblationRow, &SeedScore),
) -> Result<Vec<AblationResult>> {
    let mut rows = grid.rows.clone();
    rows.sort_by_key(AblationRow::order_key);
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut per_seed = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            let cfg = TrainConfig {
                seed,
                ..row.apply(base)
            };
            let outcome = train(&cfg, train_set, None)?;
            let model = outcome.checkpoint.build_model()?;
            let report = evaluate(
                &model,
                query,
                gallery,
                protocol,
                (cfg.height, cfg.width),
                cfg.eval_batch,
                seed,
            )?;
            let score = SeedScore {
                seed,
                rank1: report.rank1(),
                map: report.map,
                param_hash: outcome.checkpoint.param_hash(),
            };
            progress(&row, &score);
            per_seed.push(score);
        }
        let r1: Vec<f64> = per_seed.iter().map(|s| s.rank1).collect();
        let maps: Vec<f64> = per_seed.iter().map(|s| s.map).collect();
        out.push(AblationResult {
            row,
            label: row.label(),
            rank1: median(&r1),
            map: median(&maps),
            per_seed,
        });
    }
    Ok(out)
}

/// One line per result under [`ABLATION_CSV_HEADER`]; switches as 1/0.
pub fn write_ablation_csv<W: Write>(results: &[AblationResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ABLATION_CSV_HEADER}")?;
    let b = |on: bool| if on { 1 } else { 0 };
    for r in results {
        writeln!(
            out,
            "1,{},{},{},{},{:.6},{:.6}",
            b(r.row.mpfr_on),
            b(r.row.sdce_active()),
            b(r.row.loss == LossKind::Tri),
            b(r.row.loss == LossKind::Icg),
            r.rank1,
            r.map
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_and_sorts_into_table_order() {
        let g = AblationGrid::from_toml(
            "seeds = [1, 2]\n\
             [[row]]\nmpfr_on = true\nsdce_on = true\nloss = \"ICG\"\n\
             [[row]]\nmpfr_on = false\nloss = \"TRI\"\n",
        )
        .unwrap();
        assert_eq!(g.seeds, vec![1, 2]);
        let mut rows = g.rows.clone();
        rows.sort_by_key(AblationRow::order_key);
        assert_eq!(rows[0].label(), "BASE+L_TRI");
        assert_eq!(rows[1].label(), "BASE+MPFR+SDCE+L_ICG");
        assert!(AblationGrid::from_toml("seeds = [1]\n").is_err());

        let table = AblationGrid::component_table(vec![0]);
        let mut sorted = table.rows.clone();
        sorted.sort_by_key(AblationRow::order_key);
        assert_eq!(sorted, table.rows);
        let labels: Vec<String> = table.rows.iter().map(AblationRow::label).collect();
        assert_eq!(
            labels,
            [
                "BASE+L_TRI",
                "BASE+L_ICG",
                "BASE+MPFR+L_TRI",
                "BASE+MPFR+L_ICG",
                "BASE+MPFR+SDCE+L_TRI",
                "BASE+MPFR+SDCE+L_ICG"
            ]
        );
    }

    #[test]
    fn cascade_without_refinement_collapses_to_baseline() {
        let row = AblationRow {
            mpfr_on: false,
            sdce_on: true,
            loss: LossKind::Icg,
        };
        let cfg = row.apply(&TrainConfig::default());
        assert!(!cfg.sdce_on && !cfg.mpfr_on);
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let results: Vec<AblationResult> = AblationGrid::component_table(vec![0])
            .rows
            .into_iter()
            .take(2)
            .map(|row| AblationResult {
                row,
                label: row.label(),
                rank1: 0.5,
                map: 0.25,
                per_seed: Vec::new(),
            })
            .collect();
        let mut buf = Vec::new();
        write_ablation_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], ABLATION_CSV_HEADER);
        assert_eq!(lines[1], "1,0,0,1,0,0.500000,0.250000");
        assert_eq!(lines[2], "1,0,0,0,1,0.500000,0.250000");
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
