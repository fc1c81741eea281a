use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::mean_std;
use super::run::train;
use crate::error::{Error, Result};

/// One named configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    /// The run config; its `seed` is replaced by each grid seed.
    pub config: RunConfig,
}

/// Variants crossed with seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

/// Grid file layout:
///
/// ```toml
/// base = "desk.toml"     # optional run config, relative to the grid file
/// seeds = [0, 1, 2]      # default [0, 1, 2]
///
/// [common]               # optional overrides applied to every variant
/// total_steps = 20000
///
/// [[variant]]
/// name = "spowl"         # required, unique; letters, digits, '-', '_', '.'
/// mode = "spowl"
///
/// [[variant]]
/// name = "cce-global-tight"
/// mode = "cce-global"
/// planner = { d_plan = 0.5 }
/// ```
///
/// Tables are merged key by key (variant over common over base); the result
/// must be a valid run config.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    base: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    common: toml::Table,
    variant: Vec<toml::Table>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn merge(into: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

impl AblationGrid {
    /// Parses grid text; `base` paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let file: GridFile = toml::from_str(text)?;
        let mut base = match &file.base {
            Some(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::config(format!("cannot read base config {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text)?
            }
            None => toml::Table::new(),
        };
        merge(&mut base, &file.common);
        if file.seeds.is_empty() {
            return Err(Error::config("ablation grid needs at least one seed"));
        }
        if file.variant.is_empty() {
            return Err(Error::config("ablation grid needs at least one [[variant]]"));
        }
        let mut names = HashSet::new();
        let mut variants = Vec::new();
        for mut table in file.variant {
            let name = match table.remove("name") {
                Some(toml::Value::String(s)) => s,
                _ => return Err(Error::config("every [[variant]] needs a string `name`")),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(Error::config(format!("variant name {name:?} may only use letters, digits, '-', '_' and '.'")));
            }
            if !names.insert(name.clone()) {
                return Err(Error::config(format!("duplicate variant name {name:?}")));
            }
            if table.contains_key("seed") {
                return Err(Error::config(format!("variant {name:?} sets `seed`; use the grid's `seeds` list")));
            }
            let mut merged = base.clone();
            merge(&mut merged, &table);
            let config: RunConfig = toml::Value::Table(merged)
                .try_into()
                .map_err(|e| Error::config(format!("variant {name:?}: {e}")))?;
            config.validate().map_err(|e| Error::config(format!("variant {name:?}: {e}")))?;
            variants.push(Variant { name, config });
        }
        Ok(Self { seeds: file.seeds, variants })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Outcome of one (variant, seed) run, measured by its closing evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub final_return: f64,
    pub final_cost: f64,
    pub final_cost_rate: f64,
    pub balance: Option<f64>,
    /// Cumulative training cost divided by training steps.
    pub train_cost_rate: f64,
}

/// Mean and standard deviation over seeds for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub seeds: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub cost_rate_mean: f64,
    pub cost_rate_std: f64,
    pub balance_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn runs_for(&self, variant: &str) -> Vec<&AblationRun> {
        self.runs.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn summary_for(&self, variant: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation_summary.csv";

fn summarize(variant: &str, runs: &[&AblationRun]) -> AblationSummary {
    let col = |f: fn(&AblationRun) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (return_mean, return_std) = mean_std(&col(|r| r.final_return));
    let (cost_mean, cost_std) = mean_std(&col(|r| r.final_cost));
    let (cost_rate_mean, cost_rate_std) = mean_std(&col(|r| r.final_cost_rate));
    let balances: Vec<f64> = runs.iter().filter_map(|r| r.balance).collect();
    AblationSummary {
        variant: variant.to_string(),
        seeds: runs.len(),
        return_mean,
        return_std,
        cost_mean,
        cost_std,
        cost_rate_mean,
        cost_rate_std,
        balance_mean: (!balances.is_empty()).then(|| mean_std(&balances).0),
    }
}

/// Trains every variant under every seed into `out_dir/<variant>/seed-<n>`
/// and writes `ablation_runs.csv` (one row per run) and
/// `ablation_summary.csv` (one row per variant) into `out_dir`.
pub fn run_ablation(grid: &AblationGrid, out_dir: &Path) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for v in &grid.variants {
        for &seed in &grid.seeds {
            let cfg = RunConfig { seed, ..v.config.clone() };
            let dir = out_dir.join(&v.name).join(format!("seed-{seed}"));
            log::info!("ablation run {} seed {seed}", v.name);
            let s = train(&cfg, &dir)?;
            runs.push(AblationRun {
                variant: v.name.clone(),
                seed,
                final_return: s.final_eval.return_mean,
                final_cost: s.final_eval.cost_mean,
                final_cost_rate: s.final_eval.cost_rate_mean,
                balance: s.final_eval.balance_mean,
                train_cost_rate: s.cost_rate,
            });
        }
    }
    let summary: Vec<AblationSummary> = grid
        .variants
        .iter()
        .map(|v| summarize(&v.name, &runs.iter().filter(|r| r.variant == v.name).collect::<Vec<_>>()))
        .collect();
    let mut w = csv::Writer::from_path(out_dir.join(RUNS_FILE))?;
    for r in &runs {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    for s in &summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(AblationReport { runs, summary })
}

/// [`AblationGrid::load`] followed by [`run_ablation`].
pub fn ablate(grid_path: &Path, out_dir: &Path) -> Result<AblationReport> {
    run_ablation(&AblationGrid::load(grid_path)?, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Mode;

    #[test]
    fn variants_merge_over_common_and_base() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "total_steps = 50\n[planner]\nsamples = 32\nd_plan = 2.0\n").unwrap();
        let text = r#"
base = "base.toml"
seeds = [4]
[common]
batch_size = 8
[[variant]]
name = "a"
[[variant]]
name = "b"
mode = "cce-global"
planner = { d_plan = 0.5 }
"#;
        let g = AblationGrid::from_toml_str(text, dir.path()).unwrap();
        assert_eq!(g.seeds, vec![4]);
        let (a, b) = (&g.variants[0].config, &g.variants[1].config);
        assert_eq!((a.total_steps, a.batch_size, a.planner.samples, a.planner.d_plan), (50, 8, 32, 2.0));
        assert_eq!((b.mode, b.planner.samples, b.planner.d_plan), (Mode::CceGlobal, 32, 0.5));
    }

    #[test]
    fn bad_grids_are_config_errors() {
        let dir = Path::new(".");
        for text in [
            "seeds = [0]",
            "[[variant]]\nmode = \"spowl\"",
            "[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"",
            "[[variant]]\nname = \"a/b\"",
            "[[variant]]\nname = \"a\"\nseed = 3",
            "[[variant]]\nname = \"a\"\nbogus = 1",
            "seeds = []\n[[variant]]\nname = \"a\"",
            "extra = 1\n[[variant]]\nname = \"a\"",
        ] {
            assert!(AblationGrid::from_toml_str(text, dir).is_err(), "{text}");
        }
    }
}
