use super::train::{evaluate, train, TrainConfig, TrainTrace};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub config_name: String,
    /// `None` on the per-config median rows.
    pub seed: Option<u64>,
    pub accuracy: f64,
    pub wprecision: f64,
    pub wrecall: f64,
    pub wf1: f64,
    pub recall_per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Per-seed rows in config order, each config followed by its median row.
    pub rows: Vec<ComparisonRow>,
    pub traces: Vec<(String, u64, TrainTrace)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Comparison {
    pub fn seed_rows<'a>(&'a self, config_name: &'a str) -> impl Iterator<Item = &'a ComparisonRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.config_name == config_name && r.seed.is_some())
    }

    pub fn median_row(&self, config_name: &str) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.config_name == config_name && r.seed.is_none())
    }

    /// `config_name,seed,accuracy,wprecision,wrecall,wf1,recall_class_0..`
    pub fn to_csv(&self) -> String {
        let classes = self.rows.first().map_or(0, |r| r.recall_per_class.len());
        let mut out = String::from("config_name,seed,accuracy,wprecision,wrecall,wf1");
        for c in 0..classes {
            out.push_str(&format!(",recall_class_{c}"));
        }
        out.push('\n');
        for r in &self.rows {
            let seed = r.seed.map_or("median".to_string(), |s| s.to_string());
            out.push_str(&format!(
                "{},{seed},{:e},{:e},{:e},{:e}",
                r.config_name, r.accuracy, r.wprecision, r.wrecall, r.wf1
            ));
            for v in &r.recall_per_class {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every config once per seed on the same split and scores the test partition.
pub fn compare_experiments(configs: &[TrainConfig], split: &DatasetSplit, seeds: &[u64]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::invalid("a comparison needs at least two configs"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for config in configs {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let (checkpoint, trace) = train(&cfg, split)?;
            let eval = evaluate(&checkpoint, &split.test)?;
            let r = &eval.report;
            per_seed.push(ComparisonRow {
                config_name: config.name.clone(),
                seed: Some(seed),
                accuracy: r.accuracy,
                wprecision: r.wprecision,
                wrecall: r.wrecall,
                wf1: r.wf1,
                recall_per_class: r.per_class.iter().map(|c| c.recall).collect(),
            });
            traces.push((config.name.clone(), seed, trace));
        }
        let col = |f: &dyn Fn(&ComparisonRow) -> f64| median(&per_seed.iter().map(f).collect::<Vec<_>>());
        let classes = per_seed[0].recall_per_class.len();
        let median_row = ComparisonRow {
            config_name: config.name.clone(),
            seed: None,
            accuracy: col(&|r| r.accuracy),
            wprecision: col(&|r| r.wprecision),
            wrecall: col(&|r| r.wrecall),
            wf1: col(&|r| r.wf1),
            recall_per_class: (0..classes).map(|c| col(&|r| r.recall_per_class[c])).collect(),
        };
        rows.extend(per_seed);
        rows.push(median_row);
    }
    Ok(Comparison { rows, traces })
}
