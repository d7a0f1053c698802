//! Cross-product ablations over context variant, group count and training
//! data, evaluated per user with each user's own clustering.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{cluster_personal, run_two_stage, RunConfig};
use crate::context::ContextVariant;
use crate::data::{generate_synthetic, merge_datasets, sample_dataset, PersonalDataset, SourceDataset};
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::metrics::{merge_reports, render_ablation_table, EvalReport};
use crate::training::MetricsLog;

/// Which target images a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// One model per user on that user's images.
    Personal,
    /// One model on all users' images merged.
    MixAll,
    /// One model on a 1/U sample of the merged images.
    MixSample,
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "personal" => Ok(Self::Personal),
            "mixall" | "mix-all" => Ok(Self::MixAll),
            "mixsample" | "mix-sample" => Ok(Self::MixSample),
            _ => Err(Error::invalid(format!("unknown data mode `{s}`"))),
        }
    }
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Personal => "Personal",
            Self::MixAll => "MixAll",
            Self::MixSample => "MixSample",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub variants: Vec<ContextVariant>,
    #[serde(rename = "K")]
    pub ks: Vec<usize>,
    pub modes: Vec<DataMode>,
    pub seeds: Vec<u64>,
    /// Synthetic users; user `u` is generated with seed `seed + u`.
    pub users: usize,
    pub with_step2: bool,
    pub base: RunConfig,
}

impl AblationMatrix {
    /// The context-variant ablation with the base settings.
    pub fn variants(base: RunConfig, seeds: Vec<u64>) -> Self {
        Self {
            variants: vec![ContextVariant::None, ContextVariant::Global, ContextVariant::Group],
            ks: vec![base.grouping.k],
            modes: vec![DataMode::Personal],
            seeds,
            users: 1,
            with_step2: false,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("variants", self.variants.is_empty()),
            ("K", self.ks.is_empty()),
            ("modes", self.modes.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::invalid(format!("ablation axis `{name}` is empty")));
            }
        }
        if self.users == 0 {
            return Err(Error::invalid("ablation needs at least one user"));
        }
        if self.ks.contains(&0) {
            return Err(Error::invalid("K must be at least 1"));
        }
        self.base.validate()
    }

    pub fn cells(&self) -> usize {
        self.variants.len() * self.ks.len() * self.modes.len() * self.seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: ContextVariant,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: DataMode,
    pub seed: u64,
    pub step1: EvalReport,
    pub step2: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub matrix: AblationMatrix,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Rows for one setting, in seed order.
    pub fn select(&self, variant: ContextVariant, k: usize, mode: DataMode) -> Vec<&AblationRow> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.k == k && r.mode == mode)
            .collect()
    }

    /// One table row per setting (varying axes in the label), FIoU/MIoU
    /// averaged over seeds followed by per-seed FIoU. Step-2 results get
    /// their own `-S2` rows.
    pub fn render(&self) -> String {
        let m = &self.matrix;
        let mut axes = Vec::new();
        if m.variants.len() > 1 || (m.ks.len() == 1 && m.modes.len() == 1) {
            axes.push("Context");
        }
        if m.ks.len() > 1 {
            axes.push("Groups");
        }
        if m.modes.len() > 1 {
            axes.push("Data");
        }
        let mut rows: Vec<(String, Vec<&EvalReport>)> = Vec::new();
        for &mode in &m.modes {
            for &k in &m.ks {
                for &variant in &m.variants {
                    let mut parts = Vec::new();
                    if axes.contains(&"Context") {
                        parts.push(variant_label(variant).to_string());
                    }
                    if axes.contains(&"Groups") {
                        parts.push(format!("Groups={k}"));
                    }
                    if axes.contains(&"Data") {
                        parts.push(mode.to_string());
                    }
                    let label = parts.join(" ");
                    let cells = self.select(variant, k, mode);
                    rows.push((format!("{label}-S1"), cells.iter().map(|r| &r.step1).collect()));
                    if m.with_step2 {
                        rows.push((
                            format!("{label}-S2"),
                            cells.iter().filter_map(|r| r.step2.as_ref()).collect(),
                        ));
                    }
                }
            }
        }
        render_ablation_table(&axes.join("/"), &rows)
    }
}

fn variant_label(v: ContextVariant) -> &'static str {
    match v {
        ContextVariant::None => "None",
        ContextVariant::Global => "Global",
        ContextVariant::Group => "Group",
    }
}

/// Synthetic source set plus one personal collection per user.
pub fn synth_users(base: &RunConfig, seed: u64, users: usize) -> Result<(SourceDataset, Vec<PersonalDataset>)> {
    let mut source = None;
    let mut personal = Vec::with_capacity(users);
    for u in 0..users {
        let mut spec = base.data.synth.clone();
        spec.seed = seed.wrapping_add(u as u64);
        if users > 1 {
            spec.user = format!("user{u:02}");
        }
        let out = generate_synthetic(&spec)?;
        if source.is_none() {
            source = Some(out.source);
        }
        personal.push(out.personal);
    }
    Ok((source.expect("at least one user"), personal))
}

fn cell_name(variant: ContextVariant, k: usize, mode: DataMode, seed: u64) -> String {
    format!("{variant}_k{k}_{}_s{seed}", mode.to_string().to_ascii_lowercase())
}

/// Runs every cell of the matrix. With `out`, the matrix, per-cell metric
/// logs, `results.json` and `table.txt` are written there; an output
/// directory holding a different matrix is an error.
pub fn run_ablation(matrix: &AblationMatrix, out: Option<&Path>) -> Result<AblationResult> {
    matrix.validate()?;
    if let Some(dir) = out {
        let path = dir.join("matrix.json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let stored: AblationMatrix = serde_json::from_str(&text)?;
            if &stored != matrix {
                return Err(Error::invalid(format!(
                    "output directory {} holds a different ablation",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, serde_json::to_string_pretty(matrix)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    let mut rows = Vec::with_capacity(matrix.cells());
    for &seed in &matrix.seeds {
        let base = matrix.base.clone().with_seed(seed);
        let (source, users) = synth_users(&base, seed, matrix.users)?;
        for &k in &matrix.ks {
            let mut grouping = base.grouping.clone();
            grouping.k = k;
            let own_groups = users
                .iter()
                .map(|u| cluster_personal(u, &grouping, base.cluster_seed(), None))
                .collect::<Result<Vec<_>>>()?;
            let eval_sets: Vec<(&PersonalDataset, &GroupAssignment)> = users.iter().zip(&own_groups).collect();
            for &mode in &matrix.modes {
                let mixed = match mode {
                    DataMode::Personal => None,
                    DataMode::MixAll => Some(merge_datasets(&users)?),
                    DataMode::MixSample => Some(sample_dataset(
                        &merge_datasets(&users)?,
                        1.0 / users.len() as f64,
                        base.seed,
                    )?),
                };
                let mixed_groups = match &mixed {
                    Some(m) => Some(cluster_personal(m, &grouping, base.cluster_seed(), None)?),
                    None => None,
                };
                for &variant in &matrix.variants {
                    let mut config = base.clone();
                    config.grouping = grouping.clone();
                    config.model.variant = variant;
                    let name = cell_name(variant, k, mode, seed);
                    log::info!("ablation cell {name}");
                    let mut log = match out {
                        Some(dir) => {
                            let cell = dir.join("cells").join(&name);
                            fs::create_dir_all(&cell).map_err(|e| Error::io(&cell, e))?;
                            let path = cell.join("metrics.jsonl");
                            fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
                            MetricsLog::append_to(&path)?
                        }
                        None => MetricsLog::in_memory(),
                    };
                    let (step1, step2) = match (&mixed, &mixed_groups) {
                        (Some(m), Some(g)) => {
                            let o = run_two_stage(&config, &source, m, g, &eval_sets, matrix.with_step2, &mut log)?;
                            (o.step1, o.step2)
                        }
                        _ => {
                            let mut s1 = Vec::new();
                            let mut s2 = Vec::new();
                            for (u, g) in &eval_sets {
                                let o = run_two_stage(&config, &source, u, g, &[(*u, *g)], matrix.with_step2, &mut log)?;
                                s1.push(o.step1);
                                s2.extend(o.step2);
                            }
                            let s2 = if s2.is_empty() { None } else { Some(merge_reports(s2)?) };
                            (merge_reports(s1)?, s2)
                        }
                    };
                    rows.push(AblationRow {
                        variant,
                        k,
                        mode,
                        seed,
                        step1,
                        step2,
                    });
                }
            }
        }
    }
    let result = AblationResult {
        matrix: matrix.clone(),
        rows,
    };
    if let Some(dir) = out {
        let path = dir.join("results.json");
        fs::write(&path, serde_json::to_string_pretty(&result)? + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join("table.txt");
        fs::write(&path, result.render()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}
