//! Run directories: every command reads and writes under one root.
//!
//! ```text
//! <root>/config.json            effective configuration, written first
//! <root>/data/{source,personal} synthetic data (when no dataset paths are configured)
//! <root>/groups.json
//! <root>/ckpt_step1.safetensors
//! <root>/pseudo/
//! <root>/ckpt_step2.safetensors
//! <root>/metrics.jsonl
//! <root>/report.json            evaluation reports keyed by stage tag
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{cluster_personal, evaluate_users, RunConfig};
use crate::data::{
    generate_synthetic, load_dataset, merge_datasets, write_dataset, Dataset, DatasetSpec, PersonalDataset,
    SourceDataset,
};
use crate::error::{Error, Result};
use crate::grouping::GroupAssignment;
use crate::metrics::{dump_confusions, render_class_table, render_user_table, EvalReport, Metric};
use crate::networks::{load_checkpoint, save_checkpoint, CheckpointMeta, Discriminator, SegModel};
use crate::training::{select_pseudo_labels, train_stage, MetricsLog, PseudoLabelSet, Stage, StageData, StageOptions, StageSummary};

pub const CONFIG_FILE: &str = "config.json";
pub const GROUPS_FILE: &str = "groups.json";
pub const CKPT_STEP1: &str = "ckpt_step1.safetensors";
pub const CKPT_STEP2: &str = "ckpt_step2.safetensors";
pub const CKPT_ABORT: &str = "ckpt_abort.safetensors";
pub const PSEUDO_DIR: &str = "pseudo";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
    config_text: String,
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl RunDir {
    /// Creates the directory and writes `config.json`. An existing directory
    /// is reused only when its stored configuration equals `config`.
    pub fn create(root: impl AsRef<Path>, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let root = root.as_ref().to_path_buf();
        let path = root.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(config)? + "\n";
        if path.exists() {
            let stored: RunConfig = serde_json::from_str(&read_text(&path)?)?;
            if &stored != config {
                return Err(Error::invalid(format!(
                    "run directory {} already holds a different configuration",
                    root.display()
                )));
            }
            return Self::open(root);
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        write_text(&path, &text)?;
        Ok(Self {
            root,
            config: config.clone(),
            config_text: text,
        })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = read_text(&root.join(CONFIG_FILE))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(Self {
            root,
            config,
            config_text: text,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth_root(&self) -> PathBuf {
        self.root.join("data")
    }

    fn source_root(&self) -> PathBuf {
        self.config
            .data
            .source
            .clone()
            .unwrap_or_else(|| self.synth_root().join("source"))
    }

    fn personal_roots(&self) -> Vec<PathBuf> {
        if self.config.data.personal.is_empty() {
            vec![self.synth_root().join("personal")]
        } else {
            self.config.data.personal.clone()
        }
    }

    /// Writes the synthetic fixture of the configuration under `data/`.
    pub fn synth_data(&self) -> Result<()> {
        let out = generate_synthetic(&self.config.data.synth)?;
        let root = self.synth_root();
        write_dataset(&root.join("source"), &Dataset::Source(out.source))?;
        write_dataset(&root.join("personal"), &Dataset::Personal(out.personal))?;
        log::info!("synthetic data written to {}", root.display());
        Ok(())
    }

    pub fn load_source(&self) -> Result<SourceDataset> {
        load_dataset(&DatasetSpec::open(self.source_root())?)?.into_source()
    }

    /// The personal collection; several roots are merged.
    pub fn load_personal(&self) -> Result<PersonalDataset> {
        let sets = self
            .personal_roots()
            .iter()
            .map(|r| load_dataset(&DatasetSpec::open(r)?)?.into_personal())
            .collect::<Result<Vec<_>>>()?;
        if sets.len() == 1 {
            Ok(sets.into_iter().next().expect("one dataset"))
        } else {
            merge_datasets(&sets)
        }
    }

    pub fn cluster(&self) -> Result<GroupAssignment> {
        let personal = self.load_personal()?;
        let (model, _) = self.config.build_networks()?;
        let groups = cluster_personal(&personal, &self.config.grouping, self.config.cluster_seed(), Some(&model))?;
        groups.save(&self.path(GROUPS_FILE))?;
        Ok(groups)
    }

    pub fn load_groups(&self) -> Result<GroupAssignment> {
        let path = self.path(GROUPS_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        GroupAssignment::load(&path)
    }

    /// Networks restored from a checkpoint of this run.
    pub fn load_networks(&self, checkpoint: &str) -> Result<(SegModel, Discriminator)> {
        let (model, disc) = self.config.build_networks()?;
        let ckpt = load_checkpoint(&self.path(checkpoint))?;
        ckpt.restore(&model, Some(&disc))?;
        Ok((model, disc))
    }

    /// Metric log for `stage`: earlier stages' lines are kept, this stage's
    /// and later ones dropped, so reruns do not duplicate records.
    fn stage_log(&self, stage: Stage) -> Result<MetricsLog> {
        let path = self.path(METRICS_FILE);
        let keep: &[&str] = match stage {
            Stage::Step1 => &[],
            Stage::Step2 => &[Stage::Step1.name()],
        };
        let mut kept = String::new();
        if path.exists() {
            for line in read_text(&path)?.lines() {
                let v: serde_json::Value = serde_json::from_str(line)?;
                if keep.contains(&v["stage"].as_str().unwrap_or_default()) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        write_text(&path, &kept)?;
        MetricsLog::append_to(&path)
    }

    fn train(
        &self,
        model: &SegModel,
        disc: &Discriminator,
        stage: Stage,
        pseudo: Option<&PseudoLabelSet>,
    ) -> Result<StageSummary> {
        let source = self.load_source()?;
        let personal = self.load_personal()?;
        let groups = self.load_groups()?;
        let t = &self.config.train;
        let (start_step, steps, ckpt) = match stage {
            Stage::Step1 => (0, t.steps_step1, CKPT_STEP1),
            Stage::Step2 => (t.steps_step1, t.steps_step2, CKPT_STEP2),
        };
        let data = StageData {
            source: &source,
            personal: &personal,
            groups: &groups,
            pseudo,
        };
        let options = StageOptions {
            start_step,
            steps,
            abort_checkpoint: Some(self.path(CKPT_ABORT)),
            config_json: self.config_text.clone(),
        };
        let mut log = self.stage_log(stage)?;
        let summary = train_stage(model, disc, &data, t, stage, &options, &mut log)?;
        let meta = CheckpointMeta {
            config: self.config_text.clone(),
            step: (start_step + steps) as u64,
            stage: stage.name().into(),
        };
        save_checkpoint(&self.path(ckpt), model, Some(disc), &meta)?;
        Ok(summary)
    }

    pub fn train_step1(&self) -> Result<StageSummary> {
        let (model, disc) = self.config.build_networks()?;
        self.train(&model, &disc, Stage::Step1, None)
    }

    pub fn select_pseudo(&self) -> Result<PseudoLabelSet> {
        let personal = self.load_personal()?;
        let groups = self.load_groups()?;
        let (model, _) = self.load_networks(CKPT_STEP1)?;
        let t = &self.config.train;
        let set = select_pseudo_labels(
            &model,
            &personal,
            &groups,
            t.select_rate,
            t.pixel_quantile,
            t.eval_batch_size,
            t.crop,
        )?;
        let dir = self.path(PSEUDO_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        set.save(&dir)?;
        Ok(set)
    }

    pub fn train_step2(&self) -> Result<StageSummary> {
        let pseudo = PseudoLabelSet::load(&self.path(PSEUDO_DIR))?;
        let (model, disc) = self.load_networks(CKPT_STEP1)?;
        self.train(&model, &disc, Stage::Step2, Some(&pseudo))
    }

    /// Evaluates the checkpoint of `stage` (default: the latest one present)
    /// on every user's labeled split and records it in `report.json` under
    /// the stage tag.
    pub fn eval(&self, stage: Option<Stage>) -> Result<(String, EvalReport)> {
        let stage = match stage {
            Some(s) => s,
            None if self.path(CKPT_STEP2).exists() => Stage::Step2,
            None => Stage::Step1,
        };
        let ckpt = match stage {
            Stage::Step1 => CKPT_STEP1,
            Stage::Step2 => CKPT_STEP2,
        };
        let personal = self.load_personal()?;
        let groups = self.load_groups()?;
        let (model, _) = self.load_networks(ckpt)?;
        let users: Vec<PersonalDataset> = personal.users().iter().map(|u| personal.filter_user(u)).collect();
        let sets: Vec<(&PersonalDataset, &GroupAssignment)> = users.iter().map(|u| (u, &groups)).collect();
        let report = evaluate_users(&model, &sets, &self.config.train)?;
        let tag = stage.name().to_string();

        let path = self.path(REPORT_FILE);
        let mut reports: BTreeMap<String, EvalReport> = if path.exists() {
            serde_json::from_str(&read_text(&path)?)?
        } else {
            BTreeMap::new()
        };
        reports.insert(tag.clone(), report.clone());
        write_text(&path, &(serde_json::to_string_pretty(&reports)? + "\n"))?;

        let rows: Vec<(&str, &EvalReport)> = reports.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let mut text = String::new();
        text.push_str(&render_user_table(&rows, Metric::Fiou));
        text.push('\n');
        text.push_str(&render_user_table(&rows, Metric::Miou));
        for (k, r) in &reports {
            text.push_str(&format!("\n{k}\n"));
            text.push_str(&render_class_table(r, None));
        }
        write_text(&self.path("report.txt"), &text)?;
        for (user, csv) in dump_confusions(&report) {
            let p = self.path(&format!("confusion_{tag}_{user}.csv"));
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            f.write_all(csv.as_bytes()).map_err(|e| Error::io(&p, e))?;
        }
        Ok((tag, report))
    }

    pub fn reports(&self) -> Result<BTreeMap<String, EvalReport>> {
        Ok(serde_json::from_str(&read_text(&self.path(REPORT_FILE))?)?)
    }

    /// Every command in order.
    pub fn run_all(&self) -> Result<BTreeMap<String, EvalReport>> {
        if self.config.data.source.is_none() || self.config.data.personal.is_empty() {
            self.synth_data()?;
        }
        self.cluster()?;
        self.train_step1()?;
        self.eval(Some(Stage::Step1))?;
        if self.config.train.steps_step2 > 0 {
            self.select_pseudo()?;
            self.train_step2()?;
            self.eval(Some(Stage::Step2))?;
        }
        self.reports()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::desk();
        c.data.synth.n_source = 16;
        c.data.synth.n_personal = 16;
        c.data.synth.image_size = 32;
        c.train.crop = 32;
        c.train.batch_size = 4;
        c.train.eval_batch_size = 4;
        c.train.steps_step1 = 2;
        c.train.steps_step2 = 2;
        c
    }

    #[test]
    fn conflicting_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        RunDir::create(dir.path(), &c).unwrap();
        RunDir::create(dir.path(), &c).unwrap();
        let other = c.clone().with_seed(5);
        assert!(RunDir::create(dir.path(), &other).is_err());
    }

    #[test]
    fn missing_upstream_artifacts_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), &tiny()).unwrap();
        run.synth_data().unwrap();
        match run.train_step1() {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with(GROUPS_FILE)),
            other => panic!("unexpected {other:?}"),
        }
        run.cluster().unwrap();
        match run.train_step2() {
            Err(Error::MissingArtifact(p)) => assert!(p.starts_with(run.path(PSEUDO_DIR))),
            other => panic!("unexpected {other:?}"),
        }
        match run.select_pseudo() {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with(CKPT_STEP1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn whole_pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), &tiny()).unwrap();
        let reports = run.run_all().unwrap();
        assert_eq!(reports.keys().cloned().collect::<Vec<_>>(), vec!["step1", "step2"]);
        for f in [CONFIG_FILE, GROUPS_FILE, CKPT_STEP1, CKPT_STEP2, METRICS_FILE, REPORT_FILE, "report.txt"] {
            assert!(run.path(f).exists(), "{f}");
        }
        assert!(run.path(PSEUDO_DIR).join("ranking.json").exists());
        // rerunning step 2 replaces its records instead of appending
        let before = read_text(&run.path(METRICS_FILE)).unwrap();
        run.train_step2().unwrap();
        assert_eq!(read_text(&run.path(METRICS_FILE)).unwrap(), before);
    }
}
