//! Artifact layout inside an experiment directory, plus the instance
//! archive format shared by make-instances, plan, and validate.

use std::fs;
use std::path::{Path, PathBuf};

use pixplan::domains::PlanningInstance;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const INSTANCES_FORMAT: &str = "pixplan-instances-v1";

/// Planning instances with their images as stored (noise included), keyed
/// by stable ids of the form `g03-i07`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceArchive {
    pub format: String,
    pub entries: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: String,
    pub g: usize,
    pub instance: PlanningInstance,
}

/// Path schema for one experiment directory. Stages add artifacts here and
/// never rewrite what an earlier stage produced, so re-running a stage
/// reproduces its own files byte for byte (wall-clock timings excepted).
#[derive(Debug, Clone)]
pub struct ExperimentDir {
    root: PathBuf,
}

impl ExperimentDir {
    pub fn new(root: &Path) -> ExperimentDir {
        ExperimentDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.tsv")
    }

    /// First-phase log when the model trains a state autoencoder before
    /// its action heads.
    pub fn sae_train_log(&self) -> PathBuf {
        self.root.join("sae_train_log.tsv")
    }

    pub fn domain_pddl(&self) -> PathBuf {
        self.root.join("domain.pddl")
    }

    pub fn extraction_report(&self) -> PathBuf {
        self.root.join("extraction_report.tsv")
    }

    pub fn pddl_stats(&self) -> PathBuf {
        self.root.join("pddl_stats.json")
    }

    pub fn instances(&self) -> PathBuf {
        self.root.join("instances.json")
    }

    pub fn plans_dir(&self) -> PathBuf {
        self.root.join("plans")
    }

    pub fn problem_file(&self, id: &str) -> PathBuf {
        self.plans_dir().join(format!("{id}.pddl"))
    }

    pub fn plan_file(&self, id: &str) -> PathBuf {
        self.plans_dir().join(format!("{id}.plan"))
    }

    pub fn planner_log(&self, id: &str) -> PathBuf {
        self.plans_dir().join(format!("{id}.log"))
    }

    pub fn plan_stats(&self) -> PathBuf {
        self.plans_dir().join("stats.tsv")
    }

    pub fn plan_timings(&self) -> PathBuf {
        self.plans_dir().join("timings.tsv")
    }

    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.tsv")
    }

    pub fn vis_dir(&self, id: &str) -> PathBuf {
        self.root.join("vis").join(id)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn metrics(&self) -> PathBuf {
        self.report_dir().join("metrics.tsv")
    }

    pub fn train_curve_plot(&self) -> PathBuf {
        self.report_dir().join("train_total.png")
    }

    pub fn length_plot(&self) -> PathBuf {
        self.report_dir().join("plan_length_vs_g.png")
    }

    /// The artifact if it exists, otherwise an error naming the command
    /// that produces it.
    pub fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Missing {
                artifact: path.display().to_string(),
                producer: producer.to_string(),
            })
        }
    }
}

pub fn read_instances(dir: &ExperimentDir) -> Result<InstanceArchive, CliError> {
    let path = dir.require(dir.instances(), "make-instances")?;
    let text = fs::read_to_string(&path)?;
    let a: InstanceArchive = serde_json::from_str(&text)?;
    if a.format != INSTANCES_FORMAT {
        return Err(CliError::Config(format!(
            "{} has instance format {:?}, this build reads {:?}",
            path.display(),
            a.format,
            INSTANCES_FORMAT
        )));
    }
    Ok(a)
}

pub fn write_instances(dir: &ExperimentDir, archive: &InstanceArchive) -> Result<(), CliError> {
    let mut text = serde_json::to_string(archive)?;
    text.push('\n');
    fs::write(dir.instances(), text)?;
    Ok(())
}

/// Write a TSV table: header row, data rows, trailing newline.
pub fn write_tsv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Read a TSV produced by this pipeline back as a header row plus data
/// rows, all as text.
pub fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().unwrap_or("").split('\t').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = ExperimentDir::new(Path::new("/nonexistent"));
        let err = dir.require(dir.checkpoint(), "train").unwrap_err().to_string();
        assert!(err.contains("checkpoint.json"), "unexpected message: {err}");
        assert!(err.contains("pixplan train"), "unexpected message: {err}");
    }

    #[test]
    fn tsv_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.tsv");
        write_tsv(&path, "a\tb", &["1\t2".to_string(), "3\t".to_string()]).unwrap();
        let (header, rows) = read_tsv(&path).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1", "2"], vec!["3", ""]]);
    }
}
