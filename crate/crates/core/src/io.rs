//! File formats: MDPs as JSON, configs as TOML, metrics as JSON lines.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{Checkpoint, DualAcConfig, IterationRecord, RecordSink, RunMetadata};
use crate::error::{Error, Result};
use crate::estimators::Trajectory;
use crate::mdp::TabularMdp;

/// Nested-array form of a tabular MDP: `reward[s][a]`, `transition[s][a][s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward: Vec<Vec<f64>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub mu: Vec<f64>,
}

impl MdpFile {
    pub fn from_mdp(mdp: &TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        Self {
            n_states: ns,
            n_actions: na,
            gamma: mdp.gamma(),
            reward: (0..ns)
                .map(|s| (0..na).map(|a| mdp.reward(s, a)).collect())
                .collect(),
            transition: (0..ns)
                .map(|s| (0..na).map(|a| mdp.next_dist(s, a).to_vec()).collect())
                .collect(),
            mu: mdp.mu().to_vec(),
        }
    }

    pub fn to_mdp(&self) -> Result<TabularMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        let shape_err = || Error::Parse(format!("arrays do not match {ns} states x {na} actions"));
        if self.reward.len() != ns || self.reward.iter().any(|r| r.len() != na) {
            return Err(shape_err());
        }
        if self.transition.len() != ns
            || self
                .transition
                .iter()
                .any(|r| r.len() != na || r.iter().any(|p| p.len() != ns))
        {
            return Err(shape_err());
        }
        TabularMdp::new(
            ns,
            na,
            self.transition.iter().flatten().flatten().copied().collect(),
            self.reward.iter().flatten().copied().collect(),
            self.gamma,
            self.mu.clone(),
        )
    }
}

pub fn mdp_from_json(text: &str) -> Result<TabularMdp> {
    let file: MdpFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    file.to_mdp()
}

pub fn mdp_to_json(mdp: &TabularMdp) -> String {
    serde_json::to_string_pretty(&MdpFile::from_mdp(mdp)).expect("MDP serializes")
}

pub fn load_mdp(path: impl AsRef<Path>) -> Result<TabularMdp> {
    mdp_from_json(&fs::read_to_string(path)?)
}

pub fn config_from_toml(text: &str) -> Result<DualAcConfig> {
    let cfg: DualAcConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &DualAcConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Parse(e.to_string()))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<DualAcConfig> {
    config_from_toml(&fs::read_to_string(path)?)
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_trajectories<S: Serialize, A: Serialize>(
    path: impl AsRef<Path>,
    trajs: &[Trajectory<S, A>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        writeln!(w, "{}", json_line(t)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(ckpt).map_err(|e| Error::Parse(e.to_string()))?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `meta.json`, one `metrics.jsonl` line per iteration and the latest
/// `checkpoint.json` into a run directory.
pub struct JsonlSink {
    dir: PathBuf,
    metrics: Option<BufWriter<File>>,
}

impl JsonlSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, metrics: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}

impl RecordSink for JsonlSink {
    fn begin(&mut self, meta: &RunMetadata) -> Result<()> {
        fs::write(
            self.dir.join("meta.json"),
            serde_json::to_string_pretty(meta).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        self.metrics = Some(BufWriter::new(File::create(self.metrics_path())?));
        Ok(())
    }

    fn record(&mut self, record: &IterationRecord) -> Result<()> {
        if self.metrics.is_none() {
            self.metrics = Some(BufWriter::new(File::create(self.metrics_path())?));
        }
        let w = self.metrics.as_mut().expect("opened above");
        writeln!(w, "{}", json_line(record)?)?;
        w.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(self.checkpoint_path(), ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::two_state_chain_mdp;

    #[test]
    fn mdp_json_round_trip() {
        let mdp = two_state_chain_mdp(0.9);
        let back = mdp_from_json(&mdp_to_json(&mdp)).unwrap();
        assert_eq!(back, mdp);
    }

    #[test]
    fn malformed_mdp_is_rejected() {
        let text = r#"{"n_states":2,"n_actions":1,"gamma":0.9,"reward":[[0.0]],
            "transition":[[[1.0,0.0]],[[0.0,1.0]]],"mu":[1.0,0.0]}"#;
        assert!(matches!(mdp_from_json(text), Err(Error::Parse(_))));
        let bad_row = r#"{"n_states":1,"n_actions":1,"gamma":0.9,"reward":[[0.0]],
            "transition":[[[0.5]]],"mu":[1.0]}"#;
        assert!(matches!(mdp_from_json(bad_row), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = DualAcConfig::default();
        let text = config_to_toml(&cfg).unwrap();
        assert_eq!(config_from_toml(&text).unwrap(), cfg);
        let partial = config_from_toml("k = 3\nseed = 7\n[schedule]\nc = 0.5\nn0 = 1.0\nbeta = 1.0\n").unwrap();
        assert_eq!(partial.k, 3);
        assert_eq!(partial.schedule.c, 0.5);
        assert!(config_from_toml("no_such_field = 1").is_err());
    }
}
