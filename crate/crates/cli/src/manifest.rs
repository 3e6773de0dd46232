//! Run manifests and atomic output writing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use serde::Serialize;

use confdrive::memory::BANK_FORMAT_VERSION;
use confdrive::simulator::SCENARIO_VERSION;
use confdrive::student::CHECKPOINT_VERSION;

use crate::config::{Config, CONFIG_VERSION};

#[derive(Debug, Serialize)]
pub struct ComponentVersions {
    pub cli: &'static str,
    pub config_format: u32,
    pub scenario_format: u32,
    pub bank_format: u32,
    pub checkpoint_format: u32,
}

impl ComponentVersions {
    pub fn current() -> ComponentVersions {
        ComponentVersions {
            cli: env!("CARGO_PKG_VERSION"),
            config_format: CONFIG_VERSION,
            scenario_format: SCENARIO_VERSION,
            bank_format: BANK_FORMAT_VERSION,
            checkpoint_format: CHECKPOINT_VERSION,
        }
    }
}

/// One record per artifact-producing invocation. Written last, so a complete
/// manifest implies the listed outputs are complete too.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub versions: ComponentVersions,
    pub wall_clock_s: f64,
    pub outputs: Vec<String>,
    pub status: String,
}

impl RunManifest {
    /// Writes `manifest_<command>.json` into `out_dir` and returns its path.
    pub fn write(
        out_dir: &Path,
        command: &str,
        config: &Config,
        seed: u64,
        started: Instant,
        outputs: &[PathBuf],
        status: &str,
    ) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_digest: config.digest(),
            seed,
            versions: ComponentVersions::current(),
            wall_clock_s: started.elapsed().as_secs_f64(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            status: status.to_string(),
        };
        let path = out_dir.join(format!("manifest_{command}.json"));
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// Temp-and-rename write; readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        use std::io::Write as _;
        let mut file = std::fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        file.write_all(bytes).with_context(|| format!("writing {}", tmp.display()))?;
        file.sync_all().with_context(|| format!("syncing {}", tmp.display()))?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested/report.csv");
        write_atomic(&target, b"a,b\n1,2\n").unwrap();
        assert_eq!(std::fs::read_to_string(&target).unwrap(), "a,b\n1,2\n");
        assert!(!target.with_extension("tmp").exists());
    }
}
