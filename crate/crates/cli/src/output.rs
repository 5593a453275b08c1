//! Artifact directories: everything is written into a hidden staging
//! directory next to the target and renamed into place only after the
//! command has succeeded, so a failed run leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn build_id() -> String {
    format!("chordvae-cli {}", env!("CARGO_PKG_VERSION"))
}

pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    force: bool,
    started: Instant,
}

impl Staging {
    /// Fails early if `target` exists and `force` is off.
    pub fn new(target: &Path, force: bool) -> CliResult<Self> {
        if target.exists() && !force {
            return Err(CliError::validation(format!(
                "{} already exists (pass --force to replace it)",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::usage(format!("output path {} has no final component", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            force,
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, name: &str, body: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, body).map_err(|e| CliError::io(&p, e))
    }

    /// Writes the manifest and moves the directory into place.
    pub fn commit(self, mut manifest: RunManifest) -> CliResult<PathBuf> {
        let mut outputs = Vec::new();
        list_files(&self.dir, &self.dir, &mut outputs)?;
        outputs.push(RUN_MANIFEST.to_string());
        outputs.sort();
        manifest.outputs = outputs;
        manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        self.write(RUN_MANIFEST, text)?;
        if self.target.exists() && self.force {
            let meta = fs::symlink_metadata(&self.target).map_err(|e| CliError::io(&self.target, e))?;
            let removed = if meta.is_dir() {
                fs::remove_dir_all(&self.target)
            } else {
                fs::remove_file(&self.target)
            };
            removed.map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        let target = self.target.clone();
        std::mem::forget(self);
        Ok(target)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("inside root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
