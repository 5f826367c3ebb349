//! Run directories: one per `<timestamp>-seed<seed>`, one subdirectory per stage,
//! each sealed by a hashed `run_manifest.json`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use stemsim::training::RunManifest;
use stemsim::{Error, Result};

pub const MANIFEST: &str = "run_manifest.json";
const LOCK: &str = ".lock";
pub const RUN_ROOT_ENV: &str = "STEMSIM_RUN_ROOT";

/// Default root: `--run-root`, then `$STEMSIM_RUN_ROOT`, then `./runs`.
pub fn run_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates a fresh `<root>/<timestamp>-seed<seed>` directory.
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let mut path = root.join(format!("{stamp}-seed{seed}"));
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-seed{seed}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&path)?;
        Self::open(&path)
    }

    /// Opens (creating if needed) an explicit run directory and takes its lock.
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Conflict(format!("{} is locked by another process ({})", path.display(), lock.display()))
            } else {
                e.into()
            }
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    /// The lexicographically last run under `root`; timestamps make that the newest.
    pub fn latest(root: &Path) -> Result<Self> {
        let mut runs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::Dependency(format!("no runs under {}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        runs.sort();
        let last = runs
            .pop()
            .ok_or_else(|| Error::Dependency(format!("no runs under {}; pass --run-dir", root.display())))?;
        Self::open(&last)
    }

    pub fn stage_path(&self, stage: &str) -> PathBuf {
        self.path.join(stage)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stage_path(stage).join(MANIFEST).exists()
    }

    /// Reads a completed stage's manifest and verifies every output hash.
    pub fn read_stage(&self, stage: &str) -> Result<RunManifest> {
        let dir = self.stage_path(stage);
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "stage {stage:?} has not been run in {}",
                self.path.display()
            )));
        }
        let m = RunManifest::read(&path)?;
        m.verify(&dir)?;
        Ok(m)
    }

    /// Starts writing a stage into a scratch directory. An existing stage is kept
    /// unless `force` is set.
    pub fn begin_stage(&self, stage: &str, config: serde_json::Value, force: bool) -> Result<StageWriter> {
        let dir = self.stage_path(stage);
        if dir.exists() && !force {
            return Err(Error::Conflict(format!(
                "{} already exists; rerun with --force to overwrite",
                dir.display()
            )));
        }
        let scratch = self.path.join(format!("{stage}.partial"));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        Ok(StageWriter {
            dir,
            scratch,
            manifest: RunManifest::new(stage, config),
            committed: false,
        })
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// A stage being written. Dropping it without `commit` removes all partial output.
#[derive(Debug)]
pub struct StageWriter {
    dir: PathBuf,
    scratch: PathBuf,
    pub manifest: RunManifest,
    committed: bool,
}

impl StageWriter {
    /// Where stage outputs go until commit.
    pub fn out(&self) -> &Path {
        &self.scratch
    }

    /// Records an upstream stage by its manifest hash.
    pub fn input(&mut self, name: &str, manifest: &RunManifest) -> Result<()> {
        self.manifest.inputs.insert(name.into(), manifest.content_hash()?);
        Ok(())
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(name.into(), stemsim::hashing::file_sha256(path)?);
        Ok(())
    }

    /// Hashes every file written, writes the manifest and moves the stage into place.
    pub fn commit(mut self) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect_files(&self.scratch, &self.scratch, &mut files)?;
        files.sort();
        for rel in files {
            self.manifest.add_output(&self.scratch, &rel)?;
        }
        self.manifest.write(&self.scratch.join(MANIFEST))?;
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir)?;
        }
        fs::rename(&self.scratch, &self.dir)?;
        self.committed = true;
        Ok(self.dir.clone())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.scratch);
        }
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(base, &p, out)?;
        } else {
            let rel = p.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_excludes_a_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path()).unwrap();
        assert!(matches!(RunDir::open(dir.path()), Err(Error::Conflict(_))));
        drop(a);
        RunDir::open(dir.path()).unwrap();
    }

    #[test]
    fn uncommitted_stage_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        {
            let w = run.begin_stage("s", serde_json::Value::Null, false).unwrap();
            fs::write(w.out().join("x.txt"), "partial").unwrap();
        }
        assert!(!run.stage_path("s").exists());
        assert!(!dir.path().join("s.partial").exists());
    }

    #[test]
    fn committed_stage_verifies_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path()).unwrap();
        let w = run.begin_stage("s", serde_json::json!({"a": 1}), false).unwrap();
        fs::create_dir_all(w.out().join("sub")).unwrap();
        fs::write(w.out().join("sub/x.txt"), "data").unwrap();
        w.commit().unwrap();
        let m = run.read_stage("s").unwrap();
        assert!(m.outputs.contains_key("sub/x.txt"));
        assert!(matches!(run.begin_stage("s", serde_json::Value::Null, false), Err(Error::Conflict(_))));
        fs::write(run.stage_path("s").join("sub/x.txt"), "tampered").unwrap();
        assert!(matches!(run.read_stage("s"), Err(Error::HashMismatch { .. })));
    }
}
