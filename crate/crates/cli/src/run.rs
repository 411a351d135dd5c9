//! Timestamped run directories that clean up after failed runs.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.txt";

/// Creates `<root>/<YYYYmmdd-HHMMSS>-seed<seed>`, adding `-2`, `-3`, ... when
/// the name is taken.
pub fn create_run_dir(root: &Path, seed: u64) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let stem = format!("{}-seed{seed}", Utc::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 {
            stem.clone()
        } else {
            format!("{stem}-{n}")
        };
        let path = root.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }
    unreachable!()
}

/// Mutable state a command shares with the driver.
#[derive(Debug)]
pub struct RunContext {
    pub dir: PathBuf,
    /// `(output file, hash of the checkpoint it was trained from)`.
    pub parents: Vec<(String, String)>,
    /// Files that survive a numerical failure.
    pub keep_on_failure: Vec<String>,
}

impl RunContext {
    pub fn new(dir: PathBuf) -> Self {
        RunContext {
            dir,
            parents: Vec::new(),
            keep_on_failure: Vec::new(),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn keep(&mut self, name: &str) {
        self.keep_on_failure.push(name.to_string());
    }
}

/// Output files of a run, sorted, excluding the manifest.
pub fn list_outputs(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST {
                names.push(name);
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Removes partial outputs. A numerical failure keeps the registered files
/// (the last good checkpoint); anything else removes the whole directory.
pub fn clean_failed(ctx: &RunContext, err: &CliError) {
    let keep_any = matches!(err, CliError::Numerical(_)) && !ctx.keep_on_failure.is_empty();
    if !keep_any {
        let _ = fs::remove_dir_all(&ctx.dir);
        return;
    }
    if let Ok(names) = list_outputs(&ctx.dir) {
        for name in names {
            let kept = ctx
                .keep_on_failure
                .iter()
                .any(|k| name == *k || name.starts_with(&format!("{k}.")));
            if !kept {
                let _ = fs::remove_file(ctx.dir.join(name));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colliding_names_get_suffixes() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), 3).unwrap();
        let b = create_run_dir(tmp.path(), 3).unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_string_lossy().ends_with("-seed3"));
    }

    #[test]
    fn numerical_failure_keeps_registered_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut ctx = RunContext::new(tmp.path().join("r"));
        fs::create_dir(&ctx.dir).unwrap();
        for f in ["last_good.bin", "last_good.bin.config", "log.csv"] {
            fs::write(ctx.file(f), "x").unwrap();
        }
        ctx.keep("last_good.bin");
        clean_failed(&ctx, &CliError::Numerical("nan".into()));
        assert_eq!(
            list_outputs(&ctx.dir).unwrap(),
            vec!["last_good.bin", "last_good.bin.config"]
        );
        clean_failed(&ctx, &CliError::Io("disk".into()));
        assert!(!ctx.dir.exists());
    }
}
