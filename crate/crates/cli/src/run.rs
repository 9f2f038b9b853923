//! Run bookkeeping: staged atomic writes, the append-only run manifest and
//! the per-workdir lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".svkit.lock";
pub const MANIFEST_FILE: &str = "run_manifest.tsv";

/// Output files written to temporaries and renamed into place together on
/// [`Staged::commit`]. Dropping without committing removes the temporaries,
/// so a failed stage never touches existing artifacts.
#[derive(Debug, Default)]
pub struct Staged {
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    /// Temporary path standing in for `target` until commit.
    pub fn path(&mut self, target: &Path) -> Result<PathBuf, CliError> {
        if self.pending.iter().any(|(_, t)| t == target) {
            return Err(CliError::Data(format!("{} written twice", target.display())));
        }
        let dir = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a file path", target.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        self.pending.push((tmp.clone(), target.to_path_buf()));
        Ok(tmp)
    }

    /// Buffered writer for `target`.
    pub fn write<F>(&mut self, target: &Path, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> svkit::Result<()>,
    {
        let tmp = self.path(target)?;
        let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|source| CliError::Stage {
            stage: format!("writing {}", target.display()),
            source,
        })?;
        w.flush().map_err(|e| CliError::io(target, e))?;
        Ok(())
    }

    pub fn write_text(&mut self, target: &Path, text: &str) -> Result<(), CliError> {
        self.write(target, |w| Ok(w.write_all(text.as_bytes())?))
    }

    pub fn targets(&self) -> impl Iterator<Item = &Path> {
        self.pending.iter().map(|(_, t)| t.as_path())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let pending = std::mem::take(&mut self.pending);
        let mut done = Vec::with_capacity(pending.len());
        for (tmp, target) in pending {
            fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))?;
            done.push(target);
        }
        Ok(done)
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub input_hash: String,
    pub wall_ms: u128,
    /// Relative to the workdir when inside it.
    pub outputs: Vec<String>,
}

impl StageRecord {
    fn to_line(&self) -> String {
        let mut fields = vec![self.stage.clone(), self.input_hash.clone(), self.wall_ms.to_string()];
        fields.extend(self.outputs.iter().cloned());
        fields.join("\t")
    }

    fn parse(line: &str) -> Option<Self> {
        let mut it = line.split('\t');
        let stage = it.next()?.to_string();
        let input_hash = it.next()?.to_string();
        let wall_ms = it.next()?.parse().ok()?;
        Some(Self {
            stage,
            input_hash,
            wall_ms,
            outputs: it.map(str::to_string).collect(),
        })
    }
}

/// Append-only log of completed stages: `stage hash wall_ms outputs...`,
/// tab separated.
#[derive(Debug)]
pub struct RunManifest {
    path: PathBuf,
    records: Vec<StageRecord>,
}

impl RunManifest {
    pub fn open(workdir: &Path) -> Result<Self, CliError> {
        let path = workdir.join(MANIFEST_FILE);
        let mut records = Vec::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| CliError::io(&path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| CliError::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec = StageRecord::parse(&line).ok_or_else(|| {
                    CliError::Data(format!("{} line {}: malformed stage record", path.display(), i + 1))
                })?;
                records.push(rec);
            }
        }
        Ok(Self { path, records })
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Latest record of `stage` with this hash whose outputs all still exist.
    pub fn up_to_date(&self, stage: &str, hash: &str, workdir: &Path) -> Option<&StageRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.stage == stage && r.input_hash == hash)
            .filter(|r| r.outputs.iter().all(|o| workdir.join(o).exists()))
    }

    pub fn append(&mut self, rec: StageRecord) -> Result<(), CliError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::io(&self.path, e))?;
        writeln!(f, "{}", rec.to_line()).map_err(|e| CliError::io(&self.path, e))?;
        self.records.push(rec);
        Ok(())
    }
}

/// Exclusive claim on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(workdir).map_err(|e| CliError::io(workdir, e))?;
        let path = workdir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(workdir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// SHA-256 over the stage name, its arguments and the contents of every
/// input file, in order.
pub fn hash_inputs(stage: &str, args: &str, inputs: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(args.as_bytes());
    h.update([0]);
    let mut buf = vec![0u8; 1 << 16];
    for p in inputs {
        h.update(p.to_string_lossy().as_bytes());
        h.update([0]);
        let mut f = File::open(p).map_err(|e| CliError::io(p, e))?;
        loop {
            let n = f.read(&mut buf).map_err(|e| CliError::io(p, e))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
        h.update([0]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// What a stage declares about itself before running.
pub struct StageSpec<'a> {
    pub name: &'a str,
    /// Canonical rendering of every setting that affects the outputs.
    pub args: String,
    pub inputs: Vec<PathBuf>,
}

/// Executes stages, skipping them when a workdir manifest shows identical
/// inputs and the recorded outputs are still present.
pub struct Runner {
    workdir: Option<PathBuf>,
    manifest: Option<RunManifest>,
    force: bool,
    _lock: Option<WorkdirLock>,
}

impl Runner {
    pub fn new(workdir: Option<PathBuf>, force: bool) -> Result<Self, CliError> {
        let (lock, manifest) = match &workdir {
            Some(dir) => {
                let lock = WorkdirLock::acquire(dir)?;
                (Some(lock), Some(RunManifest::open(dir)?))
            }
            None => (None, None),
        };
        Ok(Self {
            workdir,
            manifest,
            force,
            _lock: lock,
        })
    }

    pub fn workdir(&self) -> Option<&Path> {
        self.workdir.as_deref()
    }

    /// Relative paths are taken relative to the workdir, if any.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.workdir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Runs `body`, which stages its outputs and returns a summary line.
    /// Returns the printed line.
    pub fn run<F>(&mut self, spec: StageSpec<'_>, body: F) -> Result<String, CliError>
    where
        F: FnOnce(&mut Staged) -> Result<String, CliError>,
    {
        let start = Instant::now();
        let hash = match &self.workdir {
            Some(_) => Some(hash_inputs(spec.name, &spec.args, &spec.inputs)?),
            None => None,
        };
        if let (Some(dir), Some(m), Some(h)) = (&self.workdir, &self.manifest, &hash) {
            if !self.force && m.up_to_date(spec.name, h, dir).is_some() {
                return Ok(format!("{}: inputs unchanged, skipped", spec.name));
            }
        }
        let mut staged = Staged::new();
        let summary = body(&mut staged)?;
        let written = staged.commit()?;
        if let (Some(dir), Some(m), Some(h)) = (&self.workdir, &mut self.manifest, hash) {
            let outputs = written
                .iter()
                .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
                .collect();
            m.append(StageRecord {
                stage: spec.name.to_string(),
                input_hash: h,
                wall_ms: start.elapsed().as_millis(),
                outputs,
            })?;
        }
        Ok(summary)
    }
}
