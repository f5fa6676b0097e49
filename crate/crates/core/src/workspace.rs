//! Per-job file staging: `<root>/<job-id>/inputs/*` and `<root>/<job-id>/outputs/*`.
//!
//! Result archives are uncompressed POSIX tar with one regular file per
//! output, sorted by name, mode 0644, mtime 0 and no owner names, so the
//! same outputs always produce the same bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::kernels::Files;
use crate::model::JobId;

pub fn valid_file_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 255
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\', '\0'])
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, id: JobId) -> PathBuf {
        self.root.join(id.to_string())
    }

    fn dir(&self, id: JobId, which: &str) -> PathBuf {
        self.job_dir(id).join(which)
    }

    fn write_all(dir: &Path, files: &Files) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, data) in files {
            if !valid_file_name(name) {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("invalid file name {name:?}"),
                ));
            }
            fs::write(dir.join(name), data)?;
        }
        Ok(())
    }

    fn read_all(dir: &Path) -> io::Result<Files> {
        let mut files = Files::new();
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(files),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                files.insert(name, fs::read(entry.path())?);
            }
        }
        Ok(files)
    }

    pub fn write_inputs(&self, id: JobId, files: &Files) -> io::Result<()> {
        Self::write_all(&self.dir(id, "inputs"), files)
    }

    pub fn read_inputs(&self, id: JobId) -> io::Result<Files> {
        Self::read_all(&self.dir(id, "inputs"))
    }

    /// Replaces any previous outputs of the job.
    pub fn write_outputs(&self, id: JobId, files: &Files) -> io::Result<String> {
        let dir = self.dir(id, "outputs");
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        Self::write_all(&dir, files)?;
        Ok(format!("{id}/outputs"))
    }

    pub fn write_log(&self, id: JobId, log: &str) -> io::Result<()> {
        fs::create_dir_all(self.job_dir(id))?;
        fs::write(self.job_dir(id).join("log.txt"), log)
    }

    pub fn read_log(&self, id: JobId) -> Option<String> {
        fs::read_to_string(self.job_dir(id).join("log.txt")).ok()
    }

    pub fn read_outputs(&self, id: JobId) -> io::Result<Files> {
        Self::read_all(&self.dir(id, "outputs"))
    }

    pub fn archive(&self, id: JobId) -> io::Result<Vec<u8>> {
        archive_files(&self.read_outputs(id)?)
    }

    pub fn remove(&self, id: JobId) -> io::Result<()> {
        match fs::remove_dir_all(self.job_dir(id)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}

pub fn archive_files(files: &Files) -> io::Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    builder.mode(tar::HeaderMode::Deterministic);
    for (name, data) in files {
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, name, data.as_slice())?;
    }
    builder.into_inner()
}

pub fn unpack_archive(bytes: &[u8]) -> io::Result<Files> {
    let mut files = Files::new();
    let mut archive = tar::Archive::new(bytes);
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        io::Read::read_to_end(&mut entry, &mut data)?;
        files.insert(name, data);
    }
    Ok(files)
}
