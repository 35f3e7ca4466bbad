use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::EpochRecord;
use super::IterationResult;
use crate::datagen::LabelStatus;
use crate::ensemble::PredictionEnsemble;
use crate::error::{Error, Result};
use crate::ndnum::MlpParams;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct IterationRecord {
    pub result: IterationResult,
    pub best_student: MlpParams,
    pub epochs: Vec<EpochRecord>,
    pub trained_statuses: Vec<LabelStatus>,
    pub next_statuses: Option<Vec<LabelStatus>>,
    pub epochs_used: usize,
    pub ties: usize,
    pub finished: bool,
}

/// Per-iteration snapshots under `dir/iter_NNN/`.
///
/// Each subdirectory holds `ensemble.bin` and `record.json` (the iteration
/// result with its best teacher and student). The record is written last, so
/// a directory without one is ignored on resume.
#[derive(Clone, Debug)]
pub struct Checkpointer {
    dir: PathBuf,
}

const RECORD: &str = "record.json";
const ENSEMBLE: &str = "ensemble.bin";
const FINGERPRINT: &str = "fingerprint.txt";

impl Checkpointer {
    /// Opens `dir`, refusing checkpoints written by a different configuration.
    pub fn open(dir: impl AsRef<Path>, fingerprint: &str) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(FINGERPRINT);
        match fs::read_to_string(&path) {
            Ok(existing) if existing != fingerprint => {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration",
                    dir.display()
                )))
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                write_atomic(&path, fingerprint.as_bytes())?
            }
            Err(e) => return Err(Error::io(&path, e)),
        }
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn iter_dir(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("iter_{iteration:03}"))
    }

    pub(crate) fn save(&self, record: &IterationRecord, ens: &PredictionEnsemble) -> Result<()> {
        let dir = self.iter_dir(record.result.iteration);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        ens.save(dir.join(ENSEMBLE))?;
        let json = serde_json::to_vec(record)
            .map_err(|e| Error::Config(format!("cannot serialise checkpoint: {e}")))?;
        write_atomic(&dir.join(RECORD), &json)
    }

    pub(crate) fn load_ensemble(&self, iteration: usize) -> Result<PredictionEnsemble> {
        PredictionEnsemble::load(self.iter_dir(iteration).join(ENSEMBLE))
    }

    /// Completed iteration records in order, stopping at the first gap.
    pub(crate) fn load_all(&self) -> Result<Vec<IterationRecord>> {
        let mut out = Vec::new();
        loop {
            let path = self.iter_dir(out.len()).join(RECORD);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => break,
                Err(e) => return Err(Error::io(&path, e)),
            };
            let record = serde_json::from_slice(&bytes).map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            out.push(record);
        }
        Ok(out)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
