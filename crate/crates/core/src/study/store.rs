use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scoring::SessionReport;
use super::session::StudySession;
use crate::{Error, Result};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SessionFile {
    schema: u32,
    session: StudySession,
    /// Present once the session is complete.
    report: Option<SessionReport>,
}

/// One JSON file per session, written atomically (temp file then rename).
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> Result<PathBuf> {
        if !valid_id(id) {
            return Err(Error::NotFound(format!("session {id:?}")));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    pub fn save(&self, session: &StudySession) -> Result<()> {
        let path = self.path(&session.id)?;
        let report = if session.is_complete() { Some(session.score()?) } else { None };
        let file = SessionFile { schema: SESSION_SCHEMA_VERSION, session: session.clone(), report };
        let body = serde_json::to_vec_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
        let tmp = self.dir.join(format!(".{}.json.tmp", session.id));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn read(&self, id: &str) -> Result<SessionFile> {
        let path = self.path(id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NotFound(format!("session {id}"))),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let file: SessionFile = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.schema != SESSION_SCHEMA_VERSION {
            return Err(Error::Format(format!("session schema {} is not supported", file.schema)));
        }
        Ok(file)
    }

    pub fn load(&self, id: &str) -> Result<StudySession> {
        Ok(self.read(id)?.session)
    }

    /// The report written alongside a completed session.
    pub fn stored_report(&self, id: &str) -> Result<Option<SessionReport>> {
        Ok(self.read(id)?.report)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                if valid_id(id) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_all(&self) -> Result<Vec<StudySession>> {
        self.list()?.iter().map(|id| self.load(id)).collect()
    }
}
