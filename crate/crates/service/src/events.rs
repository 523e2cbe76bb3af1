//! Append-only session event log, replayed on startup.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use simrec_core::{RunConfig, Role, Transcript};

use crate::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created { id: String, config: RunConfig, created_at: u64 },
    Turn { id: String, user: String, reply: String, ses: bool },
    Evicted { id: String },
}

pub struct EventLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl EventLog {
    /// Opens (or creates) the log and rebuilds the live sessions from it.
    /// Unreadable lines are skipped with a warning.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<Session>)> {
        let mut sessions: HashMap<String, Session> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Event>(&line) {
                    Ok(Event::Created { id, config, created_at }) => {
                        order.push(id.clone());
                        sessions.insert(
                            id.clone(),
                            Session { id, history: Transcript::new(), config, created_at, last_trace: None },
                        );
                    }
                    Ok(Event::Turn { id, user, reply, .. }) => {
                        if let Some(s) = sessions.get_mut(&id) {
                            let ok = s.history.push_turn(Role::User, user).and_then(|_| s.history.push_turn(Role::Recommender, reply));
                            if let Err(e) = ok {
                                tracing::warn!(line = i + 1, error = %e, "event log turn does not apply");
                            }
                        }
                    }
                    Ok(Event::Evicted { id }) => {
                        sessions.remove(&id);
                    }
                    Err(e) => tracing::warn!(line = i + 1, error = %e, "skipping unreadable event"),
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let restored = order.into_iter().filter_map(|id| sessions.remove(&id)).collect();
        Ok((Self { path: path.to_path_buf(), file: Mutex::new(file) }, restored))
    }

    pub fn append(&self, event: &Event) -> std::io::Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let mut f = self.file.lock().expect("event log lock");
        f.write_all(line.as_bytes())?;
        f.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
