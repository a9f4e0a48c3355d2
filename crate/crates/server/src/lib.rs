//! HTTP/JSON service for the timed observer study. Sessions are persisted as
//! one JSON file each on every mutation; mutations of one session are
//! serialized behind its own lock.

mod routes;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use radiosynth_core::study::{Clock, SessionStore, StudySession, SystemClock, DEFAULT_DEADLINE_SECS};
use tokio::sync::Mutex;

pub use routes::router;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] radiosynth_core::Error),
    #[error("server stopped: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub real_dir: PathBuf,
    pub fake_dir: PathBuf,
    pub sessions_dir: PathBuf,
    /// Observer UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Images of each kind per deck.
    pub n_each: usize,
    pub deadline_secs: f64,
}

impl ServerConfig {
    pub fn new(real_dir: impl Into<PathBuf>, fake_dir: impl Into<PathBuf>, sessions_dir: impl Into<PathBuf>) -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            real_dir: real_dir.into(),
            fake_dir: fake_dir.into(),
            sessions_dir: sessions_dir.into(),
            static_dir: None,
            n_each: 100,
            deadline_secs: DEFAULT_DEADLINE_SECS,
        }
    }
}

pub(crate) type SessionHandle = Arc<Mutex<StudySession>>;

pub struct AppState {
    pub(crate) config: ServerConfig,
    pub(crate) real_refs: Vec<String>,
    pub(crate) fake_refs: Vec<String>,
    pub(crate) store: SessionStore,
    pub(crate) sessions: std::sync::Mutex<HashMap<String, SessionHandle>>,
    pub(crate) clock: Arc<dyn Clock>,
    /// Serializes session creation so an observer never gets two active sessions.
    pub(crate) create_lock: Mutex<()>,
}

/// Sorted `.png` paths directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<String>, ServerError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ServerError::Config(format!("deck directory {}: {e}", dir.display())))?;
    let mut out: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}

impl AppState {
    pub fn new(config: ServerConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>, ServerError> {
        let real_refs = list_pngs(&config.real_dir)?;
        let fake_refs = list_pngs(&config.fake_dir)?;
        if real_refs.len() < config.n_each || fake_refs.len() < config.n_each {
            return Err(ServerError::Config(format!(
                "decks need {} real and {} fake PNGs; found {} and {}",
                config.n_each,
                config.n_each,
                real_refs.len(),
                fake_refs.len()
            )));
        }
        let store = SessionStore::open(&config.sessions_dir)?;
        let sessions = store
            .load_all()?
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Arc::new(Self {
            config,
            real_refs,
            fake_refs,
            store,
            sessions: std::sync::Mutex::new(sessions),
            clock,
            create_lock: Mutex::new(()),
        }))
    }

    pub fn with_system_clock(config: ServerConfig) -> Result<Arc<Self>, ServerError> {
        Self::new(config, Arc::new(SystemClock))
    }

    pub(crate) fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().expect("session map lock").get(id).cloned()
    }
}

/// Binds the listener first so a busy port fails before serving starts.
pub async fn serve(config: ServerConfig) -> Result<(), ServerError> {
    let addr = config.addr;
    let state = AppState::with_system_clock(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServerError::Bind { addr, source })?;
    eprintln!("observer study listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
