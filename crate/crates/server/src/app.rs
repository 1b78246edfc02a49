use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use photoqa::ensemble::{load_model, to_canonical_json, EnsembleError, QualityModel, Verdict};
use photoqa::imagekit::{decode_image, RasterImage};
use photoqa::pipeline::sha256_hex;
use photoqa::session::{self, CaptureSession, EventLogEntry, SessionError, SessionState, SessionView, SubmitOutcome};

use crate::store::ImageStore;
use crate::{ServerConfig, ServerError};

/// Anything that can turn pixels into a verdict. The service only needs this,
/// which keeps its tests independent of a trained model.
pub trait Assessor: Send + Sync {
    fn assess(&self, img: &RasterImage) -> Result<Verdict, EnsembleError>;
    fn version(&self) -> String;
}

pub struct LoadedModel {
    model: QualityModel,
    version: String,
}

impl LoadedModel {
    pub fn new(model: QualityModel) -> Result<Self, EnsembleError> {
        let digest = sha256_hex(to_canonical_json(&model)?.as_bytes());
        let version = format!("v{}-{}", model.artifact_version, &digest[..12]);
        Ok(Self { model, version })
    }

    pub fn load(path: &Path, fpr_cap: Option<f64>) -> Result<Self, EnsembleError> {
        let model = load_model(path)?;
        Self::new(match fpr_cap {
            Some(c) => model.recalibrate(c)?,
            None => model,
        })
    }
}

impl Assessor for LoadedModel {
    fn assess(&self, img: &RasterImage) -> Result<Verdict, EnsembleError> {
        self.model.assess(img, None)
    }

    fn version(&self) -> String {
        self.version.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppError {
    NotReady,
    SessionNotFound(String),
    SessionTerminal(String, SessionState),
    ImageDecode(String),
    BadRequest(String),
    Internal(String),
}

impl AppError {
    pub fn code(&self) -> &'static str {
        match self {
            AppError::NotReady => "ServiceNotReady",
            AppError::SessionNotFound(_) => "SessionNotFound",
            AppError::SessionTerminal(..) => "SessionTerminal",
            AppError::ImageDecode(_) => "ImageDecodeError",
            AppError::BadRequest(_) => "BadRequest",
            AppError::Internal(_) => "InternalError",
        }
    }

    pub fn message(&self) -> String {
        match self {
            AppError::NotReady => "no quality model is loaded".into(),
            AppError::SessionNotFound(id) => format!("session {id} not found"),
            AppError::SessionTerminal(id, s) => format!("session {id} is already {s}"),
            AppError::ImageDecode(m) | AppError::BadRequest(m) | AppError::Internal(m) => m.clone(),
        }
    }
}

impl From<SessionError> for AppError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::SessionNotFound(id) => AppError::SessionNotFound(id),
            SessionError::SessionTerminal(id, s) => AppError::SessionTerminal(id, s),
            other => AppError::Internal(other.to_string()),
        }
    }
}

pub type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Shared service state. Sessions are locked one at a time; the model is
/// shared read-only; log lines are appended whole under their own lock.
pub struct AppState {
    assessor: RwLock<Option<Arc<dyn Assessor>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<CaptureSession>>>>,
    log: Mutex<File>,
    log_path: PathBuf,
    store: ImageStore,
    attempt_cap: u32,
    clock: Clock,
}

impl AppState {
    /// Opens the store and log. Sessions in an existing log are replayed so a
    /// restart keeps them.
    pub fn open(cfg: &ServerConfig) -> Result<Self, ServerError> {
        cfg.check()?;
        let io = |p: &Path, e: std::io::Error| ServerError::Io(format!("{}: {e}", p.display()));
        let store = ImageStore::open(&cfg.storage_dir).map_err(|e| io(&cfg.storage_dir, e))?;
        let sessions = match std::fs::read_to_string(&cfg.event_log) {
            Ok(text) => session::replay(&session::parse_jsonl(&text).map_err(|e| ServerError::Log(e.to_string()))?).map_err(|e| ServerError::Log(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Default::default(),
            Err(e) => return Err(io(&cfg.event_log, e)),
        };
        if let Some(dir) = cfg.event_log.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&cfg.event_log).map_err(|e| io(&cfg.event_log, e))?;
        let state = Self {
            assessor: RwLock::new(None),
            sessions: Mutex::new(sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
            log: Mutex::new(log),
            log_path: cfg.event_log.clone(),
            store,
            attempt_cap: cfg.attempt_cap,
            clock: Box::new(wall_clock_ms),
        };
        if let Some(path) = &cfg.model_path {
            let model = LoadedModel::load(path, cfg.fpr_cap).map_err(|e| ServerError::Model(format!("{}: {e}", path.display())))?;
            state.set_assessor(Arc::new(model));
        }
        Ok(state)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn set_assessor(&self, a: Arc<dyn Assessor>) {
        *self.assessor.write().unwrap_or_else(|e| e.into_inner()) = Some(a);
    }

    fn assessor(&self) -> Result<Arc<dyn Assessor>, AppError> {
        self.assessor.read().unwrap_or_else(|e| e.into_inner()).clone().ok_or(AppError::NotReady)
    }

    pub fn model_version(&self) -> Option<String> {
        self.assessor().ok().map(|a| a.version())
    }

    fn append(&self, entries: &[EventLogEntry]) -> Result<(), AppError> {
        let text = session::to_jsonl(entries);
        let mut f = lock(&self.log);
        f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| AppError::Internal(format!("event log: {e}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<CaptureSession>>, AppError> {
        lock(&self.sessions).get(id).cloned().ok_or_else(|| AppError::SessionNotFound(id.to_string()))
    }

    pub fn create_session(&self) -> Result<String, AppError> {
        self.assessor()?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let (s, entry) = CaptureSession::create(id.clone(), self.attempt_cap, (self.clock)())?;
        self.append(&[entry])?;
        lock(&self.sessions).insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(id)
    }

    /// Decode, assess and record one attempt. Decoding and scoring happen
    /// outside the session lock; a decode failure leaves the session as is.
    pub async fn submit(self: &Arc<Self>, id: &str, bytes: Vec<u8>) -> Result<SubmitOutcome, AppError> {
        let handle = self.session(id)?;
        {
            let s = lock(&handle);
            if s.state.is_terminal() {
                return Err(AppError::SessionTerminal(id.to_string(), s.state));
            }
        }
        let assessor = self.assessor()?;
        let me = Arc::clone(self);
        let (image_ref, verdict) = tokio::task::spawn_blocking(move || -> Result<(String, Verdict), AppError> {
            let img = decode_image(&bytes).map_err(|e| AppError::ImageDecode(e.to_string()))?;
            let verdict = assessor.assess(&img).map_err(|e| match e {
                EnsembleError::Image(e) => AppError::ImageDecode(e.to_string()),
                other => AppError::Internal(other.to_string()),
            })?;
            let image_ref = me.store.put(&bytes).map_err(|e| AppError::Internal(format!("image store: {e}")))?;
            Ok((image_ref, verdict))
        })
        .await
        .map_err(|e| AppError::Internal(e.to_string()))??;

        let mut s = lock(&handle);
        let (outcome, entries) = s.submit(image_ref, verdict, (self.clock)())?;
        self.append(&entries)?;
        Ok(outcome)
    }

    pub fn get(&self, id: &str) -> Result<SessionView, AppError> {
        let handle = self.session(id)?;
        let view = lock(&handle).view();
        Ok(view)
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = lock(&self.sessions).keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Copy the event log as JSONL; an untouched service yields an empty file.
    pub fn export_log(&self, path: &Path) -> std::io::Result<()> {
        let _guard = lock(&self.log);
        std::fs::copy(&self.log_path, path).map(|_| ())
    }
}
