//! The coordinator: registry, session table, port pool and recovery.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use fedcampus_core::analytics::FaResult;
use fedcampus_core::model::Platform;
use fedcampus_core::protocol::{SessionKind, TaskEntry, TaskManifest};
use fedcampus_core::seed::derive_seed;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::config::{Clock, RoundRecord, ServerConfig, SessionConfig, SessionRequest, SessionView};
use crate::ports::PortPool;
use crate::registry::{ModelRegistryEntry, Registered, Registry, RegistryError};
use crate::session::{FaRecord, Session, SessionEvent, SessionParts, SessionShared, ValidationFn};
use crate::state::{FailureReason, SessionState, StateMachine};
use crate::store::{Store, StoreError, FA_RESULTS_FILE, REGISTRY_FILE, ROUNDS_FILE, SESSIONS_FILE};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("port pool exhausted")]
    PortPoolExhausted,
    #[error("no pool port could be bound: {0}")]
    Bind(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session id {0} already exists")]
    DuplicateSession(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("no result for query {0}")]
    UnknownQuery(String),
}

struct Handle {
    config: SessionConfig,
    shared: Arc<Mutex<SessionShared>>,
    state_rx: watch::Receiver<SessionState>,
    cancel: Option<watch::Sender<bool>>,
    task: Option<JoinHandle<SessionState>>,
}

impl Handle {
    fn view(&self) -> SessionView {
        let sh = self.shared.lock().unwrap();
        let state = sh.machine.current();
        let current_round = state
            .round()
            .or_else(|| sh.rounds.last().map(|r| r.round))
            .unwrap_or(0);
        SessionView {
            session_id: self.config.session_id.clone(),
            kind: self.config.kind,
            state,
            port: self.config.port,
            current_round,
            rounds: self.config.rounds,
            last_global_loss: sh.rounds.last().and_then(|r| r.global_loss),
            n_clients_joined: if state.is_terminal() { 0 } else { sh.joined },
            config: self.config.clone(),
            federated_eval: sh.federated_eval,
        }
    }
}

struct Inner {
    registry: Registry,
    pool: PortPool,
    sessions: BTreeMap<String, Handle>,
    fa_results: BTreeMap<String, FaRecord>,
    next_session: u64,
}

#[derive(Clone)]
pub struct Orchestrator {
    cfg: Arc<ServerConfig>,
    store: Store,
    validation: Option<ValidationFn>,
    inner: Arc<Mutex<Inner>>,
}

impl Orchestrator {
    /// Opens the data directory (if any) and recovers its contents.
    pub fn new(cfg: ServerConfig) -> Result<Self, OrchestratorError> {
        let store = match &cfg.data_dir {
            Some(d) => Store::open(d)?,
            None => Store::ephemeral(),
        };
        let inner = Inner {
            registry: Registry::default(),
            pool: PortPool::new(cfg.fl_port_pool),
            sessions: BTreeMap::new(),
            fa_results: BTreeMap::new(),
            next_session: 0,
        };
        let orch = Orchestrator {
            cfg: Arc::new(cfg),
            store,
            validation: None,
            inner: Arc::new(Mutex::new(inner)),
        };
        orch.recover()?;
        Ok(orch)
    }

    /// Server-side validation data used for each round's `global_loss`.
    pub fn with_validation(mut self, f: ValidationFn) -> Self {
        self.validation = Some(f);
        self
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    fn recover(&self) -> Result<(), OrchestratorError> {
        let entries: Vec<ModelRegistryEntry> = self.store.load(REGISTRY_FILE)?;
        let registry = Registry::restore(entries)?;
        let events: Vec<SessionEvent> = self.store.load(SESSIONS_FILE)?;
        let rounds: Vec<RoundRecord> = self.store.load(ROUNDS_FILE)?;
        let fa: Vec<FaRecord> = self.store.load(FA_RESULTS_FILE)?;

        let mut configs: BTreeMap<String, SessionConfig> = BTreeMap::new();
        let mut machines: HashMap<String, StateMachine> = HashMap::new();
        for (i, ev) in events.into_iter().enumerate() {
            let corrupt = |detail: String| StoreError::Corrupt {
                file: SESSIONS_FILE.into(),
                line: i + 1,
                detail,
            };
            match ev {
                SessionEvent::Created { session_id, config } => {
                    machines.insert(session_id.clone(), StateMachine::default());
                    configs.insert(session_id, *config);
                }
                SessionEvent::State { session_id, state } => {
                    let m = machines.get_mut(&session_id).ok_or_else(|| {
                        corrupt(format!("state for unknown session {session_id}"))
                    })?;
                    m.advance(state).map_err(|e| corrupt(e.to_string()))?;
                }
            }
        }
        let mut inner = self.inner.lock().unwrap();
        inner.registry = registry;
        inner.next_session = configs.len() as u64;
        for (id, config) in configs {
            let mut machine = machines.remove(&id).unwrap_or_default();
            if !machine.current().is_terminal() {
                let failed = SessionState::Failed {
                    reason: FailureReason::Interrupted,
                };
                machine
                    .advance(failed)
                    .expect("non-terminal states may fail");
                self.store.append(
                    SESSIONS_FILE,
                    &SessionEvent::State {
                        session_id: id.clone(),
                        state: failed,
                    },
                )?;
            }
            let state = machine.current();
            let shared = SessionShared {
                machine,
                rounds: rounds
                    .iter()
                    .filter(|r| r.session_id == id)
                    .cloned()
                    .collect(),
                ..Default::default()
            };
            let (_tx, state_rx) = watch::channel(state);
            inner.sessions.insert(
                id,
                Handle {
                    config,
                    shared: Arc::new(Mutex::new(shared)),
                    state_rx,
                    cancel: None,
                    task: None,
                },
            );
        }
        for rec in fa {
            if let Some(h) = inner.sessions.get(&rec.session_id) {
                h.shared.lock().unwrap().fa_result = Some(rec.result.clone());
            }
            inner
                .fa_results
                .insert(rec.result.query_id().to_string(), rec);
        }
        Ok(())
    }

    pub fn register_model(
        &self,
        raw: &[u8],
    ) -> Result<(ModelRegistryEntry, Registered), OrchestratorError> {
        let mut inner = self.inner.lock().unwrap();
        let tick = inner.registry.entries().len() as u64 + 1;
        let (entry, status) = inner.registry.register(raw, self.cfg.clock.stamp(tick))?;
        if status == Registered::New {
            if let Err(e) = self.store.append(REGISTRY_FILE, &entry) {
                // keep memory and disk in step
                let entries =
                    inner.registry.entries()[..inner.registry.entries().len() - 1].to_vec();
                inner.registry = Registry::restore(entries).expect("prefix of a valid registry");
                return Err(e.into());
            }
        }
        Ok((entry, status))
    }

    pub fn models(&self) -> Vec<ModelRegistryEntry> {
        self.inner.lock().unwrap().registry.entries().to_vec()
    }

    fn resolve(
        &self,
        inner: &mut Inner,
        req: &SessionRequest,
    ) -> Result<SessionConfig, OrchestratorError> {
        let bad = |s: &str| Err(OrchestratorError::InvalidConfig(s.into()));
        if req.min_clients == 0 {
            return bad("min_clients must be >= 1");
        }
        if req.start_clients.is_some_and(|n| n < req.min_clients) {
            return bad("start_clients must be >= min_clients");
        }
        if !(req.client_fraction > 0.0 && req.client_fraction <= 1.0) {
            return bad("client_fraction must lie in (0, 1]");
        }
        if req.round_timeout_ms == 0 {
            return bad("round_timeout_ms must be > 0");
        }
        req.dp
            .validate()
            .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        let mut model_version = None;
        match req.kind {
            SessionKind::FL => {
                if req.rounds == 0 {
                    return bad("rounds must be >= 1");
                }
                if req.query.is_some() {
                    return bad("FL sessions take no query");
                }
                let Some(hp) = &req.hyperparams else {
                    return bad("FL sessions need hyperparams");
                };
                hp.validate()
                    .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
                let Some(model_id) = &req.model_id else {
                    return bad("FL sessions need model_id");
                };
                model_version = Some(inner.registry.get(model_id, req.model_version)?.version);
            }
            SessionKind::FA => {
                if req.rounds != 1 {
                    return bad("FA sessions run exactly one round");
                }
                if req.model_id.is_some() || req.hyperparams.is_some() {
                    return bad("FA sessions take a query, not a model");
                }
                let Some(q) = &req.query else {
                    return bad("FA sessions need a query");
                };
                q.validate()
                    .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
            }
        }
        let session_id = match &req.session_id {
            Some(id) if id.is_empty() => return bad("empty session_id"),
            Some(id) => id.clone(),
            None => loop {
                inner.next_session += 1;
                let id = format!("s{}", inner.next_session);
                if !inner.sessions.contains_key(&id) {
                    break id;
                }
            },
        };
        if inner.sessions.contains_key(&session_id) {
            return Err(OrchestratorError::DuplicateSession(session_id));
        }
        Ok(SessionConfig {
            seed: req
                .seed
                .unwrap_or_else(|| derive_seed(self.cfg.seed, &session_id)),
            session_id,
            kind: req.kind,
            model_id: req.model_id.clone(),
            model_version,
            query: req.query.clone(),
            rounds: req.rounds,
            min_clients: req.min_clients,
            start_clients: req.start_clients.unwrap_or(req.min_clients),
            client_fraction: req.client_fraction,
            round_timeout_ms: req.round_timeout_ms,
            join_timeout_ms: req.join_timeout_ms,
            hyperparams: req.hyperparams,
            dp: req.dp,
            port: 0,
        })
    }

    /// Binds the lowest pool port that is free both here and in the OS.
    fn bind_port(&self, inner: &mut Inner) -> Result<(u16, TcpListener), OrchestratorError> {
        let free: Vec<u16> = inner.pool.free().collect();
        if free.is_empty() {
            return Err(OrchestratorError::PortPoolExhausted);
        }
        let mut last = String::new();
        for port in free {
            let addr = SocketAddr::new(self.cfg.bind_addr, port);
            let bound = std::net::TcpListener::bind(addr)
                .and_then(|l| l.set_nonblocking(true).map(|_| l))
                .and_then(TcpListener::from_std);
            match bound {
                Ok(l) => {
                    inner.pool.claim(port);
                    return Ok((port, l));
                }
                Err(e) => last = format!("{addr}: {e}"),
            }
        }
        Err(OrchestratorError::Bind(last))
    }

    /// Validates, allocates a port and starts the session. Must run inside a tokio runtime.
    pub fn create_session(&self, req: SessionRequest) -> Result<SessionView, OrchestratorError> {
        let mut inner = self.inner.lock().unwrap();
        let mut cfg = self.resolve(&mut inner, &req)?;
        let (spec, initial) = match (&cfg.model_id, cfg.model_version) {
            (Some(id), Some(v)) => {
                let doc = &inner.registry.get(id, Some(v))?.document;
                (Some(doc.spec()), doc.params.clone())
            }
            _ => (None, Vec::new()),
        };
        let (port, listener) = self.bind_port(&mut inner)?;
        cfg.port = port;
        if let Err(e) = self.store.append(
            SESSIONS_FILE,
            &SessionEvent::Created {
                session_id: cfg.session_id.clone(),
                config: Box::new(cfg.clone()),
            },
        ) {
            inner.pool.release(port);
            return Err(e.into());
        }
        let validation = match (&spec, &self.validation) {
            (Some(s), Some(f)) => f(s),
            _ => None,
        };
        let shared = Arc::new(Mutex::new(SessionShared::default()));
        let (state_tx, state_rx) = watch::channel(SessionState::Created);
        let (cancel_tx, cancel_rx) = watch::channel(false);
        let mut session = Session::new(SessionParts {
            cfg: cfg.clone(),
            spec,
            initial,
            validation,
            shared: shared.clone(),
            state_tx,
            cancel: cancel_rx,
            listener,
            store: self.store.clone(),
            clock: self.cfg.clock,
        });
        session.open();
        let weak = Arc::downgrade(&self.inner);
        let task = tokio::spawn(async move {
            let end = session.run().await;
            if let Some(inner) = weak.upgrade() {
                inner.lock().unwrap().pool.release(port);
            }
            end
        });
        let handle = Handle {
            config: cfg.clone(),
            shared,
            state_rx,
            cancel: Some(cancel_tx),
            task: Some(task),
        };
        let view = handle.view();
        inner.sessions.insert(cfg.session_id.clone(), handle);
        tracing::info!(session = %cfg.session_id, port, kind = ?cfg.kind, "session created");
        Ok(view)
    }

    pub fn sessions(&self) -> Vec<SessionView> {
        self.inner
            .lock()
            .unwrap()
            .sessions
            .values()
            .map(Handle::view)
            .collect()
    }

    pub fn session(&self, id: &str) -> Result<SessionView, OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        inner
            .sessions
            .get(id)
            .map(Handle::view)
            .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))
    }

    pub fn state_history(&self, id: &str) -> Result<Vec<SessionState>, OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        let h = inner
            .sessions
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))?;
        let sh = h.shared.lock().unwrap();
        Ok(sh.machine.history().to_vec())
    }

    pub fn rounds(&self, id: &str) -> Result<Vec<RoundRecord>, OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        let h = inner
            .sessions
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))?;
        let rounds = h.shared.lock().unwrap().rounds.clone();
        Ok(rounds)
    }

    /// Current global parameters of a session.
    pub fn global_params(&self, id: &str) -> Result<Vec<f64>, OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        let h = inner
            .sessions
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))?;
        let global = h.shared.lock().unwrap().global.clone();
        Ok(global)
    }

    pub fn fa_result(&self, query_id: &str) -> Result<FaResult, OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        if let Some(r) = inner.fa_results.get(query_id) {
            return Ok(r.result.clone());
        }
        // live sessions have not been indexed yet
        inner
            .sessions
            .values()
            .filter_map(|h| h.shared.lock().unwrap().fa_result.clone())
            .find(|r| r.query_id() == query_id)
            .ok_or_else(|| OrchestratorError::UnknownQuery(query_id.into()))
    }

    /// Sessions a client of `platform` may join right now. Both platform
    /// encodings exist for every registered model, so the platform never
    /// filters anything out; app_version is accepted and ignored.
    pub fn list_tasks(&self, _platform: Platform, _app_version: &str) -> TaskManifest {
        let inner = self.inner.lock().unwrap();
        let tasks = inner
            .sessions
            .values()
            .filter(|h| h.shared.lock().unwrap().machine.current().is_live())
            .map(|h| TaskEntry {
                task_id: h.config.session_id.clone(),
                model_id: h.config.model_id.clone(),
                model_version: h.config.model_version,
                kind: h.config.kind,
                port: h.config.port,
                hyperparams: h.config.hyperparams,
                dp: h.config.dp,
            })
            .collect();
        TaskManifest { tasks }
    }

    /// Number of sessions that have not reached a terminal state.
    pub fn live_sessions(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .sessions
            .values()
            .filter(|h| !h.shared.lock().unwrap().machine.current().is_terminal())
            .count()
    }

    /// Drops `client_id` from `session` when its round-`round` instructions
    /// would be sent, and refuses its reconnection.
    pub fn inject_disconnect(
        &self,
        session: &str,
        client_id: &str,
        round: u64,
    ) -> Result<(), OrchestratorError> {
        let inner = self.inner.lock().unwrap();
        let h = inner
            .sessions
            .get(session)
            .ok_or_else(|| OrchestratorError::UnknownSession(session.into()))?;
        h.shared
            .lock()
            .unwrap()
            .faults
            .insert((client_id.to_string(), round));
        Ok(())
    }

    /// Stops a session and waits until its port is released.
    pub async fn stop_session(&self, id: &str) -> Result<SessionView, OrchestratorError> {
        let task = {
            let mut inner = self.inner.lock().unwrap();
            let h = inner
                .sessions
                .get_mut(id)
                .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))?;
            if let Some(c) = &h.cancel {
                let _ = c.send(true);
            }
            h.task.take()
        };
        if let Some(t) = task {
            let _ = t.await;
        }
        self.session(id)
    }

    /// Waits for a terminal state.
    pub async fn wait_session(&self, id: &str) -> Result<SessionView, OrchestratorError> {
        let mut rx = {
            let inner = self.inner.lock().unwrap();
            inner
                .sessions
                .get(id)
                .ok_or_else(|| OrchestratorError::UnknownSession(id.into()))?
                .state_rx
                .clone()
        };
        let _ = rx.wait_for(|s| s.is_terminal()).await;
        let task = {
            let mut inner = self.inner.lock().unwrap();
            inner.sessions.get_mut(id).and_then(|h| h.task.take())
        };
        // the port is released when the task returns
        if let Some(t) = task {
            let _ = t.await;
        }
        self.session(id)
    }

    /// Stops every live session.
    pub async fn shutdown(&self) {
        let ids: Vec<String> = self
            .inner
            .lock()
            .unwrap()
            .sessions
            .keys()
            .cloned()
            .collect();
        for id in ids {
            let _ = self.stop_session(&id).await;
        }
    }

    pub fn ports_in_use(&self) -> usize {
        self.inner.lock().unwrap().pool.in_use()
    }

    pub fn clock(&self) -> Clock {
        self.cfg.clock
    }
}
