//! One FL or FA session: its listener, connected clients and round loop.
//!
//! Connection tasks only move bytes. All session state lives in the loop
//! task, which consumes their events from a queue.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedcampus_core::aggregation::{fedavg, ClientUpdate};
use fedcampus_core::analytics::{
    heavy_hitters, mean_of_reports, FAQueryKind, FaResult, PerturbedReport,
};
use fedcampus_core::model::{ModelSpec, Platform};
use fedcampus_core::protocol::{
    read_message, write_message, Body, ErrorMsg, EvaluateIns, FAQueryIns, FitIns, JoinAccept,
    Message, RoundEnd,
};
use fedcampus_core::trainer::{Dataset, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::time::{sleep_until, timeout, Instant};

use crate::config::{Clock, FederatedEval, RoundRecord, SessionConfig};
use crate::state::{FailureReason, SessionState, StateMachine};
use crate::store::{Store, FA_RESULTS_FILE, ROUNDS_FILE, SESSIONS_FILE};

/// How long a fresh connection may take to send its JoinRequest.
const JOIN_GRACE: Duration = Duration::from_secs(10);

/// Server-side validation data for a model, if any.
pub type ValidationFn = Arc<dyn Fn(&ModelSpec) -> Option<Dataset> + Send + Sync>;

/// Lines of `sessions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum SessionEvent {
    Created {
        session_id: String,
        config: Box<SessionConfig>,
    },
    State {
        session_id: String,
        state: SessionState,
    },
}

/// Lines of `fa_results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaRecord {
    pub session_id: String,
    pub result: FaResult,
}

/// Snapshot state readable from outside the loop.
#[derive(Debug, Default)]
pub struct SessionShared {
    pub machine: StateMachine,
    pub rounds: Vec<RoundRecord>,
    pub joined: usize,
    pub global: Vec<f64>,
    pub federated_eval: Option<FederatedEval>,
    pub fa_result: Option<FaResult>,
    /// `(client_id, round)`: drop that client when its FitIns would be sent, and refuse its rejoin.
    pub faults: HashSet<(String, u64)>,
}

enum Event {
    Joined {
        conn: u64,
        client_id: String,
        platform: Platform,
        tx: mpsc::UnboundedSender<Message>,
        kill: oneshot::Sender<()>,
    },
    Msg {
        conn: u64,
        client_id: String,
        body: Body,
    },
    Gone {
        conn: u64,
        client_id: String,
    },
}

struct Client {
    conn: u64,
    platform: Platform,
    tx: mpsc::UnboundedSender<Message>,
    _kill: oneshot::Sender<()>,
}

enum Step {
    Msg(String, Body),
    Membership,
    Timeout,
}

pub(crate) struct SessionParts {
    pub cfg: SessionConfig,
    pub spec: Option<ModelSpec>,
    pub initial: Vec<f64>,
    pub validation: Option<Dataset>,
    pub shared: Arc<Mutex<SessionShared>>,
    pub state_tx: watch::Sender<SessionState>,
    pub cancel: watch::Receiver<bool>,
    pub listener: TcpListener,
    pub store: Store,
    pub clock: Clock,
}

pub(crate) struct Session {
    cfg: SessionConfig,
    spec: Option<ModelSpec>,
    global: Vec<f64>,
    validation: Option<Dataset>,
    shared: Arc<Mutex<SessionShared>>,
    state_tx: watch::Sender<SessionState>,
    cancel: watch::Receiver<bool>,
    listener: TcpListener,
    store: Store,
    clock: Clock,
    tick: u64,
    events_tx: mpsc::UnboundedSender<Event>,
    events_rx: mpsc::UnboundedReceiver<Event>,
    clients: BTreeMap<String, Client>,
    banned: HashSet<String>,
    next_conn: u64,
    select_rng: ChaCha8Rng,
}

impl Session {
    pub(crate) fn new(p: SessionParts) -> Self {
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        let select_rng =
            ChaCha8Rng::seed_from_u64(fedcampus_core::seed::derive_seed(p.cfg.seed, "select"));
        p.shared.lock().unwrap().global = p.initial.clone();
        Session {
            cfg: p.cfg,
            spec: p.spec,
            global: p.initial,
            validation: p.validation,
            shared: p.shared,
            state_tx: p.state_tx,
            cancel: p.cancel,
            listener: p.listener,
            store: p.store,
            clock: p.clock,
            tick: 0,
            events_tx,
            events_rx,
            clients: BTreeMap::new(),
            banned: HashSet::new(),
            next_conn: 0,
            select_rng,
        }
    }

    /// Created -> WaitingForClients; the listener is already bound.
    pub(crate) fn open(&mut self) {
        self.transition(SessionState::WaitingForClients);
    }

    /// Runs to a terminal state, then closes every connection and the listener.
    pub(crate) async fn run(mut self) -> SessionState {
        let outcome = match self.cfg.kind {
            fedcampus_core::protocol::SessionKind::FL => self.run_fl().await,
            fedcampus_core::protocol::SessionKind::FA => self.run_fa().await,
        };
        if let Err(reason) = outcome {
            tracing::info!(session = %self.cfg.session_id, ?reason, "session failed");
            self.transition(SessionState::Failed { reason });
            let msg = self.msg(Body::ErrorMsg(ErrorMsg {
                code: "SessionFailed".into(),
                detail: format!("{reason:?}"),
            }));
            for c in self.clients.values() {
                let _ = c.tx.send(msg.clone());
            }
        }
        let end = self.shared.lock().unwrap().machine.current();
        self.clients.clear();
        drop(self.listener);
        end
    }

    fn msg(&self, body: Body) -> Message {
        Message::new(self.cfg.session_id.clone(), body)
    }

    fn stamp(&mut self) -> u64 {
        self.tick += 1;
        self.clock.stamp(self.tick)
    }

    fn transition(&mut self, to: SessionState) {
        {
            let mut sh = self.shared.lock().unwrap();
            if let Err(e) = sh.machine.advance(to) {
                tracing::error!(session = %self.cfg.session_id, "{e}");
                return;
            }
        }
        let ev = SessionEvent::State {
            session_id: self.cfg.session_id.clone(),
            state: to,
        };
        if let Err(e) = self.store.append(SESSIONS_FILE, &ev) {
            tracing::error!("{e}");
        }
        self.state_tx.send_replace(to);
    }

    fn current_round(&self) -> u64 {
        self.shared
            .lock()
            .unwrap()
            .machine
            .current()
            .round()
            .unwrap_or(0)
    }

    fn set_joined(&self) {
        self.shared.lock().unwrap().joined = self.clients.len();
    }

    /// Waits for the next client message, a membership change or the deadline.
    async fn step(&mut self, deadline: Option<Instant>) -> Result<Step, FailureReason> {
        loop {
            let sleep = async {
                match deadline {
                    Some(d) => sleep_until(d).await,
                    None => std::future::pending().await,
                }
            };
            tokio::select! {
                biased;
                changed = self.cancel.changed() => {
                    if changed.is_err() || *self.cancel.borrow() {
                        return Err(FailureReason::Stopped);
                    }
                }
                Some(ev) = self.events_rx.recv() => {
                    if let Some(step) = self.on_event(ev) {
                        return Ok(step);
                    }
                }
                accepted = self.listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        self.next_conn += 1;
                        tokio::spawn(serve_conn(stream, self.next_conn, self.cfg.session_id.clone(), self.events_tx.clone()));
                    }
                    Err(e) => tracing::warn!(session = %self.cfg.session_id, "accept: {e}"),
                },
                _ = sleep => return Ok(Step::Timeout),
            }
        }
    }

    fn on_event(&mut self, ev: Event) -> Option<Step> {
        match ev {
            Event::Joined {
                conn,
                client_id,
                platform,
                tx,
                kill,
            } => {
                if self.banned.contains(&client_id) {
                    let _ = tx.send(self.msg(Body::ErrorMsg(ErrorMsg {
                        code: "Rejected".into(),
                        detail: "client banned".into(),
                    })));
                    return None;
                }
                let accept = JoinAccept {
                    round: self.current_round(),
                    model_spec: self.spec.clone(),
                };
                let _ = tx.send(self.msg(Body::JoinAccept(accept)));
                self.clients.insert(
                    client_id,
                    Client {
                        conn,
                        platform,
                        tx,
                        _kill: kill,
                    },
                );
                self.set_joined();
                Some(Step::Membership)
            }
            Event::Msg {
                conn,
                client_id,
                body,
            } => match self.clients.get(&client_id) {
                Some(c) if c.conn == conn => Some(Step::Msg(client_id, body)),
                _ => None,
            },
            Event::Gone { conn, client_id } => {
                if self.clients.get(&client_id).is_some_and(|c| c.conn == conn) {
                    self.clients.remove(&client_id);
                    self.set_joined();
                    Some(Step::Membership)
                } else {
                    None
                }
            }
        }
    }

    async fn wait_for_clients(&mut self) -> Result<(), FailureReason> {
        let deadline = self
            .cfg
            .join_timeout_ms
            .map(|ms| Instant::now() + Duration::from_millis(ms));
        while self.clients.len() < self.cfg.start_clients {
            if let Step::Timeout = self.step(deadline).await? {
                return Err(FailureReason::InsufficientClients);
            }
        }
        Ok(())
    }

    /// Before an attempt, gives departed clients up to one round timeout to return.
    async fn await_quorum(&mut self) -> Result<(), FailureReason> {
        let deadline = self.round_deadline();
        while self.clients.len() < self.cfg.min_clients {
            if let Step::Timeout = self.step(Some(deadline)).await? {
                break;
            }
        }
        Ok(())
    }

    /// Chooses this attempt's participants, uniformly without replacement.
    fn select(&mut self) -> Vec<(String, u64)> {
        let joined: Vec<(&String, &Client)> = self.clients.iter().collect();
        let n = self.cfg.selection_size(joined.len());
        let mut idx = rand::seq::index::sample(&mut self.select_rng, joined.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| (joined[i].0.clone(), joined[i].1.conn))
            .collect()
    }

    /// Applies an injected fault for `client` in `round`, returning whether it fired.
    fn fire_fault(&mut self, client: &str, round: u64) -> bool {
        let hit = self
            .shared
            .lock()
            .unwrap()
            .faults
            .remove(&(client.to_string(), round));
        if hit {
            tracing::info!(session = %self.cfg.session_id, client, round, "injected disconnect");
            self.banned.insert(client.to_string());
            self.clients.remove(client);
            self.set_joined();
        }
        hit
    }

    fn send(&self, client: &str, body: Body) {
        if let Some(c) = self.clients.get(client) {
            let _ = c.tx.send(self.msg(body));
        }
    }

    fn broadcast(&self, body: Body) {
        let msg = self.msg(body);
        for c in self.clients.values() {
            let _ = c.tx.send(msg.clone());
        }
    }

    fn round_deadline(&self) -> Instant {
        Instant::now() + Duration::from_millis(self.cfg.round_timeout_ms)
    }

    /// Drops pending clients that left or reconnected since selection.
    fn prune(&self, pending: &mut BTreeMap<String, u64>) {
        pending.retain(|id, conn| self.clients.get(id).is_some_and(|c| c.conn == *conn));
    }

    async fn fit_attempt(
        &mut self,
        round: u64,
    ) -> Result<(usize, Vec<ClientUpdate>), FailureReason> {
        self.await_quorum().await?;
        let selected = self.select();
        let hp = self.cfg.hyperparams.expect("FL sessions carry hyperparams");
        let mut pending = BTreeMap::new();
        for (id, conn) in &selected {
            if self.fire_fault(id, round) {
                continue;
            }
            self.send(
                id,
                Body::FitIns(FitIns {
                    round,
                    params: self.global.clone(),
                    hyperparams: hp,
                }),
            );
            pending.insert(id.clone(), *conn);
        }
        let n_params = self.global.len();
        let mut updates = Vec::new();
        let deadline = self.round_deadline();
        while !pending.is_empty() {
            match self.step(Some(deadline)).await? {
                Step::Msg(id, Body::FitRes(res))
                    if res.round == round && pending.contains_key(&id) =>
                {
                    pending.remove(&id);
                    if res.params.len() != n_params
                        || res.num_examples == 0
                        || res.params.iter().any(|x| !x.is_finite())
                    {
                        self.send(
                            &id,
                            Body::ErrorMsg(ErrorMsg {
                                code: "BadUpdate".into(),
                                detail: format!("round {round}"),
                            }),
                        );
                        continue;
                    }
                    let platform = self.clients[&id].platform;
                    updates.push(ClientUpdate {
                        client_id: id,
                        round,
                        params: res.params,
                        num_examples: res.num_examples,
                        platform,
                    });
                }
                Step::Msg(..) => {}
                Step::Membership => self.prune(&mut pending),
                Step::Timeout => break,
            }
        }
        Ok((selected.len(), updates))
    }

    fn validation_loss(&self) -> Option<f64> {
        let (spec, data) = (self.spec.as_ref()?, self.validation.as_ref()?);
        let mut t = Trainer::from_spec(spec.clone()).ok()?;
        t.set_parameters(&self.global).ok()?;
        t.evaluate(data).ok().map(|(loss, _)| loss)
    }

    fn record_round(&mut self, rec: RoundRecord) {
        if let Err(e) = self.store.append(ROUNDS_FILE, &rec) {
            tracing::error!("{e}");
        }
        let mut sh = self.shared.lock().unwrap();
        sh.global = self.global.clone();
        sh.rounds.push(rec);
    }

    async fn run_fl(&mut self) -> Result<(), FailureReason> {
        self.wait_for_clients().await?;
        for round in 1..=self.cfg.rounds {
            self.transition(SessionState::InRound { round });
            let started_at = self.stamp();
            let mut retried = false;
            let (n_selected, updates) = loop {
                let (n, ups) = self.fit_attempt(round).await?;
                if ups.len() >= self.cfg.min_clients && !ups.is_empty() {
                    break (n, ups);
                }
                if retried {
                    return Err(FailureReason::InsufficientClients);
                }
                tracing::info!(session = %self.cfg.session_id, round, got = ups.len(), "round short of clients; retrying");
                retried = true;
            };
            self.transition(SessionState::Aggregating { round });
            self.global = fedavg(&updates).map_err(|e| {
                tracing::error!(session = %self.cfg.session_id, "fedavg: {e}");
                FailureReason::Internal
            })?;
            let global_loss = self.validation_loss();
            let ended_at = self.stamp();
            self.record_round(RoundRecord {
                session_id: self.cfg.session_id.clone(),
                round,
                n_selected,
                n_completed: updates.len(),
                global_loss,
                started_at,
                ended_at,
            });
            let done = round == self.cfg.rounds;
            if done {
                self.federated_evaluate(round).await?;
            }
            self.broadcast(Body::RoundEnd(RoundEnd {
                round,
                global_params: self.global.clone(),
                done,
            }));
        }
        self.transition(SessionState::Completed);
        Ok(())
    }

    /// Sends the final model to every joined client and averages their metrics.
    async fn federated_evaluate(&mut self, round: u64) -> Result<(), FailureReason> {
        let mut pending: BTreeMap<String, u64> = self
            .clients
            .iter()
            .map(|(id, c)| (id.clone(), c.conn))
            .collect();
        self.broadcast(Body::EvaluateIns(EvaluateIns {
            round,
            params: self.global.clone(),
        }));
        let mut results = BTreeMap::new();
        let deadline = self.round_deadline();
        while !pending.is_empty() {
            match self.step(Some(deadline)).await? {
                Step::Msg(id, Body::EvaluateRes(res))
                    if res.round == round && pending.remove(&id).is_some() =>
                {
                    if res.loss.is_finite() && res.metric.is_finite() && res.num_examples > 0 {
                        results.insert(id, res);
                    }
                }
                Step::Msg(..) => {}
                Step::Membership => self.prune(&mut pending),
                Step::Timeout => break,
            }
        }
        let n: u64 = results.values().map(|r| r.num_examples).sum();
        if n > 0 {
            let (loss, metric) = results.values().fold((0.0, 0.0), |(l, m), r| {
                (
                    l + r.loss * r.num_examples as f64,
                    m + r.metric * r.num_examples as f64,
                )
            });
            self.shared.lock().unwrap().federated_eval = Some(FederatedEval {
                loss: loss / n as f64,
                metric: metric / n as f64,
                num_examples: n,
                n_clients: results.len(),
            });
        }
        Ok(())
    }

    async fn fa_attempt(&mut self) -> Result<(usize, Vec<PerturbedReport>), FailureReason> {
        let query = self.cfg.query.clone().expect("FA sessions carry a query");
        self.await_quorum().await?;
        let selected = self.select();
        let mut pending = BTreeMap::new();
        for (id, conn) in &selected {
            if self.fire_fault(id, 1) {
                continue;
            }
            self.send(
                id,
                Body::FAQueryIns(FAQueryIns {
                    query: query.clone(),
                }),
            );
            pending.insert(id.clone(), *conn);
        }
        let mut reports = Vec::new();
        let deadline = self.round_deadline();
        while !pending.is_empty() {
            match self.step(Some(deadline)).await? {
                Step::Msg(id, Body::FAReportRes(rep)) if pending.remove(&id).is_some() => {
                    // only the pseudonymous report is kept
                    reports.push(PerturbedReport {
                        query_id: query.query_id.clone(),
                        pseudonym: rep.pseudonym,
                        payload: rep.payload,
                        cluster: rep.cluster,
                    });
                }
                Step::Msg(..) => {}
                Step::Membership => self.prune(&mut pending),
                Step::Timeout => break,
            }
        }
        reports.sort_by(|a, b| a.pseudonym.cmp(&b.pseudonym));
        Ok((selected.len(), reports))
    }

    async fn run_fa(&mut self) -> Result<(), FailureReason> {
        let query = self.cfg.query.clone().expect("FA sessions carry a query");
        self.wait_for_clients().await?;
        self.transition(SessionState::InRound { round: 1 });
        let started_at = self.stamp();
        let mut retried = false;
        let (n_selected, reports) = loop {
            let (n, reps) = self.fa_attempt().await?;
            if reps.len() >= self.cfg.min_clients && !reps.is_empty() {
                break (n, reps);
            }
            if retried {
                return Err(FailureReason::InsufficientClients);
            }
            retried = true;
        };
        self.transition(SessionState::Aggregating { round: 1 });
        let computed = match &query.kind {
            FAQueryKind::HeavyHitters(q) => {
                heavy_hitters(&reports, &query.query_id, q).map(FaResult::HeavyHitters)
            }
            FAQueryKind::DPMean(q) => {
                mean_of_reports(&reports, &query.query_id, q).map(FaResult::DPMean)
            }
        };
        let result = computed.map_err(|e| {
            tracing::error!(session = %self.cfg.session_id, "analytics: {e}");
            FailureReason::Internal
        })?;
        let rec = FaRecord {
            session_id: self.cfg.session_id.clone(),
            result: result.clone(),
        };
        if let Err(e) = self.store.append(FA_RESULTS_FILE, &rec) {
            tracing::error!("{e}");
        }
        self.global = match &result {
            FaResult::DPMean(r) => vec![r.mean],
            FaResult::HeavyHitters(_) => Vec::new(),
        };
        self.shared.lock().unwrap().fa_result = Some(result);
        let ended_at = self.stamp();
        self.record_round(RoundRecord {
            session_id: self.cfg.session_id.clone(),
            round: 1,
            n_selected,
            n_completed: reports.len(),
            global_loss: None,
            started_at,
            ended_at,
        });
        self.broadcast(Body::RoundEnd(RoundEnd {
            round: 1,
            global_params: self.global.clone(),
            done: true,
        }));
        self.transition(SessionState::Completed);
        Ok(())
    }
}

/// Accepts one client: waits for its JoinRequest, then relays frames both ways.
async fn serve_conn(
    stream: TcpStream,
    conn: u64,
    session_id: String,
    events: mpsc::UnboundedSender<Event>,
) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let first = match timeout(JOIN_GRACE, read_message(&mut rd)).await {
        Ok(Ok(Some(m))) => m,
        Ok(Err(e)) => {
            let err = Message::new(
                session_id,
                Body::ErrorMsg(ErrorMsg {
                    code: "ProtocolError".into(),
                    detail: e.to_string(),
                }),
            );
            let _ = write_message(&mut wr, &err).await;
            return;
        }
        _ => return,
    };
    let join = match first.body {
        Body::JoinRequest(j) if first.session == session_id => j,
        other => {
            let detail = if first.session != session_id {
                format!("this port serves session {session_id}")
            } else {
                format!("expected JoinRequest, got {}", other.type_name())
            };
            let err = Message::new(
                session_id,
                Body::ErrorMsg(ErrorMsg {
                    code: "ProtocolError".into(),
                    detail,
                }),
            );
            let _ = write_message(&mut wr, &err).await;
            return;
        }
    };
    let client_id = join.client_id;
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let (kill_tx, mut kill_rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if write_message(&mut wr, &m).await.is_err() {
                break;
            }
        }
    });
    let joined = Event::Joined {
        conn,
        client_id: client_id.clone(),
        platform: join.platform,
        tx,
        kill: kill_tx,
    };
    if events.send(joined).is_err() {
        return;
    }
    loop {
        tokio::select! {
            _ = &mut kill_rx => return,
            read = read_message(&mut rd) => match read {
                Ok(Some(m)) => {
                    if events.send(Event::Msg { conn, client_id: client_id.clone(), body: m.body }).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => {
                    let _ = events.send(Event::Gone { conn, client_id });
                    return;
                }
            }
        }
    }
}
