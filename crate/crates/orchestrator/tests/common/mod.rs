#![allow(dead_code)]

use std::sync::atomic::{AtomicU16, Ordering};

use fedcampus_core::analytics::{Pseudonym, ReportPayload};
use fedcampus_core::model::{ModelSpec, Platform};
use fedcampus_core::protocol::*;
use fedcampus_core::trainer::{BatchSize, Hyperparams};
use fedcampus_orchestrator::{Orchestrator, PoolRange, ServerConfig};
use tokio::net::TcpStream;
use tokio::task::JoinHandle;

static NEXT_BASE: AtomicU16 = AtomicU16::new(0);

/// A pool range no other test in this process uses.
pub fn pool(size: u16) -> PoolRange {
    let offset = NEXT_BASE.fetch_add(64, Ordering::SeqCst);
    let base = 20000 + (std::process::id() % 200) as u16 * 128 + offset;
    PoolRange { base, size }
}

pub fn orchestrator(size: u16) -> Orchestrator {
    Orchestrator::new(ServerConfig::new(0, pool(size), None, 42)).unwrap()
}

pub fn hp() -> Hyperparams {
    Hyperparams {
        learning_rate: 0.1,
        epochs: 1,
        batch_size: BatchSize::Full,
        seed: 0,
    }
}

pub fn register_linear(o: &Orchestrator, id: &str, d: usize) {
    let doc = ModelSpec::linear(id, d).with_params(vec![0.0; d + 1]);
    o.register_model(&serde_json::to_vec(&doc).unwrap())
        .unwrap();
}

#[derive(Clone)]
pub enum Behaviour {
    /// FitRes with `params(round)` and `n` examples.
    Fit {
        params: fn(&str, u64) -> Vec<f64>,
        n: u64,
    },
    /// Joins and never answers.
    Silent,
    /// Answers analytics queries with a fixed payload.
    Report(ReportPayload),
}

#[derive(Debug, Default)]
pub struct Transcript {
    pub received: Vec<Body>,
    pub closed_by_server: bool,
}

pub async fn connect(port: u16, session: &str, client_id: &str, platform: Platform) -> TcpStream {
    let mut s = TcpStream::connect(("127.0.0.1", port)).await.unwrap();
    let join = JoinRequest {
        client_id: client_id.into(),
        platform,
        app_version: "1".into(),
    };
    write_message(&mut s, &Message::new(session, Body::JoinRequest(join)))
        .await
        .unwrap();
    s
}

pub fn spawn_client(
    port: u16,
    session: &str,
    client_id: &str,
    behaviour: Behaviour,
) -> JoinHandle<Transcript> {
    let (session, client_id) = (session.to_string(), client_id.to_string());
    tokio::spawn(async move {
        let mut s = connect(port, &session, &client_id, Platform::NameKeyed).await;
        let mut t = Transcript::default();
        loop {
            let msg = match read_message(&mut s).await {
                Ok(Some(m)) => m,
                _ => {
                    t.closed_by_server = true;
                    return t;
                }
            };
            let reply = match (&msg.body, &behaviour) {
                (Body::FitIns(f), Behaviour::Fit { params, n }) => Some(Body::FitRes(FitRes {
                    round: f.round,
                    params: params(&client_id, f.round),
                    num_examples: *n,
                })),
                (Body::EvaluateIns(e), Behaviour::Fit { n, .. }) => {
                    Some(Body::EvaluateRes(EvaluateRes {
                        round: e.round,
                        loss: 1.0,
                        metric: 0.5,
                        num_examples: *n,
                    }))
                }
                (Body::FAQueryIns(_), Behaviour::Report(p)) => {
                    Some(Body::FAReportRes(FAReportRes {
                        pseudonym: Pseudonym(format!("p-{client_id}")),
                        payload: *p,
                        cluster: None,
                    }))
                }
                _ => None,
            };
            let stop = matches!(&msg.body, Body::RoundEnd(r) if r.done)
                || matches!(msg.body, Body::ErrorMsg(_));
            t.received.push(msg.body);
            if let Some(body) = reply {
                if write_message(&mut s, &Message::new(session.clone(), body))
                    .await
                    .is_err()
                {
                    t.closed_by_server = true;
                    return t;
                }
            }
            if stop {
                return t;
            }
        }
    })
}

/// Client `cK` sends `[K, round, K * round]`.
pub fn indexed_params(id: &str, round: u64) -> Vec<f64> {
    let k: f64 = id.trim_start_matches('c').parse().unwrap();
    vec![k, round as f64, k * round as f64]
}
