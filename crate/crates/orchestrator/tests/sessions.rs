mod common;

use common::*;
use fedcampus_core::aggregation::{fedavg, ClientUpdate};
use fedcampus_core::analytics::{DpMeanQuery, FAQuery, FAQueryKind, FaResult, ReportPayload};
use fedcampus_core::model::Platform;
use fedcampus_core::protocol::{Body, SessionKind};
use fedcampus_orchestrator::state::is_legal_history;
use fedcampus_orchestrator::{FailureReason, OrchestratorError, SessionRequest, SessionState};

fn n_for(id: &str) -> u64 {
    id.trim_start_matches('c').parse::<u64>().unwrap() + 1
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn round_global_equals_direct_fedavg() {
    let o = orchestrator(2);
    register_linear(&o, "m", 2);
    let view = o
        .create_session(SessionRequest::fl("m", 3, 4, hp()).with_id("fl"))
        .unwrap();
    assert_eq!(view.state, SessionState::WaitingForClients);
    let ids: Vec<String> = (0..4).map(|k| format!("c{k}")).collect();
    let clients: Vec<_> = ids
        .iter()
        .map(|id| {
            spawn_client(
                view.port,
                "fl",
                id,
                Behaviour::Fit {
                    params: indexed_params,
                    n: n_for(id),
                },
            )
        })
        .collect();
    let end = o.wait_session("fl").await.unwrap();
    assert_eq!(end.state, SessionState::Completed);

    let expect = fedavg(
        &ids.iter()
            .map(|id| ClientUpdate {
                client_id: id.clone(),
                round: 3,
                params: indexed_params(id, 3),
                num_examples: n_for(id),
                platform: Platform::NameKeyed,
            })
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let got = o.global_params("fl").unwrap();
    assert_eq!(
        got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        expect.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );

    let rounds = o.rounds("fl").unwrap();
    assert_eq!(
        rounds.iter().map(|r| r.round).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    assert!(rounds
        .iter()
        .all(|r| r.n_selected == 4 && r.n_completed == 4));
    assert!(is_legal_history(&o.state_history("fl").unwrap()));
    assert_eq!(end.federated_eval.unwrap().n_clients, 4);

    for c in clients {
        let t = c.await.unwrap();
        let ends: Vec<u64> = t
            .received
            .iter()
            .filter_map(|b| {
                if let Body::RoundEnd(r) = b {
                    Some(r.round)
                } else {
                    None
                }
            })
            .collect();
        assert_eq!(ends, vec![1, 2, 3]);
        match t.received.last() {
            Some(Body::RoundEnd(r)) => {
                assert!(r.done);
                assert_eq!(r.global_params, expect);
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(o.ports_in_use(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ten_joined_half_fraction_min_three_selects_five() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let req = SessionRequest {
        client_fraction: 0.5,
        start_clients: Some(10),
        ..SessionRequest::fl("m", 3, 3, hp()).with_id("five")
    };
    let view = o.create_session(req).unwrap();
    let clients: Vec<_> = (0..10)
        .map(|k| {
            spawn_client(
                view.port,
                "five",
                &format!("c{k}"),
                Behaviour::Fit {
                    params: indexed_params,
                    n: 1,
                },
            )
        })
        .collect();
    let end = o.wait_session("five").await.unwrap();
    assert_eq!(end.state, SessionState::Completed);
    for r in o.rounds("five").unwrap() {
        assert_eq!((r.n_selected, r.n_completed), (5, 5), "{r:?}");
    }
    let mut fits = 0;
    for c in clients {
        fits += c
            .await
            .unwrap()
            .received
            .iter()
            .filter(|b| matches!(b, Body::FitIns(_)))
            .count();
    }
    assert_eq!(fits, 15);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn min_clients_floor_applies_to_selection() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let req = SessionRequest {
        client_fraction: 0.1,
        ..SessionRequest::fl("m", 2, 4, hp()).with_id("floor")
    };
    let view = o.create_session(req).unwrap();
    for k in 0..4 {
        spawn_client(
            view.port,
            "floor",
            &format!("c{k}"),
            Behaviour::Fit {
                params: indexed_params,
                n: 1,
            },
        );
    }
    o.wait_session("floor").await.unwrap();
    assert!(o.rounds("floor").unwrap().iter().all(|r| r.n_selected == 4));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn selection_is_seeded() {
    async fn run(seed: u64) -> Vec<usize> {
        let o = orchestrator(1);
        register_linear(&o, "m", 2);
        let req = SessionRequest {
            client_fraction: 0.3,
            start_clients: Some(10),
            ..SessionRequest::fl("m", 4, 1, hp())
                .with_id("seeded")
                .with_seed(seed)
        };
        let view = o.create_session(req).unwrap();
        let clients: Vec<_> = (0..10)
            .map(|k| {
                spawn_client(
                    view.port,
                    "seeded",
                    &format!("c{k}"),
                    Behaviour::Fit {
                        params: indexed_params,
                        n: 1,
                    },
                )
            })
            .collect();
        o.wait_session("seeded").await.unwrap();
        let mut counts = Vec::new();
        for c in clients {
            counts.push(
                c.await
                    .unwrap()
                    .received
                    .iter()
                    .filter(|b| matches!(b, Body::FitIns(_)))
                    .count(),
            );
        }
        counts
    }
    let a = run(5).await;
    assert_eq!(a.iter().sum::<usize>(), 12);
    assert_eq!(a, run(5).await);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn silent_clients_fail_after_one_retry() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let req = SessionRequest {
        round_timeout_ms: 150,
        ..SessionRequest::fl("m", 5, 2, hp()).with_id("quiet")
    };
    let view = o.create_session(req).unwrap();
    let clients: Vec<_> = (0..2)
        .map(|k| spawn_client(view.port, "quiet", &format!("c{k}"), Behaviour::Silent))
        .collect();
    let end = o.wait_session("quiet").await.unwrap();
    assert_eq!(
        end.state,
        SessionState::Failed {
            reason: FailureReason::InsufficientClients
        }
    );
    assert!(o.rounds("quiet").unwrap().is_empty());
    for c in clients {
        let t = c.await.unwrap();
        let fits = t
            .received
            .iter()
            .filter(|b| matches!(b, Body::FitIns(_)))
            .count();
        assert_eq!(fits, 2, "one attempt plus one retry");
        assert!(matches!(t.received.last(), Some(Body::ErrorMsg(_))));
    }
    assert!(is_legal_history(&o.state_history("quiet").unwrap()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn straggler_is_dropped_and_round_completes() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let req = SessionRequest {
        start_clients: Some(4),
        ..SessionRequest::fl("m", 3, 3, hp()).with_id("strag")
    };
    let view = o.create_session(req).unwrap();
    o.inject_disconnect("strag", "c3", 2).unwrap();
    let clients: Vec<_> = (0..4)
        .map(|k| {
            spawn_client(
                view.port,
                "strag",
                &format!("c{k}"),
                Behaviour::Fit {
                    params: indexed_params,
                    n: 1,
                },
            )
        })
        .collect();
    let end = o.wait_session("strag").await.unwrap();
    assert_eq!(end.state, SessionState::Completed);
    let rounds = o.rounds("strag").unwrap();
    assert_eq!(
        rounds
            .iter()
            .map(|r| (r.n_selected, r.n_completed))
            .collect::<Vec<_>>(),
        vec![(4, 4), (4, 3), (3, 3)]
    );
    let mut transcripts = Vec::new();
    for c in clients {
        transcripts.push(c.await.unwrap());
    }
    assert!(transcripts[3].closed_by_server);
    assert!(!transcripts[0].closed_by_server);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn banned_client_cannot_rejoin() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let req = SessionRequest {
        round_timeout_ms: 5_000,
        start_clients: Some(2),
        ..SessionRequest::fl("m", 2, 1, hp()).with_id("ban")
    };
    let view = o.create_session(req).unwrap();
    o.inject_disconnect("ban", "c0", 1).unwrap();
    let first = spawn_client(
        view.port,
        "ban",
        "c0",
        Behaviour::Fit {
            params: indexed_params,
            n: 1,
        },
    );
    let _quiet = spawn_client(view.port, "ban", "c1", Behaviour::Silent);
    let t = first.await.unwrap();
    assert!(t.closed_by_server);
    // round 1 is still waiting on c1
    let again = spawn_client(
        view.port,
        "ban",
        "c0",
        Behaviour::Fit {
            params: indexed_params,
            n: 1,
        },
    )
    .await
    .unwrap();
    assert!(
        matches!(again.received.first(), Some(Body::ErrorMsg(e)) if e.code == "Rejected"),
        "{:?}",
        again.received
    );
    o.stop_session("ban").await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fa_without_quorum_is_insufficient() {
    let o = orchestrator(1);
    let q = FAQuery {
        query_id: "q".into(),
        kind: FAQueryKind::DPMean(DpMeanQuery {
            attribute: "steps".into(),
            clip_lo: 0.0,
            clip_hi: 1.0,
            epsilon: 1.0,
        }),
    };
    let req = SessionRequest {
        join_timeout_ms: Some(300),
        ..SessionRequest::fa(q, 5).with_id("fa")
    };
    let view = o.create_session(req).unwrap();
    for k in 0..3 {
        spawn_client(
            view.port,
            "fa",
            &format!("c{k}"),
            Behaviour::Report(ReportPayload::Value(0.5)),
        );
    }
    let end = o.wait_session("fa").await.unwrap();
    assert_eq!(
        end.state,
        SessionState::Failed {
            reason: FailureReason::InsufficientClients
        }
    );
    assert!(matches!(
        o.fa_result("q"),
        Err(OrchestratorError::UnknownQuery(_))
    ));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fa_mean_query_completes() {
    let o = orchestrator(1);
    let q = FAQuery {
        query_id: "mean".into(),
        kind: FAQueryKind::DPMean(DpMeanQuery {
            attribute: "steps".into(),
            clip_lo: 0.0,
            clip_hi: 10.0,
            epsilon: 1.0,
        }),
    };
    let view = o
        .create_session(SessionRequest::fa(q, 4).with_id("fa"))
        .unwrap();
    assert_eq!(view.kind, SessionKind::FA);
    let clients: Vec<_> = (0..4)
        .map(|k| {
            spawn_client(
                view.port,
                "fa",
                &format!("c{k}"),
                Behaviour::Report(ReportPayload::Value(k as f64)),
            )
        })
        .collect();
    let end = o.wait_session("fa").await.unwrap();
    assert_eq!(end.state, SessionState::Completed);
    match o.fa_result("mean").unwrap() {
        FaResult::DPMean(r) => {
            assert_eq!(r.mean, 1.5);
            assert_eq!(r.n_reports, 4);
        }
        other => panic!("{other:?}"),
    }
    for c in clients {
        let t = c.await.unwrap();
        assert!(
            matches!(t.received.last(), Some(Body::RoundEnd(r)) if r.done && r.global_params == vec![1.5])
        );
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn wrong_session_and_wrong_first_message_are_rejected() {
    use fedcampus_core::protocol::*;
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let view = o
        .create_session(SessionRequest::fl("m", 1, 1, hp()).with_id("real"))
        .unwrap();
    let mut s = connect(view.port, "other", "c0", Platform::NameKeyed).await;
    let reply = read_message(&mut s).await.unwrap().unwrap();
    assert!(matches!(reply.body, Body::ErrorMsg(e) if e.code == "ProtocolError"));
    assert!(read_message(&mut s).await.unwrap().is_none());

    let mut s = tokio::net::TcpStream::connect(("127.0.0.1", view.port))
        .await
        .unwrap();
    let fit = FitRes {
        round: 1,
        params: vec![],
        num_examples: 1,
    };
    write_message(&mut s, &Message::new("real", Body::FitRes(fit)))
        .await
        .unwrap();
    let reply = read_message(&mut s).await.unwrap().unwrap();
    assert!(matches!(reply.body, Body::ErrorMsg(_)));
    assert_eq!(o.session("real").unwrap().n_clients_joined, 0);
    o.stop_session("real").await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stop_fails_session_and_frees_port() {
    let o = orchestrator(1);
    register_linear(&o, "m", 2);
    let view = o
        .create_session(SessionRequest::fl("m", 1, 3, hp()).with_id("a"))
        .unwrap();
    let c = spawn_client(view.port, "a", "c0", Behaviour::Silent);
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    assert_eq!(o.session("a").unwrap().n_clients_joined, 1);
    let end = o.stop_session("a").await.unwrap();
    assert_eq!(
        end.state,
        SessionState::Failed {
            reason: FailureReason::Stopped
        }
    );
    assert!(c
        .await
        .unwrap()
        .received
        .iter()
        .any(|b| matches!(b, Body::ErrorMsg(_))));
    assert_eq!(o.ports_in_use(), 0);
    let again = o
        .create_session(SessionRequest::fl("m", 1, 3, hp()).with_id("b"))
        .unwrap();
    assert_eq!(again.port, view.port);
    o.stop_session("b").await.unwrap();
}
