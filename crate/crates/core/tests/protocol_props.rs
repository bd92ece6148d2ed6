use fedcampus_core::aggregation::DPConfig;
use fedcampus_core::analytics::{
    BucketSpec, DpMeanQuery, FAQuery, FAQueryKind, HeavyHittersQuery, Pseudonym, ReportPayload,
};
use fedcampus_core::model::{ModelSpec, Platform};
use fedcampus_core::protocol::*;
use fedcampus_core::trainer::{BatchSize, Hyperparams};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
}

fn text() -> impl Strategy<Value = String> {
    "[ -~\\u{e9}\\u{4e2d}]{0,12}"
}

fn platform() -> impl Strategy<Value = Platform> {
    prop_oneof![Just(Platform::NameKeyed), Just(Platform::IndexKeyed)]
}

fn hyperparams() -> impl Strategy<Value = Hyperparams> {
    (
        finite(),
        1u32..10,
        prop_oneof![
            Just(BatchSize::Full),
            (1usize..64).prop_map(BatchSize::Size)
        ],
        any::<u64>(),
    )
        .prop_map(|(learning_rate, epochs, batch_size, seed)| Hyperparams {
            learning_rate,
            epochs,
            batch_size,
            seed,
        })
}

fn dp() -> impl Strategy<Value = DPConfig> {
    (
        any::<bool>(),
        finite(),
        finite(),
        finite(),
        prop::option::of(finite()),
    )
        .prop_map(
            |(enabled, clip_norm, epsilon, delta, sigma_override)| DPConfig {
                enabled,
                clip_norm,
                epsilon,
                delta,
                sigma_override,
            },
        )
}

fn query() -> impl Strategy<Value = FAQuery> {
    let hh = (
        prop::collection::vec(finite(), 0..5),
        any::<bool>(),
        1usize..5,
        finite(),
        text(),
    )
        .prop_map(|(edges, clamp, k, epsilon, cluster_by)| {
            FAQueryKind::HeavyHitters(HeavyHittersQuery {
                buckets: BucketSpec { edges, clamp },
                k,
                epsilon,
                cluster_by,
            })
        });
    let mean = (text(), finite(), finite(), finite()).prop_map(
        |(attribute, clip_lo, clip_hi, epsilon)| {
            FAQueryKind::DPMean(DpMeanQuery {
                attribute,
                clip_lo,
                clip_hi,
                epsilon,
            })
        },
    );
    (text(), prop_oneof![hh, mean]).prop_map(|(query_id, kind)| FAQuery { query_id, kind })
}

fn body() -> impl Strategy<Value = Body> {
    let params = || prop::collection::vec(finite(), 0..20);
    prop_oneof![
        (text(), platform(), text()).prop_map(|(client_id, platform, app_version)| {
            Body::JoinRequest(JoinRequest {
                client_id,
                platform,
                app_version,
            })
        }),
        (
            any::<u64>(),
            prop::option::of((text(), 1usize..5).prop_map(|(id, d)| ModelSpec::linear(id, d)))
        )
            .prop_map(|(round, model_spec)| Body::JoinAccept(JoinAccept { round, model_spec })),
        (platform(), text()).prop_map(|(platform, app_version)| Body::TaskRequest(TaskRequest {
            platform,
            app_version
        })),
        prop::collection::vec(
            (
                text(),
                prop::option::of(text()),
                prop::option::of(any::<u64>()),
                any::<bool>(),
                any::<u16>(),
                prop::option::of(hyperparams()),
                dp()
            ),
            0..3
        )
        .prop_map(|rows| Body::TaskManifest(TaskManifest {
            tasks: rows
                .into_iter()
                .map(
                    |(task_id, model_id, model_version, fl, port, hyperparams, dp)| TaskEntry {
                        task_id,
                        model_id,
                        model_version,
                        kind: if fl { SessionKind::FL } else { SessionKind::FA },
                        port,
                        hyperparams,
                        dp,
                    }
                )
                .collect()
        })),
        (any::<u64>(), params(), hyperparams()).prop_map(|(round, params, hyperparams)| {
            Body::FitIns(FitIns {
                round,
                params,
                hyperparams,
            })
        }),
        (any::<u64>(), params(), any::<u64>()).prop_map(|(round, params, num_examples)| {
            Body::FitRes(FitRes {
                round,
                params,
                num_examples,
            })
        }),
        (any::<u64>(), params())
            .prop_map(|(round, params)| Body::EvaluateIns(EvaluateIns { round, params })),
        (any::<u64>(), finite(), finite(), any::<u64>()).prop_map(
            |(round, loss, metric, num_examples)| Body::EvaluateRes(EvaluateRes {
                round,
                loss,
                metric,
                num_examples
            })
        ),
        query().prop_map(|query| Body::FAQueryIns(FAQueryIns { query })),
        (
            text(),
            prop_oneof![
                (0usize..100).prop_map(ReportPayload::Bucket),
                finite().prop_map(ReportPayload::Value)
            ],
            prop::option::of(text())
        )
            .prop_map(|(p, payload, cluster)| Body::FAReportRes(FAReportRes {
                pseudonym: Pseudonym(p),
                payload,
                cluster
            })),
        (any::<u64>(), params(), any::<bool>()).prop_map(|(round, global_params, done)| {
            Body::RoundEnd(RoundEnd {
                round,
                global_params,
                done,
            })
        }),
        (text(), text()).prop_map(|(code, detail)| Body::ErrorMsg(ErrorMsg { code, detail })),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (text(), body()).prop_map(|(session, body)| Message::new(session, body))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trips(msg in message()) {
        let bytes = encode_message(&msg).unwrap();
        let back = decode_message(&bytes).unwrap();
        prop_assert_eq!(&back, &msg);
        // deterministic, and decode-then-encode reproduces the bytes
        prop_assert_eq!(encode_message(&back).unwrap(), bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_message(&bytes);
        let _ = decode_body(&bytes);
    }

    #[test]
    fn mutated_frames_never_panic(msg in message(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4)) {
        let mut bytes = encode_message(&msg).unwrap();
        for (idx, b) in flips {
            let i = idx.index(bytes.len());
            bytes[i] = b;
        }
        let _ = decode_message(&bytes);
    }
}
