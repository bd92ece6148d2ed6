//! A simulated device speaking the session protocol over a real socket.

use std::net::SocketAddr;

use fedcampus_core::aggregation::privatize_update;
use fedcampus_core::analytics::{
    bucketize, de_identify, krr_perturb, perturb_value, FAQuery, FAQueryKind, RawRecord,
    ReportPayload,
};
use fedcampus_core::model::{decode_from_platform, encode_for_platform, ModelSpec, Platform};
use fedcampus_core::protocol::{
    read_message, write_message, Body, ErrorMsg, EvaluateRes, FAReportRes, FitIns, FitRes,
    JoinRequest, Message, SessionKind, TaskEntry,
};
use fedcampus_core::seed::{derive_indexed, derive_seed};
use fedcampus_core::trainer::{Dataset, Hyperparams, TrainError, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpStream;

use crate::data::{attribute_mean, DeviceProfile, HealthRecord};
use crate::features::TaskModel;

pub const APP_VERSION: &str = "1.0.0";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection lost")]
    ConnectionLost,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("session ended with {code}: {detail}")]
    SessionFailed { code: String, detail: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// What a device observed over one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: String,
    pub platform: Platform,
    pub task_id: String,
    pub rounds_participated: u64,
    pub final_local_loss: Option<f64>,
    /// Global parameters from the last RoundEnd seen.
    pub global_params: Vec<f64>,
    pub reconnects: u32,
}

/// Everything a device carries: identity, local data and how to read it.
#[derive(Debug, Clone)]
pub struct Device {
    pub profile: DeviceProfile,
    pub records: Vec<HealthRecord>,
    /// Skip the platform encoding and hand canonical vectors to the trainer directly.
    pub bypass_encoding: bool,
}

impl Device {
    pub fn new(profile: DeviceProfile, records: Vec<HealthRecord>) -> Self {
        Device {
            profile,
            records,
            bypass_encoding: false,
        }
    }

    /// Round-trips `params` through this device's platform encoding.
    pub fn through_platform(
        &self,
        spec: &ModelSpec,
        params: &[f64],
    ) -> Result<Vec<f64>, ClientError> {
        if self.bypass_encoding {
            return Ok(params.to_vec());
        }
        let model = spec.clone().with_params(params.to_vec());
        let enc = encode_for_platform(&model, self.profile.platform);
        decode_from_platform(&enc, spec).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    /// Training seed for one round: fixed by the server seed, the device and the round.
    pub fn round_hyperparams(&self, hp: &Hyperparams, round: u64) -> Hyperparams {
        Hyperparams {
            seed: derive_indexed(derive_seed(hp.seed, &self.profile.client_id), round),
            ..*hp
        }
    }

    /// One local FL step: decode, train, encode and privatize.
    pub fn fit(
        &self,
        task: &TaskEntry,
        spec: &ModelSpec,
        data: &Dataset,
        ins: &FitIns,
    ) -> Result<(Vec<f64>, f64), ClientError> {
        let local = self.through_platform(spec, &ins.params)?;
        let mut trainer = Trainer::from_spec(spec.clone())?;
        trainer.set_parameters(&local)?;
        let report = trainer.fit(data, &self.round_hyperparams(&ins.hyperparams, ins.round))?;
        let uploaded = self.through_platform(spec, &report.params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(
            derive_seed(self.profile.seed, &format!("dp/{}", task.task_id)),
            ins.round,
        ));
        let private = privatize_update(&ins.params, &uploaded, &task.dp, &mut rng)
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok((private, report.final_loss))
    }

    /// The device's answer to an analytics query.
    pub fn report(&self, query: &FAQuery) -> Result<FAReportRes, ClientError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.profile.seed,
            &format!("fa/{}", query.query_id),
        ));
        match &query.kind {
            FAQueryKind::HeavyHitters(q) => {
                let steps = attribute_mean(&self.records, "steps")
                    .ok_or_else(|| ClientError::Protocol("no local data".into()))?;
                let bucket = bucketize(steps, &q.buckets)
                    .map_err(|e| ClientError::Protocol(e.to_string()))?;
                let cluster = match q.cluster_by.as_str() {
                    "cluster" => Some(self.profile.cluster.clone()),
                    "archetype" => Some(self.profile.archetype.to_string()),
                    _ => None,
                };
                let skeleton = de_identify(
                    RawRecord {
                        client_id: self.profile.client_id.clone(),
                        cluster,
                    },
                    &query.query_id,
                    &mut rng,
                );
                let noisy = krr_perturb(bucket, q.buckets.num_buckets(), q.epsilon, &mut rng);
                Ok(FAReportRes {
                    pseudonym: skeleton.pseudonym,
                    payload: ReportPayload::Bucket(noisy),
                    cluster: skeleton.cluster,
                })
            }
            FAQueryKind::DPMean(q) => {
                let v = attribute_mean(&self.records, &q.attribute).ok_or_else(|| {
                    ClientError::Protocol(format!("unknown attribute {}", q.attribute))
                })?;
                let skeleton = de_identify(
                    RawRecord {
                        client_id: self.profile.client_id.clone(),
                        cluster: None,
                    },
                    &query.query_id,
                    &mut rng,
                );
                Ok(FAReportRes {
                    pseudonym: skeleton.pseudonym,
                    payload: ReportPayload::Value(perturb_value(v, q, &mut rng)),
                    cluster: None,
                })
            }
        }
    }
}

enum Ended {
    Done,
    Lost,
}

struct Progress {
    report: ClientReport,
    spec: Option<ModelSpec>,
    data: Option<Dataset>,
}

async fn join(addr: SocketAddr, device: &Device, session: &str) -> Result<TcpStream, ClientError> {
    let mut s = TcpStream::connect(addr)
        .await
        .map_err(|_| ClientError::ConnectionLost)?;
    let _ = s.set_nodelay(true);
    let join = JoinRequest {
        client_id: device.profile.client_id.clone(),
        platform: device.profile.platform,
        app_version: APP_VERSION.into(),
    };
    write_message(&mut s, &Message::new(session, Body::JoinRequest(join)))
        .await
        .map_err(|_| ClientError::ConnectionLost)?;
    Ok(s)
}

async fn serve(
    s: &mut TcpStream,
    device: &Device,
    task: &TaskEntry,
    p: &mut Progress,
) -> Result<Ended, ClientError> {
    let session = task.task_id.as_str();
    loop {
        let msg = match read_message(s).await {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(Ended::Lost),
            Err(fedcampus_core::protocol::FrameError::Io(_)) => return Ok(Ended::Lost),
            Err(e) => return Err(ClientError::Protocol(e.to_string())),
        };
        let reply = match msg.body {
            Body::JoinAccept(acc) => {
                if task.kind == SessionKind::FL {
                    let spec = acc
                        .model_spec
                        .ok_or_else(|| ClientError::Protocol("FL session sent no model".into()))?;
                    let family = TaskModel::for_model_id(&spec.model_id)
                        .filter(|f| f.accepts(&spec))
                        .ok_or_else(|| {
                            ClientError::Protocol(format!("no featurizer for {}", spec.model_id))
                        })?;
                    p.data = Some(family.dataset(&device.profile, &device.records));
                    p.spec = Some(spec);
                }
                None
            }
            Body::FitIns(ins) => {
                let (spec, data) = match (&p.spec, &p.data) {
                    (Some(s), Some(d)) => (s, d),
                    _ => return Err(ClientError::Protocol("FitIns before JoinAccept".into())),
                };
                let (params, loss) = device.fit(task, spec, data, &ins)?;
                p.report.rounds_participated += 1;
                p.report.final_local_loss = Some(loss);
                Some(Body::FitRes(FitRes {
                    round: ins.round,
                    params,
                    num_examples: data.len() as u64,
                }))
            }
            Body::EvaluateIns(ins) => {
                let (spec, data) = match (&p.spec, &p.data) {
                    (Some(s), Some(d)) => (s, d),
                    _ => {
                        return Err(ClientError::Protocol(
                            "EvaluateIns before JoinAccept".into(),
                        ))
                    }
                };
                let mut t = Trainer::from_spec(spec.clone())?;
                t.set_parameters(&device.through_platform(spec, &ins.params)?)?;
                let (loss, metric) = t.evaluate(data)?;
                Some(Body::EvaluateRes(EvaluateRes {
                    round: ins.round,
                    loss,
                    metric,
                    num_examples: data.len() as u64,
                }))
            }
            Body::FAQueryIns(q) => {
                p.report.rounds_participated += 1;
                Some(Body::FAReportRes(device.report(&q.query)?))
            }
            Body::RoundEnd(end) => {
                p.report.global_params = end.global_params;
                if end.done {
                    return Ok(Ended::Done);
                }
                None
            }
            Body::ErrorMsg(ErrorMsg { code, detail }) => {
                if code == "Rejected" {
                    return Ok(Ended::Lost);
                }
                return Err(ClientError::SessionFailed { code, detail });
            }
            other => {
                return Err(ClientError::Protocol(format!(
                    "unexpected {}",
                    other.type_name()
                )))
            }
        };
        if let Some(body) = reply {
            if write_message(s, &Message::new(session, body))
                .await
                .is_err()
            {
                return Ok(Ended::Lost);
            }
        }
    }
}

/// Runs one device through a task until the session finishes. A lost
/// connection is retried once; a second loss abandons the task.
pub async fn run_client(
    device: &Device,
    host: std::net::IpAddr,
    task: &TaskEntry,
) -> Result<ClientReport, ClientError> {
    let addr = SocketAddr::new(host, task.port);
    let mut p = Progress {
        report: ClientReport {
            client_id: device.profile.client_id.clone(),
            platform: device.profile.platform,
            task_id: task.task_id.clone(),
            rounds_participated: 0,
            final_local_loss: None,
            global_params: Vec::new(),
            reconnects: 0,
        },
        spec: None,
        data: None,
    };
    loop {
        let ended = match join(addr, device, &task.task_id).await {
            Ok(mut s) => serve(&mut s, device, task, &mut p).await?,
            Err(_) => Ended::Lost,
        };
        match ended {
            Ended::Done => return Ok(p.report),
            Ended::Lost if p.report.reconnects == 0 => {
                tracing::info!(client = %device.profile.client_id, "connection lost; retrying once");
                p.report.reconnects += 1;
            }
            Ended::Lost => return Err(ClientError::ConnectionLost),
        }
    }
}
