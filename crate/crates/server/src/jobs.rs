// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recompute jobs. One background thread runs them in submission order;
//! results become visible only when a job is marked done.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, Weak};

use attnscope_core::attribution::{interaction_matrix, LossKind, Reduction};
use attnscope_core::pipeline::{
    compute_head_importance, compute_projection, head_importance_stage_params, projection_stage_params,
};
use attnscope_core::projection::ProjectionParams;
use attnscope_core::store::{head_importance_arrays, projection_arrays};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ApiError, ApiResult};
use crate::payload::{JobPayload, JobStatus};
use crate::state::{LazyKey, LazyValue, Shared, Snapshot};

/// Largest Riemann step count accepted over the API.
pub const MAX_STEPS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Projection,
    Importance,
    Instance,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RecomputeRequest {
    pub scope: Scope,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportanceParams {
    m_steps: Option<usize>,
    loss: Option<LossKind>,
    reduction: Option<Reduction>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceParams {
    example_id: String,
    m_steps: Option<usize>,
    loss: Option<LossKind>,
}

/// A validated job with every parameter resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub(crate) enum JobSpec {
    Projection(ProjectionParams),
    Importance {
        m_steps: usize,
        loss: LossKind,
        reduction: Reduction,
    },
    Instance {
        example: usize,
        m_steps: usize,
        loss: LossKind,
    },
}

impl JobSpec {
    fn scope(&self) -> Scope {
        match self {
            JobSpec::Projection(_) => Scope::Projection,
            JobSpec::Importance { .. } => Scope::Importance,
            JobSpec::Instance { .. } => Scope::Instance,
        }
    }
}

pub(crate) fn check_steps(m: usize) -> ApiResult<usize> {
    if (1..=MAX_STEPS).contains(&m) {
        Ok(m)
    } else {
        Err(ApiError::bad_request(format!(
            "m_steps must be in 1..={MAX_STEPS}, got {m}"
        )))
    }
}

fn params_object(params: &Value) -> ApiResult<serde_json::Map<String, Value>> {
    match params {
        Value::Null => Ok(serde_json::Map::new()),
        Value::Object(m) => Ok(m.clone()),
        other => Err(ApiError::bad_request(format!("params must be an object, got {other}"))),
    }
}

/// Resolves request params against the current defaults.
pub(crate) fn resolve(shared: &Shared, req: &RecomputeRequest) -> ApiResult<JobSpec> {
    let snap = shared.snapshot();
    let bad = |e: serde_json::Error| ApiError::bad_request(format!("malformed params: {e}"));
    match req.scope {
        Scope::Projection => {
            let current = snap
                .projection
                .as_ref()
                .map(|p| p.params)
                .unwrap_or(snap.params.projection);
            let mut base = params_object(&serde_json::to_value(current).map_err(bad)?)?;
            for (k, v) in params_object(&req.params)? {
                if !base.contains_key(&k) {
                    return Err(ApiError::bad_request(format!("unknown projection parameter `{k}`")));
                }
                base.insert(k, v);
            }
            let p: ProjectionParams = serde_json::from_value(Value::Object(base)).map_err(bad)?;
            p.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
            Ok(JobSpec::Projection(p))
        }
        Scope::Importance => {
            let p: ImportanceParams =
                serde_json::from_value(Value::Object(params_object(&req.params)?)).map_err(bad)?;
            Ok(JobSpec::Importance {
                m_steps: check_steps(p.m_steps.unwrap_or(snap.params.attn_steps))?,
                loss: p.loss.unwrap_or(snap.params.loss),
                reduction: p.reduction.unwrap_or(snap.params.reduction),
            })
        }
        Scope::Instance => {
            let p: InstanceParams = serde_json::from_value(req.params.clone()).map_err(bad)?;
            let example = shared
                .corpus
                .position(&p.example_id)
                .ok_or_else(|| ApiError::not_found(format!("unknown example `{}`", p.example_id)))?;
            Ok(JobSpec::Instance {
                example,
                m_steps: check_steps(p.m_steps.unwrap_or(snap.params.attn_steps))?,
                loss: p.loss.unwrap_or(snap.params.loss),
            })
        }
    }
}

#[derive(Debug)]
struct Job {
    spec: JobSpec,
    status: JobStatus,
    progress: f64,
    error: Option<String>,
}

#[derive(Debug, Default)]
struct Table {
    next: u64,
    jobs: BTreeMap<u64, Job>,
}

pub(crate) struct Jobs {
    table: Arc<Mutex<Table>>,
    tx: Mutex<mpsc::Sender<u64>>,
}

impl Jobs {
    pub fn start(shared: Weak<Shared>) -> Self {
        let (tx, rx) = mpsc::channel::<u64>();
        let table = Arc::new(Mutex::new(Table::default()));
        let worker_table = table.clone();
        std::thread::Builder::new()
            .name("attnscope-jobs".into())
            .spawn(move || {
                while let Ok(id) = rx.recv() {
                    let Some(shared) = shared.upgrade() else { break };
                    run(&shared, &worker_table, id);
                }
            })
            .expect("spawn job runner");
        Jobs {
            table,
            tx: Mutex::new(tx),
        }
    }

    /// Queues `spec`, or returns the id of an identical job that has not
    /// finished yet.
    pub fn submit(&self, spec: JobSpec) -> u64 {
        let mut t = self.table.lock().expect("job table lock");
        let pending = t
            .jobs
            .iter()
            .find(|(_, j)| matches!(j.status, JobStatus::Queued | JobStatus::Running) && j.spec == spec);
        if let Some((&id, _)) = pending {
            return id;
        }
        t.next += 1;
        let id = t.next;
        t.jobs.insert(
            id,
            Job {
                spec,
                status: JobStatus::Queued,
                progress: 0.0,
                error: None,
            },
        );
        self.tx
            .lock()
            .expect("job sender lock")
            .send(id)
            .expect("job runner alive");
        id
    }

    pub fn get(&self, id: u64) -> Option<JobPayload> {
        let t = self.table.lock().expect("job table lock");
        t.jobs.get(&id).map(|j| JobPayload {
            id,
            scope: j.spec.scope(),
            status: j.status,
            progress: j.progress,
            error: j.error.clone(),
        })
    }
}

/// A finished computation, applied under the job table lock so readers
/// never see results of a job that is not yet done.
enum Outcome {
    Snapshot(Box<Snapshot>),
    Lazy(LazyKey, LazyValue),
}

fn run(shared: &Shared, table: &Mutex<Table>, id: u64) {
    let spec = {
        let mut t = table.lock().expect("job table lock");
        let Some(job) = t.jobs.get_mut(&id) else { return };
        job.status = JobStatus::Running;
        job.spec.clone()
    };
    log::info!("job {id} running: {spec:?}");
    let result = compute(shared, &spec);
    let mut t = table.lock().expect("job table lock");
    let job = t.jobs.get_mut(&id).expect("job exists");
    match result {
        Ok(outcome) => {
            match outcome {
                Outcome::Snapshot(s) => shared.replace_snapshot(*s),
                Outcome::Lazy(k, v) => shared.lazy.insert(k, v),
            }
            job.status = JobStatus::Done;
            job.progress = 1.0;
            log::info!("job {id} done");
        }
        Err(e) => {
            log::warn!("job {id} failed: {e}");
            job.status = JobStatus::Failed;
            job.error = Some(e.to_string());
        }
    }
}

fn compute(shared: &Shared, spec: &JobSpec) -> attnscope_core::Result<Outcome> {
    let snap = shared.snapshot();
    match spec {
        JobSpec::Projection(params) => {
            let embeddings = shared
                .embeddings
                .as_ref()
                .ok_or_else(|| attnscope_core::Error::Config("cache holds no embeddings".into()))?;
            let result = compute_projection(&shared.bundle, &shared.corpus, embeddings, params)?;
            shared.with_store(|s| {
                for (name, a) in projection_arrays(&result) {
                    s.put(name, &a)?;
                }
                s.manifest_mut().params.projection = *params;
                s.mark_stage("projection", projection_stage_params(params))
            })?;
            let mut next = (*snap).clone();
            next.params.projection = *params;
            next.projection = Some(result);
            Ok(Outcome::Snapshot(Box::new(next)))
        }
        JobSpec::Importance {
            m_steps,
            loss,
            reduction,
        } => {
            let mut params = snap.params.clone();
            params.attn_steps = *m_steps;
            params.loss = *loss;
            params.reduction = *reduction;
            let h = compute_head_importance(&shared.bundle, &shared.corpus, &params)?;
            shared.with_store(|s| {
                for (name, a) in head_importance_arrays(&h) {
                    s.put(&name, &a)?;
                }
                s.manifest_mut().params.attn_steps = *m_steps;
                s.manifest_mut().params.loss = *loss;
                s.manifest_mut().params.reduction = *reduction;
                s.mark_stage(
                    "head_importance",
                    head_importance_stage_params(*m_steps, *loss, *reduction),
                )
            })?;
            let mut next = (*snap).clone();
            next.params = params;
            next.head_importance = Some(h);
            Ok(Outcome::Snapshot(Box::new(next)))
        }
        JobSpec::Instance { example, m_steps, loss } => {
            let ex = &shared.corpus.examples[*example];
            let m = interaction_matrix(&shared.bundle, &ex.input_ids, &ex.output_ids, *m_steps, *loss)?;
            let key = LazyKey::Interaction {
                example: *example,
                m_steps: *m_steps,
                loss: *loss,
            };
            let value = LazyValue::Interaction(Arc::new(m.values));
            shared.persist_lazy(&key, &value);
            Ok(Outcome::Lazy(key, value))
        }
    }
}
