// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared server state: the loaded model and corpus, an atomically swapped
//! snapshot of corpus-level artifacts and the lazy per-example cache.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use attnscope_core::attribution::{AttributionVector, HeadImportance, LossKind};
use attnscope_core::corpus::Corpus;
use attnscope_core::model::{load_model, Baseline, ModelBundle};
use attnscope_core::projection::ProjectionResult;
use attnscope_core::store::{
    load_artifacts, ArtifactManifest, ArtifactStore, CreationParams, Loaded, StoredArray, ATTRIBUTION_PREFIX,
    INTERACTION_PREFIX,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tokio::sync::OnceCell;

use crate::error::{ApiError, ApiResult, ServerError};
use crate::jobs::Jobs;

/// Corpus-level artifacts that recompute jobs replace as a unit.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: CreationParams,
    pub projection: Option<ProjectionResult>,
    pub head_importance: Option<HeadImportance>,
}

/// Identity of a lazily computed per-example artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LazyKey {
    Interaction {
        example: usize,
        m_steps: usize,
        loss: LossKind,
    },
    Attribution {
        example: usize,
        step: usize,
        m_steps: usize,
        baseline: Baseline,
    },
}

impl LazyKey {
    /// Array name in the cache directory.
    pub fn array_name(&self) -> String {
        match *self {
            LazyKey::Interaction { example, m_steps, loss } => {
                let loss = serde_json::to_value(loss)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from));
                format!("{INTERACTION_PREFIX}{example}.{}.m{m_steps}", loss.unwrap_or_default())
            }
            LazyKey::Attribution {
                example,
                step,
                m_steps,
                baseline,
            } => {
                let b = serde_json::to_value(baseline)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from));
                format!(
                    "{ATTRIBUTION_PREFIX}{example}.s{step}.{}.m{m_steps}",
                    b.unwrap_or_default()
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum LazyValue {
    Interaction(Arc<Array2<f64>>),
    Attribution(Arc<AttributionVector>),
}

impl LazyValue {
    fn to_stored(&self, key: &LazyKey) -> StoredArray {
        match self {
            LazyValue::Interaction(m) => StoredArray::from_array2(m, serde_json::json!({ "key": key })),
            LazyValue::Attribution(v) => StoredArray::from_f64(
                &[v.scores.len()],
                v.scores.iter().copied(),
                serde_json::json!({
                    "key": key,
                    "f_input": v.f_input,
                    "f_baseline": v.f_baseline,
                    "completeness_residual": v.completeness_residual,
                }),
            ),
        }
    }

    fn from_stored(a: &StoredArray) -> Option<(LazyKey, LazyValue)> {
        let key: LazyKey = serde_json::from_value(a.meta.get("key")?.clone()).ok()?;
        let value = match key {
            LazyKey::Interaction { .. } => LazyValue::Interaction(Arc::new(a.to_array2().ok()?)),
            LazyKey::Attribution {
                step,
                m_steps,
                baseline,
                ..
            } => LazyValue::Attribution(Arc::new(AttributionVector {
                step,
                scores: a.data.iter().map(|&v| v as f64).collect(),
                baseline,
                m_steps,
                f_input: a.meta.get("f_input")?.as_f64()?,
                f_baseline: a.meta.get("f_baseline")?.as_f64()?,
                completeness_residual: a.meta.get("completeness_residual")?.as_f64()?,
            })),
        };
        Some((key, value))
    }
}

type Cell = Arc<OnceCell<LazyValue>>;

/// Per-key memo. Concurrent requests for the same key share one
/// computation; failures are not memoized.
#[derive(Debug, Default)]
pub struct LazyCache {
    cells: Mutex<HashMap<LazyKey, Cell>>,
    computations: AtomicUsize,
}

impl LazyCache {
    fn cell(&self, key: LazyKey) -> Cell {
        let mut cells = self.cells.lock().expect("lazy cache lock");
        cells.entry(key).or_default().clone()
    }

    /// Number of computations started since launch.
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::SeqCst)
    }

    pub fn contains(&self, key: &LazyKey) -> bool {
        let cells = self.cells.lock().expect("lazy cache lock");
        cells.get(key).is_some_and(|c| c.initialized())
    }

    /// Stores `value` under `key`, replacing any earlier entry.
    pub fn insert(&self, key: LazyKey, value: LazyValue) {
        let cell = Arc::new(OnceCell::new_with(Some(value)));
        self.cells.lock().expect("lazy cache lock").insert(key, cell);
    }

    pub async fn get_or_compute<F>(&self, key: LazyKey, compute: F) -> ApiResult<LazyValue>
    where
        F: FnOnce() -> attnscope_core::Result<LazyValue> + Send + 'static,
    {
        let cell = self.cell(key);
        cell.get_or_try_init(|| async {
            self.computations.fetch_add(1, Ordering::SeqCst);
            tokio::task::spawn_blocking(compute)
                .await
                .map_err(|e| ApiError::internal(format!("computation aborted: {e}")))?
                .map_err(ApiError::from)
        })
        .await
        .cloned()
    }
}

pub(crate) struct Shared {
    pub bundle: ModelBundle,
    pub corpus: Corpus,
    pub manifest: ArtifactManifest,
    pub embeddings: Option<Array2<f64>>,
    pub lazy: LazyCache,
    pub jobs: Jobs,
    snapshot: RwLock<Arc<Snapshot>>,
    store: Option<Mutex<ArtifactStore>>,
}

/// Cheaply cloneable handle shared by every request handler.
#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Shared>,
}

impl AppState {
    /// Opens a cache directory and loads the model it was built with.
    pub fn open(dir: &Path) -> Result<Self, ServerError> {
        Self::open_with_model(dir, None)
    }

    /// Like [`AppState::open`], loading `model` instead of the model named
    /// in the manifest, for example after a model directory has moved.
    pub fn open_with_model(dir: &Path, model: Option<&str>) -> Result<Self, ServerError> {
        let loaded = load_artifacts(dir)?;
        let bundle = load_model(model.unwrap_or(&loaded.manifest.model_id))?;
        let store = ArtifactStore::open(dir)?;
        Ok(Self::new(loaded, bundle, Some(store)))
    }

    /// Builds state from already loaded artifacts. Lazy results and job
    /// outputs are written back to `store` when one is given.
    pub fn new(loaded: Loaded, bundle: ModelBundle, store: Option<ArtifactStore>) -> Self {
        let Loaded {
            manifest,
            corpus,
            artifacts,
            ignored,
        } = loaded;
        if !ignored.is_empty() {
            log::warn!("ignoring unknown cache arrays: {}", ignored.join(", "));
        }
        let lazy = LazyCache::default();
        for a in artifacts.lazy.values() {
            if let Some((key, value)) = LazyValue::from_stored(a) {
                lazy.insert(key, value);
            }
        }
        let snapshot = Snapshot {
            params: manifest.params.clone(),
            projection: artifacts.projection,
            head_importance: artifacts.head_importance,
        };
        let inner = Arc::new_cyclic(|weak| Shared {
            bundle,
            corpus,
            manifest,
            embeddings: artifacts.embeddings,
            lazy,
            jobs: Jobs::start(weak.clone()),
            snapshot: RwLock::new(Arc::new(snapshot)),
            store: store.map(Mutex::new),
        });
        AppState { inner }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.inner.snapshot()
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.inner.bundle
    }

    pub fn corpus(&self) -> &Corpus {
        &self.inner.corpus
    }

    pub fn lazy(&self) -> &LazyCache {
        &self.inner.lazy
    }
}

impl Shared {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn replace_snapshot(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
    }

    /// Runs `f` on the backing store, if any.
    pub fn with_store<T>(
        &self,
        f: impl FnOnce(&mut ArtifactStore) -> attnscope_core::Result<T>,
    ) -> attnscope_core::Result<Option<T>> {
        match &self.store {
            Some(m) => f(&mut m.lock().expect("store lock")).map(Some),
            None => Ok(None),
        }
    }

    /// Writes a lazy result to disk. Failures only cost a recomputation
    /// after restart, so they are logged and swallowed.
    pub fn persist_lazy(&self, key: &LazyKey, value: &LazyValue) {
        let name = key.array_name();
        if let Err(e) = self.with_store(|s| s.put(&name, &value.to_stored(key))) {
            log::warn!("could not persist `{name}`: {e}");
        }
    }
}
