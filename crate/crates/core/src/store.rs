// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk artifact cache.
//!
//! A cache directory holds `manifest.json`, `corpus.json` and one
//! headerless file of row-major little-endian `f32` values per array.
//! Shapes, digests and per-array metadata live only in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attribution::{HeadImportance, LossKind, Reduction};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{Baseline, Family, GenerationParams};
use crate::projection::{EmbeddingSource, ProjectionParams, ProjectionResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.json";
pub const FORMAT_VERSION: u32 = 1;

pub const EMBEDDINGS: &str = "embeddings";
pub const PROJECTION_POINTS: &str = "projection.points";
pub const PROJECTION_DETAIL: &str = "projection.detail";
pub const PROJECTION_OFFSETS: &str = "projection.detail_offsets";
const HEAD_PREFIX: &str = "head_importance.";
const HEAD_RAW_PREFIX: &str = "head_importance_raw.";
/// Lazily filled per-example arrays.
pub const INTERACTION_PREFIX: &str = "interaction.";
pub const ATTRIBUTION_PREFIX: &str = "input_attribution.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

/// Every parameter that shaped the cache contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreationParams {
    pub attn_steps: usize,
    pub ig_steps: usize,
    pub baseline: Baseline,
    pub loss: LossKind,
    pub reduction: Reduction,
    pub projection: ProjectionParams,
    pub generation: GenerationParams,
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for CreationParams {
    fn default() -> Self {
        CreationParams {
            attn_steps: crate::attribution::DEFAULT_ATTENTION_STEPS,
            ig_steps: crate::attribution::DEFAULT_IG_STEPS,
            baseline: Baseline::Zero,
            loss: LossKind::TaskLoss,
            reduction: Reduction::MaxAbs,
            projection: ProjectionParams::default(),
            generation: GenerationParams::default(),
            limit: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub params: CreationParams,
    pub arrays: BTreeMap<String, ArrayEntry>,
    /// Finished pipeline stages and the parameters each one ran with.
    #[serde(default)]
    pub stages: BTreeMap<String, Value>,
    #[serde(default)]
    pub complete: bool,
}

impl ArtifactManifest {
    pub fn new(model_id: &str, dataset_id: &str, params: CreationParams) -> Self {
        ArtifactManifest {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            params,
            arrays: BTreeMap::new(),
            stages: BTreeMap::new(),
            complete: false,
        }
    }
}

/// An array as stored: `f32` values with their shape and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: Value,
}

impl StoredArray {
    pub fn from_f64(shape: &[usize], values: impl IntoIterator<Item = f64>, meta: Value) -> Self {
        StoredArray {
            shape: shape.to_vec(),
            data: values.into_iter().map(|v| v as f32).collect(),
            meta,
        }
    }

    pub fn from_array2(a: &Array2<f64>, meta: Value) -> Self {
        Self::from_f64(a.shape(), a.iter().copied(), meta)
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&v| v as f64).collect())
            .expect("shape validated on load")
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        self.to_array()
            .into_dimensionality()
            .map_err(|_| Error::domain(format!("expected a 2-D array, shape is {:?}", self.shape)))
    }

    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(name: &str, reason: impl Into<String>) -> Error {
    Error::CorruptArtifact {
        name: name.into(),
        reason: reason.into(),
    }
}

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.f32")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
}

/// Handle on a cache directory. Single writer; readers open their own.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
    manifest: ArtifactManifest,
}

impl ArtifactStore {
    /// Starts a fresh manifest in `dir`, creating it if needed.
    pub fn create(dir: &Path, manifest: ArtifactManifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let store = ArtifactStore {
            dir: dir.to_path_buf(),
            manifest,
        };
        store.write_manifest()?;
        Ok(store)
    }

    /// Opens an existing cache. Array files are checked lazily on read;
    /// call [`ArtifactStore::verify`] for an eager check.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        let manifest: ArtifactManifest =
            serde_json::from_str(&text).map_err(|e| corrupt(MANIFEST_FILE, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(corrupt(
                MANIFEST_FILE,
                format!("format version {} is not {FORMAT_VERSION}", manifest.format_version),
            ));
        }
        Ok(ArtifactStore {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &ArtifactManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut ArtifactManifest {
        &mut self.manifest
    }

    pub fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }

    /// Writes one array and records it in the manifest.
    pub fn put(&mut self, name: &str, array: &StoredArray) -> Result<()> {
        let expected: usize = array.shape.iter().product();
        if expected != array.data.len() {
            return Err(Error::domain(format!(
                "array `{name}` has {} values for shape {:?}",
                array.data.len(),
                array.shape
            )));
        }
        let file = file_name_for(name);
        let bytes = array.bytes();
        write_atomic(&self.dir.join(&file), &bytes)?;
        self.manifest.arrays.insert(
            name.to_string(),
            ArrayEntry {
                file,
                shape: array.shape.clone(),
                dtype: Dtype::F32,
                sha256: hex_digest(&bytes),
                meta: array.meta.clone(),
            },
        );
        self.write_manifest()
    }

    pub fn remove(&mut self, name: &str) -> Result<()> {
        if let Some(entry) = self.manifest.arrays.remove(name) {
            let _ = fs::remove_file(self.dir.join(entry.file));
            self.write_manifest()?;
        }
        Ok(())
    }

    /// Reads and validates one array.
    pub fn get(&self, name: &str) -> Result<StoredArray> {
        let entry = self
            .manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::index(format!("no array `{name}` in cache")))?;
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| corrupt(name, format!("{}: {e}", path.display())))?;
        let values: usize = entry.shape.iter().product();
        if bytes.len() != values * 4 {
            return Err(corrupt(
                name,
                format!(
                    "{} bytes on disk, shape {:?} needs {}",
                    bytes.len(),
                    entry.shape,
                    values * 4
                ),
            ));
        }
        if hex_digest(&bytes) != entry.sha256 {
            return Err(corrupt(name, "content digest mismatch"));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(StoredArray {
            shape: entry.shape.clone(),
            data,
            meta: entry.meta.clone(),
        })
    }

    /// Reads every array, failing on the first corrupt one.
    pub fn verify(&self) -> Result<()> {
        for name in self.manifest.arrays.keys() {
            self.get(name)?;
        }
        Ok(())
    }

    pub fn save_corpus(&self, corpus: &Corpus) -> Result<()> {
        let text = serde_json::to_string_pretty(corpus)?;
        write_atomic(&self.dir.join(CORPUS_FILE), text.as_bytes())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let path = self.dir.join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::path(&path, e))?;
        serde_json::from_str(&text).map_err(|e| corrupt(CORPUS_FILE, e.to_string()))
    }

    pub fn stage_params(&self, stage: &str) -> Option<&Value> {
        self.manifest.stages.get(stage)
    }

    pub fn mark_stage(&mut self, stage: &str, params: Value) -> Result<()> {
        self.manifest.stages.insert(stage.to_string(), params);
        self.write_manifest()
    }

    pub fn clear_stage(&mut self, stage: &str) -> Result<()> {
        if self.manifest.stages.remove(stage).is_some() {
            self.manifest.complete = false;
            self.write_manifest()?;
        }
        Ok(())
    }
}

/// Precomputed corpus-level artifacts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub embeddings: Option<Array2<f64>>,
    pub projection: Option<ProjectionResult>,
    pub head_importance: Option<HeadImportance>,
    /// Lazily computed per-example arrays, keyed by cache name.
    pub lazy: BTreeMap<String, StoredArray>,
}

/// Result of [`load_artifacts`].
#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: ArtifactManifest,
    pub corpus: Corpus,
    pub artifacts: Artifacts,
    /// Manifest entries this version does not understand.
    pub ignored: Vec<String>,
}

pub fn projection_arrays(p: &ProjectionResult) -> Vec<(&'static str, StoredArray)> {
    let meta = serde_json::json!({
        "params": p.params,
        "embedding_source": p.embedding_source,
    });
    let points = StoredArray::from_f64(&[p.points.len(), 2], p.points.iter().flatten().copied(), meta);
    let total: usize = p.detail_points.iter().map(Vec::len).sum();
    let detail = StoredArray::from_f64(
        &[total, 2],
        p.detail_points.iter().flatten().flatten().copied(),
        Value::Null,
    );
    let mut offsets = vec![0.0];
    for d in &p.detail_points {
        offsets.push(offsets.last().copied().unwrap_or(0.0) + d.len() as f64);
    }
    let offsets = StoredArray::from_f64(&[offsets.len()], offsets, Value::Null);
    vec![
        (PROJECTION_POINTS, points),
        (PROJECTION_DETAIL, detail),
        (PROJECTION_OFFSETS, offsets),
    ]
}

pub fn head_importance_arrays(h: &HeadImportance) -> Vec<(String, StoredArray)> {
    let meta = serde_json::json!({
        "num_examples_averaged": h.num_examples_averaged,
        "reduction": h.reduction,
        "m_steps": h.m_steps,
        "loss": h.loss,
    });
    let mut out = Vec::new();
    for (fam, m) in &h.scores {
        out.push((format!("{HEAD_PREFIX}{fam}"), StoredArray::from_array2(m, meta.clone())));
    }
    for (fam, m) in &h.raw {
        out.push((
            format!("{HEAD_RAW_PREFIX}{fam}"),
            StoredArray::from_array2(m, meta.clone()),
        ));
    }
    out
}

pub fn read_projection(store: &ArtifactStore) -> Result<Option<ProjectionResult>> {
    if !store.contains(PROJECTION_POINTS) {
        return Ok(None);
    }
    let points = store.get(PROJECTION_POINTS)?;
    let detail = store.get(PROJECTION_DETAIL)?;
    let offsets = store.get(PROJECTION_OFFSETS)?;
    let pairs =
        |a: &StoredArray| -> Vec<[f64; 2]> { a.data.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect() };
    let flat = pairs(&detail);
    let offs: Vec<usize> = offsets.data.iter().map(|&v| v as usize).collect();
    let pts = pairs(&points);
    if offs.len() != pts.len() + 1 || offs.last().copied() != Some(flat.len()) || offs.windows(2).any(|w| w[1] < w[0]) {
        return Err(corrupt(PROJECTION_OFFSETS, "offsets do not match the detail points"));
    }
    let detail_points = offs.windows(2).map(|w| flat[w[0]..w[1]].to_vec()).collect();
    let params = serde_json::from_value(points.meta["params"].clone())
        .map_err(|e| corrupt(PROJECTION_POINTS, format!("bad metadata: {e}")))?;
    let embedding_source: EmbeddingSource = serde_json::from_value(points.meta["embedding_source"].clone())
        .map_err(|e| corrupt(PROJECTION_POINTS, format!("bad metadata: {e}")))?;
    Ok(Some(ProjectionResult {
        points: pts,
        detail_points,
        params,
        embedding_source,
    }))
}

pub fn read_head_importance(store: &ArtifactStore) -> Result<Option<HeadImportance>> {
    let mut scores = BTreeMap::new();
    let mut raw = BTreeMap::new();
    let mut meta = Value::Null;
    for name in store.manifest().arrays.keys() {
        let (prefix, target) = if let Some(f) = name.strip_prefix(HEAD_RAW_PREFIX) {
            (f, &mut raw)
        } else if let Some(f) = name.strip_prefix(HEAD_PREFIX) {
            (f, &mut scores)
        } else {
            continue;
        };
        let Ok(fam) = prefix.parse::<Family>() else {
            continue;
        };
        let a = store.get(name)?;
        meta = a.meta.clone();
        target.insert(fam, a.to_array2()?);
    }
    if scores.is_empty() {
        return Ok(None);
    }
    let field = |k: &str| -> Result<Value> {
        meta.get(k)
            .cloned()
            .ok_or_else(|| corrupt("head_importance", format!("metadata lacks `{k}`")))
    };
    let bad = |e: serde_json::Error| corrupt("head_importance", e.to_string());
    Ok(Some(HeadImportance {
        scores,
        raw,
        num_examples_averaged: serde_json::from_value(field("num_examples_averaged")?).map_err(bad)?,
        reduction: serde_json::from_value(field("reduction")?).map_err(bad)?,
        m_steps: serde_json::from_value(field("m_steps")?).map_err(bad)?,
        loss: serde_json::from_value(field("loss")?).map_err(bad)?,
    }))
}

fn is_known(name: &str) -> bool {
    let family = |f: &str| f.parse::<Family>().is_ok();
    matches!(
        name,
        EMBEDDINGS | PROJECTION_POINTS | PROJECTION_DETAIL | PROJECTION_OFFSETS
    ) || name.strip_prefix(HEAD_RAW_PREFIX).is_some_and(family)
        || name.strip_prefix(HEAD_PREFIX).is_some_and(family)
        || name.starts_with(INTERACTION_PREFIX)
        || name.starts_with(ATTRIBUTION_PREFIX)
}

/// Writes the corpus and every present artifact into `dir`, keeping any
/// existing manifest fields other than the arrays being replaced.
pub fn save_artifacts(
    corpus: &Corpus,
    artifacts: &Artifacts,
    dir: &Path,
    manifest: ArtifactManifest,
) -> Result<ArtifactManifest> {
    let mut store = ArtifactStore::create(dir, manifest)?;
    store.save_corpus(corpus)?;
    if let Some(e) = &artifacts.embeddings {
        store.put(EMBEDDINGS, &StoredArray::from_array2(e, Value::Null))?;
    }
    if let Some(p) = &artifacts.projection {
        for (name, a) in projection_arrays(p) {
            store.put(name, &a)?;
        }
    }
    if let Some(h) = &artifacts.head_importance {
        for (name, a) in head_importance_arrays(h) {
            store.put(&name, &a)?;
        }
    }
    for (name, a) in &artifacts.lazy {
        store.put(name, a)?;
    }
    Ok(store.manifest.clone())
}

/// Reads the corpus and all artifacts, validating every array.
pub fn load_artifacts(dir: &Path) -> Result<Loaded> {
    let store = ArtifactStore::open(dir)?;
    let corpus = store.load_corpus()?;
    let mut ignored = Vec::new();
    let mut lazy = BTreeMap::new();
    for name in store.manifest().arrays.keys() {
        if !is_known(name) {
            ignored.push(name.clone());
        } else if name.starts_with(INTERACTION_PREFIX) || name.starts_with(ATTRIBUTION_PREFIX) {
            lazy.insert(name.clone(), store.get(name)?);
        }
    }
    let embeddings = if store.contains(EMBEDDINGS) {
        Some(store.get(EMBEDDINGS)?.to_array2()?)
    } else {
        None
    };
    let artifacts = Artifacts {
        embeddings,
        projection: read_projection(&store)?,
        head_importance: read_head_importance(&store)?,
        lazy,
    };
    Ok(Loaded {
        manifest: store.manifest.clone(),
        corpus,
        artifacts,
        ignored,
    })
}
