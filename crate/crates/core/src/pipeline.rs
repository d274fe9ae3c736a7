// SPDX-License-Identifier: MIT OR Apache-2.0

//! Offline precompute: ingest, generate, score, embed, project and rank
//! heads, writing everything into an artifact cache.
//!
//! Stages run in a fixed order. A stage is skipped when the manifest shows
//! it finished with identical parameters and none of its inputs re-ran.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{json, Value};

use crate::attribution::{head_importance, HeadImportance, LossKind, Reduction};
use crate::corpus::{self, builtin_plugin, compute_attribute, Corpus, FieldMap, Format};
use crate::error::{Error, Result};
use crate::model::{load_model, ModelBundle, TokenId};
use crate::projection::{
    example_embedding, project_corpus, project_decoder_steps, stack, EmbeddingSource, ProjectionParams,
    ProjectionResult,
};
use crate::store::{
    head_importance_arrays, projection_arrays, ArtifactManifest, ArtifactStore, CreationParams, StoredArray, EMBEDDINGS,
};

pub const STAGES: &[&str] = &[
    "ingest",
    "generate",
    "attributes",
    "embeddings",
    "projection",
    "head_importance",
];

#[derive(Debug, Clone)]
pub struct PrecomputeConfig {
    pub model_id: String,
    pub dataset: PathBuf,
    pub format: Option<Format>,
    pub field_map: FieldMap,
    pub output: PathBuf,
    pub params: CreationParams,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrecomputeReport {
    /// `(stage, ran)` in pipeline order.
    pub stages: Vec<(String, bool)>,
    pub examples: usize,
}

impl PrecomputeReport {
    pub fn ran_any(&self) -> bool {
        self.stages.iter().any(|(_, ran)| *ran)
    }
}

/// Decoded output text for generated ids.
fn output_text(bundle: &ModelBundle, ids: &[TokenId]) -> String {
    bundle.tokenizer.decode(ids)
}

/// Longest input accepted so that generation always fits the position
/// budget.
pub fn max_input_len(bundle: &ModelBundle, params: &CreationParams) -> usize {
    let reserve = match bundle.arch {
        crate::model::Arch::EncoderDecoder => 0,
        crate::model::Arch::DecoderOnly => params.generation.max_new_tokens + 1,
    };
    bundle.max_positions.saturating_sub(reserve).max(1)
}

/// Embeds every example of a generated corpus.
pub fn compute_embeddings(bundle: &ModelBundle, corpus: &Corpus) -> Result<Array2<f64>> {
    let vecs = corpus
        .examples
        .iter()
        .map(|ex| example_embedding(&bundle.forward_with_capture(&ex.input_ids, &ex.output_ids)?))
        .collect::<Result<Vec<_>>>()?;
    stack(&vecs)
}

/// Projects corpus embeddings and every example's decoder steps. The
/// returned params reflect any clamping to the corpus size.
pub fn compute_projection(
    bundle: &ModelBundle,
    corpus: &Corpus,
    embeddings: &Array2<f64>,
    params: &ProjectionParams,
) -> Result<ProjectionResult> {
    let params = params.clamped_to(corpus.len());
    let projector = project_corpus(embeddings, &params)?;
    let detail = corpus
        .examples
        .iter()
        .map(|ex| {
            if ex.output_ids.is_empty() {
                return Ok(Vec::new());
            }
            let cap = bundle.forward_with_capture(&ex.input_ids, &ex.output_ids)?;
            project_decoder_steps(&projector, &cap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(projector.into_result(detail, EmbeddingSource::for_arch(bundle.arch)))
}

pub fn compute_head_importance(
    bundle: &ModelBundle,
    corpus: &Corpus,
    params: &CreationParams,
) -> Result<HeadImportance> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = corpus
        .examples
        .iter()
        .filter(|e| !e.output_ids.is_empty())
        .map(|e| (e.input_ids.as_slice(), e.output_ids.as_slice()))
        .collect();
    head_importance(bundle, &pairs, params.attn_steps, params.loss, params.reduction)
}

/// Stage record for a projection run, as written into the manifest.
pub fn projection_stage_params(params: &ProjectionParams) -> Value {
    json!({"projection": params})
}

/// Stage record for a head-importance run.
pub fn head_importance_stage_params(m_steps: usize, loss: LossKind, reduction: Reduction) -> Value {
    json!({"m_steps": m_steps, "loss": loss, "reduction": reduction})
}

fn open_or_create(cfg: &PrecomputeConfig, dataset_id: &str) -> Result<ArtifactStore> {
    let fresh = || ArtifactManifest::new(&cfg.model_id, dataset_id, cfg.params.clone());
    if cfg.output.join(crate::store::MANIFEST_FILE).exists() {
        if let Ok(mut store) = ArtifactStore::open(&cfg.output) {
            let same_source = store.manifest().model_id == cfg.model_id && store.manifest().dataset_id == dataset_id;
            if same_source {
                store.manifest_mut().params = cfg.params.clone();
                return Ok(store);
            }
        }
        log::info!(
            "existing cache in {} belongs to other inputs; starting over",
            cfg.output.display()
        );
    }
    ArtifactStore::create(&cfg.output, fresh())
}

struct Runner<'a> {
    store: ArtifactStore,
    report: PrecomputeReport,
    ran: Vec<&'static str>,
    progress: &'a mut dyn FnMut(&str),
}

impl Runner<'_> {
    /// Runs `body` unless the stage is already recorded with `params`.
    fn stage(
        &mut self,
        name: &'static str,
        inputs: &[&str],
        params: Value,
        body: impl FnOnce(&mut ArtifactStore) -> Result<()>,
    ) -> Result<()> {
        let stale = inputs.iter().any(|i| self.ran.contains(i));
        let done = !stale && self.store.stage_params(name) == Some(&params);
        if done {
            self.report.stages.push((name.to_string(), false));
            return Ok(());
        }
        (self.progress)(name);
        self.ran.push(name);
        // A failure from here on leaves the cache visibly incomplete.
        self.store.manifest_mut().complete = false;
        self.store.manifest_mut().stages.remove(name);
        self.store.write_manifest()?;
        body(&mut self.store)?;
        self.store.mark_stage(name, params)?;
        self.report.stages.push((name.to_string(), true));
        Ok(())
    }
}

/// Builds or updates the cache described by `cfg`. `progress` is called
/// with each stage name that actually runs.
pub fn precompute(cfg: &PrecomputeConfig, progress: &mut dyn FnMut(&str)) -> Result<PrecomputeReport> {
    let bundle = load_model(&cfg.model_id)?;
    let format = match cfg.format {
        Some(f) => f,
        None => Format::from_path(&cfg.dataset).ok_or_else(|| {
            Error::Config(format!(
                "cannot infer the format of {}; pass --format",
                cfg.dataset.display()
            ))
        })?,
    };
    let dataset_id = corpus::dataset_id(&cfg.dataset)?;
    let store = open_or_create(cfg, &dataset_id)?;
    let mut run = Runner {
        store,
        report: PrecomputeReport::default(),
        ran: Vec::new(),
        progress,
    };
    let p = &cfg.params;
    let max_len = max_input_len(&bundle, p);

    run.stage(
        "ingest",
        &[],
        json!({"dataset": dataset_id, "format": format, "fields": cfg.field_map, "limit": p.limit, "max_len": max_len}),
        |store| {
            let mut corpus = corpus::ingest_dataset(&cfg.dataset, format, &cfg.field_map)?;
            if let Some(n) = p.limit {
                corpus.truncate(n);
            }
            corpus.tokenize(&bundle.tokenizer, max_len);
            if let Some((row, ex)) = corpus.examples.iter().enumerate().find(|(_, e)| e.input_ids.is_empty()) {
                return Err(Error::Ingest {
                    row,
                    reason: format!("example `{}` has no input tokens", ex.id),
                });
            }
            if corpus.is_empty() {
                return Err(Error::EmptyCorpus);
            }
            store.save_corpus(&corpus)
        },
    )?;

    run.stage(
        "generate",
        &["ingest"],
        json!({"model": cfg.model_id, "generation": p.generation}),
        |store| {
            let mut corpus = store.load_corpus()?;
            for ex in &mut corpus.examples {
                let gen = bundle.generate(&ex.input_ids, &p.generation)?;
                ex.output_text = Some(output_text(&bundle, &gen.output_ids));
                ex.output_ids = gen.output_ids;
            }
            store.save_corpus(&corpus)
        },
    )?;

    let names: Vec<&str> = corpus::BUILTIN_ATTRIBUTES.to_vec();
    run.stage("attributes", &["generate"], json!({"attributes": names}), |store| {
        let mut corpus = store.load_corpus()?;
        for name in &names {
            let plugin = builtin_plugin(name).expect("builtin attribute");
            let col = compute_attribute(&mut corpus, plugin.as_ref());
            if !col.errors.is_empty() {
                log::info!("attribute `{}` absent for {} example(s)", col.name, col.errors.len());
            }
        }
        store.save_corpus(&corpus)
    })?;

    run.stage(
        "embeddings",
        &["generate"],
        json!({"source": EmbeddingSource::for_arch(bundle.arch)}),
        |store| {
            let corpus = store.load_corpus()?;
            let e = compute_embeddings(&bundle, &corpus)?;
            store.put(EMBEDDINGS, &StoredArray::from_array2(&e, Value::Null))
        },
    )?;

    run.stage(
        "projection",
        &["embeddings"],
        projection_stage_params(&p.projection),
        |store| {
            let corpus = store.load_corpus()?;
            let e = store.get(EMBEDDINGS)?.to_array2()?;
            let result = compute_projection(&bundle, &corpus, &e, &p.projection)?;
            for (name, a) in projection_arrays(&result) {
                store.put(name, &a)?;
            }
            Ok(())
        },
    )?;

    run.stage(
        "head_importance",
        &["generate"],
        head_importance_stage_params(p.attn_steps, p.loss, p.reduction),
        |store| {
            let corpus = store.load_corpus()?;
            let h = compute_head_importance(&bundle, &corpus, p)?;
            for (name, a) in head_importance_arrays(&h) {
                store.put(&name, &a)?;
            }
            Ok(())
        },
    )?;

    let mut store = run.store;
    if !store.manifest().complete || !run.ran.is_empty() {
        store.manifest_mut().complete = true;
        store.write_manifest()?;
    }
    run.report.examples = store.load_corpus()?.len();
    Ok(run.report)
}

/// Names of pipeline stages or arrays still missing from a cache.
pub fn missing_parts(dir: &Path) -> Result<Vec<String>> {
    let store = ArtifactStore::open(dir)?;
    let mut missing: Vec<String> = STAGES
        .iter()
        .filter(|s| store.stage_params(s).is_none())
        .map(|s| format!("stage `{s}`"))
        .collect();
    for name in [EMBEDDINGS, crate::store::PROJECTION_POINTS] {
        if !store.contains(name) {
            missing.push(format!("array `{name}`"));
        }
    }
    if !store
        .manifest()
        .arrays
        .keys()
        .any(|k| k.starts_with("head_importance."))
    {
        missing.push("array `head_importance.*`".into());
    }
    if !dir.join(crate::store::CORPUS_FILE).exists() {
        missing.push(format!("file `{}`", crate::store::CORPUS_FILE));
    }
    Ok(missing)
}
