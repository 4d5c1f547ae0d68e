//! End-to-end workflows over an on-disk fixture corpus: train, index,
//! evaluate, and trace.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::cell::GateActivations;
use crate::config::RunConfig;
use crate::encoder::{gate_trace_summary, DualEncoder, EncodeOptions, LayerStack};
use crate::error::{Error, Result};
use crate::fixtures::{load_item, read_eval_file, Manifest, Split};
use crate::index::RetrievalIndex;
use crate::metrics::{pseudo_recall_at_k, recall_at_k, EvalRecord, QueryResults};
use crate::train::{fit, Item, StepReport, TrainPair, TrainState};

/// Feature stacks of one query or document, loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub id: String,
    pub text: LayerStack,
    pub vis: Option<LayerStack>,
}

impl LoadedItem {
    pub fn item(&self) -> Item<'_> {
        Item {
            text: &self.text,
            vis: self.vis.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDoc {
    pub item: LoadedItem,
    pub content: String,
}

#[derive(Debug, Clone)]
pub struct LoadedQuery {
    pub item: LoadedItem,
    pub split: Split,
    pub gold: String,
}

/// A fixture directory with every feature file read.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub docs: Vec<LoadedDoc>,
    pub queries: Vec<LoadedQuery>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let mut docs = Vec::with_capacity(manifest.docs.len());
        for d in &manifest.docs {
            let vis = d.vis_features.as_ref().map(|p| dir.join(p));
            let (text, vis) = load_item(&dir.join(&d.text_features), vis.as_deref())?;
            docs.push(LoadedDoc {
                item: LoadedItem {
                    id: d.id.clone(),
                    text,
                    vis,
                },
                content: d.content.clone(),
            });
        }
        let mut queries = Vec::with_capacity(manifest.queries.len());
        for q in &manifest.queries {
            let vis = dir.join(&q.vis_features);
            let (text, vis) = load_item(&dir.join(&q.text_features), Some(&vis))?;
            queries.push(LoadedQuery {
                item: LoadedItem {
                    id: q.id.clone(),
                    text,
                    vis,
                },
                split: q.split,
                gold: q.gold.clone(),
            });
        }
        if docs.is_empty() {
            return Err(Error::Empty("corpus documents"));
        }
        Ok(Self {
            manifest,
            docs,
            queries,
        })
    }

    /// `(text_depth, vis_depth, text_dim, vis_dim)` of the corpus, taken from
    /// the first query or document with both modalities.
    pub fn shape(&self) -> Result<(usize, usize, usize, usize)> {
        let items = self
            .queries
            .iter()
            .map(|q| &q.item)
            .chain(self.docs.iter().map(|d| &d.item));
        for it in items {
            if let Some(v) = &it.vis {
                return Ok((it.text.depth(), v.depth(), it.text.source_dim(), v.source_dim()));
            }
        }
        Err(Error::Empty("items with visual features"))
    }

    /// `(query, gold document)` training pairs of the train split.
    pub fn train_pairs(&self) -> Result<Vec<TrainPair<'_>>> {
        let by_id: HashMap<&str, &LoadedDoc> =
            self.docs.iter().map(|d| (d.item.id.as_str(), d)).collect();
        self.queries
            .iter()
            .filter(|q| q.split == Split::Train)
            .map(|q| {
                let doc = by_id
                    .get(q.gold.as_str())
                    .ok_or_else(|| Error::Format(format!("gold document {} not in corpus", q.gold)))?;
                Ok(TrainPair {
                    query: q.item.item(),
                    doc: doc.item.item(),
                })
            })
            .collect()
    }
}

/// Initializes a model from `cfg` and trains it on the corpus train split.
pub fn train_model(
    cfg: &RunConfig,
    corpus: &Corpus,
    on_step: impl FnMut(&StepReport),
) -> Result<DualEncoder> {
    cfg.validate()?;
    let (td, vd, tdim, vdim) = corpus.shape()?;
    let model = DualEncoder::init(cfg.encoder_config(td, vd, tdim, vdim)?, cfg.seed)?;
    let pairs = corpus.train_pairs()?;
    let mut state = TrainState::new(model, cfg.lr, cfg.steps, cfg.tau)?;
    fit(&mut state, &pairs, cfg.batch_size, cfg.seed, on_step)?;
    Ok(state.model)
}

/// Encodes every corpus document with the document encoder.
pub fn build_index(model: &DualEncoder, docs: &[LoadedDoc]) -> Result<RetrievalIndex> {
    let enc = model.doc_encoder();
    let mut index = RetrievalIndex::new(model.config.tokens, model.config.late_width);
    for d in docs {
        let (tokens, _) = enc.encode(
            &d.item.id,
            &d.item.text,
            d.item.vis.as_ref(),
            EncodeOptions::default(),
        )?;
        index.add(&d.item.id, tokens, &d.content, d.item.vis.is_some())?;
    }
    Ok(index)
}

/// Query items and their records from an eval file.
pub fn load_eval(path: &Path) -> Result<(Vec<LoadedItem>, Vec<EvalRecord>)> {
    let mut items = Vec::new();
    let mut records = Vec::new();
    for (q, text, vis) in read_eval_file(path)? {
        let (t, v) = load_item(&text, vis.as_deref())?;
        items.push(LoadedItem {
            id: q.record.query_id.clone(),
            text: t,
            vis: v,
        });
        records.push(q.record);
    }
    if records.is_empty() {
        return Err(Error::Empty("eval queries"));
    }
    Ok((items, records))
}

/// Ranked hits for every query.
pub fn search_all(
    model: &DualEncoder,
    index: &RetrievalIndex,
    queries: &[LoadedItem],
    top_k: usize,
) -> Result<Vec<QueryResults>> {
    let enc = model.query_encoder();
    queries
        .iter()
        .map(|q| {
            let (tokens, _) = enc.encode(&q.id, &q.text, q.vis.as_ref(), EncodeOptions::default())?;
            Ok(QueryResults {
                query_id: q.id.clone(),
                hits: index.search(&tokens, top_k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub pseudo_recall_at_5: f64,
    pub queries: usize,
}

pub fn evaluate(
    model: &DualEncoder,
    index: &RetrievalIndex,
    queries: &[LoadedItem],
    records: &[EvalRecord],
) -> Result<EvalSummary> {
    let results = search_all(model, index, queries, 10)?;
    Ok(EvalSummary {
        recall_at_1: recall_at_k(&results, records, 1)?,
        recall_at_5: recall_at_k(&results, records, 5)?,
        recall_at_10: recall_at_k(&results, records, 10)?,
        pseudo_recall_at_5: pseudo_recall_at_k(&results, records, index, 5)?,
        queries: records.len(),
    })
}

/// Per-layer mean gate activations of the query encoder.
pub fn query_gate_summary(
    model: &DualEncoder,
    queries: &[LoadedItem],
) -> Result<Vec<GateActivations>> {
    let enc = model.query_encoder();
    let opts = EncodeOptions {
        trace: true,
        ..EncodeOptions::default()
    };
    let mut traces = Vec::with_capacity(queries.len());
    for q in queries {
        let (_, trace) = enc.encode(&q.id, &q.text, q.vis.as_ref(), opts)?;
        traces.extend(trace);
    }
    gate_trace_summary(&traces)
}
