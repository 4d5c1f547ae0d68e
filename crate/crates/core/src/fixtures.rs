//! Synthetic planted-retrieval corpora.
//!
//! Every query shares a hidden latent pair `(u_text, u_vis)` with exactly one
//! gold document. Each row of every layer of the corresponding stacks is that
//! latent plus Gaussian noise. Distractor documents draw their own
//! independent latents.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerStack;
use crate::error::{Error, Modality, Result};
use crate::features::{read_feature_file, write_feature_file};
use crate::init::normal;
use crate::metrics::EvalRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub train_queries: usize,
    pub test_queries: usize,
    pub docs: usize,
    pub text_dim: usize,
    pub vis_dim: usize,
    pub text_depth: usize,
    pub vis_depth: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise: f64,
    /// Probability that a document has no image.
    pub missing_image_rate: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            train_queries: 64,
            test_queries: 32,
            docs: 256,
            text_dim: 8,
            vis_dim: 8,
            text_depth: 3,
            vis_depth: 6,
            min_tokens: 3,
            max_tokens: 6,
            noise: 0.1,
            missing_image_rate: 0.1,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let total = self.train_queries + self.test_queries;
        if total == 0 || self.docs < total {
            return Err(Error::Config(format!(
                "need at least as many documents ({}) as queries ({total})",
                self.docs
            )));
        }
        if self.text_dim == 0 || self.vis_dim == 0 || self.text_depth == 0 || self.vis_depth == 0 {
            return Err(Error::Config("fixture dims and depths must be >= 1".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token range must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_image_rate) || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("noise must be >= 0 and missing rate in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub text: Vec<f64>,
    pub vis: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FixtureQuery {
    pub id: String,
    pub split: Split,
    pub text: LayerStack,
    pub vis: LayerStack,
    pub gold: String,
    pub answer: String,
    pub latent: Latent,
}

#[derive(Debug, Clone)]
pub struct FixtureDoc {
    pub id: String,
    pub text: LayerStack,
    pub vis: Option<LayerStack>,
    pub content: String,
    pub latent: Latent,
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub spec: FixtureSpec,
    pub queries: Vec<FixtureQuery>,
    pub docs: Vec<FixtureDoc>,
}

fn entity_name(doc: usize) -> String {
    format!("Entity{doc:05}")
}

fn noisy_stack(
    rng: &mut ChaCha8Rng,
    modality: Modality,
    latent: &[f64],
    depth: usize,
    spec: &FixtureSpec,
) -> LayerStack {
    let dim = latent.len();
    let layers = (0..depth)
        .map(|_| {
            let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let mut t = normal(rng, &[n, dim], spec.noise);
            for row in t.data_mut().chunks_mut(dim) {
                for (v, u) in row.iter_mut().zip(latent) {
                    *v += u;
                }
            }
            t
        })
        .collect();
    LayerStack::new(modality, layers).expect("uniform source dim")
}

/// Builds the corpus in memory. Deterministic in `spec.seed`.
pub fn generate(spec: &FixtureSpec) -> Result<FixtureSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents: Vec<Latent> = (0..spec.docs)
        .map(|_| Latent {
            text: normal(&mut rng, &[spec.text_dim], 1.0).into_data(),
            vis: normal(&mut rng, &[spec.vis_dim], 1.0).into_data(),
        })
        .collect();
    let mut gold_order: Vec<usize> = (0..spec.docs).collect();
    gold_order.shuffle(&mut rng);

    let mut docs = Vec::with_capacity(spec.docs);
    for (j, latent) in latents.iter().enumerate() {
        let text = noisy_stack(&mut rng, Modality::Text, &latent.text, spec.text_depth, spec);
        let has_image = rng.random::<f64>() >= spec.missing_image_rate;
        let vis = noisy_stack(&mut rng, Modality::Vision, &latent.vis, spec.vis_depth, spec);
        docs.push(FixtureDoc {
            id: format!("d{j:05}"),
            text,
            vis: has_image.then_some(vis),
            content: format!("title: {} content: synthetic passage number {j}", entity_name(j)),
            latent: latent.clone(),
        });
    }

    let total = spec.train_queries + spec.test_queries;
    let mut queries = Vec::with_capacity(total);
    for (i, &g) in gold_order.iter().take(total).enumerate() {
        let latent = &latents[g];
        let text = noisy_stack(&mut rng, Modality::Text, &latent.text, spec.text_depth, spec);
        let vis = noisy_stack(&mut rng, Modality::Vision, &latent.vis, spec.vis_depth, spec);
        queries.push(FixtureQuery {
            id: format!("q{i:05}"),
            split: if i < spec.train_queries { Split::Train } else { Split::Test },
            text,
            vis,
            gold: docs[g].id.clone(),
            answer: entity_name(g),
            latent: latent.clone(),
        });
    }
    Ok(FixtureSet {
        spec: spec.clone(),
        queries,
        docs,
    })
}

/// One line of an eval file: the record plus feature paths relative to the
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    #[serde(flatten)]
    pub record: EvalRecord,
    pub text_features: String,
    pub vis_features: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub id: String,
    pub text_features: String,
    pub vis_features: Option<String>,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestQuery {
    pub id: String,
    pub split: Split,
    pub text_features: String,
    pub vis_features: String,
    pub gold: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: FixtureSpec,
    pub queries: Vec<ManifestQuery>,
    pub docs: Vec<ManifestDoc>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn eval_file_name(split: Split) -> &'static str {
    match split {
        Split::Train => "eval_train.jsonl",
        Split::Test => "eval_test.jsonl",
    }
}

/// Generates the corpus and writes feature files, `manifest.json`, and one
/// eval file per split under `out_dir`.
pub fn gen_fixtures(spec: &FixtureSpec, out_dir: &Path) -> Result<Manifest> {
    let set = generate(spec)?;
    write_fixtures(&set, out_dir)
}

pub fn write_fixtures(set: &FixtureSet, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir.join("features"))?;
    let mut docs = Vec::with_capacity(set.docs.len());
    for d in &set.docs {
        let text_path = format!("features/{}.text.fea", d.id);
        write_feature_file(&out_dir.join(&text_path), &d.text)?;
        let vis_path = match &d.vis {
            Some(v) => {
                let p = format!("features/{}.vis.fea", d.id);
                write_feature_file(&out_dir.join(&p), v)?;
                Some(p)
            }
            None => None,
        };
        docs.push(ManifestDoc {
            id: d.id.clone(),
            text_features: text_path,
            vis_features: vis_path,
            content: d.content.clone(),
        });
    }
    let mut queries = Vec::with_capacity(set.queries.len());
    for q in &set.queries {
        let text_path = format!("features/{}.text.fea", q.id);
        let vis_path = format!("features/{}.vis.fea", q.id);
        write_feature_file(&out_dir.join(&text_path), &q.text)?;
        write_feature_file(&out_dir.join(&vis_path), &q.vis)?;
        queries.push(ManifestQuery {
            id: q.id.clone(),
            split: q.split,
            text_features: text_path,
            vis_features: vis_path,
            gold: q.gold.clone(),
            answer: q.answer.clone(),
        });
    }
    let manifest = Manifest {
        spec: set.spec.clone(),
        queries,
        docs,
    };
    std::fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for split in [Split::Train, Split::Test] {
        let mut lines = String::new();
        for q in manifest.queries.iter().filter(|q| q.split == split) {
            let line = EvalQuery {
                record: EvalRecord {
                    query_id: q.id.clone(),
                    gold_doc_ids: [q.gold.clone()].into_iter().collect(),
                    answer: Some(q.answer.clone()),
                },
                text_features: q.text_features.clone(),
                vis_features: Some(q.vis_features.clone()),
            };
            lines.push_str(&serde_json::to_string(&line)?);
            lines.push('\n');
        }
        std::fs::write(out_dir.join(eval_file_name(split)), lines)?;
    }
    Ok(manifest)
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads an eval file. Feature paths are resolved against its directory.
pub fn read_eval_file(path: &Path) -> Result<Vec<(EvalQuery, PathBuf, Option<PathBuf>)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: EvalQuery = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let t = base.join(&q.text_features);
        let v = q.vis_features.as_ref().map(|p| base.join(p));
        out.push((q, t, v));
    }
    Ok(out)
}

/// Loads text and optional visual stacks for one item.
pub fn load_item(text: &Path, vis: Option<&Path>) -> Result<(LayerStack, Option<LayerStack>)> {
    let t = read_feature_file(text)?;
    let v = vis.map(read_feature_file).transpose()?;
    Ok((t, v))
}
