//! Synthetic hierarchy-structured embeddings.
//!
//! The root vector is drawn from a spherical Gaussian and every child is its
//! parent plus a Gaussian offset whose scale shrinks with depth, so cosine
//! similarity between leaf classes follows tree distance. Query "images" are
//! noisy copies of their class vector. Each node and each leaf's query batch
//! draws from its own ChaCha stream keyed by node id, so results do not
//! depend on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingFile, EmbeddingRecord, EmbeddingVector, ZERO_NORM};
use crate::hierarchy::{HierarchyBuilder, HierarchyError, LabelHierarchy, NodeId};

const QUERY_STREAM: u64 = 1 << 32;
const PROMPT_STREAM: u64 = 2 << 32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

impl SynthError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DegenerateConfig(_) => "DegenerateConfig",
            Self::Embed(e) => e.name(),
            Self::Hierarchy(e) => e.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    /// Offset scale at depth 1; depth `d` uses `branch_noise / d`.
    pub branch_noise: f64,
    pub query_noise: f64,
    pub seed: u64,
    pub queries_per_class: usize,
    /// Text embeddings emitted per class (stand-ins for image prompts).
    pub prompts_per_class: usize,
    /// Noise on each prompt embedding around its class vector; 0 copies it.
    pub prompt_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            branch_noise: 0.5,
            query_noise: 0.3,
            seed: 7,
            queries_per_class: 10,
            prompts_per_class: 1,
            prompt_noise: 0.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self, h: &LabelHierarchy) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::DegenerateConfig(m.to_string()));
        if h.leaves().len() < 2 {
            return bad("need at least two leaf classes");
        }
        if self.dim < 8 {
            return bad("dim must be at least 8");
        }
        if !(self.branch_noise > 0.0 && self.branch_noise.is_finite()) {
            return bad("branch_noise must be positive");
        }
        if !(self.query_noise > 0.0 && self.query_noise.is_finite()) {
            return bad("query_noise must be positive");
        }
        if !(self.prompt_noise >= 0.0 && self.prompt_noise.is_finite()) {
            return bad("prompt_noise must be non-negative");
        }
        if self.prompts_per_class == 0 {
            return bad("prompts_per_class must be at least 1");
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Adds an isotropic Gaussian with per-vector norm about `sigma`.
fn add_noise(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let per_component = sigma / (base.len() as f64).sqrt();
    base.iter()
        .map(|&b| {
            let z: f64 = StandardNormal.sample(rng);
            b + per_component * z
        })
        .collect()
}

fn unit(v: &[f64]) -> Result<EmbeddingVector, SynthError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= ZERO_NORM) || !norm.is_finite() {
        return Err(SynthError::DegenerateConfig(
            "vector vanished on normalization".into(),
        ));
    }
    Ok(EmbeddingVector::new(v.iter().map(|x| (x / norm) as f32).collect())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Unit class vectors in leaf order.
    pub class_vectors: Vec<EmbeddingVector>,
    /// Per-class text embeddings, `prompts_per_class` each, labelled by class.
    pub prompt_embeddings: EmbeddingFile,
    /// Labelled, unit-norm query embeddings.
    pub images: EmbeddingFile,
}

pub fn generate_class_embeddings(h: &LabelHierarchy, cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    cfg.validate(h)?;
    let dim = cfg.dim;

    let mut order: Vec<NodeId> = h.nodes().collect();
    order.sort_by_key(|&n| h.depth(n));
    let mut node_vec: Vec<Vec<f64>> = vec![Vec::new(); h.len()];
    for n in order {
        let mut rng = cfg.rng(n.index() as u64);
        node_vec[n.index()] = match h.parent(n) {
            None => add_noise(&vec![0.0; dim], 1.0, &mut rng),
            Some(p) => {
                let sigma = cfg.branch_noise / f64::from(h.depth(n));
                add_noise(&node_vec[p.index()], sigma, &mut rng)
            }
        };
    }

    let mut class_vectors = Vec::with_capacity(h.leaves().len());
    let mut prompts = Vec::new();
    let mut images = Vec::new();
    for (k, &leaf) in h.leaves().iter().enumerate() {
        let class = h.name(leaf);
        let cv = unit(&node_vec[leaf.index()])?;
        let base: Vec<f64> = cv.as_slice().iter().map(|&x| f64::from(x)).collect();

        let mut rng = cfg.rng(PROMPT_STREAM | leaf.index() as u64);
        for p in 0..cfg.prompts_per_class {
            let vector = if cfg.prompt_noise > 0.0 {
                unit(&add_noise(&base, cfg.prompt_noise, &mut rng))?
            } else {
                cv.clone()
            };
            prompts.push(EmbeddingRecord {
                id: format!("{class}#{p}"),
                label: class.to_string(),
                vector,
            });
        }

        let mut rng = cfg.rng(QUERY_STREAM | leaf.index() as u64);
        for q in 0..cfg.queries_per_class {
            images.push(EmbeddingRecord {
                id: format!("img{k:04}_{q:04}"),
                label: class.to_string(),
                vector: unit(&add_noise(&base, cfg.query_noise, &mut rng))?,
            });
        }
        class_vectors.push(cv);
    }

    Ok(SynthData {
        class_vectors,
        prompt_embeddings: EmbeddingFile::new(prompts, true)?,
        images: EmbeddingFile::new(images, true)?,
    })
}

/// A complete tree with the given branching factor per level, e.g. `[2, 4, 4]`
/// gives 32 leaves at depth 3. Nodes are named by their path (`n1_3_0`).
pub fn balanced_hierarchy(branching: &[usize]) -> Result<LabelHierarchy, SynthError> {
    if branching.is_empty() || branching.contains(&0) {
        return Err(SynthError::DegenerateConfig(
            "branching factors must be positive".into(),
        ));
    }
    let mut b = HierarchyBuilder::new("root");
    let mut level = vec![String::from("n")];
    for (depth, &width) in branching.iter().enumerate() {
        let mut next = Vec::with_capacity(level.len() * width);
        for parent in &level {
            for i in 0..width {
                let child = if depth == 0 {
                    format!("n{i}")
                } else {
                    format!("{parent}_{i}")
                };
                let parent_name = if depth == 0 { "root" } else { parent.as_str() };
                b.edge(&child, parent_name)?;
                next.push(child);
            }
        }
        level = next;
    }
    Ok(b.build()?)
}
