//! Zero-shot inference: embedding-space ensemble, logit-space ensemble and
//! conditional risk minimization (CRM) re-ranking.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingFile, EmbeddingVector, ImageEmbeddingSet};
use crate::hierarchy::{DistanceMatrix, LabelHierarchy};

/// Logit multiplier applied before the CRM softmax.
pub const DEFAULT_CRM_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("class `{0}` has no sub-classifiers")]
    EmptySubclassifierList(String),
    #[error("class `{0}` has no classifier embeddings")]
    MissingClass(String),
    #[error("class `{0}` has more than one embedding; aggregate first or use the logit ensemble")]
    DuplicateClass(String),
    #[error("classifier for `{0}` is not unit-norm")]
    NotUnitNorm(String),
    #[error("{logits} logits but a {matrix}x{matrix} distance matrix")]
    ClassCountMismatch { logits: usize, matrix: usize },
    #[error("CRM scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("bank has {bank} classes but the hierarchy has {hierarchy}")]
    BankSize { bank: usize, hierarchy: usize },
    #[error("unknown strategy `{0}` (expected embedding or logit)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("image `{image_id}`: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<ZeroShotError>,
    },
    #[error("predictions line {line}: {reason}")]
    BadPredictions { line: usize, reason: String },
}

impl ZeroShotError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DimMismatch { .. } => "DimMismatch",
            Self::EmptySubclassifierList(_) => "EmptySubclassifierList",
            Self::MissingClass(_) => "MissingClass",
            Self::DuplicateClass(_) => "DuplicateClass",
            Self::NotUnitNorm(_) => "NotUnitNorm",
            Self::ClassCountMismatch { .. } => "ClassCountMismatch",
            Self::BadScale(_) => "BadScale",
            Self::BankSize { .. } => "BankSize",
            Self::UnknownStrategy(_) => "UnknownStrategy",
            Self::Embed(e) => e.name(),
            Self::Image { source, .. } => source.name(),
            Self::BadPredictions { .. } => "BadPredictions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ensemble {
    Embedding,
    Logit,
}

impl FromStr for Ensemble {
    type Err = ZeroShotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedding" => Ok(Self::Embedding),
            "logit" => Ok(Self::Logit),
            other => Err(ZeroShotError::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Embedding => "embedding",
            Self::Logit => "logit",
        })
    }
}

/// Base ensemble plus optional CRM re-ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strategy {
    pub ensemble: Ensemble,
    pub crm_scale: Option<f64>,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.crm_scale {
            Some(_) => write!(f, "{}+crm", self.ensemble),
            None => write!(f, "{}", self.ensemble),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Classifiers {
    /// One unit vector per class.
    Embedding(Vec<EmbeddingVector>),
    /// Per class, one unit vector per image prompt.
    Logit(Vec<Vec<EmbeddingVector>>),
}

/// Ordered per-class classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    classes: Vec<String>,
    dim: usize,
    classifiers: Classifiers,
}

fn check_unit(class: &str, v: &EmbeddingVector, dim: usize) -> Result<(), ZeroShotError> {
    if v.dim() != dim {
        return Err(ZeroShotError::DimMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    if !v.is_unit() {
        return Err(ZeroShotError::NotUnitNorm(class.to_string()));
    }
    Ok(())
}

impl ClassifierBank {
    pub fn embedding(classes: Vec<String>, vectors: Vec<EmbeddingVector>) -> Result<Self, ZeroShotError> {
        if classes.len() != vectors.len() {
            return Err(ZeroShotError::BankSize {
                bank: vectors.len(),
                hierarchy: classes.len(),
            });
        }
        let dim = vectors.first().map_or(0, EmbeddingVector::dim);
        for (c, v) in classes.iter().zip(&vectors) {
            check_unit(c, v, dim)?;
        }
        Ok(Self {
            classes,
            dim,
            classifiers: Classifiers::Embedding(vectors),
        })
    }

    pub fn logit(classes: Vec<String>, subs: Vec<Vec<EmbeddingVector>>) -> Result<Self, ZeroShotError> {
        if classes.len() != subs.len() {
            return Err(ZeroShotError::BankSize {
                bank: subs.len(),
                hierarchy: classes.len(),
            });
        }
        let dim = subs
            .iter()
            .flat_map(|s| s.first())
            .map(EmbeddingVector::dim)
            .next()
            .unwrap_or(0);
        for (c, s) in classes.iter().zip(&subs) {
            if s.is_empty() {
                return Err(ZeroShotError::EmptySubclassifierList(c.clone()));
            }
            for v in s {
                check_unit(c, v, dim)?;
            }
        }
        Ok(Self {
            classes,
            dim,
            classifiers: Classifiers::Logit(subs),
        })
    }

    /// Groups per-prompt text embeddings by label (hierarchy leaf order) and
    /// builds the bank for `ensemble`: aggregated class embeddings, or one
    /// normalized sub-classifier per prompt.
    pub fn from_prompt_embeddings(
        h: &LabelHierarchy,
        file: &EmbeddingFile,
        ensemble: Ensemble,
    ) -> Result<Self, ZeroShotError> {
        let groups = group_by_class(h, file)?;
        let classes = h.leaf_names().into_iter().map(String::from).collect();
        match ensemble {
            Ensemble::Embedding => {
                let vectors = groups
                    .iter()
                    .map(|g| embed::aggregate_class_embedding(g))
                    .collect::<Result<Vec<_>, _>>()?;
                Self::embedding(classes, vectors)
            }
            Ensemble::Logit => {
                let subs = groups
                    .iter()
                    .map(|g| g.iter().map(embed::l2_normalize).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?;
                Self::logit(classes, subs)
            }
        }
    }

    /// One already-aggregated embedding per class, e.g. the output of the
    /// `aggregate` stage.
    pub fn from_class_embeddings(h: &LabelHierarchy, file: &EmbeddingFile) -> Result<Self, ZeroShotError> {
        let groups = group_by_class(h, file)?;
        let classes: Vec<String> = h.leaf_names().into_iter().map(String::from).collect();
        let mut vectors = Vec::with_capacity(groups.len());
        for (c, g) in classes.iter().zip(groups) {
            if g.len() > 1 {
                return Err(ZeroShotError::DuplicateClass(c.clone()));
            }
            vectors.extend(g);
        }
        Self::embedding(classes, vectors)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ensemble(&self) -> Ensemble {
        match self.classifiers {
            Classifiers::Embedding(_) => Ensemble::Embedding,
            Classifiers::Logit(_) => Ensemble::Logit,
        }
    }

    /// Class embeddings of an embedding-ensemble bank.
    pub fn class_embeddings(&self) -> Option<&[EmbeddingVector]> {
        match &self.classifiers {
            Classifiers::Embedding(v) => Some(v),
            Classifiers::Logit(_) => None,
        }
    }

    /// Writes an embedding-ensemble bank as an interchange file.
    pub fn to_embedding_file(&self) -> Option<EmbeddingFile> {
        let vectors = self.class_embeddings()?;
        let records = self
            .classes
            .iter()
            .zip(vectors)
            .map(|(c, v)| embed::EmbeddingRecord {
                id: c.clone(),
                label: c.clone(),
                vector: v.clone(),
            })
            .collect();
        EmbeddingFile::new(records, true).ok()
    }

    /// I . T_k for every class (mean over sub-classifiers in logit mode).
    pub fn logits(&self, image: &EmbeddingVector) -> Result<Vec<f64>, ZeroShotError> {
        if image.dim() != self.dim {
            return Err(ZeroShotError::DimMismatch {
                expected: self.dim,
                found: image.dim(),
            });
        }
        Ok(match &self.classifiers {
            Classifiers::Embedding(ts) => ts.iter().map(|t| image.dot(t)).collect(),
            Classifiers::Logit(subs) => subs
                .iter()
                .map(|s| s.iter().map(|t| image.dot(t)).sum::<f64>() / s.len() as f64)
                .collect(),
        })
    }

    /// Prediction with this bank's own ensemble rule.
    pub fn predict(&self, image: &EmbeddingVector) -> Result<Prediction, ZeroShotError> {
        let logits = self.logits(image)?;
        Ok(Prediction {
            predicted: argmax(&logits),
            logits,
            risks: None,
            strategy: Strategy {
                ensemble: self.ensemble(),
                crm_scale: None,
            },
        })
    }
}

fn group_by_class(h: &LabelHierarchy, file: &EmbeddingFile) -> Result<Vec<Vec<EmbeddingVector>>, ZeroShotError> {
    let mut groups = vec![Vec::new(); h.leaves().len()];
    for r in file.records() {
        let k = h.class_index(&r.label).map_err(|_| EmbedError::UnknownLabel {
            id: r.id.clone(),
            label: r.label.clone(),
        })?;
        groups[k].push(r.vector.clone());
    }
    for (g, name) in groups.iter().zip(h.leaf_names()) {
        if g.is_empty() {
            return Err(ZeroShotError::MissingClass(name.to_string()));
        }
    }
    Ok(groups)
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// First index of the minimum.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub predicted: usize,
    /// Raw ensemble logits, aligned with the bank's class order.
    pub logits: Vec<f64>,
    /// Expected hierarchical cost per class when CRM was applied.
    pub risks: Option<Vec<f64>>,
    pub strategy: Strategy,
}

fn bank_mode(bank: &ClassifierBank, want: Ensemble) -> Result<(), ZeroShotError> {
    if bank.ensemble() != want {
        return Err(ZeroShotError::UnknownStrategy(format!(
            "bank is a {} ensemble, not {}",
            bank.ensemble(),
            want
        )));
    }
    Ok(())
}

/// argmax_k I . T_k with lowest-index tie-break.
pub fn predict_embedding_ensemble(image: &EmbeddingVector, bank: &ClassifierBank) -> Result<Prediction, ZeroShotError> {
    bank_mode(bank, Ensemble::Embedding)?;
    bank.predict(image)
}

/// argmax_k mean_m I . t_{k,m} with lowest-index tie-break.
pub fn predict_logit_ensemble(image: &EmbeddingVector, bank: &ClassifierBank) -> Result<Prediction, ZeroShotError> {
    bank_mode(bank, Ensemble::Logit)?;
    bank.predict(image)
}

/// softmax(scale * logits), with the maximum subtracted first.
pub fn scaled_softmax(logits: &[f64], scale: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| scale * l).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// risk[k] = sum_j D[k][j] * softmax(scale * logits)[j]
pub fn crm_risks(logits: &[f64], d: &DistanceMatrix, scale: f64) -> Result<Vec<f64>, ZeroShotError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(ZeroShotError::BadScale(scale));
    }
    if logits.len() != d.k() {
        return Err(ZeroShotError::ClassCountMismatch {
            logits: logits.len(),
            matrix: d.k(),
        });
    }
    let p = scaled_softmax(logits, scale);
    Ok((0..d.k())
        .map(|k| {
            d.row(k)
                .iter()
                .zip(&p)
                .map(|(&dist, &pj)| f64::from(dist) * pj)
                .sum()
        })
        .collect())
}

/// Re-ranks a base prediction by minimum expected hierarchical cost.
pub fn crm_rerank(base: &Prediction, d: &DistanceMatrix, scale: f64) -> Result<Prediction, ZeroShotError> {
    let risks = crm_risks(&base.logits, d, scale)?;
    Ok(Prediction {
        predicted: argmin(&risks),
        logits: base.logits.clone(),
        risks: Some(risks),
        strategy: Strategy {
            ensemble: base.strategy.ensemble,
            crm_scale: Some(scale),
        },
    })
}

/// A prediction for one labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub image_id: String,
    pub truth: usize,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions<'a> {
    /// Apply CRM after the base ensemble, with this distance matrix and scale.
    pub crm: Option<(&'a DistanceMatrix, f64)>,
}

/// Predicts every image in parallel; output order matches input order.
pub fn batch_predict(
    images: &ImageEmbeddingSet,
    bank: &ClassifierBank,
    options: BatchOptions<'_>,
) -> Result<Vec<ImagePrediction>, ZeroShotError> {
    images
        .records()
        .par_iter()
        .map(|img| {
            let attach = |e: ZeroShotError| ZeroShotError::Image {
                image_id: img.image_id.clone(),
                source: Box::new(e),
            };
            let mut prediction = bank.predict(&img.vector).map_err(attach)?;
            if let Some((d, scale)) = options.crm {
                prediction = crm_rerank(&prediction, d, scale).map_err(attach)?;
            }
            Ok(ImagePrediction {
                image_id: img.image_id.clone(),
                truth: img.class,
                prediction,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClass {
    pub class: String,
    pub logit: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub label: String,
    pub predicted: String,
    pub strategy: String,
    pub top5: Vec<ScoredClass>,
}

impl PredictionRecord {
    pub fn new(p: &ImagePrediction, classes: &[String]) -> Self {
        let mut order: Vec<usize> = (0..p.prediction.logits.len()).collect();
        // stable sort keeps the lowest index first among equal logits
        order.sort_by(|&a, &b| p.prediction.logits[b].total_cmp(&p.prediction.logits[a]));
        Self {
            image_id: p.image_id.clone(),
            label: classes[p.truth].clone(),
            predicted: classes[p.prediction.predicted].clone(),
            strategy: p.prediction.strategy.to_string(),
            top5: order
                .into_iter()
                .take(5)
                .map(|k| ScoredClass {
                    class: classes[k].clone(),
                    logit: p.prediction.logits[k],
                })
                .collect(),
        }
    }
}

pub fn write_predictions(preds: &[ImagePrediction], classes: &[String]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(&PredictionRecord::new(p, classes)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_predictions(text: &str) -> Result<Vec<PredictionRecord>, ZeroShotError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ZeroShotError::BadPredictions {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
