//! Python bindings for the hierprompt core.

use hierprompt::embed::{self, EmbeddingVector};
use hierprompt::eval;
use hierprompt::hierarchy::LabelHierarchy;
use hierprompt::promptgen::{self, PromptPlan};
use hierprompt::zeroshot::{self, ClassifierBank, Prediction, Strategy};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(values: Vec<f32>) -> PyResult<EmbeddingVector> {
    EmbeddingVector::new(values).map_err(value_err)
}

/// A parsed label tree.
#[pyclass(name = "LabelHierarchy", frozen)]
struct PyHierarchy {
    inner: LabelHierarchy,
}

#[pymethods]
impl PyHierarchy {
    /// Parses an edge list: `ROOT<TAB>name`, then `child<TAB>parent` lines.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LabelHierarchy::parse(text).map_err(value_err)?,
        })
    }

    fn to_edge_list(&self) -> String {
        self.inner.to_edge_list()
    }

    fn leaves(&self) -> Vec<String> {
        self.inner.leaf_names().into_iter().map(String::from).collect()
    }

    fn height(&self) -> u32 {
        self.inner.height()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// LCA-height distance between two named nodes.
    fn distance(&self, a: &str, b: &str) -> PyResult<u32> {
        let a = self.inner.require(a).map_err(value_err)?;
        let b = self.inner.require(b).map_err(value_err)?;
        Ok(self.inner.hierarchical_distance(a, b))
    }

    /// Leaf-by-leaf distance matrix as nested lists.
    fn distance_matrix(&self) -> Vec<Vec<u32>> {
        let d = self.inner.distance_matrix();
        (0..d.k()).map(|i| d.row(i).to_vec()).collect()
    }

    /// Language prompts for every leaf as (class, kind, related, template, text).
    #[pyo3(signature = (plan = "lp,ap,g"))]
    fn build_prompts(&self, plan: &str) -> PyResult<Vec<(String, String, String, u8, String)>> {
        let plan: PromptPlan = plan.parse().map_err(value_err)?;
        let prompts = promptgen::build_all(&self.inner, plan).map_err(value_err)?;
        Ok(prompts
            .into_iter()
            .map(|p| (p.query_class, p.kind.code().to_string(), p.related_class, p.template_index, p.text))
            .collect())
    }

    /// Prompt manifest text in the on-disk JSONL form.
    #[pyo3(signature = (plan = "lp,ap,g"))]
    fn prompt_manifest(&self, plan: &str) -> PyResult<String> {
        let plan: PromptPlan = plan.parse().map_err(value_err)?;
        let prompts = promptgen::build_all(&self.inner, plan).map_err(value_err)?;
        Ok(promptgen::write_manifest(&prompts))
    }
}

/// Mean of normalized vectors, normalized again.
#[pyfunction]
fn aggregate_class_embedding(vectors: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
    let vs = vectors.into_iter().map(vector).collect::<PyResult<Vec<_>>>()?;
    Ok(embed::aggregate_class_embedding(&vs).map_err(value_err)?.into_inner())
}

/// Classifier over one class embedding per leaf, or several per leaf for the
/// logit ensemble.
#[pyclass(name = "ClassifierBank", frozen)]
struct PyBank {
    inner: ClassifierBank,
}

#[pymethods]
impl PyBank {
    #[staticmethod]
    fn embedding(classes: Vec<String>, vectors: Vec<Vec<f32>>) -> PyResult<Self> {
        let vs = vectors.into_iter().map(vector).collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: ClassifierBank::embedding(classes, vs).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn logit(classes: Vec<String>, subs: Vec<Vec<Vec<f32>>>) -> PyResult<Self> {
        let subs = subs
            .into_iter()
            .map(|g| g.into_iter().map(vector).collect::<PyResult<Vec<_>>>())
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: ClassifierBank::logit(classes, subs).map_err(value_err)?,
        })
    }

    fn classes(&self) -> Vec<String> {
        self.inner.classes().to_vec()
    }

    fn logits(&self, image: Vec<f32>) -> PyResult<Vec<f64>> {
        self.inner.logits(&vector(image)?).map_err(value_err)
    }

    /// Index of the predicted class, optionally re-ranked with CRM.
    #[pyo3(signature = (image, hierarchy = None, crm_scale = zeroshot::DEFAULT_CRM_SCALE))]
    fn predict(&self, image: Vec<f32>, hierarchy: Option<&PyHierarchy>, crm_scale: f64) -> PyResult<usize> {
        let p = self.inner.predict(&vector(image)?).map_err(value_err)?;
        match hierarchy {
            Some(h) => Ok(zeroshot::crm_rerank(&p, &h.inner.distance_matrix(), crm_scale)
                .map_err(value_err)?
                .predicted),
            None => Ok(p.predicted),
        }
    }
}

/// CRM prediction from raw logits over the hierarchy's leaves.
#[pyfunction]
#[pyo3(signature = (logits, hierarchy, scale = zeroshot::DEFAULT_CRM_SCALE))]
fn crm_rerank(logits: Vec<f64>, hierarchy: &PyHierarchy, scale: f64) -> PyResult<usize> {
    let base = Prediction {
        predicted: zeroshot::argmax(&logits),
        logits,
        risks: None,
        strategy: Strategy {
            ensemble: zeroshot::Ensemble::Embedding,
            crm_scale: None,
        },
    };
    Ok(zeroshot::crm_rerank(&base, &hierarchy.inner.distance_matrix(), scale)
        .map_err(value_err)?
        .predicted)
}

/// (top1, severity, hd_at_1) for index predictions over the leaves.
#[pyfunction]
fn evaluate(predicted: Vec<usize>, truth: Vec<usize>, hierarchy: &PyHierarchy) -> PyResult<(f64, f64, f64)> {
    let r = eval::evaluate(&predicted, &truth, &hierarchy.inner.distance_matrix()).map_err(value_err)?;
    Ok((r.top1, r.severity, r.hd_at_1))
}

#[pymodule]
fn pyhierprompt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHierarchy>()?;
    m.add_class::<PyBank>()?;
    m.add_function(wrap_pyfunction!(aggregate_class_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(crm_rerank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
