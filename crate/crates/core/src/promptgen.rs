//! Hierarchy-aware language prompts.
//!
//! Every leaf class gets three groups of queries for the language model:
//! comparisons with its leaf-level peers (LP), comparisons with the peers of
//! each of its non-root ancestors (AP), and three generic path-based
//! descriptions carrying an "(a type of ...)" hint per ancestor (G).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{LabelHierarchy, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("a prompt plan needs at least one of lp, ap, g")]
    EmptyPlan,
    #[error("unknown prompt group `{0}` (expected lp, ap or g)")]
    UnknownGroup(String),
    #[error("class `{0}` has no peers and no ancestors to build prompts from")]
    EmptyPromptSet(String),
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
}

impl PromptError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::EmptyPlan => "EmptyPlan",
            Self::UnknownGroup(_) => "UnknownGroup",
            Self::EmptyPromptSet(_) => "EmptyPromptSet",
            Self::BadManifest { .. } => "BadManifest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    LeafPeer,
    AncestorPeer,
    PathBased,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [Self::LeafPeer, Self::AncestorPeer, Self::PathBased];

    pub fn code(self) -> &'static str {
        match self {
            Self::LeafPeer => "lp",
            Self::AncestorPeer => "ap",
            Self::PathBased => "g",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lp" | "leaf_peer" => Ok(Self::LeafPeer),
            "ap" | "ancestor_peer" => Ok(Self::AncestorPeer),
            "g" | "path_based" => Ok(Self::PathBased),
            other => Err(PromptError::UnknownGroup(other.to_string())),
        }
    }
}

/// One query to send to the language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePrompt {
    #[serde(rename = "class")]
    pub query_class: String,
    pub kind: PromptKind,
    #[serde(rename = "related")]
    pub related_class: String,
    pub template_index: u8,
    pub text: String,
}

impl LanguagePrompt {
    /// Identifier unique across a prompt set: class, group, related class and
    /// template.
    pub fn id(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.query_class,
            self.kind.code(),
            self.related_class,
            self.template_index
        )
    }

    fn sort_key(&self) -> (&str, PromptKind, &str, u8) {
        (
            &self.query_class,
            self.kind,
            &self.related_class,
            self.template_index,
        )
    }
}

pub fn comparative_text(query: &str, related: &str) -> String {
    format!("How does {query} look differently from {related}?")
}

pub const PATH_TEMPLATE_COUNT: u8 = 3;

pub fn path_text(template_index: u8, query: &str, ancestor: &str) -> String {
    match template_index {
        0 => format!("What does {query} (a type of {ancestor}) look like?"),
        1 => format!("Describe a picture of {query} (a type of {ancestor})."),
        2 => format!("What are the unique characteristics of {query} (a type of {ancestor})?"),
        _ => panic!("path template index {template_index} out of range"),
    }
}

/// Which prompt groups to include. The seven non-empty subsets of
/// {lp, ap, g} are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPlan {
    pub include_lp: bool,
    pub include_ap: bool,
    pub include_g: bool,
}

impl PromptPlan {
    pub fn new(include_lp: bool, include_ap: bool, include_g: bool) -> Result<Self, PromptError> {
        if !(include_lp || include_ap || include_g) {
            return Err(PromptError::EmptyPlan);
        }
        Ok(Self {
            include_lp,
            include_ap,
            include_g,
        })
    }

    pub fn full() -> Self {
        Self {
            include_lp: true,
            include_ap: true,
            include_g: true,
        }
    }

    pub fn is_full(&self) -> bool {
        self.include_lp && self.include_ap && self.include_g
    }

    pub fn is_lp_only(&self) -> bool {
        self.include_lp && !self.include_ap && !self.include_g
    }

    pub fn includes(&self, kind: PromptKind) -> bool {
        match kind {
            PromptKind::LeafPeer => self.include_lp,
            PromptKind::AncestorPeer => self.include_ap,
            PromptKind::PathBased => self.include_g,
        }
    }

    /// All seven non-empty subsets.
    pub fn all() -> Vec<Self> {
        (1u8..8)
            .map(|bits| Self {
                include_lp: bits & 1 != 0,
                include_ap: bits & 2 != 0,
                include_g: bits & 4 != 0,
            })
            .collect()
    }
}

impl FromStr for PromptPlan {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mut lp, mut ap, mut g) = (false, false, false);
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            match part.parse::<PromptKind>()? {
                PromptKind::LeafPeer => lp = true,
                PromptKind::AncestorPeer => ap = true,
                PromptKind::PathBased => g = true,
            }
        }
        Self::new(lp, ap, g)
    }
}

impl fmt::Display for PromptPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = PromptKind::ALL
            .iter()
            .filter(|k| self.includes(**k))
            .map(|k| k.code())
            .collect();
        f.write_str(&parts.join(","))
    }
}

fn comparative(h: &LabelHierarchy, y: NodeId, kind: PromptKind, related: NodeId) -> LanguagePrompt {
    let query = h.name(y);
    let related = h.name(related);
    LanguagePrompt {
        query_class: query.to_string(),
        kind,
        related_class: related.to_string(),
        template_index: 0,
        text: comparative_text(query, related),
    }
}

fn leaf_peer_prompts(h: &LabelHierarchy, y: NodeId) -> Vec<LanguagePrompt> {
    h.leaf_peers(y)
        .into_iter()
        .map(|p| comparative(h, y, PromptKind::LeafPeer, p))
        .collect()
}

fn ancestor_peer_prompts(h: &LabelHierarchy, y: NodeId) -> Vec<LanguagePrompt> {
    h.ancestor_peers(y)
        .into_iter()
        .flat_map(|(_, peers)| peers)
        .map(|p| comparative(h, y, PromptKind::AncestorPeer, p))
        .collect()
}

/// Comparisons used when a leaf has no leaf-level peers: its ancestor peers,
/// or, for a root-attached leaf (which has none), its non-leaf siblings.
fn no_leaf_peer_fallback(h: &LabelHierarchy, y: NodeId) -> Vec<LanguagePrompt> {
    if h.parent(y) != Some(h.root()) {
        return ancestor_peer_prompts(h, y);
    }
    h.siblings(y)
        .filter(|&s| !h.is_leaf(s))
        .map(|s| comparative(h, y, PromptKind::AncestorPeer, s))
        .collect()
}

/// LP prompts followed by AP prompts (ancestors nearest first).
pub fn comparative_prompts(h: &LabelHierarchy, y: NodeId) -> Vec<LanguagePrompt> {
    let mut out = leaf_peer_prompts(h, y);
    out.extend(ancestor_peer_prompts(h, y));
    out
}

/// Three templated prompts per non-root ancestor, nearest ancestor first.
pub fn path_prompts(h: &LabelHierarchy, y: NodeId) -> Vec<LanguagePrompt> {
    let query = h.name(y);
    h.ancestor_path(y)
        .into_iter()
        .flat_map(|a| {
            let ancestor = h.name(a);
            (0..PATH_TEMPLATE_COUNT).map(move |t| LanguagePrompt {
                query_class: query.to_string(),
                kind: PromptKind::PathBased,
                related_class: ancestor.to_string(),
                template_index: t,
                text: path_text(t, query, ancestor),
            })
        })
        .collect()
}

/// The union of the planned groups for one leaf, in LP, AP, G order.
///
/// Under the LP-only plan a leaf without leaf-level peers is compared with
/// its ancestor-level peers instead. Under the full plan a leaf that would
/// otherwise get no prompts at all (a root-attached leaf whose siblings are
/// all internal nodes) is compared with those siblings; if even that is
/// empty the tree is a root with a single leaf and `EmptyPromptSet` is
/// returned.
pub fn build_prompt_set(
    h: &LabelHierarchy,
    y: NodeId,
    plan: PromptPlan,
) -> Result<Vec<LanguagePrompt>, PromptError> {
    let mut out = Vec::new();
    if plan.include_lp {
        let lp = leaf_peer_prompts(h, y);
        if lp.is_empty() && plan.is_lp_only() {
            out.extend(no_leaf_peer_fallback(h, y));
        } else {
            out.extend(lp);
        }
    }
    if plan.include_ap {
        out.extend(ancestor_peer_prompts(h, y));
    }
    if plan.include_g {
        out.extend(path_prompts(h, y));
    }
    if plan.is_full() && out.is_empty() {
        out.extend(no_leaf_peer_fallback(h, y));
        if out.is_empty() {
            return Err(PromptError::EmptyPromptSet(h.name(y).to_string()));
        }
    }

    let mut seen = HashSet::new();
    let mut compared = HashSet::new();
    out.retain(|p| {
        if !seen.insert((p.kind, p.related_class.to_lowercase(), p.template_index)) {
            return false;
        }
        // one comparison per related class, whichever group produced it first
        p.kind == PromptKind::PathBased || compared.insert(p.related_class.to_lowercase())
    });
    Ok(out)
}

/// Prompt sets for every leaf, in leaf order.
pub fn build_all(h: &LabelHierarchy, plan: PromptPlan) -> Result<Vec<LanguagePrompt>, PromptError> {
    let mut out = Vec::new();
    for &leaf in h.leaves() {
        out.extend(build_prompt_set(h, leaf, plan)?);
    }
    Ok(out)
}

/// Line-delimited JSON, one record per prompt, sorted by
/// (class, kind, related, template).
pub fn write_manifest(prompts: &[LanguagePrompt]) -> String {
    let mut sorted: Vec<&LanguagePrompt> = prompts.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = String::new();
    for p in sorted {
        out.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        out.push('\n');
    }
    out
}

pub fn read_manifest(text: &str) -> Result<Vec<LanguagePrompt>, PromptError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PromptError::BadManifest {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
