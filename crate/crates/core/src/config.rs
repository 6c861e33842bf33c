//! Run configuration. Serialized as JSON; every field has a default so a
//! config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TypeSchema, DEFAULT_PROMPT_TEMPLATE};

/// How the query set is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Learnable entity rows plus type rows.
    #[default]
    Full,
    /// Entity rows only (no type-grained part).
    NoType,
    /// Type rows only; the learnable entity table is dropped.
    NoEntity,
}

/// Order in which the `p` type rows are repeated to fill `u` query slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryLayout {
    /// `type_of(q) = q mod p`
    #[default]
    Tile,
    /// `type_of(q) = q / d`
    Block,
}

impl QueryLayout {
    pub fn type_of(self, q: usize, u: usize, p: usize) -> usize {
        match self {
            QueryLayout::Tile => q % p,
            QueryLayout::Block => q / (u / p),
        }
    }

    pub fn type_map(self, u: usize, p: usize) -> Vec<usize> {
        (0..u).map(|q| self.type_of(q, u, p)).collect()
    }
}

/// Where type-grained query rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TypeQuerySource {
    /// A trainable `p × h` table.
    #[default]
    Table,
    /// Run each type prompt through the text encoder and read the row at the
    /// `[MASK]` position.
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub mode: QueryMode,
    pub layout: QueryLayout,
    pub source: TypeQuerySource,
    pub prompt_template: String,
    /// Standard deviation of the entity-query initialization.
    pub entity_init_std: f64,
    pub type_init_std: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            mode: QueryMode::Full,
            layout: QueryLayout::Tile,
            source: TypeQuerySource::Table,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            entity_init_std: 0.02,
            type_init_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QfnetConfig {
    pub layers: usize,
    /// Query-text cross-attention.
    pub qct: bool,
    /// Query-region prefix integration.
    pub qpi: bool,
    /// Similarity-aware aggregator.
    pub sag: bool,
    /// Text tokens also attend over the queries (otherwise read-only).
    pub text_update: bool,
}

impl Default for QfnetConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            qct: true,
            qpi: true,
            sag: true,
            text_update: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Negated sum of raw probabilities.
    #[default]
    Probability,
    /// The per-pair loss terms themselves, so that the assignment minimizes
    /// the training loss exactly.
    LogLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Fill with the null label.
    #[default]
    Null,
    /// Cycle through the gold list until `u` entries, then null-free.
    Replicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// `false` trains with the fixed-order loss.
    pub bipartite: bool,
    pub cost: CostKind,
    pub padding: Padding,
    /// Cost of pairing a gold entity with a query of another type.
    pub type_penalty: f64,
    /// Also score the non-target positions of matched rows as negatives.
    pub negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bipartite: true,
            cost: CostKind::Probability,
            padding: Padding::Null,
            type_penalty: 1e4,
            negatives: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hidden size.
    pub h: usize,
    /// Number of queries.
    pub u: usize,
    /// Number of entity types; must match `types`.
    pub p: usize,
    /// Expected candidate regions per example.
    pub k: usize,
    pub heads: usize,
    /// Weight of the visual similarity term; the textual weight is `1 - lambda_v`.
    pub lambda_v: f64,
    /// Existence threshold used when decoding.
    pub tau_c: f64,
    pub iou_threshold: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub freeze_epochs: usize,
    pub seed: u64,
    /// Dimension of the raw region features fed to the vision projection.
    pub raw_feature_dim: usize,
    /// Self-attention blocks on top of the text embedding table.
    pub text_depth: usize,
    /// Add a learned position table to the text embeddings.
    pub text_positions: bool,
    pub max_positions: usize,
    pub types: Vec<String>,
    pub queries: QueryConfig,
    pub qfnet: QfnetConfig,
    pub loss: LossConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        Self {
            h: 64,
            u: 12,
            p: 4,
            k: 8,
            heads: 4,
            lambda_v: 0.5,
            tau_c: 0.5,
            iou_threshold: 0.5,
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            warmup_ratio: 0.05,
            freeze_epochs: 1,
            seed: 7,
            raw_feature_dim: 32,
            text_depth: 1,
            text_positions: true,
            max_positions: 64,
            types: ["PER", "LOC", "ORG", "OTHER"].map(String::from).to_vec(),
            queries: QueryConfig::default(),
            qfnet: QfnetConfig::default(),
            loss: LossConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Full-size training setup, meant for pretrained encoders.
    pub fn full_scale() -> Self {
        Self {
            h: 768,
            u: 60,
            lr: 2e-5,
            batch_size: 16,
            epochs: 50,
            warmup_ratio: 0.05,
            freeze_epochs: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.len() != self.p {
            return Err(Error::config(format!(
                "p = {} but {} type names given",
                self.p,
                self.types.len()
            )));
        }
        if self.p == 0 || self.u == 0 || self.h == 0 {
            return Err(Error::config("h, u and p must be positive"));
        }
        if self.u % self.p != 0 {
            return Err(Error::config(format!(
                "u must be a multiple of p (u = {}, p = {})",
                self.u, self.p
            )));
        }
        if self.heads == 0 || self.h % self.heads != 0 {
            return Err(Error::config(format!(
                "h = {} is not divisible by heads = {}",
                self.h, self.heads
            )));
        }
        if self.qfnet.layers < 1 {
            return Err(Error::config("qfnet.layers must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda_v) {
            return Err(Error::config("lambda_v must lie in [0, 1]"));
        }
        if !(self.tau_c > 0.0 && self.tau_c < 1.0) {
            return Err(Error::config("tau_c must lie in (0, 1)"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::config("iou_threshold must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.warmup_ratio >= 0.0) {
            return Err(Error::config("rates and batch size must be positive"));
        }
        if self.loss.type_penalty <= 4.0 * self.u as f64 {
            return Err(Error::config("loss.type_penalty must exceed 4u"));
        }
        if self.queries.source == TypeQuerySource::Prompt {
            if !self.queries.prompt_template.contains("[MASK]") {
                return Err(Error::config("prompt template has no [MASK] slot"));
            }
            if self.text_depth == 0 {
                return Err(Error::config(
                    "prompt-derived type queries need text_depth >= 1",
                ));
            }
        }
        TypeSchema::new(self.types.clone(), &self.queries.prompt_template)?;
        Ok(())
    }

    pub fn schema(&self) -> Result<TypeSchema> {
        TypeSchema::new(self.types.clone(), &self.queries.prompt_template)
    }

    pub fn lambda_t(&self) -> f64 {
        1.0 - self.lambda_v
    }

    pub fn type_map(&self) -> Vec<usize> {
        self.queries.layout.type_map(self.u, self.p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn full_scale_values() {
        let c = RunConfig::full_scale();
        assert_eq!((c.u, c.qfnet.layers, c.batch_size, c.epochs, c.freeze_epochs), (60, 3, 16, 50, 5));
        assert_eq!(c.lr, 2e-5);
        assert_eq!(c.warmup_ratio, 0.05);
        assert_eq!(c.u / c.p, 15);
    }

    #[test]
    fn divisibility_errors() {
        let c = RunConfig {
            u: 6,
            ..RunConfig::desk()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("u must be a multiple of p"), "{err}");
        let c = RunConfig {
            heads: 5,
            ..RunConfig::desk()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.qfnet.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_and_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"u": 8, "qfnet": {"qpi": false}}"#).unwrap();
        assert_eq!(c.u, 8);
        assert!(!c.qfnet.qpi);
        assert_eq!(c.qfnet.layers, 3);
        assert!(serde_json::from_str::<RunConfig>(r#"{"uu": 8}"#).is_err());
    }

    #[test]
    fn layouts() {
        assert_eq!(QueryLayout::Tile.type_map(6, 3), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(QueryLayout::Block.type_map(6, 3), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn prompt_mode_needs_mask() {
        let mut c = RunConfig::desk();
        c.queries.source = TypeQuerySource::Prompt;
        c.queries.prompt_template = "[TYPE] is a type".into();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
