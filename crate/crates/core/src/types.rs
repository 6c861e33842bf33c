//! Domain records shared across the model, the loss, and the metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Where an entity lives in the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Ungroundable,
    /// Gold annotation; never empty.
    GoldBoxes(Vec<BoundingBox>),
    /// Predicted candidate slot in `1..=k` (slot 0 decodes to `Ungroundable`).
    Candidate(usize),
}

impl Region {
    pub fn is_ungroundable(&self) -> bool {
        matches!(self, Region::Ungroundable)
    }
}

/// One entity: inclusive token span, type, and region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruple {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
    pub region: Region,
}

impl Quadruple {
    pub fn new(start: usize, end: usize, type_id: usize, region: Region) -> Result<Self> {
        if start > end {
            return Err(Error::invalid(format!("span start {start} > end {end}")));
        }
        if let Region::GoldBoxes(b) = &region {
            if b.is_empty() {
                return Err(Error::invalid("gold box list is empty"));
            }
        }
        Ok(Self {
            start,
            end,
            type_id,
            region,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

/// A sentence/image pair with its gold entity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub regions: Vec<CandidateRegion>,
    pub gold: Vec<Quadruple>,
}

impl Example {
    /// Structural checks that do not depend on model configuration.
    pub fn validate(&self, num_types: usize) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::invalid("example has no tokens"));
        }
        for q in &self.gold {
            if q.start > q.end || q.end >= n {
                return Err(Error::invalid(format!(
                    "span [{}, {}] outside sentence of {n} tokens",
                    q.start, q.end
                )));
            }
            if q.type_id >= num_types {
                return Err(Error::invalid(format!(
                    "type id {} outside schema of {num_types} types",
                    q.type_id
                )));
            }
            match &q.region {
                Region::GoldBoxes(b) if b.is_empty() => {
                    return Err(Error::invalid("gold box list is empty"))
                }
                Region::Candidate(_) => {
                    return Err(Error::invalid("gold entity carries a candidate index"))
                }
                _ => {}
            }
        }
        if let Some(first) = self.regions.first() {
            let dim = first.feature.len();
            if self.regions.iter().any(|r| r.feature.len() != dim) {
                return Err(Error::invalid("region features have mixed dimensions"));
            }
        }
        Ok(())
    }
}

/// Default prompt used to derive type-grained queries from a text encoder.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "[TYPE] is an entity type about [MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSchema {
    names: Vec<String>,
    prompts: Vec<String>,
}

impl TypeSchema {
    pub fn new(names: Vec<String>, template: &str) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("type schema needs at least one type"));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::config(format!("duplicate type name {a:?}")));
            }
        }
        let prompts = names
            .iter()
            .map(|n| template.replace("[TYPE]", n))
            .collect();
        Ok(Self { names, prompts })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}
