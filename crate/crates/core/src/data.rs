//! Synthetic corpus generation and the JSONL dataset format.
//!
//! One example per line:
//!
//! ```json
//! {"tokens": ["..."],
//!  "regions": [{"box": [x1, y1, x2, y2], "feature": [...]}],
//!  "entities": [{"start": 0, "end": 1, "type": "PER", "boxes": [[...]] }]}
//! ```
//!
//! `type` may be a schema name or an integer id; `boxes: null` marks an
//! ungroundable entity.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::types::{CandidateRegion, Example, Quadruple, Region, TypeSchema};

/// Parameters of the synthetic grounded-NER task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of filler (non-entity) words.
    pub vocab_size: usize,
    pub types: Vec<String>,
    /// Catalog entities per type.
    pub entities_per_type: usize,
    /// Inclusive range of entity mentions per example.
    pub entities_per_example: (usize, usize),
    /// Inclusive range of surface-form lengths in tokens.
    pub entity_length: (usize, usize),
    /// Inclusive range of sentence lengths in tokens.
    pub sentence_length: (usize, usize),
    /// Candidate regions per example.
    pub regions: usize,
    pub raw_feature_dim: usize,
    pub groundable_prob: f64,
    pub noise: f64,
    /// Fraction of each type's catalog whose surface form is shared with an
    /// entity of another type.
    pub ambiguity_rate: f64,
    /// Probability that an unambiguous mention is preceded by its type's cue
    /// word (ambiguous mentions always are).
    pub cue_prob: f64,
    /// Seed for the entity catalog, so corpora generated with different
    /// example seeds share entities.
    pub catalog_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            types: ["PER", "LOC", "ORG", "OTHER"].map(String::from).to_vec(),
            entities_per_type: 25,
            entities_per_example: (1, 3),
            entity_length: (1, 2),
            sentence_length: (10, 16),
            regions: 8,
            raw_feature_dim: 32,
            groundable_prob: 0.7,
            noise: 0.1,
            ambiguity_rate: 0.2,
            cue_prob: 0.3,
            catalog_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if self.types.is_empty() || self.entities_per_type == 0 || self.vocab_size == 0 {
            return Err(Error::config("synthetic spec needs types, entities and filler words"));
        }
        if !range_ok(self.entities_per_example)
            || !range_ok(self.entity_length)
            || !range_ok(self.sentence_length)
            || self.entity_length.0 == 0
            || self.sentence_length.0 == 0
        {
            return Err(Error::config("synthetic ranges must be nonempty and positive"));
        }
        for (name, p) in [
            ("groundable_prob", self.groundable_prob),
            ("ambiguity_rate", self.ambiguity_rate),
            ("cue_prob", self.cue_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be nonnegative"));
        }
        if self.raw_feature_dim == 0 {
            return Err(Error::config("raw_feature_dim must be positive"));
        }
        // Worst case: every mention at maximum length with its cue word.
        let need = self.entities_per_example.1 * (self.entity_length.1 + 1);
        if need > self.sentence_length.0 {
            return Err(Error::config(format!(
                "up to {need} entity tokens do not fit in sentences of {} tokens",
                self.sentence_length.0
            )));
        }
        if self.entities_per_example.1 > self.regions && self.groundable_prob > 0.0 {
            return Err(Error::config("more groundable entities than candidate regions"));
        }
        if self.types.len() < 2 && self.ambiguity_rate > 0.0 {
            return Err(Error::config("ambiguous entities need at least two types"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CatalogEntry {
    surface: Vec<String>,
    latent: Vec<f64>,
    ambiguous: bool,
}

/// Per-type entity catalog.
#[derive(Debug, Clone)]
pub struct Catalog {
    entries: Vec<Vec<CatalogEntry>>,
}

impl Catalog {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.catalog_seed);
        let p = spec.types.len();
        let mut entries: Vec<Vec<CatalogEntry>> = (0..p)
            .map(|t| {
                (0..spec.entities_per_type)
                    .map(|e| {
                        let len = rng.random_range(spec.entity_length.0..=spec.entity_length.1);
                        CatalogEntry {
                            surface: (0..len)
                                .map(|w| format!("{}{e}{}", spec.types[t].to_lowercase(), char::from(b'a' + w as u8)))
                                .collect(),
                            latent: gaussian(&mut rng, spec.raw_feature_dim),
                            ambiguous: false,
                        }
                    })
                    .collect()
            })
            .collect();
        // The last few entities of each type borrow the surface form of the
        // same-index entity of the next type.
        let shared = (spec.entities_per_type as f64 * spec.ambiguity_rate).round() as usize;
        for t in 0..p {
            let donor = (t + 1) % p;
            for e in spec.entities_per_type - shared..spec.entities_per_type {
                entries[t][e].surface = entries[donor][e].surface.clone();
                entries[t][e].ambiguous = true;
                entries[donor][e].ambiguous = true;
            }
        }
        Ok(Self { entries })
    }

    /// Surface forms that belong to more than one type.
    pub fn ambiguous_forms(&self) -> HashSet<Vec<String>> {
        self.entries
            .iter()
            .flatten()
            .filter(|e| e.ambiguous)
            .map(|e| e.surface.clone())
            .collect()
    }

    /// Region feature of catalog entity `e` of type `t` before noise.
    pub fn latent(&self, t: usize, e: usize) -> &[f64] {
        &self.entries[t][e].latent
    }
}

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn cue_word(spec: &SyntheticSpec, t: usize) -> String {
    format!("cue-{}", spec.types[t].to_lowercase())
}

fn random_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let w = rng.random_range(0.1..0.5);
    let h = rng.random_range(0.1..0.5);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BoundingBox::new(x, y, x + w, y + h).expect("positive extent")
}

/// Deterministic synthetic corpus for `(spec, count, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Vec<Example>> {
    let catalog = Catalog::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = spec.types.len();
    (0..count)
        .map(|_| generate_one(spec, &catalog, p, &mut rng))
        .collect()
}

fn generate_one(
    spec: &SyntheticSpec,
    catalog: &Catalog,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let n = rng.random_range(spec.sentence_length.0..=spec.sentence_length.1);
    let m = rng.random_range(spec.entities_per_example.0..=spec.entities_per_example.1);
    let mut tokens: Vec<String> = (0..n)
        .map(|_| format!("w{}", rng.random_range(0..spec.vocab_size)))
        .collect();

    // Pick distinct catalog entries, then their mention blocks (cue + form).
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(m);
    while chosen.len() < m {
        let pick = (rng.random_range(0..p), rng.random_range(0..spec.entities_per_type));
        if !chosen.contains(&pick) {
            chosen.push(pick);
        }
    }
    let blocks: Vec<(usize, usize, bool)> = chosen
        .iter()
        .map(|&(t, e)| {
            let entry = &catalog.entries[t][e];
            let cue = entry.ambiguous || rng.random_bool(spec.cue_prob);
            (t, e, cue)
        })
        .collect();

    // Place blocks left to right at random gaps inside the sentence.
    let lengths: Vec<usize> = blocks
        .iter()
        .map(|&(t, e, cue)| catalog.entries[t][e].surface.len() + cue as usize)
        .collect();
    let slack = n - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..blocks.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(rng);

    let mut cursor = 0;
    let mut used_gap = 0;
    let mut mentions = Vec::with_capacity(m);
    for (slot, &b) in order.iter().enumerate() {
        cursor += cuts[slot] - used_gap;
        used_gap = cuts[slot];
        let (t, e, cue) = blocks[b];
        if cue {
            tokens[cursor] = cue_word(spec, t);
            cursor += 1;
        }
        let surface = &catalog.entries[t][e].surface;
        for (i, w) in surface.iter().enumerate() {
            tokens[cursor + i] = w.clone();
        }
        mentions.push((cursor, cursor + surface.len() - 1, t, e));
        cursor += surface.len();
    }

    // Regions: one per groundable mention, the rest distractors.
    let mut regions = Vec::with_capacity(spec.regions);
    let mut gold = Vec::with_capacity(m);
    for &(start, end, t, e) in &mentions {
        let region = if regions.len() < spec.regions && rng.random_bool(spec.groundable_prob) {
            let bbox = random_box(rng);
            let feature = catalog
                .latent(t, e)
                .iter()
                .map(|&z| z + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            regions.push(CandidateRegion { bbox, feature });
            Region::GoldBoxes(vec![bbox])
        } else {
            Region::Ungroundable
        };
        gold.push(Quadruple::new(start, end, t, region)?);
    }
    while regions.len() < spec.regions {
        regions.push(CandidateRegion {
            bbox: random_box(rng),
            feature: gaussian(rng, spec.raw_feature_dim),
        });
    }
    regions.shuffle(rng);
    Ok(Example {
        tokens,
        regions,
        gold,
    })
}

/// Whether any gold mention of `example` uses a surface form shared by
/// several types.
pub fn has_ambiguous_entity(example: &Example, forms: &HashSet<Vec<String>>) -> bool {
    example
        .gold
        .iter()
        .any(|q| forms.contains(&example.tokens[q.start..=q.end].to_vec()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TypeRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEntity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    type_ref: TypeRef,
    boxes: Option<Vec<BoundingBox>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonExample {
    tokens: Vec<String>,
    #[serde(default)]
    regions: Vec<CandidateRegion>,
    #[serde(default)]
    entities: Vec<JsonEntity>,
}

/// Read a JSONL dataset; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn load_jsonl(path: &Path, schema: &TypeSchema) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let invalid = |message: String| Error::Validation {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: JsonExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut gold = Vec::with_capacity(raw.entities.len());
        for ent in raw.entities {
            let type_id = match &ent.type_ref {
                TypeRef::Id(t) => *t,
                TypeRef::Name(n) => schema
                    .index_of(n)
                    .ok_or_else(|| invalid(format!("unknown entity type {n:?}")))?,
            };
            let region = match ent.boxes {
                None => Region::Ungroundable,
                Some(b) => Region::GoldBoxes(b),
            };
            gold.push(Quadruple::new(ent.start, ent.end, type_id, region).map_err(|e| invalid(e.to_string()))?);
        }
        let example = Example {
            tokens: raw.tokens,
            regions: raw.regions,
            gold,
        };
        example
            .validate(schema.len())
            .map_err(|e| invalid(e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}

/// Write examples as JSONL with type names from `schema`.
pub fn save_jsonl(path: &Path, examples: &[Example], schema: &TypeSchema) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let entities = ex
            .gold
            .iter()
            .map(|q| {
                let name = schema
                    .names()
                    .get(q.type_id)
                    .ok_or_else(|| Error::invalid(format!("type id {} outside schema", q.type_id)))?;
                let boxes = match &q.region {
                    Region::Ungroundable => None,
                    Region::GoldBoxes(b) => Some(b.clone()),
                    Region::Candidate(_) => {
                        return Err(Error::invalid("gold entity carries a candidate index"))
                    }
                };
                Ok(JsonEntity {
                    start: q.start,
                    end: q.end,
                    type_ref: TypeRef::Name(name.clone()),
                    boxes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let row = JsonExample {
            tokens: ex.tokens.clone(),
            regions: ex.regions.clone(),
            entities,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DEFAULT_PROMPT_TEMPLATE;

    fn schema() -> TypeSchema {
        TypeSchema::new(["PER", "LOC", "ORG", "OTHER"].map(String::from).to_vec(), DEFAULT_PROMPT_TEMPLATE).unwrap()
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            generate_synthetic(&spec, 10, 7).unwrap(),
            generate_synthetic(&spec, 10, 7).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec, 10, 7).unwrap(),
            generate_synthetic(&spec, 10, 8).unwrap()
        );
    }

    #[test]
    fn structure() {
        let spec = SyntheticSpec::default();
        for ex in generate_synthetic(&spec, 200, 3).unwrap() {
            ex.validate(4).unwrap();
            assert_eq!(ex.regions.len(), spec.regions);
            assert!((1..=3).contains(&ex.gold.len()));
            for w in ex.gold.windows(2) {
                assert!(w[0].end < w[1].start || w[1].end < w[0].start);
            }
        }
    }

    #[test]
    fn never_groundable() {
        let spec = SyntheticSpec {
            groundable_prob: 0.0,
            ..SyntheticSpec::default()
        };
        for ex in generate_synthetic(&spec, 50, 1).unwrap() {
            assert!(ex.gold.iter().all(|q| q.region.is_ungroundable()));
        }
    }

    #[test]
    fn noiseless_latents_are_planted() {
        let spec = SyntheticSpec {
            groundable_prob: 1.0,
            noise: 0.0,
            ambiguity_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let catalog = Catalog::new(&spec).unwrap();
        for ex in generate_synthetic(&spec, 50, 2).unwrap() {
            for q in &ex.gold {
                let form = &ex.tokens[q.start..=q.end];
                let e = (0..spec.entities_per_type)
                    .find(|&e| catalog.entries[q.type_id][e].surface == form)
                    .unwrap();
                let hits = ex
                    .regions
                    .iter()
                    .filter(|r| r.feature == catalog.latent(q.type_id, e))
                    .count();
                assert_eq!(hits, 1);
            }
        }
    }

    #[test]
    fn ambiguous_forms_have_cues() {
        let spec = SyntheticSpec::default();
        let forms = Catalog::new(&spec).unwrap().ambiguous_forms();
        assert!(!forms.is_empty());
        let data = generate_synthetic(&spec, 300, 4).unwrap();
        let mut seen = 0;
        for ex in &data {
            for q in &ex.gold {
                if forms.contains(&ex.tokens[q.start..=q.end].to_vec()) {
                    seen += 1;
                    assert_eq!(ex.tokens[q.start - 1], cue_word(&spec, q.type_id));
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn impossible_spec_rejected() {
        let spec = SyntheticSpec {
            sentence_length: (3, 4),
            entities_per_example: (2, 3),
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_roundtrip() {
        let spec = SyntheticSpec::default();
        let data = generate_synthetic(&spec, 20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&path, &data, &schema()).unwrap();
        assert_eq!(load_jsonl(&path, &schema()).unwrap(), data);
    }

    fn write(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let mut f = File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        (dir, path)
    }

    #[test]
    fn jsonl_parsing() {
        let (_d, path) = write(&[
            r#"{"tokens":["a","b"],"regions":[{"box":[0,0,1,1],"feature":[0.5]}],"entities":[{"start":0,"end":1,"type":"PER","boxes":[[0,0,1,1]]}]}"#,
            r#"{"tokens":["c"],"regions":[],"entities":[{"start":0,"end":0,"type":2,"boxes":null}]}"#,
            r#"{"tokens":["d"],"entities":[]}"#,
        ]);
        let data = load_jsonl(&path, &schema()).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data[1].gold[0].region, Region::Ungroundable);
        assert_eq!(data[1].gold[0].type_id, 2);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let (_d, path) = write(&[r#"{"tokens":["a"]}"#, r#"{"tokens":["a","b"],"entities":[{"start":1,"end":0,"type":0,"boxes":null}]}"#]);
        match load_jsonl(&path, &schema()) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let (_d, path) = write(&[r#"{"tokens":["a"]}"#, "", "{not json"]);
        match load_jsonl(&path, &schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let (_d, path) = write(&[r#"{"tokens":["a"],"entities":[{"start":0,"end":3,"type":0,"boxes":null}]}"#]);
        assert!(matches!(load_jsonl(&path, &schema()), Err(Error::Validation { line: 1, .. })));
    }
}
