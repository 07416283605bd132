//! Dataset model, species splits and episodic sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "the <keypoint> of a <category> in the photo";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointSchema {
    pub names: Vec<String>,
    #[serde(rename = "base")]
    pub base_ids: Vec<usize>,
    #[serde(rename = "novel")]
    pub novel_ids: Vec<usize>,
    #[serde(rename = "symmetry", default)]
    pub symmetry_pairs: Vec<(usize, usize)>,
}

impl KeypointSchema {
    pub fn new(
        names: Vec<String>,
        base_ids: Vec<usize>,
        novel_ids: Vec<usize>,
        symmetry_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let s = Self {
            names,
            base_ids,
            novel_ids,
            symmetry_pairs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.names.len();
        let base: BTreeSet<_> = self.base_ids.iter().copied().collect();
        let novel: BTreeSet<_> = self.novel_ids.iter().copied().collect();
        if let Some(i) = base.iter().chain(&novel).find(|&&i| i >= n) {
            return Err(Error::Schema(format!(
                "keypoint index {i} out of range 0..{n}"
            )));
        }
        if let Some(i) = base.intersection(&novel).next() {
            return Err(Error::Schema(format!(
                "keypoint {i} is both base and novel"
            )));
        }
        if base.len() + novel.len() != n {
            return Err(Error::Schema(format!(
                "base and novel sets cover {} of {n} keypoints",
                base.len() + novel.len()
            )));
        }
        for &(l, r) in &self.symmetry_pairs {
            if l >= n || r >= n {
                return Err(Error::Schema(format!(
                    "symmetry pair ({l}, {r}) out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.novel_ids.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn point(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image_ref: String,
    pub species: String,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
    pub mask: Option<String>,
}

impl Instance {
    pub fn visible_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.keypoints
            .iter()
            .enumerate()
            .filter(|(_, k)| k.visible)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: KeypointSchema,
    pub instances: Vec<Instance>,
    species_index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(schema: KeypointSchema, instances: Vec<Instance>) -> Result<Self> {
        schema.validate()?;
        for inst in &instances {
            if inst.keypoints.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "instance {} has {} keypoints, schema has {}",
                    inst.image_ref,
                    inst.keypoints.len(),
                    schema.len()
                )));
            }
        }
        let mut species_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            species_index
                .entry(inst.species.clone())
                .or_default()
                .push(i);
        }
        Ok(Self {
            schema,
            instances,
            species_index,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn species(&self) -> impl Iterator<Item = &str> {
        self.species_index.keys().map(String::as_str)
    }

    pub fn species_count(&self) -> usize {
        self.species_index.len()
    }

    /// Instance indices per species, sorted by species name.
    pub fn species_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.species_index
    }

    /// Keeps only instances whose species is in `keep`.
    pub fn subset(&self, keep: &BTreeSet<String>) -> Dataset {
        let instances = self
            .instances
            .iter()
            .filter(|i| keep.contains(&i.species))
            .cloned()
            .collect();
        Dataset::new(self.schema.clone(), instances).expect("subset of a valid dataset")
    }
}

#[derive(Deserialize)]
struct RawInstance {
    image: String,
    species: String,
    bbox: [f64; 4],
    keypoints: Vec<[f64; 3]>,
    #[serde(default)]
    mask: Option<String>,
}

#[derive(Serialize)]
struct RawInstanceOut<'a> {
    image: &'a str,
    species: &'a str,
    bbox: [f64; 4],
    keypoints: Vec<[f64; 3]>,
    mask: &'a Option<String>,
}

fn parse_instance(index: usize, value: serde_json::Value, n: usize) -> Result<Instance> {
    let raw: RawInstance = serde_json::from_value(value).map_err(|e| Error::Ingestion {
        index,
        message: e.to_string(),
    })?;
    if raw.keypoints.len() != n {
        return Err(Error::Schema(format!(
            "record {index} has {} keypoints, schema has {n}",
            raw.keypoints.len()
        )));
    }
    if !(raw.bbox[2] > 0.0 && raw.bbox[3] > 0.0) {
        return Err(Error::Ingestion {
            index,
            message: format!("bbox {:?} must have positive width and height", raw.bbox),
        });
    }
    let mut keypoints = Vec::with_capacity(n);
    for [x, y, v] in raw.keypoints {
        let visible = match v {
            0.0 => false,
            1.0 => true,
            other => {
                return Err(Error::Ingestion {
                    index,
                    message: format!("visibility flag must be 0 or 1, got {other}"),
                })
            }
        };
        if visible && !(x >= 0.0 && y >= 0.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::Ingestion {
                index,
                message: format!("visible keypoint ({x}, {y}) outside image"),
            });
        }
        keypoints.push(Keypoint { x, y, visible });
    }
    Ok(Instance {
        image_ref: raw.image,
        species: raw.species,
        bbox: raw.bbox,
        keypoints,
        mask: raw.mask,
    })
}

/// Parses a manifest from a JSON string. When `schema` is given it overrides the
/// manifest's own schema block (which may then be omitted).
pub fn parse_manifest(text: &str, schema: Option<&KeypointSchema>) -> Result<Dataset> {
    let mut root: serde_json::Value = serde_json::from_str(text)?;
    let schema = match schema {
        Some(s) => s.clone(),
        None => {
            let block = root
                .get_mut("schema")
                .map(serde_json::Value::take)
                .ok_or_else(|| Error::Schema("manifest has no schema block".into()))?;
            serde_json::from_value(block).map_err(|e| Error::Schema(e.to_string()))?
        }
    };
    schema.validate()?;
    let records = match root.get_mut("instances").map(serde_json::Value::take) {
        Some(serde_json::Value::Array(a)) => a,
        Some(_) => return Err(Error::Schema("`instances` must be an array".into())),
        None => Vec::new(),
    };
    let instances = records
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_instance(i, v, schema.len()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(schema, instances)
}

pub fn load_dataset(path: &Path, schema: Option<&KeypointSchema>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, schema)
}

/// Serializes a dataset back to the manifest format.
pub fn manifest_json(ds: &Dataset) -> serde_json::Value {
    let instances: Vec<_> = ds
        .instances
        .iter()
        .map(|i| RawInstanceOut {
            image: &i.image_ref,
            species: &i.species,
            bbox: i.bbox,
            keypoints: i
                .keypoints
                .iter()
                .map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }])
                .collect(),
            mask: &i.mask,
        })
        .collect();
    serde_json::json!({ "schema": ds.schema, "instances": instances })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Empty means "every species not held out".
    pub train_species: BTreeSet<String>,
    pub val_species: BTreeSet<String>,
    pub test_species: BTreeSet<String>,
    /// Name of the keypoint split in use (informational).
    pub keypoint_split: String,
}

pub fn split_dataset(ds: &Dataset, cfg: &SplitConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let known: BTreeSet<String> = ds.species().map(str::to_string).collect();
    let sets = [
        ("train", &cfg.train_species),
        ("val", &cfg.val_species),
        ("test", &cfg.test_species),
    ];
    for (label, set) in sets {
        if let Some(s) = set.iter().find(|s| !known.contains(*s)) {
            return Err(Error::Config(format!("unknown {label} species {s:?}")));
        }
    }
    for (i, (la, a)) in sets.iter().enumerate() {
        for (lb, b) in &sets[i + 1..] {
            if let Some(s) = a.intersection(b).next() {
                return Err(Error::Config(format!(
                    "species {s:?} appears in both {la} and {lb} splits"
                )));
            }
        }
    }
    let train = if cfg.train_species.is_empty() {
        known
            .iter()
            .filter(|s| !cfg.val_species.contains(*s) && !cfg.test_species.contains(*s))
            .cloned()
            .collect()
    } else {
        let assigned: BTreeSet<_> = cfg
            .train_species
            .iter()
            .chain(&cfg.val_species)
            .chain(&cfg.test_species)
            .collect();
        if let Some(s) = known.iter().find(|s| !assigned.contains(s)) {
            return Err(Error::Config(format!(
                "species {s:?} is not assigned to any split"
            )));
        }
        cfg.train_species.clone()
    };
    Ok((
        ds.subset(&train),
        ds.subset(&cfg.val_species),
        ds.subset(&cfg.test_species),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub species: String,
    pub supports: Vec<Instance>,
    pub query: Instance,
    pub keypoint_ids: Vec<usize>,
    pub texts: Vec<String>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn n(&self) -> usize {
        self.keypoint_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePair {
    pub first: Episode,
    pub second: Episode,
}

/// Fills the simple prompt template.
pub fn keypoint_text(template: &str, keypoint: &str, category: &str) -> String {
    template
        .replace("<keypoint>", keypoint)
        .replace("<category>", category)
}

#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    pub k: usize,
    pub n_max: usize,
    /// Restricts keypoint ids (e.g. to base ids during training).
    pub keypoint_filter: Option<BTreeSet<usize>>,
    pub template: String,
}

impl EpisodeSampler {
    pub fn new(k: usize, n_max: usize) -> Self {
        Self {
            k,
            n_max,
            keypoint_filter: None,
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }

    pub fn with_filter(mut self, ids: impl IntoIterator<Item = usize>) -> Self {
        self.keypoint_filter = Some(ids.into_iter().collect());
        self
    }

    fn allowed(&self, id: usize) -> bool {
        self.keypoint_filter
            .as_ref()
            .is_none_or(|f| f.contains(&id))
    }

    /// Keypoints visible (and allowed) in at least K+1 instances of `species`.
    fn anchors(&self, ds: &Dataset, species: &str) -> BTreeSet<usize> {
        let idx = &ds.species_index[species];
        (0..ds.schema.len())
            .filter(|&id| self.allowed(id))
            .filter(|&id| {
                idx.iter()
                    .filter(|&&i| ds.instances[i].keypoints[id].visible)
                    .count()
                    > self.k
            })
            .collect()
    }

    /// Draws K+1 instances of `species` sharing at least one id from `anchors`.
    /// Returns (query, supports, common allowed visible ids).
    fn draw_members(
        &self,
        ds: &Dataset,
        species: &str,
        anchors: &BTreeSet<usize>,
        rng: &mut impl Rng,
    ) -> (usize, Vec<usize>, BTreeSet<usize>) {
        let idx = &ds.species_index[species];
        let common_of = |members: &[usize]| -> BTreeSet<usize> {
            anchors
                .iter()
                .copied()
                .filter(|&id| {
                    members
                        .iter()
                        .all(|&m| ds.instances[m].keypoints[id].visible)
                })
                .collect()
        };
        let mut members: Vec<usize> = idx.choose_multiple(rng, self.k + 1).copied().collect();
        let mut common = common_of(&members);
        if common.is_empty() {
            // anchor on one keypoint and draw only among instances showing it
            let anchor_list: Vec<usize> = anchors.iter().copied().collect();
            let anchor = *anchor_list.choose(rng).expect("non-empty anchors");
            let pool: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| ds.instances[i].keypoints[anchor].visible)
                .collect();
            members = pool.choose_multiple(rng, self.k + 1).copied().collect();
            common = common_of(&members);
        }
        let query = members[0];
        (query, members[1..].to_vec(), common)
    }

    fn finish(
        &self,
        ds: &Dataset,
        species: &str,
        query: usize,
        supports: Vec<usize>,
        mut ids: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Episode {
        if ids.len() > self.n_max {
            ids.shuffle(rng);
            ids.truncate(self.n_max);
        }
        ids.sort_unstable();
        let texts = ids
            .iter()
            .map(|&id| keypoint_text(&self.template, &ds.schema.names[id], species))
            .collect();
        Episode {
            species: species.to_string(),
            supports: supports.iter().map(|&i| ds.instances[i].clone()).collect(),
            query: ds.instances[query].clone(),
            keypoint_ids: ids,
            texts,
        }
    }

    pub fn sample(&self, ds: &Dataset, rng: &mut impl Rng) -> Result<Episode> {
        if self.n_max == 0 {
            return Err(Error::Argument("n_max must be at least 1".into()));
        }
        let qualifying: Vec<(&str, BTreeSet<usize>)> = ds
            .species()
            .map(|s| (s, self.anchors(ds, s)))
            .filter(|(_, a)| !a.is_empty())
            .collect();
        let (species, anchors) = qualifying.choose(rng).ok_or_else(|| {
            Error::Sampling(format!(
                "no species has {} instances sharing a visible keypoint",
                self.k + 1
            ))
        })?;
        let (query, supports, common) = self.draw_members(ds, species, anchors, rng);
        let ids = common.into_iter().collect();
        Ok(self.finish(ds, species, query, supports, ids, rng))
    }

    pub fn sample_pair(&self, ds: &Dataset, rng: &mut impl Rng) -> Result<EpisodePair> {
        if self.n_max == 0 {
            return Err(Error::Argument("n_max must be at least 1".into()));
        }
        let anchors: Vec<(&str, BTreeSet<usize>)> = ds
            .species()
            .map(|s| (s, self.anchors(ds, s)))
            .filter(|(_, a)| !a.is_empty())
            .collect();
        let mut pairs = Vec::new();
        for (i, (sa, aa)) in anchors.iter().enumerate() {
            for (sb, ab) in &anchors[i + 1..] {
                let shared: BTreeSet<usize> = aa.intersection(ab).copied().collect();
                if !shared.is_empty() {
                    pairs.push((*sa, *sb, shared));
                }
            }
        }
        let (sa, sb, shared) = pairs.choose(rng).ok_or_else(|| {
            Error::Sampling("no two species share a commonly visible keypoint".into())
        })?;
        let (sa, sb) = if rng.gen_bool(0.5) {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let (qa, supa, ca) = self.draw_members(ds, sa, shared, rng);
        let (qb, supb, cb) = self.draw_members(ds, sb, shared, rng);
        let mut ids: Vec<usize> = ca.intersection(&cb).copied().collect();
        let (qb, supb) = if ids.is_empty() {
            // redraw the second species anchored on the first one's keypoints
            let (qb, supb, cb) = self.draw_members(ds, sb, &ca, rng);
            ids = ca.intersection(&cb).copied().collect();
            (qb, supb)
        } else {
            (qb, supb)
        };
        if ids.is_empty() {
            return Err(Error::Sampling(format!(
                "species {sa} and {sb} share no keypoint in the drawn instances"
            )));
        }
        if ids.len() > self.n_max {
            ids.shuffle(rng);
            ids.truncate(self.n_max);
        }
        let first = self.finish(ds, sa, qa, supa, ids.clone(), rng);
        let second = self.finish(ds, sb, qb, supb, ids, rng);
        Ok(EpisodePair { first, second })
    }
}

pub fn sample_episode(ds: &Dataset, k: usize, n_max: usize, rng: &mut impl Rng) -> Result<Episode> {
    EpisodeSampler::new(k, n_max).sample(ds, rng)
}

pub fn sample_episode_pair(
    ds: &Dataset,
    k: usize,
    n_max: usize,
    rng: &mut impl Rng,
) -> Result<EpisodePair> {
    EpisodeSampler::new(k, n_max).sample_pair(ds, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema3() -> KeypointSchema {
        KeypointSchema::new(
            vec!["eye".into(), "nose".into(), "tail".into(), "paw".into()],
            vec![0, 1, 2],
            vec![3],
            vec![],
        )
        .unwrap()
    }

    fn inst(species: &str, vis: [bool; 4]) -> Instance {
        Instance {
            image_ref: format!("{species}.png"),
            species: species.into(),
            bbox: [0.0, 0.0, 10.0, 10.0],
            keypoints: vis
                .iter()
                .enumerate()
                .map(|(i, &v)| Keypoint {
                    x: i as f64,
                    y: 1.0,
                    visible: v,
                })
                .collect(),
            mask: None,
        }
    }

    #[test]
    fn schema_rejects_overlap_and_gaps() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(KeypointSchema::new(names.clone(), vec![0, 1], vec![1], vec![]).is_err());
        assert!(KeypointSchema::new(names.clone(), vec![0], vec![], vec![]).is_err());
        assert!(KeypointSchema::new(names, vec![0], vec![1], vec![(0, 2)]).is_err());
    }

    #[test]
    fn manifest_counts_species() {
        let text = r#"{"schema":{"names":["a","b"],"base":[0],"novel":[1],"symmetry":[]},
          "instances":[
            {"image":"1.png","species":"A","bbox":[0,0,5,5],"keypoints":[[1,1,1],[0,0,0]],"mask":null},
            {"image":"2.png","species":"A","bbox":[0,0,5,5],"keypoints":[[1,1,1],[2,2,1]]},
            {"image":"3.png","species":"B","bbox":[0,0,5,5],"keypoints":[[1,1,0],[2,2,1]],"mask":"m.png"}]}"#;
        let ds = parse_manifest(text, None).unwrap();
        let counts: Vec<_> = ds
            .species_index()
            .iter()
            .map(|(s, v)| (s.as_str(), v.len()))
            .collect();
        assert_eq!(counts, vec![("A", 2), ("B", 1)]);
    }

    #[test]
    fn malformed_record_names_its_index() {
        let text = r#"{"schema":{"names":["a"],"base":[0],"novel":[]},
          "instances":[
            {"image":"1.png","species":"A","bbox":[0,0,5,5],"keypoints":[[1,1,1]]},
            {"image":"2.png","bbox":[0,0,5,5],"keypoints":[[1,1,1]]}]}"#;
        match parse_manifest(text, None) {
            Err(Error::Ingestion { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let short = r#"{"schema":{"names":["a","b"],"base":[0,1],"novel":[]},
          "instances":[{"image":"1.png","species":"A","bbox":[0,0,5,5],"keypoints":[[1,1,1]]}]}"#;
        assert!(matches!(parse_manifest(short, None), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_manifest() {
        let ds = parse_manifest(
            r#"{"schema":{"names":["a"],"base":[0],"novel":[]},"instances":[]}"#,
            None,
        )
        .unwrap();
        assert_eq!((ds.len(), ds.species_count()), (0, 0));
    }

    #[test]
    fn split_holds_out_species() {
        let insts = ["cat", "dog", "cow", "horse", "sheep"]
            .iter()
            .flat_map(|s| vec![inst(s, [true; 4]), inst(s, [true; 4])])
            .collect();
        let ds = Dataset::new(schema3(), insts).unwrap();
        let cfg = SplitConfig {
            test_species: ["cat".to_string()].into(),
            ..Default::default()
        };
        let (tr, va, te) = split_dataset(&ds, &cfg).unwrap();
        assert_eq!(
            (tr.species_count(), va.species_count(), te.species_count()),
            (4, 0, 1)
        );
        assert_eq!(tr.len() + va.len() + te.len(), ds.len());
        let none = split_dataset(&ds, &SplitConfig::default()).unwrap();
        assert!(none.2.is_empty());
        let bad = SplitConfig {
            test_species: ["fox".to_string()].into(),
            ..Default::default()
        };
        assert!(matches!(split_dataset(&ds, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn episode_respects_visibility() {
        let ds = Dataset::new(
            schema3(),
            vec![
                inst("A", [true, true, true, true]),
                inst("A", [true, true, true, false]),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let ep = sample_episode(&ds, 1, 8, &mut rng).unwrap();
            assert_eq!(ep.keypoint_ids, vec![0, 1, 2]);
            assert_eq!(ep.texts[0], "the eye of a A in the photo");
        }
        let zs = sample_episode(&ds, 0, 8, &mut rng).unwrap();
        assert!(zs.supports.is_empty() && !zs.texts.is_empty());
    }

    #[test]
    fn anchored_fallback_finds_the_only_valid_group() {
        // only instances 2 and 3 share keypoint 3; random draws rarely hit them
        let mut insts: Vec<_> = (0..10)
            .map(|_| inst("A", [true, false, false, false]))
            .collect();
        insts.push(inst("A", [false, false, false, true]));
        insts.push(inst("A", [false, false, false, true]));
        let ds = Dataset::new(schema3(), insts).unwrap();
        let sampler = EpisodeSampler::new(1, 8).with_filter([3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sampler.sample(&ds, &mut rng).unwrap().keypoint_ids, vec![3]);
        }
        assert!(matches!(
            EpisodeSampler::new(1, 8)
                .with_filter([1])
                .sample(&ds, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn pair_uses_shared_keypoints() {
        let ds = Dataset::new(
            schema3(),
            vec![
                inst("A", [true, true, false, true]),
                inst("A", [true, true, false, true]),
                inst("B", [true, true, true, false]),
                inst("B", [true, true, true, false]),
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_episode_pair(&ds, 1, 8, &mut rng).unwrap();
        assert_ne!(p.first.species, p.second.species);
        assert_eq!(p.first.keypoint_ids, vec![0, 1]);
        assert_eq!(p.second.keypoint_ids, vec![0, 1]);
        let single =
            Dataset::new(schema3(), vec![inst("A", [true; 4]), inst("A", [true; 4])]).unwrap();
        assert!(matches!(
            sample_episode_pair(&single, 1, 8, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn seeded_sampling_replays() {
        let insts = ["A", "B", "C"]
            .iter()
            .flat_map(|s| (0..4).map(|j| inst(s, [true, j % 2 == 0, true, true])))
            .collect();
        let ds = Dataset::new(schema3(), insts).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                sample_episode(&ds, 1, 2, &mut rng).unwrap(),
                sample_episode_pair(&ds, 1, 2, &mut rng).unwrap(),
            )
        };
        assert_eq!(draw(7), draw(7));
    }
}
