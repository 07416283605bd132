//! Diverse natural-language keypoint prompts: synthesis from templates,
//! parsing back to `(object, keypoints)` with a chat model or a rule-based
//! parser, and parsing accuracy.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, KeypointSchema};
use crate::error::{Error, Result};
use crate::llm::{ChatRequest, Gateway, Message, DEFAULT_PARSING_TEMPERATURE};

pub const KEYPOINT_SLOT: &str = "<keypoint>";
pub const OBJECT_SLOT: &str = "<obj>";

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: Vec<String>,
    /// Number of leading templates kept verbatim from the published prompt set.
    pub verbatim: usize,
}

#[derive(Deserialize)]
struct BankFile {
    verbatim: Vec<String>,
    authored: Vec<String>,
}

fn canonical_template(t: &str) -> String {
    t.replace("<object>", OBJECT_SLOT)
}

impl TemplateBank {
    pub fn new(templates: Vec<String>, verbatim: usize) -> Result<Self> {
        let templates: Vec<String> = templates.iter().map(|t| canonical_template(t)).collect();
        for t in &templates {
            if t.matches(KEYPOINT_SLOT).count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must contain {KEYPOINT_SLOT} exactly once"
                )));
            }
            if t.matches(OBJECT_SLOT).count() > 1 {
                return Err(Error::Config(format!(
                    "template {t:?} repeats {OBJECT_SLOT}"
                )));
            }
        }
        let verbatim = verbatim.min(templates.len());
        Ok(Self {
            templates,
            verbatim,
        })
    }

    /// The shipped bank of 100 templates; the first 20 are verbatim.
    pub fn shipped() -> Self {
        let f: BankFile = serde_json::from_str(include_str!("../data/templates.json"))
            .expect("bundled template bank");
        let verbatim = f.verbatim.len();
        Self::new(f.verbatim.into_iter().chain(f.authored).collect(), verbatim)
            .expect("bundled templates are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: BankFile = serde_json::from_str(text)?;
        let verbatim = f.verbatim.len();
        Self::new(f.verbatim.into_iter().chain(f.authored).collect(), verbatim)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn has_object(template: &str) -> bool {
    canonical_template(template).contains(OBJECT_SLOT)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrompt {
    pub object: Option<String>,
    pub keypoints: Vec<String>,
}

/// Fills a template; several keypoints are joined with `", "`.
pub fn synthesize(template: &str, keypoints: &[&str], object: Option<&str>) -> Result<String> {
    if keypoints.is_empty() {
        return Err(Error::Argument(
            "synthesize needs at least one keypoint".into(),
        ));
    }
    let template = canonical_template(template);
    let mut out = template.replace(KEYPOINT_SLOT, &keypoints.join(", "));
    if template.contains(OBJECT_SLOT) {
        let obj = object
            .ok_or_else(|| Error::Argument(format!("template {template:?} needs an object")))?;
        out = out.replace(OBJECT_SLOT, obj);
    } else if object.is_some() {
        log::warn!("object ignored by object-free template {template:?}");
    }
    Ok(out)
}

/// `T * (2^N - 1)`: every template times every nonempty keypoint subset.
pub fn prompt_space_size(num_templates: u64, n: u32) -> Result<u64> {
    if n == 0 {
        return Err(Error::Argument("keypoint count must be at least 1".into()));
    }
    let subsets = 1u64
        .checked_shl(n)
        .and_then(|v| v.checked_sub(1))
        .ok_or_else(|| Error::Argument(format!("{n} keypoints overflow the prompt space")))?;
    num_templates
        .checked_mul(subsets)
        .ok_or_else(|| Error::Argument("prompt space overflows u64".into()))
}

pub const PARSE_SYSTEM: &str = "You are a helpful assistant.";

pub fn build_parse_prompt(text: &str) -> Vec<Message> {
    vec![
        Message::system(PARSE_SYSTEM),
        Message::user(format!(
            "Please extract the animal and keypoint keywords from the below text: \"{text}\". Give the answer in simple words, like \"Animal type:, Keypoint part:\". If no animal is mentioned, set animal type to N/A."
        )),
    ]
}

/// Folds keypoint-name variants onto schema names.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    lookup: HashMap<String, String>,
}

fn fold(name: &str) -> String {
    name.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Normalizer {
    pub fn new(schema: Option<&KeypointSchema>, synonyms: &HashMap<String, String>) -> Self {
        let mut lookup = HashMap::new();
        for (variant, canon) in synonyms {
            lookup.insert(fold(variant), canon.clone());
        }
        if let Some(s) = schema {
            let by_fold: HashMap<String, &String> = s.names.iter().map(|n| (fold(n), n)).collect();
            for canon in lookup.values_mut() {
                if let Some(n) = by_fold.get(&fold(canon)) {
                    *canon = (*n).clone();
                }
            }
            for n in &s.names {
                lookup.insert(fold(n), n.clone());
            }
        }
        Self { lookup }
    }

    /// Schema normalizer with the shipped synonym table.
    pub fn shipped(schema: Option<&KeypointSchema>) -> Self {
        let syn: HashMap<String, String> =
            serde_json::from_str(include_str!("../data/synonyms.json")).expect("bundled synonyms");
        Self::new(schema, &syn)
    }

    /// Canonical spelling when known; otherwise the trimmed lowercase input.
    pub fn normalize(&self, name: &str) -> String {
        let trimmed = name.trim().trim_end_matches(['.', ';', ',']).trim();
        self.lookup
            .get(&fold(trimmed))
            .cloned()
            .unwrap_or_else(|| trimmed.to_lowercase())
    }

    pub fn is_known(&self, name: &str) -> bool {
        self.lookup.contains_key(&fold(name))
    }
}

fn label_re() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"(?i)animal\s*type\s*:\s*([^;\n]*?)\s*(?:[;\n]|keypoint\s*parts?\s*:|$)")
                .expect("valid regex"),
            Regex::new(r"(?i)keypoint\s*parts?\s*:\s*([^\n]*)").expect("valid regex"),
        )
    })
}

/// Reads the `Animal type:` and `Keypoint part:` fields of a parsing reply.
pub fn parse_reply(reply: &str, norm: &Normalizer) -> Result<ParsedPrompt> {
    let (animal, parts) = label_re();
    let a = animal.captures(reply);
    let p = parts.captures(reply);
    if a.is_none() && p.is_none() {
        return Err(Error::Parse(format!("no labeled fields in {reply:?}")));
    }
    let object = a
        .map(|c| c[1].trim().trim_end_matches(['.', ',']).trim().to_string())
        .filter(|o| {
            !o.is_empty() && !o.eq_ignore_ascii_case("n/a") && !o.eq_ignore_ascii_case("none")
        });
    let keypoints: Vec<String> = p
        .map(|c| {
            c[1].split(',')
                .map(|k| norm.normalize(k))
                .filter(|k| !k.is_empty())
                .collect()
        })
        .unwrap_or_default();
    if keypoints.is_empty() {
        return Err(Error::Parse(format!("no keypoints in {reply:?}")));
    }
    Ok(ParsedPrompt { object, keypoints })
}

/// Rule-based parser: anchored template matching with a dictionary scan fallback.
#[derive(Debug, Clone)]
pub struct FallbackParser {
    patterns: Vec<(Regex, usize)>,
    scan: Regex,
    objects: Regex,
    norm: Normalizer,
}

impl FallbackParser {
    pub fn new(bank: &TemplateBank, schema: &KeypointSchema, objects: &[String]) -> Result<Self> {
        let norm = Normalizer::shipped(Some(schema));
        let mut names: Vec<String> = schema.names.clone();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let alt = names
            .iter()
            .map(|n| regex::escape(n))
            .collect::<Vec<_>>()
            .join("|");
        let kp_group = format!("(?P<kp>(?:{alt})(?:, (?:{alt}))*)");
        let mut patterns = Vec::with_capacity(bank.len());
        for t in &bank.templates {
            let mut pat = String::from("(?i)^");
            let mut literal = 0;
            let mut rest = t.as_str();
            while !rest.is_empty() {
                let next_kp = rest.find(KEYPOINT_SLOT);
                let next_obj = rest.find(OBJECT_SLOT);
                let (pos, slot) = match (next_kp, next_obj) {
                    (Some(k), Some(o)) if o < k => (o, OBJECT_SLOT),
                    (Some(k), _) => (k, KEYPOINT_SLOT),
                    (None, Some(o)) => (o, OBJECT_SLOT),
                    (None, None) => (rest.len(), ""),
                };
                pat.push_str(&regex::escape(&rest[..pos]));
                literal += rest[..pos].len();
                if slot == KEYPOINT_SLOT {
                    pat.push_str(&kp_group);
                } else if slot == OBJECT_SLOT {
                    pat.push_str("(?P<obj>.+?)");
                }
                rest = &rest[(pos + slot.len()).min(rest.len())..];
            }
            pat.push_str(r"\s*$");
            let re = Regex::new(&pat)
                .map_err(|e| Error::Config(format!("template {t:?} does not compile: {e}")))?;
            patterns.push((re, literal));
        }
        let mut scan_names: Vec<String> = norm.lookup.keys().cloned().collect();
        scan_names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let scan_alt = scan_names
            .iter()
            .map(|n| regex::escape(n).replace(' ', r"[\s_-]+"))
            .collect::<Vec<_>>()
            .join("|");
        let scan = Regex::new(&format!(r"(?i)\b(?:{scan_alt})\b"))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut objs: Vec<&String> = objects.iter().collect();
        objs.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let obj_alt = if objs.is_empty() {
            "(?!)".to_string()
        } else {
            objs.iter()
                .map(|o| regex::escape(o))
                .collect::<Vec<_>>()
                .join("|")
        };
        let objects = Regex::new(&format!(r"(?i)\b(?:{obj_alt})\b"))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            patterns,
            scan,
            objects,
            norm,
        })
    }

    pub fn parse(&self, text: &str) -> Result<ParsedPrompt> {
        let text = text.trim();
        let best = self
            .patterns
            .iter()
            .filter_map(|(re, lit)| re.captures(text).map(|c| (c, *lit)))
            .max_by_key(|(_, lit)| *lit);
        if let Some((c, _)) = best {
            let keypoints = c["kp"]
                .split(", ")
                .map(|k| self.norm.normalize(k))
                .collect();
            let object = c.name("obj").map(|m| m.as_str().trim().to_string());
            return Ok(ParsedPrompt { object, keypoints });
        }
        let mut keypoints: Vec<String> = Vec::new();
        for m in self.scan.find_iter(text) {
            let k = self.norm.normalize(m.as_str());
            if !keypoints.contains(&k) {
                keypoints.push(k);
            }
        }
        if keypoints.is_empty() {
            return Err(Error::Parse(format!("no keypoint names in {text:?}")));
        }
        let object = self.objects.find(text).map(|m| m.as_str().to_string());
        Ok(ParsedPrompt { object, keypoints })
    }
}

pub fn fallback_parse(
    text: &str,
    bank: &TemplateBank,
    schema: &KeypointSchema,
    objects: &[String],
) -> Result<ParsedPrompt> {
    FallbackParser::new(bank, schema, objects)?.parse(text)
}

/// Sends the parsing prompt through the gateway and reads the reply.
pub fn llm_parse(text: &str, gateway: &Gateway, norm: &Normalizer) -> Result<ParsedPrompt> {
    if text.trim().is_empty() {
        return Err(Error::Argument("empty prompt text".into()));
    }
    let req = ChatRequest::new(build_parse_prompt(text), DEFAULT_PARSING_TEMPERATURE);
    let reply = gateway.chat(&req, 0)?;
    parse_reply(&reply, norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Llm,
    Fallback,
    None,
}

impl std::str::FromStr for ParseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm" => Ok(Self::Llm),
            "fallback" => Ok(Self::Fallback),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown parse mode {other:?} (llm, fallback, none)"
            ))),
        }
    }
}

pub fn iou(a: &[String], b: &[String]) -> f64 {
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn same_object(a: &Option<String>, b: &Option<String>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => fold(x) == fold(y),
        _ => false,
    }
}

/// `(acc_kp, acc_obj)` as fractions. `None` predictions (parse failures) count as wrong.
pub fn parsing_accuracy(
    preds: &[Option<ParsedPrompt>],
    gts: &[ParsedPrompt],
    iou_threshold: f64,
) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Evaluation("no prompts to score".into()));
    }
    let (mut kp, mut obj) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        if let Some(p) = p {
            if iou(&p.keypoints, &g.keypoints) >= iou_threshold {
                kp += 1;
            }
            if same_object(&p.object, &g.object) {
                obj += 1;
            }
        }
    }
    let n = gts.len() as f64;
    Ok((kp as f64 / n, obj as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub instance_id: usize,
    pub text: String,
    pub gt_object: Option<String>,
    pub gt_keypoints: Vec<String>,
}

impl PromptRecord {
    pub fn truth(&self) -> ParsedPrompt {
        ParsedPrompt {
            object: self.gt_object.clone(),
            keypoints: self.gt_keypoints.clone(),
        }
    }
}

/// Draws `count` prompts: a random instance, template and nonempty subset of
/// its visible keypoints (in schema order). The object is the species name.
pub fn synthesize_prompt_set(
    ds: &Dataset,
    bank: &TemplateBank,
    keypoint_ids: Option<&BTreeSet<usize>>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PromptRecord>> {
    let eligible: Vec<(usize, Vec<usize>)> = ds
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let ids = inst
                .visible_ids()
                .filter(|k| keypoint_ids.is_none_or(|f| f.contains(k)))
                .collect::<Vec<_>>();
            (i, ids)
        })
        .filter(|(_, ids)| !ids.is_empty())
        .collect();
    if eligible.is_empty() || bank.is_empty() {
        return Err(Error::Sampling(
            "no instance has an eligible keypoint".into(),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (inst, ids) = eligible.choose(rng).expect("nonempty");
        let template = bank.templates.choose(rng).expect("nonempty");
        let k = rng.gen_range(1..=ids.len());
        let mut chosen: Vec<usize> = ids.choose_multiple(rng, k).copied().collect();
        chosen.sort_unstable();
        let names: Vec<&str> = chosen
            .iter()
            .map(|&i| ds.schema.names[i].as_str())
            .collect();
        let species = ds.instances[*inst].species.as_str();
        let object = has_object(template).then_some(species);
        out.push(PromptRecord {
            instance_id: *inst,
            text: synthesize(template, &names, object)?,
            gt_object: object.map(str::to_string),
            gt_keypoints: names.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn synthesis_examples() {
        assert_eq!(
            synthesize(
                "where is the <keypoint> for <obj>?",
                &["left eye", "right eye"],
                Some("cat")
            )
            .unwrap(),
            "where is the left eye, right eye for cat?"
        );
        assert_eq!(
            synthesize("Spot the <keypoint>.", &["nose"], Some("cat")).unwrap(),
            "Spot the nose."
        );
        assert_eq!(
            synthesize("the <keypoint> of <object>.", &["tail"], Some("dog")).unwrap(),
            "the tail of dog."
        );
        assert!(matches!(
            synthesize("the <keypoint> of <obj>.", &["tail"], None),
            Err(Error::Argument(_))
        ));
        assert!(synthesize("x <keypoint>", &[], None).is_err());
    }

    #[test]
    fn space_sizes() {
        assert_eq!(prompt_space_size(100, 1).unwrap(), 100);
        assert_eq!(prompt_space_size(100, 11).unwrap(), 204_700);
        assert_eq!(prompt_space_size(1, 2).unwrap(), 3);
        for n in 1..=10u32 {
            let brute = (1u64..(1 << n)).count() as u64;
            assert_eq!(prompt_space_size(7, n).unwrap(), 7 * brute);
        }
    }

    #[test]
    fn parse_prompt_text() {
        let a = build_parse_prompt("Can you find the nose on cat?");
        let b = build_parse_prompt("Where is the tail?");
        assert!(a[1].content.contains("set animal type to N/A"));
        assert!(a[1].content.contains("\"Can you find the nose on cat?\""));
        let (pa, pb) = (
            a[1].content.replace("Can you find the nose on cat?", "#"),
            b[1].content.replace("Where is the tail?", "#"),
        );
        assert_eq!(pa, pb);
    }

    #[test]
    fn reply_examples() {
        let n = Normalizer::shipped(None);
        assert_eq!(
            parse_reply(
                "Animal type: cat; \nKeypoint part: left-back leg, left-front leg",
                &n
            )
            .unwrap(),
            ParsedPrompt {
                object: Some("cat".into()),
                keypoints: s(&["left-back leg", "left-front leg"])
            }
        );
        assert_eq!(
            parse_reply(
                "Animal type: N/A; Keypoint part: left-front leg, left ear",
                &n
            )
            .unwrap(),
            ParsedPrompt {
                object: None,
                keypoints: s(&["left-front leg", "left ear"])
            }
        );
        assert_eq!(
            parse_reply(
                "Animal type: California Gull; \nKeypoint part: back, crown, nape, right wing",
                &n
            )
            .unwrap()
            .object
            .as_deref(),
            Some("California Gull")
        );
        assert!(matches!(
            parse_reply("no labels here", &n),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn normalization_folds_variants() {
        let schema = synth::schema();
        let n = Normalizer::shipped(Some(&schema));
        assert_eq!(n.normalize(" Left_Front paw "), "left-front paw");
        assert_eq!(n.normalize("front_left_paw"), "left-front paw");
        assert_eq!(n.normalize("front_right_knee"), "right-front knee");
        assert_eq!(n.normalize("Snout."), "nose");
    }

    #[test]
    fn fallback_examples() {
        let schema = synth::schema();
        let bank = TemplateBank::shipped();
        let objects = s(&["cat", "dog"]);
        let p = fallback_parse(
            "Is that a nose? The cat looks happy",
            &bank,
            &schema,
            &objects,
        )
        .unwrap();
        assert_eq!(
            p,
            ParsedPrompt {
                object: Some("cat".into()),
                keypoints: s(&["nose"])
            }
        );
        assert!(matches!(
            fallback_parse("hello there", &bank, &schema, &objects),
            Err(Error::Parse(_))
        ));
        let p = fallback_parse("Mark cat's left ear, tail.", &bank, &schema, &objects).unwrap();
        assert_eq!(
            p,
            ParsedPrompt {
                object: Some("cat".into()),
                keypoints: s(&["left ear", "tail"])
            }
        );
    }

    #[test]
    fn shipped_bank_shape() {
        let bank = TemplateBank::shipped();
        assert_eq!(bank.len(), 100);
        assert_eq!(bank.verbatim, 20);
        let unique: BTreeSet<_> = bank.templates.iter().collect();
        assert_eq!(unique.len(), 100);
        assert!(TemplateBank::new(vec!["no slot".into()], 0).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let g = ParsedPrompt {
            object: Some("cat".into()),
            keypoints: s(&["nose", "left ear"]),
        };
        let (k, o) = parsing_accuracy(&[Some(g.clone())], std::slice::from_ref(&g), 0.9).unwrap();
        assert_eq!((k, o), (1.0, 1.0));
        let p = ParsedPrompt {
            object: Some("Cat".into()),
            keypoints: s(&["nose"]),
        };
        let (k, o) = parsing_accuracy(&[Some(p)], std::slice::from_ref(&g), 0.9).unwrap();
        assert_eq!((k, o), (0.0, 1.0));
        let (k, o) = parsing_accuracy(&[None], &[g], 0.9).unwrap();
        assert_eq!((k, o), (0.0, 0.0));
        assert_eq!(iou(&[], &[]), 1.0);
    }

    #[test]
    fn round_trip_over_every_template() {
        let schema = synth::schema();
        let bank = TemplateBank::shipped();
        let objects: Vec<String> = synth::TRAIN_SPECIES.iter().map(|x| x.to_string()).collect();
        let parser = FallbackParser::new(&bank, &schema, &objects).unwrap();
        for t in &bank.templates {
            for kps in [
                vec!["nose"],
                vec!["left eye", "right-front paw"],
                schema.names.iter().map(String::as_str).collect(),
            ] {
                let obj = has_object(t).then_some("polar bear");
                let text = synthesize(t, &kps, obj).unwrap();
                let p = parser.parse(&text).unwrap();
                assert_eq!(p.keypoints, kps, "{t}");
                assert_eq!(p.object.as_deref(), obj, "{t}");
            }
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in prop::collection::vec(0usize..8, 0..6), b in prop::collection::vec(0usize..8, 0..6)) {
            let names = synth::KEYPOINTS;
            let a: Vec<String> = a.iter().map(|&i| names[i].to_string()).collect();
            let b: Vec<String> = b.iter().map(|&i| names[i].to_string()).collect();
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }
    }
}
