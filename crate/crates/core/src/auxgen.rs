//! Auxiliary keypoint-text pairs: points interpolated along body paths,
//! names for them collected from a chat model, and text selection with
//! false-text control.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, KeypointSchema};
use crate::error::{Error, Result};
use crate::llm::{ChatRequest, Gateway, Message, DEFAULT_INTERPOLATION_TEMPERATURE};
use crate::raster::Mask;
use crate::tensor::cosine;

pub const SYSTEM_INSTRUCTION: &str =
    "You are a helpful assistant that produces keypoints of an animal.";

const WORKED_QUESTION: &str = "Q: Please give me one most common body part/keypoint at 1/2 between left-front knee and left-front paw of an animal. Please answer in concise words. Provide no excessive explanations.";
const WORKED_ANSWER: &str = "A: The starting point is left-front knee. The end point is left-front paw. The answer should be between the starting point and end point. Left-front ankle is between the starting point and end point. The answer is left-front ankle.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPath {
    pub endpoint_ids: (usize, usize),
    pub z: f64,
    pub names: (String, String),
    pub category: String,
}

impl InterpolationPath {
    pub fn new(
        schema: &KeypointSchema,
        from: &str,
        to: &str,
        z: f64,
        category: &str,
    ) -> Result<Self> {
        if !(z > 0.0 && z < 1.0) {
            return Err(Error::Argument(format!(
                "path node z={z} must lie in (0, 1)"
            )));
        }
        let id = |n: &str| {
            schema
                .index_of(n)
                .ok_or_else(|| Error::Argument(format!("unknown keypoint {n:?} in path")))
        };
        let (a, b) = (id(from)?, id(to)?);
        if a == b {
            return Err(Error::Argument(format!("path endpoints are both {from:?}")));
        }
        Ok(Self {
            endpoint_ids: (a, b),
            z,
            names: (from.to_string(), to.to_string()),
            category: category.to_string(),
        })
    }

    pub fn label(&self) -> String {
        format!("{}->{}@{}", self.names.0, self.names.1, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub repetition: u64,
    /// 1-based position within its reply.
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextPool {
    pub candidates: Vec<Candidate>,
    /// `(repetition, raw reply)` for replies that yielded no answers.
    pub failures: Vec<(u64, String)>,
}

impl TextPool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtcConfig {
    pub r: usize,
    pub eta: usize,
    pub alpha: f64,
}

impl Default for FtcConfig {
    fn default() -> Self {
        Self {
            r: 3,
            eta: 1,
            alpha: 0.01,
        }
    }
}

impl FtcConfig {
    /// `eta` above 3 is accepted and behaves as 3 (the whole pool).
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("ftc.r must be at least 1".into()));
        }
        if self.eta == 0 {
            return Err(Error::Config("ftc.eta must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "ftc.alpha {} outside [-1, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn interpolate_visual(p1: [f64; 2], p2: [f64; 2], z: f64) -> [f64; 2] {
    [(1.0 - z) * p1[0] + z * p2[0], (1.0 - z) * p1[1] + z * p2[1]]
}

/// Permissive without a mask; points off the raster are rejected.
pub fn foreground_gate(p: [f64; 2], mask: Option<&Mask>) -> bool {
    match mask {
        None => true,
        Some(m) => m.at(p[0], p[1]),
    }
}

/// Writes `z` as a small fraction when it is one (`0.5` -> `1/2`).
pub fn format_z(z: f64) -> String {
    for den in 2..=10u32 {
        let num = (z * den as f64).round();
        if (num / den as f64 - z).abs() < 1e-9 {
            let g = gcd(num as u32, den);
            return format!("{}/{}", num as u32 / g, den / g);
        }
    }
    format!("{z}")
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn question(path: &InterpolationPath) -> String {
    let (p1, p2) = (&path.names.0, &path.names.1);
    format!(
        "Please give me three most common body parts/keypoints at {} between {p1} and {p2} of {}. Pay attention to the left and right. Please answer in concise words like \"1. 2. 3.\". Please do not include {p1} and {p2} in answers. Provide no excessive explanations.",
        format_z(path.z),
        path.category
    )
}

/// Vanilla prompt, or the worked-example prompt when `cot` is set.
pub fn build_itpl_prompt(path: &InterpolationPath, cot: bool) -> Vec<Message> {
    let user = if cot {
        format!("{WORKED_QUESTION}\n{WORKED_ANSWER}\nQ: {}", question(path))
    } else {
        question(path)
    };
    vec![Message::system(SYSTEM_INSTRUCTION), Message::user(user)]
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([1-9])\s*[.)]\s*(.+?)\s*$").expect("valid regex"))
}

/// Extracts up to three `k. answer` lines, lowercased and without trailing punctuation.
pub fn parse_numbered_answers(reply: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in reply.lines() {
        if let Some(c) = numbered_line().captures(line) {
            let text = c[2]
                .trim_end_matches(|ch: char| ch.is_ascii_punctuation() || ch.is_whitespace())
                .to_lowercase();
            if !text.is_empty() {
                out.push(text);
            }
        }
        if out.len() == 3 {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("no numbered answers in {reply:?}")));
    }
    Ok(out)
}

/// Issues the worked-example prompt `r` times and pools the parsed answers.
pub fn collect_pool(path: &InterpolationPath, r: usize, gateway: &Gateway) -> Result<TextPool> {
    let req = ChatRequest::new(
        build_itpl_prompt(path, true),
        DEFAULT_INTERPOLATION_TEMPERATURE,
    );
    let mut pool = TextPool::default();
    for rep in 0..r as u64 {
        let reply = gateway.chat(&req, rep)?;
        match parse_numbered_answers(&reply) {
            Ok(answers) => {
                pool.candidates
                    .extend(answers.into_iter().enumerate().map(|(i, text)| Candidate {
                        text,
                        repetition: rep,
                        rank: i + 1,
                    }))
            }
            Err(_) => {
                log::warn!("repetition {rep} of {} unparseable", path.label());
                pool.failures.push((rep, reply));
            }
        }
    }
    Ok(pool)
}

/// Cosine of `phi` with each candidate's text feature.
pub fn pool_similarities(
    pool: &TextPool,
    phi: &[f64],
    text_feature: &dyn Fn(&str) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    pool.candidates
        .iter()
        .map(|c| {
            let t = text_feature(&c.text)?;
            cosine(phi, &t).ok_or_else(|| Error::Numeric(format!("zero feature for {:?}", c.text)))
        })
        .collect()
}

/// Index of the candidate most similar to `phi`; ties go to the earliest.
pub fn select_text_corr(
    pool: &TextPool,
    phi: &[f64],
    text_feature: &dyn Fn(&str) -> Result<Vec<f64>>,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Selection("empty text pool".into()));
    }
    let sims = pool_similarities(pool, phi, text_feature)?;
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtcOutcome {
    pub chosen: Option<usize>,
    pub window: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Rank window first, then threshold, then a uniform draw.
pub fn ftc_draw(
    pool: &TextPool,
    sims: &[f64],
    cfg: &FtcConfig,
    rng: &mut impl Rng,
) -> Result<FtcOutcome> {
    if pool.is_empty() {
        return Err(Error::Selection("empty text pool".into()));
    }
    if sims.len() != pool.len() {
        return Err(Error::Dimension(format!(
            "{} similarities for {} candidates",
            sims.len(),
            pool.len()
        )));
    }
    let window: Vec<usize> = (0..pool.len())
        .filter(|&i| pool.candidates[i].rank <= cfg.eta)
        .collect();
    let (kept, rejected): (Vec<usize>, Vec<usize>) =
        window.iter().partition(|&&i| sims[i] >= cfg.alpha);
    let chosen = if kept.is_empty() {
        None
    } else {
        Some(kept[rng.gen_range(0..kept.len())])
    };
    Ok(FtcOutcome {
        chosen,
        window,
        rejected,
    })
}

pub fn ftc_sample(
    pool: &TextPool,
    phi: &[f64],
    text_feature: &dyn Fn(&str) -> Result<Vec<f64>>,
    cfg: &FtcConfig,
    rng: &mut impl Rng,
) -> Result<(Option<String>, FtcOutcome, Vec<f64>)> {
    let sims = pool_similarities(pool, phi, text_feature)?;
    let out = ftc_draw(pool, &sims, cfg, rng)?;
    let text = out.chosen.map(|i| pool.candidates[i].text.clone());
    Ok((text, out, sims))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Original,
    Adapted,
}

impl FeatureSource {
    pub fn at_step(step: u64, bootstrap_steps: u64) -> Self {
        if step < bootstrap_steps {
            Self::Original
        } else {
            Self::Adapted
        }
    }
}

/// Features used to score pool candidates for one episode.
pub trait AuxFeatures {
    /// Representation of the support-side auxiliary points.
    fn visual(&self, source: FeatureSource, support_points: &[[f64; 2]]) -> Result<Vec<f64>>;
    fn text(&self, source: FeatureSource, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub path: String,
    pub feature_source: FeatureSource,
    pub pool: Vec<Candidate>,
    pub similarities: Vec<f64>,
    pub window: Vec<usize>,
    pub rejected: Vec<usize>,
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryPair {
    pub support_points: Vec<[f64; 2]>,
    pub query_point: [f64; 2],
    pub text: Option<String>,
    pub provenance: Provenance,
}

pub struct AuxRequest<'a> {
    pub supports: &'a [&'a Instance],
    pub support_masks: Vec<Option<&'a Mask>>,
    pub query: &'a Instance,
    pub query_mask: Option<&'a Mask>,
    pub step: u64,
    pub bootstrap_steps: u64,
}

/// Interpolates, gates and labels one auxiliary keypoint. `None` when an
/// endpoint is hidden or an interpolated point falls on background.
pub fn make_auxiliary_pair(
    req: &AuxRequest<'_>,
    path: &InterpolationPath,
    pool: &TextPool,
    cfg: &FtcConfig,
    features: &dyn AuxFeatures,
    rng: &mut impl Rng,
) -> Result<Option<AuxiliaryPair>> {
    let (a, b) = path.endpoint_ids;
    let visible = |inst: &Instance| inst.keypoints[a].visible && inst.keypoints[b].visible;
    if !visible(req.query) || !req.supports.iter().all(|s| visible(s)) {
        return Ok(None);
    }
    let interp = |inst: &Instance| {
        interpolate_visual(inst.keypoints[a].point(), inst.keypoints[b].point(), path.z)
    };
    let query_point = interp(req.query);
    if !foreground_gate(query_point, req.query_mask) {
        return Ok(None);
    }
    let mut support_points = Vec::with_capacity(req.supports.len());
    for (i, s) in req.supports.iter().enumerate() {
        let p = interp(s);
        if !foreground_gate(p, req.support_masks.get(i).copied().flatten()) {
            return Ok(None);
        }
        support_points.push(p);
    }
    let source = FeatureSource::at_step(req.step, req.bootstrap_steps);
    let mut provenance = Provenance {
        path: path.label(),
        feature_source: source,
        pool: pool.candidates.clone(),
        similarities: Vec::new(),
        window: Vec::new(),
        rejected: Vec::new(),
        decision: String::new(),
    };
    let text = if pool.is_empty() || support_points.is_empty() {
        provenance.decision = "visual_only:empty_pool".into();
        None
    } else {
        let phi = features.visual(source, &support_points)?;
        let tf = |t: &str| features.text(source, t);
        let (text, out, sims) = ftc_sample(pool, &phi, &tf, cfg, rng)?;
        provenance.similarities = sims;
        provenance.window = out.window;
        provenance.rejected = out.rejected;
        provenance.decision = match &text {
            Some(t) => format!("selected:{t}"),
            None => "visual_only:all_rejected".into(),
        };
        text
    };
    Ok(Some(AuxiliaryPair {
        support_points,
        query_point,
        text,
        provenance,
    }))
}

/// Pools keyed by path label, filled on first use.
pub struct PoolCache<'g> {
    gateway: &'g Gateway,
    r: usize,
    pools: Mutex<HashMap<String, TextPool>>,
}

impl<'g> PoolCache<'g> {
    pub fn new(gateway: &'g Gateway, r: usize) -> Self {
        Self {
            gateway,
            r,
            pools: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, path: &InterpolationPath) -> Result<TextPool> {
        let key = format!("{}|{}", path.label(), path.category);
        if let Some(p) = self.pools.lock().expect("pool lock").get(&key) {
            return Ok(p.clone());
        }
        let pool = collect_pool(path, self.r, self.gateway)?;
        self.pools
            .lock()
            .expect("pool lock")
            .insert(key, pool.clone());
        Ok(pool)
    }
}

/// JSON-lines record of every auxiliary decision.
pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn record(&self, step: u64, p: &Provenance) -> Result<()> {
        let line = serde_json::to_string(&serde_json::json!({ "step": step, "provenance": p }))?;
        let mut w = self.out.lock().expect("audit lock");
        writeln!(w, "{line}").map_err(|e| Error::Io {
            path: "audit log".into(),
            source: e,
        })
    }

    pub fn flush(&self) -> Result<()> {
        self.out
            .lock()
            .expect("audit lock")
            .flush()
            .map_err(|e| Error::Io {
                path: "audit log".into(),
                source: e,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Keypoint;
    use crate::llm::{MockEntry, MockTable};
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(a: &str, b: &str) -> InterpolationPath {
        InterpolationPath::new(&synth::schema(), a, b, 0.5, "an animal").unwrap()
    }

    fn pool_of(ranks: &[(usize, u64)]) -> TextPool {
        TextPool {
            candidates: ranks
                .iter()
                .enumerate()
                .map(|(i, &(rank, repetition))| Candidate {
                    text: format!("t{i}"),
                    repetition,
                    rank,
                })
                .collect(),
            failures: vec![],
        }
    }

    /// Text feature: unit vector at the angle encoded by the candidate index.
    fn angle_features(sims: Vec<f64>) -> impl Fn(&str) -> Result<Vec<f64>> {
        move |t: &str| {
            let i: usize = t[1..].parse().unwrap();
            let c = sims[i];
            Ok(vec![c, (1.0 - c * c).max(0.0).sqrt()])
        }
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(
            interpolate_visual([0.0, 0.0], [10.0, 20.0], 0.5),
            [5.0, 10.0]
        );
        assert_eq!(
            interpolate_visual([3.0, 4.0], [10.0, 20.0], 0.0),
            [3.0, 4.0]
        );
        assert_eq!(interpolate_visual([4.0, 0.0], [8.0, 8.0], 0.25), [5.0, 2.0]);
    }

    #[test]
    fn gate_examples() {
        assert!(foreground_gate([100.0, 100.0], None));
        let mut m = Mask::empty(4, 4);
        m.set(2, 1, true);
        assert!(!foreground_gate([0.5, 0.5], Some(&m)));
        assert!(foreground_gate([2.0, 1.0], Some(&m)));
        assert!(foreground_gate([2.99, 1.99], Some(&m)));
        assert!(!foreground_gate([5.0, 1.0], Some(&m)));
    }

    #[test]
    fn prompts() {
        let p = path("nose", "left ear");
        let vanilla = build_itpl_prompt(&p, false);
        assert!(vanilla[1].content.contains("between nose and left ear"));
        assert!(vanilla[1].content.contains("at 1/2 between"));
        assert!(!vanilla[1].content.contains("left-front ankle"));
        let cot = build_itpl_prompt(&p, true);
        assert_eq!(cot[0].content, SYSTEM_INSTRUCTION);
        assert!(cot[1].content.contains("left-front ankle"));
        assert!(cot[1]
            .content
            .ends_with("Provide no excessive explanations."));
        let other = build_itpl_prompt(&path("nose", "right ear"), true);
        assert_ne!(cot, other);
        assert_eq!(format_z(0.25), "1/4");
        assert_eq!(format_z(0.37), "0.37");
    }

    #[test]
    fn numbered_answers() {
        assert_eq!(
            parse_numbered_answers("1. Left eye\n2. Left cheek\n3. Left temple").unwrap(),
            vec!["left eye", "left cheek", "left temple"]
        );
        assert_eq!(
            parse_numbered_answers("1. Right eye.").unwrap(),
            vec!["right eye"]
        );
        assert!(matches!(
            parse_numbered_answers("The answer is probably the eye."),
            Err(Error::Parse(_))
        ));
    }

    fn gateway(replies: Vec<&str>) -> Gateway {
        Gateway::mock(MockTable {
            entries: vec![MockEntry {
                contains: vec!["between nose and left ear".into()],
                replies: replies.into_iter().map(String::from).collect(),
            }],
        })
    }

    #[test]
    fn pools() {
        let p = path("nose", "left ear");
        let g = gateway(vec!["1. a\n2. b\n3. c"]);
        assert_eq!(collect_pool(&p, 3, &g).unwrap().len(), 9);
        let g = gateway(vec!["1. a\n2. b\n3. c", "no idea", "1. d\n2. e\n3. f"]);
        let pool = collect_pool(&p, 3, &g).unwrap();
        assert_eq!(pool.len(), 6);
        assert_eq!(pool.failures.len(), 1);
        assert_eq!(pool.candidates[3].repetition, 2);
        let g = gateway(vec!["nothing"]);
        assert!(collect_pool(&p, 2, &g).unwrap().is_empty());
    }

    #[test]
    fn correlation_selection() {
        let pool = pool_of(&[(1, 0)]);
        assert_eq!(
            select_text_corr(&pool, &[1.0, 0.0], &angle_features(vec![0.3])).unwrap(),
            0
        );
        let pool = pool_of(&[(1, 0), (2, 0), (3, 0)]);
        let f = angle_features(vec![0.2, 0.9, 0.5]);
        assert_eq!(select_text_corr(&pool, &[1.0, 0.0], &f).unwrap(), 1);
        assert_eq!(select_text_corr(&pool, &[10.0, 0.0], &f).unwrap(), 1);
        let tie = angle_features(vec![0.7, 0.7, 0.1]);
        assert_eq!(select_text_corr(&pool, &[1.0, 0.0], &tie).unwrap(), 0);
        assert!(matches!(
            select_text_corr(&TextPool::default(), &[1.0], &f),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn ftc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = pool_of(&[(1, 0), (2, 0), (3, 0), (1, 1), (2, 1), (3, 1)]);
        let cfg = FtcConfig {
            r: 2,
            eta: 1,
            alpha: 0.01,
        };
        let out = ftc_draw(&pool, &[0.0; 6], &cfg, &mut rng).unwrap();
        assert_eq!(out.chosen, None);
        let out = ftc_draw(&pool, &[0.5; 6], &cfg, &mut rng).unwrap();
        assert_eq!(out.window, vec![0, 3]);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            ftc_draw(&pool, &[0.5; 6], &cfg, &mut r).unwrap().chosen
        };
        assert_eq!(draw(9), draw(9));
        let wide = FtcConfig {
            r: 2,
            eta: 10,
            alpha: -1.0,
        };
        assert_eq!(
            ftc_draw(&pool, &[0.0; 6], &wide, &mut rng)
                .unwrap()
                .window
                .len(),
            6
        );
    }

    struct FixedFeatures;

    impl AuxFeatures for FixedFeatures {
        fn visual(&self, _: FeatureSource, _: &[[f64; 2]]) -> Result<Vec<f64>> {
            Ok(vec![1.0, 0.0])
        }
        fn text(&self, _: FeatureSource, t: &str) -> Result<Vec<f64>> {
            Ok(if t == "left eye" {
                vec![1.0, 0.1]
            } else {
                vec![-1.0, 0.2]
            })
        }
    }

    fn instance(nose: [f64; 2], ear: [f64; 2], ear_visible: bool) -> Instance {
        let mut keypoints = vec![
            Keypoint {
                x: 0.0,
                y: 0.0,
                visible: false
            };
            8
        ];
        keypoints[0] = Keypoint {
            x: nose[0],
            y: nose[1],
            visible: true,
        };
        keypoints[3] = Keypoint {
            x: ear[0],
            y: ear[1],
            visible: ear_visible,
        };
        Instance {
            image_ref: "img".into(),
            species: "cat".into(),
            bbox: [0.0, 0.0, 40.0, 40.0],
            keypoints,
            mask: None,
        }
    }

    #[test]
    fn auxiliary_pairs() {
        let p = path("nose", "left ear");
        let g = gateway(vec!["1. Left eye\n2. Left cheek\n3. Left temple"]);
        let pool = collect_pool(&p, 3, &g).unwrap();
        let s = instance([10.0, 20.0], [4.0, 8.0], true);
        let q = instance([30.0, 20.0], [20.0, 10.0], true);
        let supports = [&s];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let req = AuxRequest {
            supports: &supports,
            support_masks: vec![None],
            query: &q,
            query_mask: None,
            step: 5,
            bootstrap_steps: 10,
        };
        let pair = make_auxiliary_pair(
            &req,
            &p,
            &pool,
            &FtcConfig::default(),
            &FixedFeatures,
            &mut rng,
        )
        .unwrap()
        .unwrap();
        assert_eq!(pair.support_points, vec![[7.0, 14.0]]);
        assert_eq!(pair.query_point, [25.0, 15.0]);
        assert_eq!(pair.text.as_deref(), Some("left eye"));
        assert_eq!(pair.provenance.feature_source, FeatureSource::Original);
        assert_eq!(pair.provenance.window, vec![0, 3, 6]);

        let late = AuxRequest { step: 10, ..req };
        let pair = make_auxiliary_pair(
            &late,
            &p,
            &pool,
            &FtcConfig::default(),
            &FixedFeatures,
            &mut rng,
        )
        .unwrap()
        .unwrap();
        assert_eq!(pair.provenance.feature_source, FeatureSource::Adapted);

        let hidden = instance([30.0, 20.0], [20.0, 10.0], false);
        let req = AuxRequest {
            supports: &supports,
            support_masks: vec![None],
            query: &hidden,
            query_mask: None,
            step: 0,
            bootstrap_steps: 10,
        };
        assert!(make_auxiliary_pair(
            &req,
            &p,
            &pool,
            &FtcConfig::default(),
            &FixedFeatures,
            &mut rng
        )
        .unwrap()
        .is_none());
    }

    proptest! {
        #[test]
        fn interpolation_is_reversible(x1 in -50.0f64..50.0, y1 in -50.0f64..50.0,
                                       x2 in -50.0f64..50.0, y2 in -50.0f64..50.0, z in 0.0f64..=1.0) {
            let a = interpolate_visual([x1, y1], [x2, y2], z);
            let b = interpolate_visual([x2, y2], [x1, y1], 1.0 - z);
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }

        #[test]
        fn accepted_texts_clear_the_threshold(
            sims in prop::collection::vec(-1.0f64..1.0, 9),
            alpha in -1.0f64..1.0,
            eta in 1usize..4,
            seed in any::<u64>(),
        ) {
            let pool = pool_of(&[(1,0),(2,0),(3,0),(1,1),(2,1),(3,1),(1,2),(2,2),(3,2)]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = ftc_draw(&pool, &sims, &FtcConfig { r: 3, eta, alpha }, &mut rng).unwrap();
            if let Some(i) = out.chosen {
                prop_assert!(sims[i] >= alpha);
                prop_assert!(pool.candidates[i].rank <= eta);
            }
        }

        #[test]
        fn selection_ignores_scale(sims in prop::collection::vec(-1.0f64..1.0, 3), s in 0.01f64..100.0) {
            let pool = pool_of(&[(1, 0), (2, 0), (3, 0)]);
            let f = angle_features(sims);
            prop_assert_eq!(
                select_text_corr(&pool, &[1.0, 0.0], &f).unwrap(),
                select_text_corr(&pool, &[s, 0.0], &f).unwrap()
            );
        }
    }
}
