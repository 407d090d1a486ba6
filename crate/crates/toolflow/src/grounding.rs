//! Role grounding: parse a templated instruction, derive region prompts for
//! the tool and target roles, segment the labeled scene, verify each mask,
//! and sample query points — with at most one object-level recovery attempt
//! per role.

use crate::geometry::{Point3, ScenePointCloud};
use crate::scene::{Affordance, ObjectRegistry, SceneError, EXECUTOR_DESC};
use crate::synth::{self, SampledQueries, SynthError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("unknown verb '{word}'; nearest: {}", suggestions.join(", "))]
    UnknownVerb { word: String, suggestions: Vec<String> },
    #[error("unknown object '{word}'; nearest: {}", suggestions.join(", "))]
    UnknownObject { word: String, suggestions: Vec<String> },
    #[error("instruction '{0}' does not match 'VERB the TARGET [with the TOOL]'")]
    BadTemplate(String),
    #[error("grounding failed for {role} role: {}", attempts.join("; "))]
    VerifyFailed { role: &'static str, attempts: Vec<String> },
    #[error("query sampling failed: {0}")]
    QuerySampling(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("bad grounding table line '{0}' (expected key=value)")]
    BadTableLine(String),
}

// ---------------------------------------------------------------------------
// tables

/// Verb synonyms and the action -> part-prompt table. Extensible from
/// key=value text (`synonym.grab=pickup`, `part.target.open=handle`,
/// `part.tool.pour=rim`) without code changes.
#[derive(Debug, Clone)]
pub struct GroundingTables {
    pub synonyms: BTreeMap<String, String>,
    /// (role, action) -> part name; absent means whole object.
    pub part_map: BTreeMap<(String, String), String>,
}

impl Default for GroundingTables {
    fn default() -> Self {
        let mut synonyms = BTreeMap::new();
        for (k, v) in [
            ("grab", "pickup"),
            ("lift", "pickup"),
            ("take", "pickup"),
            ("put", "place"),
            ("shut", "close"),
            ("shove", "push"),
            ("drag", "pull"),
            ("slice", "cut"),
            ("hang", "hang-on"),
        ] {
            synonyms.insert(k.to_string(), v.to_string());
        }
        let mut part_map = BTreeMap::new();
        for (role, action, part) in [
            ("target", "open", "handle"),
            ("target", "close", "handle"),
            ("target", "press", "button"),
            ("tool", "pour", "rim"),
        ] {
            part_map.insert((role.to_string(), action.to_string()), part.to_string());
        }
        GroundingTables { synonyms, part_map }
    }
}

impl GroundingTables {
    /// Extend the default tables from key=value lines ('#' comments).
    pub fn from_kv_text(text: &str) -> Result<GroundingTables, GroundingError> {
        let mut t = GroundingTables::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| GroundingError::BadTableLine(line.to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["synonym", word] => {
                    t.synonyms.insert(word.to_string(), value.to_string());
                }
                ["part", role @ ("tool" | "target"), action] => {
                    t.part_map
                        .insert((role.to_string(), action.to_string()), value.to_string());
                }
                _ => return Err(GroundingError::BadTableLine(line.to_string())),
            }
        }
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// understand

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTask {
    pub action: Affordance,
    pub tool_desc: String,
    pub target_desc: String,
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur.push(sub.min(prev[j] + 1).min(cur[j - 1] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn nearest(word: &str, candidates: impl Iterator<Item = String>, k: usize) -> Vec<String> {
    let mut scored: Vec<(usize, String)> =
        candidates.map(|c| (edit_distance(word, &c), c)).collect();
    scored.sort();
    scored.into_iter().take(k).map(|(_, c)| c).collect()
}

fn resolve_noun(
    word: &str,
    registry: &ObjectRegistry,
    tables: &GroundingTables,
) -> Result<String, GroundingError> {
    let canon = tables.synonyms.get(word).map(String::as_str).unwrap_or(word);
    if canon == EXECUTOR_DESC || registry.by_name(canon).is_some() {
        return Ok(canon.to_string());
    }
    Err(GroundingError::UnknownObject {
        word: word.to_string(),
        suggestions: nearest(canon, registry.names().iter().map(|s| s.to_string()), 3),
    })
}

/// Parse `VERB the TARGET` / `VERB the TARGET with the TOOL` into a
/// normalized task over the closed vocabulary.
pub fn understand_task(
    raw: &str,
    registry: &ObjectRegistry,
    tables: &GroundingTables,
) -> Result<ParsedTask, GroundingError> {
    let tokens: Vec<String> =
        raw.to_lowercase().split_whitespace().map(|t| t.to_string()).collect();
    if tokens.len() < 3 || tokens[1] != "the" {
        return Err(GroundingError::BadTemplate(raw.to_string()));
    }
    let verb_raw = tokens[0].as_str();
    let verb = tables.synonyms.get(verb_raw).map(String::as_str).unwrap_or(verb_raw);
    let action = Affordance::parse(verb).map_err(|_| GroundingError::UnknownVerb {
        word: verb_raw.to_string(),
        suggestions: nearest(
            verb,
            Affordance::ALL
                .iter()
                .map(|a| a.as_str().to_string())
                .chain(tables.synonyms.keys().cloned()),
            3,
        ),
    })?;
    // noun phrase up to an optional "with the TOOL" suffix
    let rest = &tokens[2..];
    let (target_words, tool_words) = match rest.iter().position(|t| t == "with") {
        Some(i) => {
            if rest.len() < i + 3 || rest[i + 1] != "the" {
                return Err(GroundingError::BadTemplate(raw.to_string()));
            }
            (&rest[..i], Some(&rest[i + 2..]))
        }
        None => (rest, None),
    };
    if target_words.is_empty() || tool_words.is_some_and(|w| w.is_empty()) {
        return Err(GroundingError::BadTemplate(raw.to_string()));
    }
    let target_desc = resolve_noun(&target_words.join(" "), registry, tables)?;
    let tool_desc = match tool_words {
        Some(w) => resolve_noun(&w.join(" "), registry, tables)?,
        None => EXECUTOR_DESC.to_string(),
    };
    Ok(ParsedTask { action, tool_desc, target_desc })
}

// ---------------------------------------------------------------------------
// prompts and segmentation

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPrompt {
    pub object: String,
    /// `None` selects the whole object.
    pub part: Option<String>,
}

impl RegionPrompt {
    pub fn describe(&self) -> String {
        match &self.part {
            Some(p) => format!("{}/{}", self.object, p),
            None => format!("{}/whole", self.object),
        }
    }
}

/// Region prompts for both roles plus the object-level fallback used by the
/// recovery attempt.
#[derive(Debug, Clone)]
pub struct RolePrompts {
    pub tool: RegionPrompt,
    pub tool_fallback: RegionPrompt,
    pub target: RegionPrompt,
    pub target_fallback: RegionPrompt,
}

pub fn parse_region_prompts(task: &ParsedTask, tables: &GroundingTables) -> RolePrompts {
    let action = task.action.as_str();
    let prompt = |role: &str, object: &str| RegionPrompt {
        object: object.to_string(),
        part: tables.part_map.get(&(role.to_string(), action.to_string())).cloned(),
    };
    let fallback = |object: &str| RegionPrompt { object: object.to_string(), part: None };
    RolePrompts {
        tool: prompt("tool", &task.tool_desc),
        tool_fallback: fallback(&task.tool_desc),
        target: prompt("target", &task.target_desc),
        target_fallback: fallback(&task.target_desc),
    }
}

/// Scene-point indices matched by a region prompt.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub prompt: RegionPrompt,
    pub indices: Vec<usize>,
}

/// Label-lookup segmentation: select the prompt object's points, optionally
/// restricted to the named part. Unknown parts yield an empty mask (caught
/// by verification), unknown objects an error.
pub fn segment(
    prompt: &RegionPrompt,
    scene: &ScenePointCloud,
    registry: &ObjectRegistry,
) -> Result<RegionMask, GroundingError> {
    let (oid, info) = registry.by_name(&prompt.object).ok_or_else(|| {
        GroundingError::UnknownObject {
            word: prompt.object.clone(),
            suggestions: nearest(&prompt.object, registry.names().iter().map(|s| s.to_string()), 3),
        }
    })?;
    let part_id = prompt.part.as_deref().map(|p| info.part_id(p).unwrap_or(-1));
    let indices = scene
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &(o, p))| o == oid && part_id.map_or(true, |pid| pid == p))
        .map(|(i, _)| i)
        .collect();
    Ok(RegionMask { prompt: prompt.clone(), indices })
}

// ---------------------------------------------------------------------------
// verification

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyReason {
    Empty,
    TooFew { n: usize, n_min: usize },
    NotCompact { ratio: f64, kappa: f64 },
    NotOnMovingSide { fraction: f64 },
    NotGraspable { object: String },
}

impl std::fmt::Display for VerifyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VerifyReason::Empty => write!(f, "empty mask"),
            VerifyReason::TooFew { n, n_min } => write!(f, "{n} points < minimum {n_min}"),
            VerifyReason::NotCompact { ratio, kappa } => {
                write!(f, "mask extent {ratio:.2}x object extent exceeds {kappa}")
            }
            VerifyReason::NotOnMovingSide { fraction } => {
                write!(f, "only {:.0}% of mask on the hinged side", fraction * 100.0)
            }
            VerifyReason::NotGraspable { object } => write!(f, "'{object}' is not graspable"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundingConfig {
    pub n_min: usize,
    pub kappa: f64,
    pub total_queries: usize,
    pub query_ratio: (usize, usize),
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig { n_min: 8, kappa: 1.2, total_queries: 128, query_ratio: (3, 1) }
    }
}

fn bbox_diag(points: impl Iterator<Item = Point3>) -> f64 {
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    if hi.x < lo.x {
        return 0.0;
    }
    hi.sub(&lo).norm()
}

/// Size, compactness, and per-action functional checks on a segmented mask.
pub fn verify(
    mask: &RegionMask,
    role: &'static str,
    action: Affordance,
    scene: &ScenePointCloud,
    registry: &ObjectRegistry,
    cfg: &GroundingConfig,
) -> Result<(), VerifyReason> {
    if mask.indices.is_empty() {
        return Err(VerifyReason::Empty);
    }
    if mask.indices.len() < cfg.n_min {
        return Err(VerifyReason::TooFew { n: mask.indices.len(), n_min: cfg.n_min });
    }
    let (oid, info) = registry
        .by_name(&mask.prompt.object)
        .expect("verified masks come from segment(), object exists");
    let mask_diag = bbox_diag(mask.indices.iter().map(|&i| scene.points[i]));
    let obj_diag = bbox_diag(
        scene
            .points
            .iter()
            .zip(&scene.labels)
            .filter(|(_, &(o, _))| o == oid)
            .map(|(p, _)| *p),
    );
    if obj_diag > 0.0 && mask_diag > cfg.kappa * obj_diag {
        return Err(VerifyReason::NotCompact { ratio: mask_diag / obj_diag, kappa: cfg.kappa });
    }
    match (role, action) {
        ("target", Affordance::Open) | ("target", Affordance::Close) => {
            if let Some(hinge) = &info.hinge {
                let on = mask
                    .indices
                    .iter()
                    .filter(|&&i| hinge.moving_parts.contains(&scene.labels[i].1))
                    .count();
                let fraction = on as f64 / mask.indices.len() as f64;
                if fraction < 0.9 {
                    return Err(VerifyReason::NotOnMovingSide { fraction });
                }
            }
        }
        ("target", Affordance::Pickup) | ("target", Affordance::Place) => {
            if !info.graspable {
                return Err(VerifyReason::NotGraspable { object: info.name.clone() });
            }
        }
        ("tool", a) if a.is_o2o() => {
            if !info.graspable {
                return Err(VerifyReason::NotGraspable { object: info.name.clone() });
            }
        }
        _ => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pipeline

pub struct GroundingRequest<'a> {
    pub raw_text: &'a str,
    pub scene: &'a ScenePointCloud,
    pub registry: &'a ObjectRegistry,
}

#[derive(Debug, Clone)]
pub struct GroundingResult {
    pub task: ParsedTask,
    pub tool_mask: RegionMask,
    pub target_mask: RegionMask,
    pub queries: SampledQueries,
    pub recovery_used: bool,
    pub report: Vec<String>,
}

fn ground_role(
    role: &'static str,
    prompt: &RegionPrompt,
    fallback: &RegionPrompt,
    action: Affordance,
    scene: &ScenePointCloud,
    registry: &ObjectRegistry,
    cfg: &GroundingConfig,
    report: &mut Vec<String>,
) -> Result<(RegionMask, bool), GroundingError> {
    let mask = segment(prompt, scene, registry)?;
    match verify(&mask, role, action, scene, registry, cfg) {
        Ok(()) => {
            report.push(format!("{role}: '{}' ok ({} pts)", prompt.describe(), mask.indices.len()));
            return Ok((mask, false));
        }
        Err(first) => {
            report.push(format!("{role}: '{}' rejected: {first}", prompt.describe()));
            if fallback == prompt {
                return Err(GroundingError::VerifyFailed {
                    role,
                    attempts: vec![format!("'{}': {first}", prompt.describe())],
                });
            }
            let retry = segment(fallback, scene, registry)?;
            match verify(&retry, role, action, scene, registry, cfg) {
                Ok(()) => {
                    report.push(format!(
                        "{role}: recovered with '{}' ({} pts)",
                        fallback.describe(),
                        retry.indices.len()
                    ));
                    Ok((retry, true))
                }
                Err(second) => Err(GroundingError::VerifyFailed {
                    role,
                    attempts: vec![
                        format!("'{}': {first}", prompt.describe()),
                        format!("'{}': {second}", fallback.describe()),
                    ],
                }),
            }
        }
    }
}

/// Full grounding pipeline: understand -> prompts -> segment -> verify (with
/// one object-level recovery per role) -> query sampling.
pub fn ground(
    req: &GroundingRequest,
    tables: &GroundingTables,
    cfg: &GroundingConfig,
    seed: u64,
) -> Result<GroundingResult, GroundingError> {
    let mut report = Vec::new();
    let task = understand_task(req.raw_text, req.registry, tables)?;
    report.push(format!(
        "task: {} tool={} target={}",
        task.action.as_str(),
        task.tool_desc,
        task.target_desc
    ));
    let prompts = parse_region_prompts(&task, tables);
    let (tool_mask, r1) = ground_role(
        "tool",
        &prompts.tool,
        &prompts.tool_fallback,
        task.action,
        req.scene,
        req.registry,
        cfg,
        &mut report,
    )?;
    let (target_mask, r2) = ground_role(
        "target",
        &prompts.target,
        &prompts.target_fallback,
        task.action,
        req.scene,
        req.registry,
        cfg,
        &mut report,
    )?;
    let queries = synth::sample_queries(
        req.scene,
        &tool_mask.indices,
        &target_mask.indices,
        cfg.total_queries,
        cfg.query_ratio,
        seed,
    )
    .map_err(|e: SynthError| GroundingError::QuerySampling(e.to_string()))?;
    Ok(GroundingResult {
        task,
        tool_mask,
        target_mask,
        queries,
        recovery_used: r1 || r2,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Instruction, ObjectInfo, PartInfo};
    use crate::synth::{generate_scene, SceneGenConfig};

    fn toy_registry() -> ObjectRegistry {
        let obj = |name: &str, parts: &[&str], graspable| ObjectInfo {
            name: name.into(),
            parts: parts.iter().map(|p| PartInfo { name: (*p).into() }).collect(),
            graspable,
            hinge: None,
        };
        ObjectRegistry::new(vec![
            obj("oven", &["body", "door", "handle"], true),
            obj("cup", &["body", "rim"], true),
            obj("knife", &["blade", "handle"], true),
            obj("apple", &["body"], false),
        ])
        .unwrap()
    }

    #[test]
    fn understand_both_templates() {
        let reg = toy_registry();
        let t = GroundingTables::default();
        let p = understand_task("open the oven", &reg, &t).unwrap();
        assert_eq!(p.action, Affordance::Open);
        assert_eq!(p.tool_desc, EXECUTOR_DESC);
        assert_eq!(p.target_desc, "oven");
        let p = understand_task("cut the apple with the knife", &reg, &t).unwrap();
        assert_eq!(p.action, Affordance::Cut);
        assert_eq!((p.tool_desc.as_str(), p.target_desc.as_str()), ("knife", "apple"));
        // generated instructions always parse back
        for a in Affordance::ALL {
            let ins = Instruction::new(a, "knife", "apple");
            let p = understand_task(&ins.raw_text, &reg, &t).unwrap();
            assert_eq!(p.action, a);
        }
    }

    #[test]
    fn understand_synonyms_and_errors() {
        let reg = toy_registry();
        let t = GroundingTables::default();
        assert_eq!(understand_task("grab the cup", &reg, &t).unwrap().action, Affordance::Pickup);
        assert_eq!(
            understand_task("slice the apple with the knife", &reg, &t).unwrap().action,
            Affordance::Cut
        );
        match understand_task("pckup the cup", &reg, &t) {
            Err(GroundingError::UnknownVerb { word, suggestions }) => {
                assert_eq!(word, "pckup");
                assert!(suggestions.contains(&"pickup".to_string()), "{suggestions:?}");
            }
            other => panic!("expected UnknownVerb, got {other:?}"),
        }
        match understand_task("open the ove", &reg, &t) {
            Err(GroundingError::UnknownObject { suggestions, .. }) => {
                assert_eq!(suggestions[0], "oven");
            }
            other => panic!("expected UnknownObject, got {other:?}"),
        }
        assert!(matches!(
            understand_task("open oven", &reg, &t),
            Err(GroundingError::BadTemplate(_))
        ));
        assert!(matches!(
            understand_task("cut the apple with knife", &reg, &t),
            Err(GroundingError::BadTemplate(_))
        ));
    }

    #[test]
    fn prompts_follow_part_table() {
        let t = GroundingTables::default();
        let task = ParsedTask {
            action: Affordance::Open,
            tool_desc: EXECUTOR_DESC.into(),
            target_desc: "oven".into(),
        };
        let p = parse_region_prompts(&task, &t);
        assert_eq!(p.target.describe(), "oven/handle");
        assert_eq!(p.target_fallback.describe(), "oven/whole");
        assert_eq!(p.tool.describe(), "executor/whole");
        let task = ParsedTask {
            action: Affordance::Pour,
            tool_desc: "cup".into(),
            target_desc: "bowl".into(),
        };
        let p = parse_region_prompts(&task, &t);
        assert_eq!(p.tool.describe(), "cup/rim");
        assert_eq!(p.target.describe(), "bowl/whole");
    }

    #[test]
    fn tables_extend_from_text() {
        let t = GroundingTables::from_kv_text(
            "# extra verbs\nsynonym.yank=pull\npart.target.pull=handle\n",
        )
        .unwrap();
        assert_eq!(t.synonyms["yank"], "pull");
        assert_eq!(t.part_map[&("target".to_string(), "pull".to_string())], "handle");
        assert!(GroundingTables::from_kv_text("nonsense line").is_err());
        assert!(GroundingTables::from_kv_text("part.widget.open=x").is_err());
    }

    #[test]
    fn segment_selects_labeled_part() {
        let gen = generate_scene(Affordance::Open, 4, &SceneGenConfig::default()).unwrap();
        let cloud = gen.cloud().unwrap();
        let prompt = RegionPrompt { object: "oven".into(), part: Some("handle".into()) };
        let mask = segment(&prompt, &cloud, &gen.registry).unwrap();
        assert!(!mask.indices.is_empty());
        let (oid, info) = gen.registry.by_name("oven").unwrap();
        let pid = info.part_id("handle").unwrap();
        for &i in &mask.indices {
            assert_eq!(cloud.labels[i], (oid, pid));
        }
        // unknown part -> empty mask, not an error
        let prompt = RegionPrompt { object: "oven".into(), part: Some("knob".into()) };
        assert!(segment(&prompt, &cloud, &gen.registry).unwrap().indices.is_empty());
        // unknown object -> error
        let prompt = RegionPrompt { object: "spaceship".into(), part: None };
        assert!(segment(&prompt, &cloud, &gen.registry).is_err());
    }

    #[test]
    fn verify_checks() {
        let gen = generate_scene(Affordance::Open, 4, &SceneGenConfig::default()).unwrap();
        let cloud = gen.cloud().unwrap();
        let cfg = GroundingConfig::default();
        let handle =
            segment(&RegionPrompt { object: "oven".into(), part: Some("handle".into()) }, &cloud, &gen.registry)
                .unwrap();
        assert!(verify(&handle, "target", Affordance::Open, &cloud, &gen.registry, &cfg).is_ok());
        // static body points are not on the moving side
        let body =
            segment(&RegionPrompt { object: "oven".into(), part: Some("body".into()) }, &cloud, &gen.registry)
                .unwrap();
        assert!(matches!(
            verify(&body, "target", Affordance::Open, &cloud, &gen.registry, &cfg),
            Err(VerifyReason::NotOnMovingSide { .. })
        ));
        // empty and too-small masks
        let empty = RegionMask { prompt: handle.prompt.clone(), indices: vec![] };
        assert_eq!(
            verify(&empty, "target", Affordance::Open, &cloud, &gen.registry, &cfg),
            Err(VerifyReason::Empty)
        );
        let tiny = RegionMask { prompt: handle.prompt.clone(), indices: handle.indices[..3].to_vec() };
        assert!(matches!(
            verify(&tiny, "target", Affordance::Open, &cloud, &gen.registry, &cfg),
            Err(VerifyReason::TooFew { n: 3, .. })
        ));
        // non-graspable pickup target
        let gen2 = generate_scene(Affordance::Cut, 4, &SceneGenConfig::default()).unwrap();
        let cloud2 = gen2.cloud().unwrap();
        let apple =
            segment(&RegionPrompt { object: "apple".into(), part: None }, &cloud2, &gen2.registry)
                .unwrap();
        assert!(matches!(
            verify(&apple, "target", Affordance::Pickup, &cloud2, &gen2.registry, &GroundingConfig::default()),
            Err(VerifyReason::NotGraspable { .. })
        ));
    }

    #[test]
    fn ground_end_to_end_single_object() {
        let gen = generate_scene(Affordance::Open, 8, &SceneGenConfig::default()).unwrap();
        let cloud = gen.cloud().unwrap();
        let res = ground(
            &GroundingRequest {
                raw_text: &gen.instruction.raw_text,
                scene: &cloud,
                registry: &gen.registry,
            },
            &GroundingTables::default(),
            &GroundingConfig::default(),
            5,
        )
        .unwrap();
        assert!(!res.recovery_used);
        assert_eq!(res.queries.set.tool.len(), 96);
        assert_eq!(res.queries.set.target.len(), 32);
        let (exec_id, _) = gen.registry.by_name(EXECUTOR_DESC).unwrap();
        for &i in &res.queries.tool_indices {
            assert_eq!(cloud.labels[i].0, exec_id);
        }
        let (oid, info) = gen.registry.by_name("oven").unwrap();
        let pid = info.part_id("handle").unwrap();
        for &i in &res.queries.target_indices {
            assert_eq!(cloud.labels[i], (oid, pid));
        }
        // deterministic per seed
        let res2 = ground(
            &GroundingRequest {
                raw_text: &gen.instruction.raw_text,
                scene: &cloud,
                registry: &gen.registry,
            },
            &GroundingTables::default(),
            &GroundingConfig::default(),
            5,
        )
        .unwrap();
        assert_eq!(res.queries.set, res2.queries.set);
    }

    #[test]
    fn ground_recovers_to_whole_object() {
        // part table asks for a part the registry object does not have, so
        // the first segmentation is empty and recovery falls back to the
        // whole object
        let gen = generate_scene(Affordance::Press, 8, &SceneGenConfig::default()).unwrap();
        let cloud = gen.cloud().unwrap();
        let tables = GroundingTables::from_kv_text("part.target.press=lever").unwrap();
        let res = ground(
            &GroundingRequest {
                raw_text: &gen.instruction.raw_text,
                scene: &cloud,
                registry: &gen.registry,
            },
            &tables,
            &GroundingConfig::default(),
            5,
        )
        .unwrap();
        assert!(res.recovery_used);
        assert_eq!(res.target_mask.prompt.describe(), "device/whole");
        assert!(res.report.iter().any(|l| l.contains("recovered")));
    }

    #[test]
    fn ground_double_failure_is_error() {
        // a pickup instruction aimed at a non-graspable object fails both
        // the part attempt and the object-level recovery
        let gen = generate_scene(Affordance::Cut, 8, &SceneGenConfig::default()).unwrap();
        let cloud = gen.cloud().unwrap();
        let err = ground(
            &GroundingRequest {
                raw_text: "pickup the apple",
                scene: &cloud,
                registry: &gen.registry,
            },
            &GroundingTables::default(),
            &GroundingConfig::default(),
            5,
        )
        .unwrap_err();
        match err {
            GroundingError::VerifyFailed { role, attempts } => {
                assert_eq!(role, "target");
                assert!(!attempts.is_empty());
            }
            other => panic!("expected VerifyFailed, got {other:?}"),
        }
    }
}
