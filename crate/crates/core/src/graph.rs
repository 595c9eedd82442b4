//! Event graph and transition paths.
//!
//! Events are free-text nodes (normalized to lowercase with collapsed
//! whitespace); edges carry relation labels. Reverse augmentation adds a
//! mirrored edge with a "_"-prefixed label for every edge, after which the
//! graph is closed under reversal and walks can traverse edges in both
//! directions. Paths alternate event, relation, event, ... and may carry a
//! split marker separating the observed prefix r_x from the continuation
//! r_y, which is empty or begins with a relation.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("graph io: {0}")]
    Io(#[from] std::io::Error),

    #[error("graph file line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("relation label `{0}` already begins with '_': graph is partially reverse-marked")]
    LabelCollision(String),

    #[error("graph is not reverse-augmented; apply augmentation before sampling")]
    NotAugmented,

    #[error("no event has outgoing edges; nothing to walk")]
    NoEligibleStart,

    #[error("hop bounds invalid: want 1 <= min <= max, got [{0}, {1}]")]
    BadHops(usize, usize),

    #[error("cannot split {0} paths: at least 20 required")]
    TooFewPaths(usize),

    #[error("split ratio parts must all be positive")]
    BadRatio,

    #[error("path format: {0}")]
    PathFormat(String),

    #[error("path file line {line}: {msg}")]
    PathFile { line: usize, msg: String },
}

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Edge {
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
}

#[derive(Clone, Debug, Default)]
pub struct EventGraph {
    events: Vec<String>,
    event_ids: HashMap<String, u32>,
    relations: Vec<String>,
    relation_ids: HashMap<String, u32>,
    edges: Vec<Edge>,
    edge_set: HashSet<(u32, u32, u32)>,
    out: Vec<Vec<u32>>,
}

/// Lowercase with single spaces; the canonical event form everywhere.
pub fn normalize_event(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn reverse_label(label: &str) -> String {
    match label.strip_prefix('_') {
        Some(base) => base.to_string(),
        None => format!("_{label}"),
    }
}

impl EventGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn event_text(&self, id: u32) -> &str {
        &self.events[id as usize]
    }

    pub fn relation_label(&self, id: u32) -> &str {
        &self.relations[id as usize]
    }

    pub fn relation_labels(&self) -> Vec<String> {
        self.relations.clone()
    }

    /// Labels that do not carry the reverse marker.
    pub fn forward_relation_labels(&self) -> Vec<String> {
        self.relations.iter().filter(|r| !r.starts_with('_')).cloned().collect()
    }

    pub fn intern_event(&mut self, text: &str) -> u32 {
        let norm = normalize_event(text);
        if let Some(&id) = self.event_ids.get(&norm) {
            return id;
        }
        let id = self.events.len() as u32;
        self.events.push(norm.clone());
        self.event_ids.insert(norm, id);
        self.out.push(Vec::new());
        id
    }

    pub fn intern_relation(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.relation_ids.get(label) {
            return id;
        }
        let id = self.relations.len() as u32;
        self.relations.push(label.to_string());
        self.relation_ids.insert(label.to_string(), id);
        id
    }

    /// Adds one edge; duplicates are dropped. Returns whether it was new.
    pub fn add_triple(&mut self, head: &str, rel: &str, tail: &str) -> bool {
        let h = self.intern_event(head);
        let r = self.intern_relation(rel);
        let t = self.intern_event(tail);
        self.add_edge_ids(h, r, t)
    }

    fn add_edge_ids(&mut self, h: u32, r: u32, t: u32) -> bool {
        if !self.edge_set.insert((h, r, t)) {
            return false;
        }
        self.out[h as usize].push(self.edges.len() as u32);
        self.edges.push(Edge { head: h, rel: r, tail: t });
        true
    }

    pub fn has_edge(&self, head: &str, rel: &str, tail: &str) -> bool {
        let (Some(&h), Some(&r), Some(&t)) = (
            self.event_ids.get(&normalize_event(head)),
            self.relation_ids.get(rel),
            self.event_ids.get(&normalize_event(tail)),
        ) else {
            return false;
        };
        self.edge_set.contains(&(h, r, t))
    }

    /// TAB-separated `head<TAB>relation<TAB>tail` per line. Blank lines are
    /// skipped; anything else malformed is reported with its line number.
    pub fn load(path: &Path) -> Result<EventGraph> {
        let text = std::fs::read_to_string(path)?;
        let mut g = EventGraph::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(GraphError::Parse {
                    line: lineno,
                    msg: format!("expected 3 TAB-separated fields, got {}", fields.len()),
                });
            }
            let (h, r, t) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if h.is_empty() || r.is_empty() || t.is_empty() {
                return Err(GraphError::Parse {
                    line: lineno,
                    msg: "empty field".into(),
                });
            }
            g.add_triple(h, r, t);
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.events[e.head as usize], self.relations[e.rel as usize], self.events[e.tail as usize]
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// True when the relation vocabulary pairs every label with its reverse
    /// and every edge has its mirrored twin; the state augmentation leaves
    /// behind.
    pub fn is_reverse_closed(&self) -> bool {
        if self.edges.is_empty() {
            return false;
        }
        for label in &self.relations {
            if !self.relation_ids.contains_key(&reverse_label(label)) {
                return false;
            }
        }
        for e in &self.edges {
            let rev = reverse_label(&self.relations[e.rel as usize]);
            let rev_id = self.relation_ids[&rev];
            if !self.edge_set.contains(&(e.tail, rev_id, e.head)) {
                return false;
            }
        }
        true
    }

    /// Adds the mirrored edge with a "_"-prefixed label for every edge.
    /// Idempotent: an already closed graph passes through unchanged. A graph
    /// that carries stray "_" labels without being closed is rejected, since
    /// prefixing those again would corrupt the label scheme.
    pub fn augment_reverse(mut self) -> Result<EventGraph> {
        if self.is_reverse_closed() {
            return Ok(self);
        }
        if let Some(bad) = self.relations.iter().find(|r| r.starts_with('_')) {
            return Err(GraphError::LabelCollision(bad.clone()));
        }
        let originals = self.edges.clone();
        for e in originals {
            let rev = reverse_label(&self.relations[e.rel as usize]);
            let rev_id = self.intern_relation(&rev);
            self.add_edge_ids(e.tail, rev_id, e.head);
        }
        Ok(self)
    }

    fn reverse_rel_id(&self, rel: u32) -> Option<u32> {
        self.relation_ids
            .get(&reverse_label(&self.relations[rel as usize]))
            .copied()
    }

    /// Uniform random walks: uniform start among events with outgoing
    /// edges, uniform hop target in [hop_min, hop_max], uniform edge choice
    /// at each step, never immediately re-traversing the edge just taken in
    /// reverse. A walk that dead-ends restarts from scratch, up to 10 times,
    /// after which that sample is skipped. Each sample draws from its own
    /// derived stream, so results are a pure function of (graph, seed).
    pub fn sample_paths(
        &self,
        n: usize,
        hop_min: usize,
        hop_max: usize,
        seed: u64,
    ) -> Result<Vec<TransitionPath>> {
        if hop_min < 1 || hop_min > hop_max {
            return Err(GraphError::BadHops(hop_min, hop_max));
        }
        if !self.is_reverse_closed() {
            return Err(GraphError::NotAugmented);
        }
        let starts: Vec<u32> = (0..self.events.len() as u32)
            .filter(|&e| !self.out[e as usize].is_empty())
            .collect();
        if starts.is_empty() {
            return Err(GraphError::NoEligibleStart);
        }
        let root = SeededRng::new(seed);
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = root.derive(i as u64);
            let hops = rng.range_inclusive(hop_min, hop_max);
            if let Some(p) = self.one_walk(&starts, hops, &mut rng) {
                paths.push(p);
            }
        }
        Ok(paths)
    }

    fn one_walk(&self, starts: &[u32], hops: usize, rng: &mut SeededRng) -> Option<TransitionPath> {
        'attempt: for _ in 0..10 {
            let mut cur = starts[rng.below(starts.len())];
            let mut events = vec![self.events[cur as usize].clone()];
            let mut relations = Vec::with_capacity(hops);
            let mut last: Option<Edge> = None;
            for _ in 0..hops {
                let forbidden = last.and_then(|e| {
                    self.reverse_rel_id(e.rel).map(|rev| (e.head, rev))
                });
                let choices: Vec<u32> = self.out[cur as usize]
                    .iter()
                    .copied()
                    .filter(|&ei| {
                        let e = self.edges[ei as usize];
                        forbidden != Some((e.tail, e.rel))
                    })
                    .collect();
                if choices.is_empty() {
                    continue 'attempt;
                }
                let e = self.edges[choices[rng.below(choices.len())] as usize];
                relations.push(self.relations[e.rel as usize].clone());
                events.push(self.events[e.tail as usize].clone());
                cur = e.tail;
                last = Some(e);
            }
            return Some(TransitionPath::new(events, relations).expect("walk output alternates"));
        }
        None
    }

    /// True when every consecutive (event, relation, event) triple of the
    /// path is an edge of this graph.
    pub fn contains_path(&self, path: &TransitionPath) -> bool {
        for i in 0..path.hops() {
            if !self.has_edge(&path.events()[i], &path.relations()[i], &path.events()[i + 1]) {
                return false;
            }
        }
        !path.events().is_empty()
            && path.events().iter().all(|e| self.event_ids.contains_key(&normalize_event(e)))
    }
}

/// Seeded shuffle, then a floor-then-distribute partition: each part gets
/// the floor of its proportional share and leftover items go to the parts
/// with the largest fractional remainders (ties to the earlier part).
pub fn split_paths(
    paths: Vec<TransitionPath>,
    ratio: (u64, u64, u64),
    seed: u64,
) -> Result<(Vec<TransitionPath>, Vec<TransitionPath>, Vec<TransitionPath>)> {
    if ratio.0 == 0 || ratio.1 == 0 || ratio.2 == 0 {
        return Err(GraphError::BadRatio);
    }
    if paths.len() < 20 {
        return Err(GraphError::TooFewPaths(paths.len()));
    }
    let n = paths.len() as u64;
    let w = [ratio.0, ratio.1, ratio.2];
    let total: u64 = w.iter().sum();
    let mut sizes = [0usize; 3];
    let mut fracs = [0u64; 3];
    for i in 0..3 {
        sizes[i] = ((n * w[i]) / total) as usize;
        fracs[i] = (n * w[i]) % total;
    }
    let mut leftover = paths.len() - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&i| (std::cmp::Reverse(fracs[i]), i));
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }

    let mut shuffled = paths;
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut shuffled);
    let valid = shuffled.split_off(sizes[0] + sizes[1]);
    let mid = shuffled.split_off(sizes[0]);
    Ok((shuffled, mid, valid))
}

// ── Transition paths ─────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PathStyle {
    /// Relations as bracketed tokens: "e0 [xAttr] e1". Model-facing; also
    /// the file form, since it parses without a relation vocabulary.
    Bracketed,
    /// Relations as bare labels: "e0 xAttr e1". Human-facing; parsing needs
    /// the relation vocabulary to tell labels from event words.
    Bare,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TransitionPath {
    events: Vec<String>,
    relations: Vec<String>,
    /// Number of leading events in the observed part r_x; None when the
    /// path carries no split.
    observed: Option<usize>,
}

impl TransitionPath {
    pub fn new(events: Vec<String>, relations: Vec<String>) -> Result<Self> {
        if events.is_empty() {
            return Err(GraphError::PathFormat("path needs at least one event".into()));
        }
        if relations.len() + 1 != events.len() {
            return Err(GraphError::PathFormat(format!(
                "alternation broken: {} events need {} relations, got {}",
                events.len(),
                events.len() - 1,
                relations.len()
            )));
        }
        if events.iter().any(|e| e.trim().is_empty()) || relations.iter().any(|r| r.trim().is_empty()) {
            return Err(GraphError::PathFormat("empty event or relation".into()));
        }
        Ok(TransitionPath {
            events,
            relations,
            observed: None,
        })
    }

    pub fn with_split(events: Vec<String>, relations: Vec<String>, observed: usize) -> Result<Self> {
        let mut p = Self::new(events, relations)?;
        if observed == 0 || observed > p.events.len() {
            return Err(GraphError::PathFormat(format!(
                "split marker {observed} out of range for {} events",
                p.events.len()
            )));
        }
        p.observed = Some(observed);
        Ok(p)
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    pub fn observed(&self) -> Option<usize> {
        self.observed
    }

    pub fn set_split(&mut self, observed: usize) -> Result<()> {
        if observed == 0 || observed > self.events.len() {
            return Err(GraphError::PathFormat(format!(
                "split marker {observed} out of range for {} events",
                self.events.len()
            )));
        }
        self.observed = Some(observed);
        Ok(())
    }

    pub fn without_split(mut self) -> Self {
        self.observed = None;
        self
    }

    fn rel_token(label: &str, style: PathStyle) -> String {
        match style {
            PathStyle::Bracketed => format!("[{label}]"),
            PathStyle::Bare => label.to_string(),
        }
    }

    pub fn serialize(&self, style: PathStyle) -> String {
        let mut parts = vec![self.events[0].clone()];
        for (rel, ev) in self.relations.iter().zip(self.events.iter().skip(1)) {
            parts.push(Self::rel_token(rel, style));
            parts.push(ev.clone());
        }
        parts.join(" ")
    }

    /// Observed prefix, present only when the path carries a split.
    pub fn serialize_rx(&self, style: PathStyle) -> Option<String> {
        let k = self.observed?;
        let mut parts = vec![self.events[0].clone()];
        for i in 1..k {
            parts.push(Self::rel_token(&self.relations[i - 1], style));
            parts.push(self.events[i].clone());
        }
        Some(parts.join(" "))
    }

    /// Continuation after the split: empty when everything is observed,
    /// otherwise it begins with a relation token.
    pub fn serialize_ry(&self, style: PathStyle) -> Option<String> {
        let k = self.observed?;
        let mut parts = Vec::new();
        for i in k..self.events.len() {
            parts.push(Self::rel_token(&self.relations[i - 1], style));
            parts.push(self.events[i].clone());
        }
        Some(parts.join(" "))
    }
}

/// Classifies one whitespace token against the relation vocabulary.
fn token_kind(tok: &str, relations: &[String]) -> Result<Option<String>> {
    if let Some(inner) = tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
        if relations.iter().any(|r| r == inner) {
            return Ok(Some(inner.to_string()));
        }
        return Err(GraphError::PathFormat(format!("unknown relation token `{tok}`")));
    }
    if relations.iter().any(|r| r == tok) {
        return Ok(Some(tok.to_string()));
    }
    Ok(None)
}

/// Parses either serialized style. Events are normalized; strict
/// alternation is enforced: the text must start with an event, relations
/// must be followed by events, and it must not end on a relation.
pub fn parse_path(text: &str, relations: &[String]) -> Result<TransitionPath> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.is_empty() {
        return Err(GraphError::PathFormat("empty path text".into()));
    }
    let mut events: Vec<String> = Vec::new();
    let mut rels: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in toks {
        match token_kind(tok, relations)? {
            Some(rel) => {
                if current.is_empty() {
                    return Err(GraphError::PathFormat(if events.is_empty() {
                        format!("path must begin with an event, got relation `{rel}`")
                    } else {
                        format!("two relations in a row at `{rel}`")
                    }));
                }
                events.push(normalize_event(&current.join(" ")));
                current.clear();
                rels.push(rel);
            }
            None => current.push(tok.to_string()),
        }
    }
    if current.is_empty() {
        return Err(GraphError::PathFormat("path ends on a relation".into()));
    }
    events.push(normalize_event(&current.join(" ")));
    TransitionPath::new(events, rels)
}

/// Parses an (r_x, r_y) pair into one path with a split marker. `ry_text`
/// may be empty; otherwise it must begin with a relation token.
pub fn parse_pair(rx_text: &str, ry_text: &str, relations: &[String]) -> Result<TransitionPath> {
    let rx = parse_path(rx_text, relations)?;
    let observed = rx.events.len();
    let mut events = rx.events;
    let mut rels = rx.relations;
    if !ry_text.trim().is_empty() {
        let toks: Vec<&str> = ry_text.split_whitespace().collect();
        match token_kind(toks[0], relations)? {
            Some(_) => {}
            None => {
                return Err(GraphError::PathFormat(format!(
                    "continuation must begin with a relation, got `{}`",
                    toks[0]
                )))
            }
        }
        let mut pending_rel: Option<String> = None;
        let mut current: Vec<String> = Vec::new();
        for tok in toks {
            match token_kind(tok, relations)? {
                Some(rel) => {
                    match (pending_rel.take(), current.is_empty()) {
                        (None, true) => pending_rel = Some(rel),
                        (None, false) => {
                            events.push(normalize_event(&current.join(" ")));
                            current.clear();
                            pending_rel = Some(rel);
                        }
                        (Some(r), _) => {
                            return Err(GraphError::PathFormat(format!(
                                "two relations in a row at `{r} {rel}`"
                            )))
                        }
                    }
                    rels.push(pending_rel.clone().unwrap());
                }
                None => {
                    if pending_rel.take().is_none() && current.is_empty() && events.len() == observed {
                        unreachable!("first token checked to be a relation");
                    }
                    current.push(tok.to_string());
                }
            }
        }
        if current.is_empty() {
            return Err(GraphError::PathFormat("continuation ends on a relation".into()));
        }
        events.push(normalize_event(&current.join(" ")));
        if rels.len() + 1 != events.len() {
            return Err(GraphError::PathFormat("two relations in a row in continuation".into()));
        }
    }
    TransitionPath::with_split(events, rels, observed)
}

// ── Path files ───────────────────────────────────────────────────────────

/// One path per line in bracketed form. Paths with a split are written as
/// two TAB-separated columns `r_x<TAB>r_y` (r_y may be empty); paths
/// without one as a single column.
pub fn write_paths(path: &Path, paths: &[TransitionPath]) -> Result<()> {
    let mut out = String::new();
    for p in paths {
        match p.observed() {
            Some(_) => {
                out.push_str(&p.serialize_rx(PathStyle::Bracketed).unwrap());
                out.push('\t');
                out.push_str(&p.serialize_ry(PathStyle::Bracketed).unwrap());
            }
            None => out.push_str(&p.serialize(PathStyle::Bracketed)),
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_paths(path: &Path, relations: &[String]) -> Result<Vec<TransitionPath>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match line.split_once('\t') {
            Some((rx, ry)) => parse_pair(rx, ry, relations),
            None => parse_path(line, relations),
        };
        match parsed {
            Ok(p) => out.push(p),
            Err(e) => {
                return Err(GraphError::PathFile {
                    line: lineno,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
