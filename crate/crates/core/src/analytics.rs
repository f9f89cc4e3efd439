//! Saturation metrics and the data behind the visualizations.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::artifacts::{self, SATURATION_FILE};
use crate::phase::Phase;
use crate::pipeline::PipelineError;
use crate::reduction::{Codebook, UniqueCode};
use crate::store::ProjectStore;
use crate::themes::{self, ThemeBook};

pub const UNASSIGNED_THEME: &str = "Unassigned";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("the codebook is empty")]
    EmptyCodebook,
    #[error("no reduction has been run for this project")]
    NoReductionYet,
    #[error("no themes have been generated for this project")]
    NoThemesYet,
    #[error("invalid level order: {0}")]
    InvalidLevelOrder(String),
    #[error("at least two themes are needed for an overlap matrix")]
    FewerThanTwoThemes,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<crate::store::StoreError> for AnalyticsError {
    fn from(e: crate::store::StoreError) -> Self {
        AnalyticsError::Pipeline(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationPoint {
    pub step: u32,
    pub cumulative_total: u64,
    pub cumulative_unique: u64,
}

/// Unique over total codes.
pub fn its(unique: u64, total: u64) -> Result<f64, AnalyticsError> {
    if total == 0 {
        return Err(AnalyticsError::EmptyCodebook);
    }
    Ok(unique as f64 / total as f64)
}

pub fn compute_its(book: &Codebook) -> Result<f64, AnalyticsError> {
    its(book.unique_count(), book.total_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u32,
    pub total: u64,
    pub unique: u64,
    /// `None` while no code has been folded yet.
    pub its: Option<f64>,
}

pub fn series_from_points(points: &[SaturationPoint]) -> Vec<SeriesPoint> {
    points
        .iter()
        .map(|p| SeriesPoint {
            step: p.step,
            total: p.cumulative_total,
            unique: p.cumulative_unique,
            its: its(p.cumulative_unique, p.cumulative_total).ok(),
        })
        .collect()
}

pub fn build_saturation_series(store: &ProjectStore, project: &str) -> Result<Vec<SeriesPoint>, AnalyticsError> {
    if !store.artifact_exists(project, Phase::Reduction, SATURATION_FILE)? {
        return Err(AnalyticsError::NoReductionYet);
    }
    let bytes = store.read_artifact(project, Phase::Reduction, SATURATION_FILE)?;
    let points = artifacts::read_saturation(&bytes).map_err(PipelineError::from)?;
    Ok(series_from_points(&points))
}

fn theme_book(store: &ProjectStore, project: &str) -> Result<ThemeBook, AnalyticsError> {
    themes::load_theme_book(store, project)?.ok_or(AnalyticsError::NoThemesYet)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Theme,
    UniqueCode,
    InitialCode,
    Quote,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Theme, Level::UniqueCode, Level::InitialCode, Level::Quote];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Theme => "theme",
            Level::UniqueCode => "unique_code",
            Level::InitialCode => "initial_code",
            Level::Quote => "quote",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| AnalyticsError::InvalidLevelOrder(format!("unknown level `{s}`")))
    }
}

/// Parses a comma-separated level list such as `theme,unique_code`.
pub fn parse_levels(list: &str) -> Result<Vec<Level>, AnalyticsError> {
    let levels = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>, _>>()?;
    validate_levels(&levels)?;
    Ok(levels)
}

pub fn validate_levels(levels: &[Level]) -> Result<(), AnalyticsError> {
    if levels.is_empty() {
        return Err(AnalyticsError::InvalidLevelOrder("no levels given".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        let listed: Vec<_> = levels.iter().map(|l| l.as_str()).collect();
        return Err(AnalyticsError::InvalidLevelOrder(format!(
            "`{}` must follow theme > unique_code > initial_code > quote without repeats",
            listed.join(",")
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLevel {
    Root,
    Theme,
    UniqueCode,
    InitialCode,
    Quote,
}

impl From<Level> for NodeLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Theme => NodeLevel::Theme,
            Level::UniqueCode => NodeLevel::UniqueCode,
            Level::InitialCode => NodeLevel::InitialCode,
            Level::Quote => NodeLevel::Quote,
        }
    }
}

/// A node of the sunburst/treemap/icicle tree. Weights count quotes: a
/// quote leaf weighs 1 and any other node the quotes beneath it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub level: NodeLevel,
    pub label: String,
    pub weight: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<HierarchyNode>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyFilter {
    /// Theme names to keep; `None` keeps all.
    pub themes: Option<BTreeSet<String>>,
    /// Unique code names to keep; `None` keeps all.
    pub codes: Option<BTreeSet<String>>,
}

/// One quote under its full path, the unit every view aggregates.
struct QuotePath<'a> {
    theme: &'a str,
    code: &'a UniqueCode,
    member: usize,
}

/// Themes with their codes, plus the synthetic unassigned group.
pub fn theme_groups(book: &ThemeBook) -> Vec<(&str, Vec<&UniqueCode>)> {
    let code = |uid: &String| book.codebook.get(uid).expect("theme members come from the codebook");
    let mut groups: Vec<(&str, Vec<&UniqueCode>)> = book
        .themes
        .iter()
        .map(|t| (t.theme_name.as_str(), t.member_uids.iter().map(code).collect()))
        .collect();
    if !book.unassigned_uids.is_empty() {
        groups.push((UNASSIGNED_THEME, book.unassigned_uids.iter().map(code).collect()));
    }
    groups
}

fn quote_paths<'a>(book: &'a ThemeBook, filter: &HierarchyFilter) -> Vec<QuotePath<'a>> {
    let mut out = Vec::new();
    for (theme, codes) in theme_groups(book) {
        if filter.themes.as_ref().is_some_and(|keep| !keep.contains(theme)) {
            continue;
        }
        for code in codes {
            if filter.codes.as_ref().is_some_and(|keep| !keep.contains(&code.name)) {
                continue;
            }
            for member in 0..code.members.len() {
                out.push(QuotePath { theme, code, member });
            }
        }
    }
    out
}

fn key_for(path: &QuotePath<'_>, level: Level) -> (String, String) {
    // (grouping key, display label)
    match level {
        Level::Theme => (path.theme.to_string(), path.theme.to_string()),
        Level::UniqueCode => (path.code.uid.clone(), path.code.name.clone()),
        Level::InitialCode => {
            let m = &path.code.members[path.member];
            (format!("{}/{}#{}", path.code.uid, m.source_doc, m.row_index), m.code_name.clone())
        }
        Level::Quote => {
            let m = &path.code.members[path.member];
            (
                format!("{}/{}#{}", path.code.uid, m.source_doc, m.row_index),
                path.code.quotes[path.member].quote.clone(),
            )
        }
    }
}

fn build_level(paths: &[&QuotePath<'_>], levels: &[Level]) -> Vec<HierarchyNode> {
    let Some((&level, deeper)) = levels.split_first() else {
        return Vec::new();
    };
    // group preserving first-seen order
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&QuotePath<'_>>> = BTreeMap::new();
    for p in paths {
        let (key, label) = key_for(p, level);
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push((key, label));
        }
        entry.push(p);
    }
    order
        .into_iter()
        .map(|(key, label)| {
            let members = &groups[&key];
            let children = build_level(members, deeper);
            HierarchyNode {
                level: level.into(),
                label,
                weight: members.len() as u64,
                children,
            }
        })
        .collect()
}

/// Builds the hierarchy over the requested levels. Levels left out are
/// skipped with their children spliced upward; filters prune before
/// weights are computed.
pub fn hierarchy_from(book: &ThemeBook, levels: &[Level], filter: &HierarchyFilter) -> Result<HierarchyNode, AnalyticsError> {
    validate_levels(levels)?;
    let paths = quote_paths(book, filter);
    let refs: Vec<&QuotePath<'_>> = paths.iter().collect();
    Ok(HierarchyNode {
        level: NodeLevel::Root,
        label: "root".into(),
        weight: refs.len() as u64,
        children: build_level(&refs, levels),
    })
}

pub fn build_hierarchy(
    store: &ProjectStore,
    project: &str,
    levels: &[Level],
    filter: &HierarchyFilter,
) -> Result<HierarchyNode, AnalyticsError> {
    validate_levels(levels)?;
    hierarchy_from(&theme_book(store, project)?, levels, filter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStage {
    InitialToUnique,
    UniqueToTheme,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from_label: String,
    pub to_label: String,
    pub stage: FlowStage,
    pub weight: u64,
}

/// Sankey edges: initial code name to unique code, unique code to theme
/// (unassigned codes flow to the synthetic unassigned theme).
pub fn flows_from(book: &ThemeBook) -> Vec<FlowEdge> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (theme, codes) in theme_groups(book) {
        for code in codes {
            let mut by_name: Vec<(String, u64)> = Vec::new();
            for m in &code.members {
                match by_name.iter_mut().find(|(n, _)| *n == m.code_name) {
                    Some((_, w)) => *w += 1,
                    None => by_name.push((m.code_name.clone(), 1)),
                }
            }
            first.extend(by_name.into_iter().map(|(name, weight)| FlowEdge {
                from_label: name,
                to_label: code.name.clone(),
                stage: FlowStage::InitialToUnique,
                weight,
            }));
            second.push(FlowEdge {
                from_label: code.name.clone(),
                to_label: theme.to_string(),
                stage: FlowStage::UniqueToTheme,
                weight: code.members.len() as u64,
            });
        }
    }
    first.extend(second);
    first
}

pub fn build_flows(store: &ProjectStore, project: &str) -> Result<Vec<FlowEdge>, AnalyticsError> {
    Ok(flows_from(&theme_book(store, project)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub themes: Vec<String>,
    /// `matrix[i][j]` is the Jaccard similarity of the member-code-name
    /// token sets of themes `i` and `j`.
    pub matrix: Vec<Vec<f64>>,
}

pub fn name_tokens(name: &str) -> HashSet<String> {
    name.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn overlap_from(book: &ThemeBook) -> Result<OverlapMatrix, AnalyticsError> {
    if book.themes.len() < 2 {
        return Err(AnalyticsError::FewerThanTwoThemes);
    }
    let sets: Vec<HashSet<String>> = book
        .themes
        .iter()
        .map(|t| {
            t.member_uids
                .iter()
                .filter_map(|u| book.codebook.get(u))
                .flat_map(|c| name_tokens(&c.name))
                .collect()
        })
        .collect();
    let n = sets.len();
    let matrix = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { jaccard(&sets[i], &sets[j]) }).collect())
        .collect();
    Ok(OverlapMatrix {
        themes: book.themes.iter().map(|t| t.theme_name.clone()).collect(),
        matrix,
    })
}

pub fn build_overlap(store: &ProjectStore, project: &str) -> Result<OverlapMatrix, AnalyticsError> {
    overlap_from(&theme_book(store, project)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiderEntry {
    pub theme_name: String,
    pub member_count: u64,
    pub quote_count: u64,
    pub document_count: u64,
}

/// Per-theme summary vector for the spider diagram.
pub fn spider_from(book: &ThemeBook) -> Vec<SpiderEntry> {
    book.themes
        .iter()
        .map(|t| {
            let codes: Vec<&UniqueCode> = t.member_uids.iter().filter_map(|u| book.codebook.get(u)).collect();
            let docs: HashSet<_> = codes.iter().flat_map(|c| c.quotes.iter().map(|q| q.source_doc)).collect();
            SpiderEntry {
                theme_name: t.theme_name.clone(),
                member_count: codes.len() as u64,
                quote_count: codes.iter().map(|c| c.quotes.len() as u64).sum(),
                document_count: docs.len() as u64,
            }
        })
        .collect()
}

pub fn build_spider(store: &ProjectStore, project: &str) -> Result<Vec<SpiderEntry>, AnalyticsError> {
    Ok(spider_from(&theme_book(store, project)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::AssignedPass;
    use crate::reduction::{Member, QuoteRef};
    use crate::store::DocId;
    use crate::themes::{Theme, ThemeOptions};
    use proptest::prelude::*;

    fn unique(uid: &str, name: &str, members: usize, doc: u32) -> UniqueCode {
        UniqueCode {
            uid: uid.into(),
            name: name.into(),
            description: "d".into(),
            quotes: (0..members)
                .map(|i| QuoteRef {
                    quote: format!("{name} quote {i}"),
                    source_doc: DocId(doc + i as u32 % 2),
                })
                .collect(),
            members: (0..members)
                .map(|i| Member {
                    source_doc: DocId(doc + i as u32 % 2),
                    row_index: i,
                    code_name: format!("{name} initial {}", i % 2),
                })
                .collect(),
            merge_explanations: vec![],
            created_step: 1,
        }
    }

    fn codebook(codes: Vec<UniqueCode>) -> Codebook {
        let mut book: Codebook = serde_json::from_value(serde_json::json!({
            "unique": [], "total_count": 0, "step_index": 1, "next_uid": 0, "folded_tables": [], "series": []
        }))
        .unwrap();
        book.total_count = codes.iter().map(|c| c.members.len() as u64).sum();
        book.unique = codes;
        book
    }

    fn theme(name: &str, uids: &[&str]) -> Theme {
        Theme {
            theme_name: name.into(),
            description: format!("{name} desc"),
            member_uids: uids.iter().map(|u| u.to_string()).collect(),
            pass_assigned: uids.iter().map(|u| (u.to_string(), AssignedPass::FirstPass)).collect(),
        }
    }

    fn theme_book(themes: Vec<Theme>, unassigned: &[&str], codes: Vec<UniqueCode>) -> ThemeBook {
        ThemeBook {
            themes,
            unassigned_uids: unassigned.iter().map(|u| u.to_string()).collect(),
            source_snapshot: "unique_codebook_001.csv".into(),
            options: ThemeOptions::default(),
            produced_at: chrono::Utc::now(),
            codebook: codebook(codes),
        }
    }

    #[test]
    fn its_examples() {
        assert_eq!(its(60, 100).unwrap(), 0.6);
        assert_eq!(its(7, 7).unwrap(), 1.0);
        assert!((its(1, 30).unwrap() - 1.0 / 30.0).abs() < 1e-12);
        assert_eq!(its(0, 0), Err(AnalyticsError::EmptyCodebook));
        assert_eq!(compute_its(&Codebook::new()), Err(AnalyticsError::EmptyCodebook));
    }

    #[test]
    fn series_ratios() {
        let points = [(1, 10, 10), (2, 18, 15), (3, 30, 22)].map(|(step, t, u)| SaturationPoint {
            step,
            cumulative_total: t,
            cumulative_unique: u,
        });
        let its: Vec<f64> = series_from_points(&points).iter().map(|p| p.its.unwrap()).collect();
        for (got, want) in its.iter().zip([1.0, 0.8333, 0.7333]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn empty_first_step_has_no_ratio() {
        let points = [(1, 0, 0), (2, 4, 3)].map(|(step, t, u)| SaturationPoint {
            step,
            cumulative_total: t,
            cumulative_unique: u,
        });
        let series = series_from_points(&points);
        assert_eq!(series[0].its, None);
        assert_eq!(series[1].its, Some(0.75));
    }

    #[test]
    fn level_parsing_and_order() {
        assert_eq!(parse_levels("theme,quote").unwrap(), vec![Level::Theme, Level::Quote]);
        assert!(matches!(parse_levels("quote,theme"), Err(AnalyticsError::InvalidLevelOrder(_))));
        assert!(matches!(parse_levels("theme,theme"), Err(AnalyticsError::InvalidLevelOrder(_))));
        assert!(matches!(parse_levels(""), Err(AnalyticsError::InvalidLevelOrder(_))));
        assert!(matches!(parse_levels("theme,bogus"), Err(AnalyticsError::InvalidLevelOrder(_))));
    }

    #[test]
    fn theme_level_weights() {
        let tb = theme_book(
            vec![theme("A", &["u1"]), theme("B", &["u2"]), theme("Trust", &["u3"])],
            &[],
            vec![unique("u1", "x", 5, 1), unique("u2", "y", 7, 1), unique("u3", "z", 8, 1)],
        );
        let root = hierarchy_from(&tb, &[Level::Theme], &HierarchyFilter::default()).unwrap();
        assert_eq!(root.weight, 20);
        assert_eq!(root.children.iter().map(|c| c.weight).collect::<Vec<_>>(), [5, 7, 8]);
        let filter = HierarchyFilter {
            themes: Some(["Trust".to_string()].into()),
            codes: None,
        };
        let only = hierarchy_from(&tb, &[Level::Theme, Level::UniqueCode], &filter).unwrap();
        assert_eq!(only.children.len(), 1);
        assert_eq!(only.children[0].label, "Trust");
        assert_eq!(only.weight, 8);
    }

    #[test]
    fn full_tree_leaves_are_quotes_and_unassigned_is_grouped() {
        let tb = theme_book(
            vec![theme("A", &["u1", "u2"])],
            &["u3"],
            vec![unique("u1", "x", 3, 1), unique("u2", "y", 1, 1), unique("u3", "z", 2, 1)],
        );
        let root = hierarchy_from(&tb, &Level::ALL, &HierarchyFilter::default()).unwrap();
        fn leaves(n: &HierarchyNode) -> usize {
            if n.children.is_empty() {
                1
            } else {
                n.children.iter().map(leaves).sum()
            }
        }
        assert_eq!(leaves(&root), 6);
        assert_eq!(root.children[1].label, UNASSIGNED_THEME);
        // skipping levels splices children upward
        let spliced = hierarchy_from(&tb, &[Level::Theme, Level::Quote], &HierarchyFilter::default()).unwrap();
        assert_eq!(spliced.children[0].children.len(), 4);
        assert_eq!(spliced.children[0].children[0].level, NodeLevel::Quote);
    }

    #[test]
    fn flow_example() {
        let tb = theme_book(vec![theme("T", &["u1"])], &["u2"], vec![unique("u1", "x", 3, 1), unique("u2", "y", 2, 1)]);
        let edges = flows_from(&tb);
        assert!(edges.contains(&FlowEdge {
            from_label: "x".into(),
            to_label: "T".into(),
            stage: FlowStage::UniqueToTheme,
            weight: 3
        }));
        let stage_total = |s| edges.iter().filter(|e| e.stage == s).map(|e| e.weight).sum::<u64>();
        assert_eq!(stage_total(FlowStage::InitialToUnique), 5);
        assert_eq!(stage_total(FlowStage::UniqueToTheme), 5);
    }

    #[test]
    fn overlap_examples() {
        let codes = vec![
            unique("u1", "trust nurses", 1, 1),
            unique("u2", "waiting rooms", 1, 1),
            unique("u3", "trust doctors", 1, 1),
        ];
        let tb = theme_book(vec![theme("A", &["u1"]), theme("B", &["u2"]), theme("C", &["u3"])], &[], codes);
        let m = overlap_from(&tb).unwrap();
        assert_eq!(m.matrix[0][0], 1.0);
        assert_eq!(m.matrix[0][1], 0.0);
        // {trust, nurses} vs {trust, doctors}: 1 shared of 3
        assert!((m.matrix[0][2] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.matrix[2][0], m.matrix[0][2]);
        let single = theme_book(vec![theme("A", &["u1"])], &[], vec![unique("u1", "x", 1, 1)]);
        assert_eq!(overlap_from(&single), Err(AnalyticsError::FewerThanTwoThemes));
    }

    #[test]
    fn spider_counts() {
        let tb = theme_book(vec![theme("A", &["u1", "u2"])], &[], vec![unique("u1", "x", 3, 1), unique("u2", "y", 1, 5)]);
        assert_eq!(
            spider_from(&tb),
            vec![SpiderEntry {
                theme_name: "A".into(),
                member_count: 2,
                quote_count: 4,
                document_count: 3
            }]
        );
    }

    fn check_weights(node: &HierarchyNode) -> bool {
        if node.children.is_empty() {
            return node.weight >= 1;
        }
        node.weight == node.children.iter().map(|c| c.weight).sum::<u64>() && node.children.iter().all(check_weights)
    }

    fn arb_theme_book() -> impl Strategy<Value = ThemeBook> {
        (prop::collection::vec(1usize..5, 1..12), prop::collection::vec(0usize..4, 1..12)).prop_map(|(sizes, slots)| {
            let codes: Vec<UniqueCode> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| unique(&format!("u{i}"), &format!("code {}", i % 4), n, i as u32))
                .collect();
            let mut themes: Vec<(String, Vec<String>)> = (0..3).map(|t| (format!("T{t}"), Vec::new())).collect();
            let mut unassigned = Vec::new();
            for (i, code) in codes.iter().enumerate() {
                match slots.get(i).copied().unwrap_or(3) {
                    3 => unassigned.push(code.uid.clone()),
                    t => themes[t].1.push(code.uid.clone()),
                }
            }
            let themes = themes
                .into_iter()
                .filter(|(_, m)| !m.is_empty())
                .map(|(n, m)| theme(&n, &m.iter().map(String::as_str).collect::<Vec<_>>()))
                .collect();
            theme_book(themes, &unassigned.iter().map(String::as_str).collect::<Vec<_>>(), codes)
        })
    }

    fn arb_levels() -> impl Strategy<Value = Vec<Level>> {
        prop::sample::subsequence(Level::ALL.to_vec(), 1..=4)
    }

    proptest! {
        #[test]
        fn hierarchy_weights_conserve(tb in arb_theme_book(), levels in arb_levels()) {
            let root = hierarchy_from(&tb, &levels, &HierarchyFilter::default()).unwrap();
            prop_assert!(check_weights(&root));
            prop_assert_eq!(root.weight, tb.codebook.total_count);
        }

        #[test]
        fn flows_conserve(tb in arb_theme_book()) {
            let edges = flows_from(&tb);
            for stage in [FlowStage::InitialToUnique, FlowStage::UniqueToTheme] {
                let total: u64 = edges.iter().filter(|e| e.stage == stage).map(|e| e.weight).sum();
                prop_assert_eq!(total, tb.codebook.total_count);
            }
            for code in &tb.codebook.unique {
                let into: u64 = edges.iter().filter(|e| e.stage == FlowStage::InitialToUnique && e.to_label == code.name).map(|e| e.weight).sum();
                let same_name: u64 = tb.codebook.unique.iter().filter(|c| c.name == code.name).map(|c| c.members.len() as u64).sum();
                prop_assert_eq!(into, same_name);
            }
        }

        #[test]
        fn filtering_commutes_with_weighting(tb in arb_theme_book(), levels in arb_levels(), keep in prop::collection::btree_set("T[0-2]|Unassigned", 0..3)) {
            let filter = HierarchyFilter { themes: Some(keep.clone()), codes: None };
            let filtered = hierarchy_from(&tb, &levels, &filter).unwrap();
            // prune-then-reweight: restrict the book, rebuild unfiltered
            let mut restricted = tb.clone();
            restricted.themes.retain(|t| keep.contains(&t.theme_name));
            if !keep.contains(UNASSIGNED_THEME) {
                restricted.unassigned_uids.clear();
            }
            let rebuilt = hierarchy_from(&restricted, &levels, &HierarchyFilter::default()).unwrap();
            prop_assert_eq!(filtered, rebuilt);
        }
    }
}
