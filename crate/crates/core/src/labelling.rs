//! Region-specific partition maps: rectangles in (ON duration, ON power)
//! space that name the appliance occupying them.
//!
//! Map files hold one cell per line,
//!
//! ```text
//! region,d_min,d_max,p_min,p_max,label,color
//! NA,20,90,3000,6000,Clothes Dryer,blue
//! ```
//!
//! with durations in minutes and powers in watts. Ranges are half-open,
//! `[min, max)`. Lines starting with `#` are comments, a line holding only a
//! region code declares that region (possibly with no cells), and a header
//! line beginning with `region,` is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::models::{ApplianceDb, ApplianceId, ApplianceModel, ApplianceState};
use crate::tracker::DisaggregationResult;

/// Label given to appliances no cell claims. Never merged.
pub const UNKNOWN: &str = "unknown";
pub const UNKNOWN_COLOR: &str = "none";

/// Longest ON duration a map may describe, in minutes.
pub const DURATION_BOUND: f64 = 1440.0;
/// Largest ON power a map may describe, in watts.
pub const POWER_BOUND: f64 = 25_000.0;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cells `{0}` and `{1}` overlap")]
    OverlappingCells(String, String),
    #[error("region `{0}` not present in map")]
    UnknownRegion(String),
    #[error("line {line}: {reason}")]
    MalformedCell { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub d_min: f64,
    pub d_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub label: String,
    pub color: String,
}

impl Cell {
    pub fn contains(&self, duration: f64, power: f64) -> bool {
        (self.d_min..self.d_max).contains(&duration) && (self.p_min..self.p_max).contains(&power)
    }

    pub fn overlaps(&self, other: &Cell) -> bool {
        self.d_min < other.d_max && other.d_min < self.d_max && self.p_min < other.p_max && other.p_min < self.p_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    pub region: String,
    pub cells: Vec<Cell>,
}

impl PartitionMap {
    /// Validated map: every cell well-formed and within bounds, no two
    /// cells sharing a point.
    pub fn new(region: impl Into<String>, cells: Vec<Cell>) -> Result<Self, LabelError> {
        for (i, c) in cells.iter().enumerate() {
            let bad = |reason: String| LabelError::MalformedCell { line: i + 1, reason };
            if c.label.is_empty() || c.label == UNKNOWN {
                return Err(bad(format!("invalid label `{}`", c.label)));
            }
            let finite = [c.d_min, c.d_max, c.p_min, c.p_max].iter().all(|v| v.is_finite());
            if !finite || c.d_min < 0.0 || c.p_min < 0.0 || c.d_min >= c.d_max || c.p_min >= c.p_max {
                return Err(bad(format!("empty or negative range in `{}`", c.label)));
            }
            if c.d_max > DURATION_BOUND || c.p_max > POWER_BOUND {
                return Err(bad(format!("`{}` exceeds the map bounds", c.label)));
            }
        }
        for (i, a) in cells.iter().enumerate() {
            if let Some(b) = cells[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(LabelError::OverlappingCells(a.label.clone(), b.label.clone()));
            }
        }
        Ok(Self {
            region: region.into(),
            cells,
        })
    }

    /// The cell containing the point, if any.
    pub fn cell_at(&self, duration: f64, power: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.contains(duration, power))
    }

    pub fn lookup(&self, duration: f64, power: f64) -> &str {
        self.cell_at(duration, power).map_or(UNKNOWN, |c| c.label.as_str())
    }

    pub fn color_of(&self, label: &str) -> &str {
        self.cells
            .iter()
            .find(|c| c.label == label)
            .map_or(UNKNOWN_COLOR, |c| c.color.as_str())
    }
}

pub fn load_partition_map(path: impl AsRef<Path>, region: &str) -> Result<PartitionMap, LabelError> {
    parse_partition_map(&fs::read_to_string(path)?, region)
}

pub fn parse_partition_map(text: &str, region: &str) -> Result<PartitionMap, LabelError> {
    let mut seen_region = false;
    let mut cells = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') || row.starts_with("region,") {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields[0] != region {
            continue;
        }
        seen_region = true;
        if fields.len() == 1 {
            continue;
        }
        if fields.len() != 7 {
            return Err(LabelError::MalformedCell {
                line,
                reason: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| {
            fields[k].parse::<f64>().map_err(|_| LabelError::MalformedCell {
                line,
                reason: format!("bad number `{}`", fields[k]),
            })
        };
        cells.push(Cell {
            d_min: num(1)?,
            d_max: num(2)?,
            p_min: num(3)?,
            p_max: num(4)?,
            label: fields[5].to_string(),
            color: fields[6].to_string(),
        });
    }
    if !seen_region {
        return Err(LabelError::UnknownRegion(region.to_string()));
    }
    PartitionMap::new(region, cells)
}

/// One label per appliance, plus the per-label membership vectors over the
/// database's appliance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    /// Appliance ids in database order; the index space of every vector in
    /// `members`.
    pub ids: Vec<ApplianceId>,
    /// The label set, in order of first appearance.
    pub labels: Vec<String>,
    pub members: BTreeMap<String, Vec<bool>>,
    pub colors: BTreeMap<String, String>,
}

impl LabelAssignment {
    pub fn label_of(&self, id: ApplianceId) -> &str {
        let Some(pos) = self.ids.iter().position(|i| *i == id) else {
            return UNKNOWN;
        };
        self.members
            .iter()
            .find(|(_, v)| v[pos])
            .map_or(UNKNOWN, |(label, _)| label.as_str())
    }

    pub fn color_of(&self, label: &str) -> &str {
        self.colors.get(label).map_or(UNKNOWN_COLOR, String::as_str)
    }

    pub fn appliances_with(&self, label: &str) -> Vec<ApplianceId> {
        self.members
            .get(label)
            .map(|v| self.ids.iter().zip(v).filter(|(_, m)| **m).map(|(id, _)| *id).collect())
            .unwrap_or_default()
    }

    /// Rebuild an assignment from `(id, label, color)` rows, e.g. a parsed
    /// [`render`](Self::render) output.
    pub fn from_rows(rows: &[(ApplianceId, String, String)]) -> Self {
        let ids: Vec<ApplianceId> = rows.iter().map(|r| r.0).collect();
        let mut labels = Vec::new();
        let mut members: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        let mut colors = BTreeMap::new();
        for (pos, (_, label, color)) in rows.iter().enumerate() {
            if !members.contains_key(label) {
                labels.push(label.clone());
                colors.insert(label.clone(), color.clone());
            }
            members.entry(label.clone()).or_insert_with(|| vec![false; ids.len()])[pos] = true;
        }
        Self {
            ids,
            labels,
            members,
            colors,
        }
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(text: &str) -> Result<Self, LabelError> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let row = raw.trim();
            if row.is_empty() || row.starts_with("appliance_id,") {
                continue;
            }
            let malformed = |reason: String| LabelError::MalformedCell { line: i + 1, reason };
            let fields: Vec<&str> = row.splitn(3, ',').collect();
            let [id, label, color] = fields[..] else {
                return Err(malformed("expected appliance_id,label,color".into()));
            };
            let id = id.parse().map_err(|_| malformed(format!("bad appliance id `{id}`")))?;
            rows.push((ApplianceId(id), label.to_string(), color.to_string()));
        }
        Ok(Self::from_rows(&rows))
    }

    /// `appliance_id,label,color` CSV.
    pub fn render(&self) -> String {
        let mut out = String::from("appliance_id,label,color\n");
        for id in &self.ids {
            let label = self.label_of(*id);
            out.push_str(&format!("{id},{label},{}\n", self.color_of(label)));
        }
        out
    }
}

/// Label each appliance by the cell holding its mean ON duration and mean
/// ON power. Appliances that never completed a cycle are unknown.
pub fn assign_labels(db: &ApplianceDb, map: &PartitionMap) -> LabelAssignment {
    let ids: Vec<ApplianceId> = db.appliances.iter().map(|a| a.id).collect();
    let mut labels: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut colors = BTreeMap::new();
    for (pos, a) in db.appliances.iter().enumerate() {
        let (label, color) = if a.d_on.is_empty() || a.p_on.is_empty() {
            (UNKNOWN, UNKNOWN_COLOR)
        } else {
            match map.cell_at(a.d_on.mean, a.p_on.mean) {
                Some(c) => (c.label.as_str(), c.color.as_str()),
                None => (UNKNOWN, UNKNOWN_COLOR),
            }
        };
        if !members.contains_key(label) {
            labels.push(label.to_string());
            colors.insert(label.to_string(), color.to_string());
        }
        members.entry(label.to_string()).or_insert_with(|| vec![false; ids.len()])[pos] = true;
    }
    LabelAssignment {
        ids,
        labels,
        members,
        colors,
    }
}

/// Replace every group of appliances sharing a known label with a single
/// appliance: summed trace, pooled statistics, lowest id.
pub fn merge_same_label(result: &DisaggregationResult, assignment: &LabelAssignment) -> DisaggregationResult {
    let mut merged_into: BTreeMap<ApplianceId, ApplianceId> = BTreeMap::new();
    for (label, member) in &assignment.members {
        if label == UNKNOWN {
            continue;
        }
        let group: Vec<ApplianceId> = assignment
            .ids
            .iter()
            .zip(member)
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect();
        if let Some(&head) = group.iter().min() {
            for id in group {
                merged_into.insert(id, head);
            }
        }
    }

    let mut appliances: Vec<ApplianceModel> = Vec::with_capacity(result.db.len());
    for a in &result.db.appliances {
        let head = merged_into.get(&a.id).copied().unwrap_or(a.id);
        match appliances.iter_mut().find(|m| m.id == head) {
            Some(target) => absorb(target, a),
            None => {
                let mut first = a.clone();
                first.id = head;
                appliances.push(first);
            }
        }
    }
    appliances.sort_by_key(|a| a.id);

    DisaggregationResult {
        db: ApplianceDb {
            appliances,
            ..result.db.clone()
        },
        ..result.clone()
    }
}

fn absorb(target: &mut ApplianceModel, other: &ApplianceModel) {
    target.p_on = target.p_on.combine(&other.p_on);
    target.p_off = target.p_off.combine(&other.p_off);
    target.d_on = target.d_on.combine(&other.d_on);
    target.d_off = target.d_off.combine(&other.d_off);
    if target.trace.len() < other.trace.len() {
        target.trace.resize(other.trace.len(), 0.0);
    }
    for (t, v) in target.trace.iter_mut().zip(&other.trace) {
        *t += v;
    }
    target.current_power += other.current_power;
    if other.is_on() {
        target.state = ApplianceState::On;
    }
    target.last_transition_index = target.last_transition_index.max(other.last_transition_index);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianStat;
    use proptest::prelude::*;

    fn cell(d: (f64, f64), p: (f64, f64), label: &str) -> Cell {
        Cell {
            d_min: d.0,
            d_max: d.1,
            p_min: p.0,
            p_max: p.1,
            label: label.into(),
            color: "blue".into(),
        }
    }

    const SAMPLE: &str = "\
region,d_min,d_max,p_min,p_max,label,color
# comment
NA,20,90,3000,6000,Clothes Dryer,blue
NA,5,40,80,250,Fridge,green
EU,20,90,1500,3000,Tumble Dryer,blue
JP
";

    #[test]
    fn parse_and_lookup() {
        let map = parse_partition_map(SAMPLE, "NA").unwrap();
        assert_eq!(map.cells.len(), 2);
        assert_eq!(map.lookup(30.0, 4500.0), "Clothes Dryer");
        assert_eq!(map.cell_at(30.0, 4500.0).unwrap().color, "blue");
        assert_eq!(map.lookup(30.0, 10.0), UNKNOWN);
        let eu = parse_partition_map(SAMPLE, "EU").unwrap();
        assert_eq!(eu.lookup(30.0, 4500.0), UNKNOWN);
    }

    #[test]
    fn declared_empty_region() {
        let jp = parse_partition_map(SAMPLE, "JP").unwrap();
        assert!(jp.cells.is_empty());
        assert_eq!(jp.lookup(30.0, 4500.0), UNKNOWN);
    }

    #[test]
    fn unknown_region() {
        assert!(matches!(parse_partition_map(SAMPLE, "AU"), Err(LabelError::UnknownRegion(_))));
    }

    #[test]
    fn malformed_cells() {
        assert!(matches!(
            parse_partition_map("NA,1,2,3\n", "NA"),
            Err(LabelError::MalformedCell { line: 1, .. })
        ));
        assert!(matches!(
            parse_partition_map("NA,1,x,3,4,a,b\n", "NA"),
            Err(LabelError::MalformedCell { .. })
        ));
        assert!(matches!(
            parse_partition_map("NA,10,5,3,4,a,b\n", "NA"),
            Err(LabelError::MalformedCell { .. })
        ));
        assert!(matches!(
            parse_partition_map("NA,10,5000,3,4,a,b\n", "NA"),
            Err(LabelError::MalformedCell { .. })
        ));
    }

    #[test]
    fn overlapping_cells_rejected() {
        let text = "NA,20,90,3000,6000,Clothes Dryer,blue\nNA,25,35,4000,5000,Oven,red\n";
        assert!(matches!(parse_partition_map(text, "NA"), Err(LabelError::OverlappingCells(..))));
    }

    #[test]
    fn shared_boundary_goes_to_upper_cell() {
        let map = PartitionMap::new(
            "NA",
            vec![cell((0.0, 30.0), (0.0, 100.0), "low"), cell((30.0, 60.0), (0.0, 100.0), "high")],
        )
        .unwrap();
        assert_eq!(map.lookup(30.0, 50.0), "high");
        assert_eq!(map.lookup(29.999, 50.0), "low");
    }

    fn db_of(points: &[(Option<f64>, f64)]) -> ApplianceDb {
        let mut db = ApplianceDb::new(1.0);
        for (i, &(duration, power)) in points.iter().enumerate() {
            let mut a = ApplianceModel::new(ApplianceId(i as u32 + 1));
            a.p_on = GaussianStat::from_values(5.0, [power, power]);
            if let Some(d) = duration {
                a.d_on = GaussianStat::from_values(0.5, [d, d]);
            }
            a.trace = vec![power, power, 0.0];
            db.appliances.push(a);
        }
        db
    }

    #[test]
    fn assignment_rules() {
        let map = parse_partition_map(SAMPLE, "NA").unwrap();
        let db = db_of(&[(Some(30.0), 4500.0), (None, 4500.0), (Some(45.0), 4000.0), (Some(10.0), 130.0)]);
        let asg = assign_labels(&db, &map);
        assert_eq!(asg.label_of(ApplianceId(1)), "Clothes Dryer");
        assert_eq!(asg.label_of(ApplianceId(2)), UNKNOWN);
        assert_eq!(asg.label_of(ApplianceId(4)), "Fridge");
        assert_eq!(asg.appliances_with("Clothes Dryer"), vec![ApplianceId(1), ApplianceId(3)]);
        // one and only one label per appliance
        for pos in 0..asg.ids.len() {
            assert_eq!(asg.members.values().filter(|v| v[pos]).count(), 1);
        }
        assert_eq!(asg.labels, vec!["Clothes Dryer", UNKNOWN, "Fridge"]);
        assert_eq!(assign_labels(&db, &map), asg);
        let reparsed = LabelAssignment::parse(&asg.render()).unwrap();
        assert_eq!(reparsed.render(), asg.render());
        assert_eq!(reparsed.appliances_with("Clothes Dryer"), asg.appliances_with("Clothes Dryer"));
        assert!(asg.render().contains("1,Clothes Dryer,blue\n"));
        assert!(asg.render().contains("2,unknown,none\n"));
    }

    fn result_of(db: ApplianceDb) -> DisaggregationResult {
        let n = db.appliances.first().map_or(0, |a| a.trace.len());
        DisaggregationResult {
            db,
            residual: vec![0.0; n],
            baseline: vec![0.0; n],
            decisions: Vec::new(),
            start_epoch: 0.0,
            sample_period: 1.0,
        }
    }

    fn total_energy(r: &DisaggregationResult) -> f64 {
        r.db.appliances.iter().map(ApplianceModel::trace_sum).sum()
    }

    #[test]
    fn merging_pools_and_conserves() {
        let map = parse_partition_map(SAMPLE, "NA").unwrap();
        let mut db = db_of(&[(Some(30.0), 4000.0), (Some(50.0), 5000.0), (Some(10.0), 130.0), (None, 700.0)]);
        db.appliances[3].trace = vec![0.0, 700.0, 700.0];
        let r = result_of(db);
        let asg = assign_labels(&r.db, &map);
        let merged = merge_same_label(&r, &asg);
        assert_eq!(merged.db.len(), 3);
        let dryer = merged.db.get(ApplianceId(1)).unwrap();
        assert_eq!(dryer.p_on.count, 4);
        assert_eq!(dryer.p_on.mean, 4500.0);
        assert_eq!(dryer.d_on.mean, 40.0);
        assert_eq!(dryer.trace, vec![9000.0, 9000.0, 0.0]);
        assert_eq!(total_energy(&merged), total_energy(&r));
        // relabelling the merged result is stable
        let again = assign_labels(&merged.db, &map);
        assert_eq!(again.label_of(ApplianceId(1)), "Clothes Dryer");
        assert_eq!(merge_same_label(&merged, &again), merged);
    }

    #[test]
    fn no_shared_labels_is_identity() {
        let map = parse_partition_map(SAMPLE, "NA").unwrap();
        let r = result_of(db_of(&[(Some(30.0), 4500.0), (Some(10.0), 130.0), (None, 1.0), (None, 2.0)]));
        let asg = assign_labels(&r.db, &map);
        assert_eq!(merge_same_label(&r, &asg), r);
    }

    fn rect() -> impl Strategy<Value = Cell> {
        (0u32..40, 1u32..12, 0u32..40, 1u32..12).prop_map(|(d, dw, p, pw)| {
            cell((d as f64, (d + dw) as f64), (p as f64, (p + pw) as f64), "x")
        })
    }

    proptest! {
        #[test]
        fn validation_never_admits_double_labels(a in rect(), b in rect()) {
            let mut b = b;
            b.label = "y".into();
            let admitted = PartitionMap::new("NA", vec![a.clone(), b.clone()]).is_ok();
            // Brute-force scan of the integer grid, plus half-integer points.
            let mut doubly = false;
            for d2 in 0..120 {
                for p2 in 0..120 {
                    let (d, p) = (d2 as f64 / 2.0, p2 as f64 / 2.0);
                    let in_a = d >= a.d_min && d < a.d_max && p >= a.p_min && p < a.p_max;
                    let in_b = d >= b.d_min && d < b.d_max && p >= b.p_min && p < b.p_max;
                    doubly |= in_a && in_b;
                }
            }
            prop_assert_eq!(admitted, !doubly);
        }
    }
}
