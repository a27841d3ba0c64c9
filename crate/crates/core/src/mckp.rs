//! Multiple-choice knapsack over appliance power candidates.
//!
//! Each eligible appliance forms a class whose items are integer power
//! levels near its learned ON power, weighted by a Gaussian kernel. Every
//! class also has an implicit skip item (weight 0, profit 0), so choosing
//! exactly one item per class allows an appliance to stay out of the
//! selection. The solver maximizes total item profit subject to the total
//! weight fitting in the observed step.
//!
//! Item profits are quantized to [`PROFIT_QUANTUM`] before optimization so
//! that objective comparisons are exact integer comparisons and the result
//! does not depend on summation order. Among optimal selections the one with
//! the larger total weight wins, then the one that gives more weight to the
//! lower appliance id (compared id by id).

use thiserror::Error;

use crate::models::{ApplianceDb, ApplianceId};

/// Resolution of item profits inside the solver.
pub const PROFIT_QUANTUM: f64 = 1e-9;

/// Largest number of selections [`brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1 << 26;

#[derive(Debug, Error, PartialEq)]
pub enum MckpError {
    #[error("instance has {0} selections, above the brute-force limit")]
    InstanceTooLarge(u128),
    #[error("instance line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub weight: u32,
    pub profit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MckpClass {
    pub appliance: ApplianceId,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MckpInstance {
    pub capacity: u32,
    pub classes: Vec<MckpClass>,
}

/// Which appliances a step may switch: an up-step can only turn on
/// appliances that are off, and a down-step only turn off ones that are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MckpSolution {
    /// Selected appliances and the weight chosen for each, in id order.
    pub selected: Vec<(ApplianceId, u32)>,
    /// Total item profit of the selection (the optimized objective).
    pub objective: f64,
    /// Share of the capacity explained by the selection, 0–100.
    pub profit: f64,
}

impl MckpSolution {
    pub fn total_weight(&self) -> u32 {
        self.selected.iter().map(|(_, w)| w).sum()
    }

    pub fn is_selected(&self, id: ApplianceId) -> bool {
        self.selected.iter().any(|(a, _)| *a == id)
    }

    /// Binary selection vector over `ids`.
    pub fn selection_vector(&self, ids: &[ApplianceId]) -> Vec<bool> {
        ids.iter().map(|id| self.is_selected(*id)).collect()
    }
}

/// Kernel profit of choosing power `w` for an appliance with mean `mean` and
/// (floored) deviation `sigma`: 100 at the mean, about 1.11 at three sigma.
pub fn kernel_profit(w: f64, mean: f64, sigma: f64) -> f64 {
    let z = (w - mean) / sigma;
    100.0 * (-0.5 * z * z).exp()
}

pub fn build_instance(delta_abs: f64, db: &ApplianceDb, direction: Direction) -> MckpInstance {
    let capacity = delta_abs.round().max(0.0) as u32;
    let classes = db
        .appliances
        .iter()
        .filter(|a| match direction {
            Direction::On => !a.is_on(),
            Direction::Off => a.is_on(),
        })
        .filter(|a| !a.p_on.is_empty())
        .map(|a| {
            let (mean, sigma) = (a.p_on.mean, a.p_on.sigma());
            MckpClass {
                appliance: a.id,
                items: a
                    .candidate_powers()
                    .into_iter()
                    .map(|w| Item {
                        weight: w,
                        profit: kernel_profit(w as f64, mean, sigma),
                    })
                    .collect(),
            }
        })
        .collect();
    MckpInstance { capacity, classes }
}

fn quantize(profit: f64) -> i64 {
    (profit / PROFIT_QUANTUM).round() as i64
}

fn explained_share(total: u32, capacity: u32) -> f64 {
    if capacity == 0 {
        return 0.0;
    }
    (100.0 * total as f64 / capacity as f64).clamp(0.0, 100.0)
}

/// Classes sorted by appliance id, with items quantized. Items heavier than
/// the capacity can never be chosen and are dropped.
fn prepared(instance: &MckpInstance) -> Vec<(ApplianceId, Vec<(u32, i64)>)> {
    let mut classes: Vec<_> = instance
        .classes
        .iter()
        .map(|c| {
            let items = c
                .items
                .iter()
                .filter(|it| it.weight >= 1 && it.weight <= instance.capacity)
                .map(|it| (it.weight, quantize(it.profit)))
                .collect::<Vec<_>>();
            (c.appliance, items)
        })
        .collect();
    classes.sort_by_key(|(id, _)| *id);
    classes
}

fn finish(choices: Vec<(ApplianceId, u32)>, objective: i64, capacity: u32) -> MckpSolution {
    let selected: Vec<_> = choices.into_iter().filter(|(_, w)| *w > 0).collect();
    let total = selected.iter().map(|(_, w)| w).sum();
    MckpSolution {
        selected,
        objective: objective as f64 * PROFIT_QUANTUM,
        profit: explained_share(total, capacity),
    }
}

/// Drop items that can never be part of an optimal selection: a strictly
/// lighter item with strictly higher profit always beats them. Profit ties
/// are kept because the tie-break prefers the heavier one.
fn undominated(mut items: Vec<(u32, i64)>) -> Vec<(u32, i64)> {
    items.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    items.dedup_by_key(|(w, _)| *w);
    let mut lighter_best = i64::MIN;
    items.retain(|&(_, p)| {
        let keep = p >= lighter_best;
        lighter_best = lighter_best.max(p);
        keep
    });
    items
}

/// Exact optimum by dynamic programming over integer capacity.
///
/// `best[k][w]` is the largest objective classes `k..` can reach with total
/// weight exactly `w`. Running the table over suffixes lets the final
/// reconstruction walk classes front to back and greedily take the heaviest
/// item that stays on an optimal path, which realizes the tie-break.
pub fn solve(instance: &MckpInstance) -> MckpSolution {
    let classes: Vec<_> = prepared(instance)
        .into_iter()
        .map(|(id, items)| (id, undominated(items)))
        .collect();
    // Quantized profits are integers, so an f64 table is exact while every
    // partial sum stays below 2^53. It vectorizes far better than i64.
    let bound: i64 = classes
        .iter()
        .map(|(_, items)| items.iter().map(|(_, p)| p.saturating_abs()).max().unwrap_or(0))
        .fold(0i64, |a, b| a.saturating_add(b));
    let weights = if bound < 1 << 52 {
        optimize(&classes, instance.capacity, f64::NEG_INFINITY, f64::MIN, 0.0, |p| p as f64)
    } else {
        optimize(&classes, instance.capacity, i64::MIN / 4, i64::MIN / 8, 0, |p| p)
    };
    let mut objective = 0;
    let mut choices = Vec::with_capacity(classes.len());
    for ((id, items), w) in classes.iter().zip(weights) {
        if w > 0 {
            objective += items.iter().find(|(iw, _)| *iw == w).map_or(0, |(_, p)| *p);
        }
        choices.push((*id, w));
    }
    finish(choices, objective, instance.capacity)
}

/// Fill the suffix table in `T` and walk it back to one weight per class
/// (0 for none). Cells at or below `floor` are unreachable; `none` is the
/// initial value for them.
fn optimize<T>(
    classes: &[(ApplianceId, Vec<(u32, i64)>)],
    capacity: u32,
    none: T,
    floor: T,
    zero: T,
    convert: impl Fn(i64) -> T,
) -> Vec<u32>
where
    T: Copy + PartialOrd + std::ops::Add<Output = T>,
{
    let cap = capacity as usize;
    let m = classes.len();
    let width = cap + 1;
    let mut best = vec![none; (m + 1) * width];
    best[m * width] = zero;

    for k in (0..m).rev() {
        let (row, rest) = best[k * width..].split_at_mut(width);
        let next = &rest[..width];
        row.copy_from_slice(next); // skip item
        for &(w, p) in &classes[k].1 {
            let (w, p) = (w as usize, convert(p));
            for (cell, &prev) in row[w..].iter_mut().zip(&next[..width - w]) {
                let candidate = prev + p;
                if candidate > *cell {
                    *cell = candidate;
                }
            }
        }
    }

    // Highest objective, then the heaviest total among equals. Total 0 (no
    // items) is always reachable, so the scan starts there.
    let mut remaining = 0;
    for (w, v) in best[..width].iter().enumerate() {
        if *v > floor && *v >= best[remaining] {
            remaining = w;
        }
    }

    let mut chosen = Vec::with_capacity(m);
    for (k, (_, items)) in classes.iter().enumerate() {
        let target = best[k * width + remaining];
        let next = &best[(k + 1) * width..(k + 2) * width];
        let heaviest = items
            .iter()
            .filter(|(w, p)| {
                let w = *w as usize;
                w <= remaining && next[remaining - w] > floor && next[remaining - w] + convert(*p) == target
            })
            .map(|(w, _)| *w)
            .max()
            .unwrap_or(0);
        remaining -= heaviest as usize;
        chosen.push(heaviest);
    }
    chosen
}

/// Exhaustive enumeration of every one-item-per-class selection, ranked by
/// the same objective and tie-break as [`solve`].
pub fn brute_force(instance: &MckpInstance) -> Result<MckpSolution, MckpError> {
    let mut classes = prepared(instance);
    let size: u128 = classes.iter().map(|(_, items)| items.len() as u128 + 1).product();
    if size > BRUTE_FORCE_LIMIT {
        return Err(MckpError::InstanceTooLarge(size));
    }
    for (_, items) in &mut classes {
        items.sort_unstable();
    }
    // best_prefix[k][i] is the best profit class k can add using one of its
    // i lightest items (or nothing), used to prune branches that cannot even
    // tie the incumbent.
    let best_prefix: Vec<Vec<i64>> = classes
        .iter()
        .map(|(_, items)| {
            let mut acc = vec![0i64];
            for (_, p) in items {
                acc.push((*acc.last().unwrap()).max(*p));
            }
            acc
        })
        .collect();
    let mut search = Search {
        classes: &classes,
        capacity: instance.capacity,
        best_prefix: &best_prefix,
        current: vec![0; classes.len()],
        best: None,
    };
    search.visit(0, 0, 0);
    let (objective, _, weights) = search.best.unwrap_or((0, 0, vec![0; classes.len()]));
    let choices = classes.iter().map(|(id, _)| *id).zip(weights).collect();
    Ok(finish(choices, objective, instance.capacity))
}

struct Search<'a> {
    classes: &'a [(ApplianceId, Vec<(u32, i64)>)],
    capacity: u32,
    best_prefix: &'a [Vec<i64>],
    current: Vec<u32>,
    best: Option<(i64, u32, Vec<u32>)>,
}

impl Search<'_> {
    /// Upper bound on the profit classes `k..` can add within `room`, each
    /// class bounded on its own.
    fn bound(&self, k: usize, room: u32) -> i64 {
        (k..self.classes.len())
            .map(|j| {
                let fits = self.classes[j].1.partition_point(|(w, _)| *w <= room);
                self.best_prefix[j][fits]
            })
            .sum()
    }

    fn visit(&mut self, k: usize, weight: u32, profit: i64) {
        if k == self.classes.len() {
            let better = match &self.best {
                None => true,
                Some((bp, bw, bsel)) => (profit, weight, &self.current) > (*bp, *bw, bsel),
            };
            if better {
                self.best = Some((profit, weight, self.current.clone()));
            }
            return;
        }
        if let Some((bp, _, _)) = &self.best {
            if profit + self.bound(k, self.capacity - weight) < *bp {
                return;
            }
        }
        self.current[k] = 0;
        self.visit(k + 1, weight, profit);
        for i in 0..self.classes[k].1.len() {
            let (w, p) = self.classes[k].1[i];
            if weight + w > self.capacity {
                break;
            }
            self.current[k] = w;
            self.visit(k + 1, weight + w, profit + p);
        }
        self.current[k] = 0;
    }
}

/// Parse an instance from `appliance_id,weight,profit` rows (one item per
/// row, `#` comments allowed). Items with the same id form one class.
pub fn parse_instance(text: &str, capacity: u32) -> Result<MckpInstance, MckpError> {
    let mut classes: Vec<MckpClass> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') || row.starts_with("appliance_id") {
            continue;
        }
        let malformed = |reason: String| MckpError::Malformed { line: i + 1, reason };
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        let [id, weight, profit] = fields[..] else {
            return Err(malformed("expected appliance_id,weight,profit".into()));
        };
        let id = ApplianceId(id.parse().map_err(|_| malformed(format!("bad id `{id}`")))?);
        let weight: u32 = weight.parse().map_err(|_| malformed(format!("bad weight `{weight}`")))?;
        let profit: f64 = profit.parse().map_err(|_| malformed(format!("bad profit `{profit}`")))?;
        if !(0.0..=100.0).contains(&profit) {
            return Err(malformed(format!("profit {profit} outside 0-100")));
        }
        let item = Item { weight, profit };
        match classes.iter_mut().find(|c| c.appliance == id) {
            Some(c) => c.items.push(item),
            None => classes.push(MckpClass {
                appliance: id,
                items: vec![item],
            }),
        }
    }
    Ok(MckpInstance { capacity, classes })
}

impl MckpSolution {
    /// `appliance_id,weight` rows followed by the objective and profit.
    pub fn render(&self) -> String {
        let mut out = String::from("appliance_id,weight\n");
        for (id, w) in &self.selected {
            out.push_str(&format!("{id},{w}\n"));
        }
        out.push_str(&format!("# objective={:.9}\n# profit={:.3}\n", self.objective, self.profit));
        out
    }
}
