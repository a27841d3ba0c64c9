//! Shared fixtures for the benchmarks.

use nilm_core::events::Event;
use nilm_core::mckp::{kernel_profit, Item, MckpClass, MckpInstance};
use nilm_core::synth::{generate, three_appliance_scenario};
use nilm_core::{ApplianceId, PowerTrace};

/// Raw aggregate of the reference three-appliance household.
pub fn household_aggregate(samples: usize, seed: u64) -> PowerTrace {
    generate(&three_appliance_scenario(samples, seed))
        .expect("reference scenario is valid")
        .aggregate
}

/// A knapsack instance shaped like the tracker's: one class per appliance,
/// integer candidate powers within three sigma of the mean, Gaussian profits.
pub fn tracker_like_instance(capacity: u32, appliances: &[(f64, f64)]) -> MckpInstance {
    let classes = appliances
        .iter()
        .enumerate()
        .map(|(k, &(mean, sigma))| {
            let lo = (mean - 3.0 * sigma).round().max(1.0) as u32;
            let hi = (mean + 3.0 * sigma).round() as u32;
            MckpClass {
                appliance: ApplianceId(k as u32 + 1),
                items: (lo..=hi)
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

/// Alternating ON/OFF steps of a few fixed sizes, `gap` samples apart.
pub fn square_events(count: usize, gap: usize) -> Vec<Event> {
    let sizes = [130.0, 400.0, 4500.0];
    (0..count)
        .map(|i| {
            let size = sizes[(i / 2) % sizes.len()];
            let delta = if i % 2 == 0 { size } else { -size };
            let index = (i + 1) * gap;
            Event::new(index, index as f64, delta)
        })
        .collect()
}
