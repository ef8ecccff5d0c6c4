//! Straight-line reference simulator.
//!
//! Keeps the full history of every generated packet and recomputes each
//! UE's age from its definition (current slot minus the newest generation
//! slot among delivered packets) instead of the incremental recursion used
//! by [`crate::sim::Environment`]. It replays an externally supplied arrival
//! trace, so it never touches the environment's generator.

use crate::sim::{node_utility, slot_reward};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Queued,
    Dropped,
    Departed(u64),
}

#[derive(Debug, Clone, Copy)]
struct Record {
    gen_slot: u64,
    fate: Fate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSlot {
    pub aoi: Vec<u64>,
    pub served: Vec<u32>,
    pub dropped: Vec<u32>,
    pub utility: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct ReferenceSim {
    queue_capacity: usize,
    packets_per_unit: u32,
    beta: f64,
    slot: u64,
    history: Vec<Vec<Record>>,
}

impl ReferenceSim {
    pub fn new(num_ues: usize, queue_capacity: usize, packets_per_unit: u32, beta: f64) -> Self {
        ReferenceSim {
            queue_capacity,
            packets_per_unit,
            beta,
            slot: 0,
            history: vec![Vec::new(); num_ues],
        }
    }

    /// Runs one slot with the given arrival counts and allocation.
    pub fn step(&mut self, arrivals: &[u32], alloc: &[u32]) -> ReferenceSlot {
        let t = self.slot;
        let n_ues = self.history.len();
        let mut served = vec![0u32; n_ues];
        let mut dropped = vec![0u32; n_ues];
        let mut aoi = vec![0u64; n_ues];
        for n in 0..n_ues {
            let hist = &mut self.history[n];
            for _ in 0..arrivals[n] {
                let occupancy = hist.iter().filter(|r| r.fate == Fate::Queued).count();
                let fate = if occupancy < self.queue_capacity {
                    Fate::Queued
                } else {
                    dropped[n] += 1;
                    Fate::Dropped
                };
                hist.push(Record { gen_slot: t, fate });
            }

            let budget = (alloc[n] * self.packets_per_unit) as usize;
            // Oldest waiting packets first; stable sort keeps arrival order among equal slots.
            let mut waiting: Vec<usize> = (0..hist.len()).filter(|&i| hist[i].fate == Fate::Queued).collect();
            waiting.sort_by_key(|&i| hist[i].gen_slot);
            for &i in waiting.iter().take(budget) {
                hist[i].fate = Fate::Departed(t);
                served[n] += 1;
            }

            let newest_delivered = hist
                .iter()
                .filter(|r| matches!(r.fate, Fate::Departed(d) if d <= t))
                .map(|r| r.gen_slot)
                .max();
            aoi[n] = match newest_delivered {
                Some(g) => t - g,
                None => t + 1,
            };
        }

        let utility: Vec<f64> = alloc
            .iter()
            .zip(arrivals)
            .map(|(&b, &x)| node_utility(b, x, b > 0))
            .collect();
        let reward = slot_reward(&utility, &aoi, self.beta).expect("equal lengths");
        self.slot += 1;
        ReferenceSlot {
            aoi,
            served,
            dropped,
            utility,
            reward,
        }
    }
}
