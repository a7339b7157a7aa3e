//! Parallel Las Vegas search over a shared permutation.
//!
//! The shared number seeds a ChaCha8 stream (label `las-vegas`, seed
//! `mix(value, K)`) that drives a Fisher-Yates shuffle of `0..n`. Node `i`
//! probes permutation positions `i, i + p, i + 2p, ...`. Nodes run in
//! lockstep rounds; the first round with a hit wins, ties going to the
//! lowest node.

use std::sync::mpsc;

use rand::seq::SliceRandom;

use super::SharedRandom;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchOutcome {
    pub index: usize,
    pub winner: usize,
    /// Lockstep rounds until the hit; the probes-until-hit count.
    pub rounds: u64,
    /// Probes each node made by the end of the winning round.
    pub probes_per_node: Vec<u64>,
}

/// The probe permutation of `0..n`.
pub fn probe_order(n: usize, shared: SharedRandom) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(rng::mix(shared.value(), shared.k_bits() as u64), "las-vegas");
    order.shuffle(&mut rng);
    order
}

/// The indices each node probes, in probe order.
pub fn probe_sets(n: usize, shared: SharedRandom, nodes: usize) -> Result<Vec<Vec<usize>>> {
    if nodes == 0 {
        return invalid("at least one node is needed");
    }
    let order = probe_order(n, shared);
    Ok((0..nodes)
        .map(|i| order.iter().skip(i).step_by(nodes).copied().collect())
        .collect())
}

/// Finds an index satisfying `target`, searched by `nodes` workers.
pub fn parallel_las_vegas_search<F>(n: usize, target: &F, shared: SharedRandom, nodes: usize) -> Result<SearchOutcome>
where
    F: Fn(usize) -> bool + Sync,
{
    let sets = probe_sets(n, shared, nodes)?;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for (i, set) in sets.iter().enumerate() {
            let tx = tx.clone();
            s.spawn(move || {
                let hit = set.iter().position(|&k| target(k)).map(|pos| (pos as u64 + 1, set[pos]));
                let _ = tx.send((i, hit, set.len() as u64));
            });
        }
    });
    drop(tx);
    let mut reports: Vec<(usize, Option<(u64, usize)>, u64)> = rx.into_iter().collect();
    reports.sort_by_key(|r| r.0);
    let best = reports
        .iter()
        .filter_map(|&(node, hit, _)| hit.map(|(round, index)| (round, node, index)))
        .min();
    let Some((rounds, winner, index)) = best else {
        return Err(Error::NotFound);
    };
    // rounds are simultaneous: every node probes until the winning round
    // or until its positions run out
    let probes_per_node = reports.iter().map(|&(_, _, len)| len.min(rounds)).collect();
    Ok(SearchOutcome {
        index,
        winner,
        rounds,
        probes_per_node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_single_node() {
        let s = SharedRandom::new(5, 8).unwrap();
        let out = parallel_las_vegas_search(1, &|i| i == 0, s, 1).unwrap();
        assert_eq!((out.index, out.rounds), (0, 1));
    }

    #[test]
    fn not_found_after_full_scan() {
        let s = SharedRandom::new(5, 8).unwrap();
        assert!(matches!(parallel_las_vegas_search(50, &|_| false, s, 3), Err(Error::NotFound)));
    }

    #[test]
    fn probes_are_consistent() {
        let s = SharedRandom::new(77, 16).unwrap();
        let order = probe_order(100, s);
        let target = order[41];
        let out = parallel_las_vegas_search(100, &|i| i == target, s, 4).unwrap();
        // position 41 = node 1, round 11
        assert_eq!((out.winner, out.rounds, out.index), (1, 11, target));
        assert_eq!(out.probes_per_node, [11, 11, 11, 11]);
        assert!(out.probes_per_node.iter().sum::<u64>() <= 100);
    }
}
