use crate::error::{Error, Result};
use crate::topology::{Item, ProcessRef, Topology};

/// Work counters reported by [`group_items`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupingStats {
    /// One per item in the counting pass.
    pub item_touches: u64,
    /// One per destination bucket in the prefix pass.
    pub bucket_touches: u64,
}

impl GroupingStats {
    pub fn total(&self) -> u64 {
        self.item_touches + self.bucket_touches
    }
}

/// Stable counting sort of a batch by destination worker.
///
/// Every item must target the same destination process. Items with equal
/// destination come out contiguous, in their original relative order.
pub fn group_items(items: Vec<Item>, topo: &Topology) -> Result<(Vec<Item>, GroupingStats)> {
    let t = topo.workers_per_proc();
    let mut stats = GroupingStats::default();
    let Some(first) = items.first() else {
        stats.bucket_touches = t as u64;
        return Ok((items, stats));
    };
    let process = topo.process_of(first.dest)?;

    let mut counts = vec![0usize; t];
    for item in &items {
        let p = topo.process_of(item.dest)?;
        if p != process {
            return Err(Error::MixedDestinations {
                first: process.0,
                second: p.0,
            });
        }
        counts[topo.local_rank(item.dest)] += 1;
        stats.item_touches += 1;
    }

    let mut offsets = counts;
    let mut running = 0;
    for slot in offsets.iter_mut() {
        let c = *slot;
        *slot = running;
        running += c;
        stats.bucket_touches += 1;
    }

    let mut placed: Vec<Option<Item>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    for item in items {
        let bucket = topo.local_rank(item.dest);
        placed[offsets[bucket]] = Some(item);
        offsets[bucket] += 1;
    }
    let out = placed.into_iter().map(|i| i.expect("every slot placed")).collect();
    Ok((out, stats))
}

/// Splits a grouped batch into maximal runs sharing a destination worker.
///
/// Fails if some worker appears in two separate runs, i.e. the batch was not
/// grouped.
pub(crate) fn split_runs(
    items: Vec<Item>,
    topo: &Topology,
    expect: ProcessRef,
) -> Result<Vec<(crate::topology::WorkerRef, Vec<Item>)>> {
    let mut runs: Vec<(crate::topology::WorkerRef, Vec<Item>)> = Vec::new();
    let mut seen = vec![false; topo.workers_per_proc()];
    for item in items {
        if topo.process_of_unchecked(item.dest) != expect {
            return Err(Error::Internal(format!(
                "item for worker {} arrived at process {}",
                item.dest, expect
            )));
        }
        match runs.last_mut() {
            Some((dest, run)) if *dest == item.dest => run.push(item),
            _ => {
                let rank = topo.local_rank(item.dest);
                if std::mem::replace(&mut seen[rank], true) {
                    return Err(Error::Internal(format!(
                        "batch for process {expect} is not grouped by worker"
                    )));
                }
                runs.push((item.dest, vec![item]));
            }
        }
    }
    Ok(runs)
}
