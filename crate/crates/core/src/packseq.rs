//! Equal-size mini-batches of variable-length sequences, and the packed
//! time-major layout used to run the recurrent cell once per timestep over
//! every live sequence.
//!
//! A packed batch sorts its sequences by length (longest first) and stores
//! step `t` of every sequence still alive at `t` contiguously, so
//! `batch_sizes` is non-increasing and never contains a zero.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rollout::RolloutView;
use crate::seeding::{stream_rng, Stream};

/// A contiguous run of one rollout sequence assigned to a mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSlice {
    /// Index into [`RolloutView::sequences`].
    pub sequence: usize,
    pub sequence_id: u64,
    /// First step of the slice relative to the sequence start.
    pub offset: usize,
    pub len: usize,
    /// Absolute index of the first step in [`RolloutView::steps`].
    pub start: usize,
    pub stale: bool,
}

impl SequenceSlice {
    /// A tail split off a straddling sequence: its initial recurrent state
    /// must be recomputed by running the current policy over the head.
    pub fn recompute_from_parent(&self) -> bool {
        self.offset > 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SequenceGroup {
    pub slices: Vec<SequenceSlice>,
}

impl SequenceGroup {
    pub fn num_steps(&self) -> usize {
        self.slices.iter().map(|s| s.len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.slices.iter().map(|s| s.len).collect()
    }
}

/// Randomly orders the view's sequences and fills `minibatches` groups of
/// exactly `view.len() / minibatches` steps each, splitting the sequence
/// that straddles a boundary.
///
/// `minibatches` must divide the view capacity. A short view (preempted,
/// nothing to backfill from) is divided as evenly as possible instead.
pub fn split_minibatches(
    view: &RolloutView,
    minibatches: usize,
    seed: u64,
) -> Result<Vec<SequenceGroup>> {
    if minibatches == 0 || view.capacity % minibatches != 0 {
        return Err(Error::IndivisibleMinibatch {
            steps: view.capacity,
            minibatches,
        });
    }
    if view.is_empty() {
        return Err(Error::EmptyRollout);
    }
    let total = view.len();
    if total < minibatches {
        return Err(Error::IndivisibleMinibatch {
            steps: total,
            minibatches,
        });
    }
    let targets: Vec<usize> = (0..minibatches)
        .map(|b| total / minibatches + usize::from(b < total % minibatches))
        .collect();

    let mut order: Vec<usize> = (0..view.sequences.len()).collect();
    order.shuffle(&mut stream_rng(Stream::Minibatch, &[seed, view.rollout_index]));
    Ok(greedy_fill(view, &order, &targets))
}

fn greedy_fill(view: &RolloutView, order: &[usize], targets: &[usize]) -> Vec<SequenceGroup> {
    let mut groups = vec![SequenceGroup::default(); targets.len()];
    let mut current = 0;
    let mut room = targets[0];
    for &idx in order {
        let seq = &view.sequences[idx];
        let mut offset = 0;
        while offset < seq.len {
            if room == 0 {
                current += 1;
                room = targets[current];
            }
            let take = (seq.len - offset).min(room);
            groups[current].slices.push(SequenceSlice {
                sequence: idx,
                sequence_id: seq.id,
                offset,
                len: take,
                start: seq.start + offset,
                stale: seq.stale,
            });
            offset += take;
            room -= take;
        }
    }
    groups
}

/// Packed time-major layout of a group of sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    /// Live sequences at each timestep.
    pub batch_sizes: Vec<usize>,
    /// `order[j]` is the input index of the `j`-th longest sequence.
    pub order: Vec<usize>,
    /// Lengths in packed (sorted) order.
    pub lengths: Vec<usize>,
    /// Input index and step offset of every packed row.
    pub rows: Vec<(usize, usize)>,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of sequences.
    pub fn width(&self) -> usize {
        self.order.len()
    }

    /// Packed row of step `t` of the `j`-th packed sequence.
    pub fn row(&self, t: usize, j: usize) -> usize {
        debug_assert!(j < self.batch_sizes[t]);
        self.batch_sizes[..t].iter().sum::<usize>() + j
    }

    /// Packed row holding the last step of each input sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        let mut out = vec![0; self.order.len()];
        let mut offsets = Vec::with_capacity(self.batch_sizes.len());
        let mut acc = 0;
        for &b in &self.batch_sizes {
            offsets.push(acc);
            acc += b;
        }
        for (j, (&input, &len)) in self.order.iter().zip(&self.lengths).enumerate() {
            out[input] = offsets[len - 1] + j;
        }
        out
    }

    /// Reorders packed rows of `data` back into per-sequence vectors,
    /// indexed like the input of [`pack`].
    pub fn unpack<T: Clone>(&self, data: &[T]) -> Vec<Vec<T>> {
        assert_eq!(data.len(), self.rows.len(), "packed data length");
        let mut out: Vec<Vec<T>> = vec![Vec::new(); self.order.len()];
        let mut sorted_by_input = vec![0; self.order.len()];
        for (j, &input) in self.order.iter().enumerate() {
            sorted_by_input[input] = self.lengths[j];
        }
        for (v, len) in out.iter_mut().zip(sorted_by_input) {
            v.reserve(len);
        }
        for (value, &(input, _)) in data.iter().zip(&self.rows) {
            out[input].push(value.clone());
        }
        out
    }

    /// Lays `sequences` out in packed order.
    pub fn gather<T: Clone>(&self, sequences: &[Vec<T>]) -> Vec<T> {
        self.rows
            .iter()
            .map(|&(input, t)| sequences[input][t].clone())
            .collect()
    }
}

/// Packed layout for sequences of the given lengths. Ties keep input order.
pub fn pack(lengths: &[usize]) -> Result<PackedBatch> {
    if lengths.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if lengths.contains(&0) {
        return Err(Error::Shape("packed sequences must be non-empty".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let sorted: Vec<usize> = order.iter().map(|&i| lengths[i]).collect();
    let max_len = sorted[0];
    let mut batch_sizes = Vec::with_capacity(max_len);
    let mut rows = Vec::with_capacity(lengths.iter().sum());
    for t in 0..max_len {
        let live = sorted.partition_point(|&l| l > t);
        batch_sizes.push(live);
        rows.extend(order[..live].iter().map(|&input| (input, t)));
    }
    Ok(PackedBatch {
        batch_sizes,
        order,
        lengths: sorted,
        rows,
    })
}

/// Packs a mini-batch group; `rows` can be mapped to rollout steps with
/// [`group_step_index`].
pub fn pack_group(group: &SequenceGroup) -> Result<PackedBatch> {
    pack(&group.lengths())
}

/// Absolute rollout step index of every packed row of `group`.
pub fn group_step_index(group: &SequenceGroup, packed: &PackedBatch) -> Vec<usize> {
    packed
        .rows
        .iter()
        .map(|&(input, t)| group.slices[input].start + t)
        .collect()
}
