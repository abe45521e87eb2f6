use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

/// Sampling without replacement inside shuffled epochs.
///
/// The permutation of epoch `e` is drawn from the independent random stream
/// `stream_base + e` of the run seed, so the sampler's whole state is the
/// pair `(epoch, cursor)`. A batch that would run past the end of the
/// permutation starts a fresh epoch instead; the leftover tail is skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSampler {
    len: usize,
    seed: u64,
    stream_base: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64, stream_base: u64) -> Self {
        Self::restore(len, seed, stream_base, 0, 0)
    }

    pub fn restore(len: usize, seed: u64, stream_base: u64, epoch: u64, cursor: usize) -> Self {
        let mut s = Self {
            len,
            seed,
            stream_base,
            epoch,
            cursor,
            order: Vec::new(),
        };
        s.order = s.permutation(epoch);
        s
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        RngState::derive(self.seed, self.stream_base.wrapping_add(epoch)).shuffle(&mut order);
        order
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if self.len == 0 {
            return Err(Error::Empty { op: "sample batch" });
        }
        if batch_size == 0 || batch_size > self.len {
            return Err(Error::Invalid(format!(
                "batch size {batch_size} not in [1, {}] (dataset size)",
                self.len
            )));
        }
        if self.cursor + batch_size > self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.permutation(self.epoch);
        }
        let batch = self.order[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        Ok(batch)
    }
}

pub fn sample_source_batch(
    sampler: &mut EpochSampler,
    view: &TrainingView<'_>,
    batch_size: usize,
) -> Result<(Matrix, Vec<usize>)> {
    let idx = sampler.next_batch(batch_size)?;
    let x = view.source_features.select_rows(&idx);
    let y = idx.iter().map(|&i| view.source_labels[i]).collect();
    Ok((x, y))
}

pub fn sample_target_batch(
    sampler: &mut EpochSampler,
    view: &TrainingView<'_>,
    batch_size: usize,
) -> Result<Matrix> {
    let idx = sampler.next_batch(batch_size)?;
    Ok(view.target_features.select_rows(&idx))
}
