use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, PipelineError, Result, SliceRecord};
use crate::scalar::{cst, Scalar};

/// Indices into `DatasetSplit::labeled` and `DatasetSplit::unlabeled`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Dense batch: labeled rows first, then unlabeled rows.
#[derive(Debug, Clone)]
pub struct BatchTensors<T> {
    /// `(B, 1, H, W)`.
    pub image_a: Array4<T>,
    pub image_b: Array4<T>,
    /// `(n_labeled, H, W)`; only labeled rows have masks.
    pub mask: Array3<u8>,
    pub n_labeled: usize,
}

impl<T> BatchTensors<T> {
    pub fn n_unlabeled(&self) -> usize {
        self.image_a.dim().0 - self.n_labeled
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tensors<T: Scalar>(&self, split: &DatasetSplit) -> BatchTensors<T> {
        let labeled: Vec<&SliceRecord> = self.labeled.iter().map(|&i| &split.labeled[i]).collect();
        let unlabeled: Vec<&SliceRecord> =
            self.unlabeled.iter().map(|&i| &split.unlabeled[i]).collect();
        let mut tensors = stack_images(labeled.iter().chain(unlabeled.iter()).copied());
        let (h, w) = labeled[0].image_a.dim();
        let mut mask = Array3::<u8>::zeros((labeled.len(), h, w));
        for (i, r) in labeled.iter().enumerate() {
            let m = r.mask.as_ref().expect("labeled record carries a mask");
            mask.index_axis_mut(ndarray::Axis(0), i).assign(m);
        }
        tensors.mask = mask;
        tensors.n_labeled = labeled.len();
        tensors
    }
}

/// Stacks both modalities of `records` into `(B, 1, H, W)` tensors.
pub fn batch_images<T: Scalar>(records: &[SliceRecord]) -> (Array4<T>, Array4<T>) {
    let t = stack_images(records.iter());
    (t.image_a, t.image_b)
}

/// Stacks record images into `(B, 1, H, W)` tensors; masks are left empty.
pub(crate) fn stack_images<'a, T: Scalar>(
    records: impl Iterator<Item = &'a SliceRecord> + Clone,
) -> BatchTensors<T> {
    let n = records.clone().count();
    let (h, w) = records
        .clone()
        .next()
        .map(|r| r.image_a.dim())
        .unwrap_or((0, 0));
    let mut image_a = Array4::<T>::zeros((n, 1, h, w));
    let mut image_b = Array4::<T>::zeros((n, 1, h, w));
    for (i, r) in records.enumerate() {
        for ((y, x), &v) in r.image_a.indexed_iter() {
            image_a[[i, 0, y, x]] = cst(v as f64);
        }
        for ((y, x), &v) in r.image_b.indexed_iter() {
            image_b[[i, 0, y, x]] = cst(v as f64);
        }
    }
    BatchTensors {
        image_a,
        image_b,
        mask: Array3::zeros((0, h, w)),
        n_labeled: 0,
    }
}

/// Endless reshuffled stream over `0..n`.
struct Cycler<'r> {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Cycler<'r> {
    fn new(n: usize, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One epoch of mixed batches.
///
/// The larger stream (unlabeled, when present) defines the epoch and is
/// visited once without replacement; its last batch may be short. The
/// labeled stream cycles with a fresh permutation each pass so that every
/// batch carries exactly `batch_labeled` labeled records.
pub fn make_batches(
    split: &DatasetSplit,
    batch_labeled: usize,
    batch_unlabeled: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_labeled == 0 || batch_unlabeled == 0 {
        return Err(PipelineError::InvalidBatchSize);
    }
    if split.labeled.is_empty() {
        return Err(PipelineError::EmptyLabeledSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let n_l = split.labeled.len();
    let n_u = split.unlabeled.len();

    if n_u == 0 {
        let mut order: Vec<usize> = (0..n_l).collect();
        order.shuffle(&mut rng);
        return Ok(order
            .chunks(batch_labeled)
            .map(|c| Batch {
                labeled: c.to_vec(),
                unlabeled: Vec::new(),
            })
            .collect());
    }

    let mut unl_order: Vec<usize> = (0..n_u).collect();
    unl_order.shuffle(&mut rng);
    let chunks: Vec<Vec<usize>> = unl_order.chunks(batch_unlabeled).map(|c| c.to_vec()).collect();
    let mut labeled = Cycler::new(n_l, &mut rng);
    Ok(chunks
        .into_iter()
        .map(|unlabeled| Batch {
            labeled: labeled.take(batch_labeled),
            unlabeled,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn record(pid: &str, i: usize, labeled: bool) -> SliceRecord {
        SliceRecord {
            patient_id: pid.into(),
            slice_index: i,
            image_a: Array2::from_elem((4, 4), i as f32),
            image_b: Array2::from_elem((4, 4), -(i as f32)),
            mask: labeled.then(|| Array2::from_elem((4, 4), (i % 2) as u8)),
            labeled,
        }
    }

    fn split(n_l: usize, n_u: usize) -> DatasetSplit {
        DatasetSplit {
            labeled: (0..n_l).map(|i| record("l", i, true)).collect(),
            unlabeled: (0..n_u).map(|i| record("u", i, false)).collect(),
            test: vec![record("t", 0, true)],
            label_fraction: 0.1,
            seed: 0,
        }
    }

    #[test]
    fn labeled_only_epoch() {
        let batches = make_batches(&split(8, 0), 4, 4, 3, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.unlabeled.is_empty() && b.labeled.len() == 4));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.labeled.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn unlabeled_defines_epoch_and_labeled_cycles() {
        let batches = make_batches(&split(8, 80), 4, 4, 3, 0).unwrap();
        assert_eq!(batches.len(), 20);
        let mut counts = [0usize; 8];
        for b in &batches {
            assert_eq!(b.labeled.len(), 4);
            assert_eq!(b.unlabeled.len(), 4);
            for &i in &b.labeled {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 10));
        let mut unl: Vec<usize> = batches.iter().flat_map(|b| b.unlabeled.clone()).collect();
        unl.sort();
        assert_eq!(unl, (0..80).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let s = split(8, 30);
        assert_eq!(
            make_batches(&s, 3, 4, 9, 2).unwrap(),
            make_batches(&s, 3, 4, 9, 2).unwrap()
        );
        assert_ne!(
            make_batches(&s, 3, 4, 9, 2).unwrap(),
            make_batches(&s, 3, 4, 9, 3).unwrap()
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            make_batches(&split(0, 4), 2, 2, 0, 0),
            Err(PipelineError::EmptyLabeledSet)
        ));
        assert!(matches!(
            make_batches(&split(2, 4), 0, 2, 0, 0),
            Err(PipelineError::InvalidBatchSize)
        ));
    }

    #[test]
    fn tensors_put_labeled_rows_first() {
        let s = split(4, 4);
        let b = Batch {
            labeled: vec![1, 3],
            unlabeled: vec![2],
        };
        let t = b.tensors::<f64>(&s);
        assert_eq!(t.image_a.dim(), (3, 1, 4, 4));
        assert_eq!(t.mask.dim(), (2, 4, 4));
        assert_eq!(t.n_labeled, 2);
        assert_eq!(t.n_unlabeled(), 1);
        assert_eq!(t.image_a[[0, 0, 0, 0]], 1.0);
        assert_eq!(t.image_a[[2, 0, 0, 0]], 2.0);
        assert_eq!(t.mask[[1, 0, 0]], 1);
    }
}
