use rayon::prelude::*;

use crate::augment::{finetune_transform, make_view_pair, AugPolicy};
use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{tag, SeededRng};
use crate::tensor::Tensor;

/// Sample order for one epoch, addressed by `(seed, words)` only.
pub fn epoch_order(n: usize, seed: u64, words: &[u64]) -> Vec<usize> {
    let mut stream = vec![tag::SHUFFLE];
    stream.extend_from_slice(words);
    SeededRng::new(seed, &stream).permutation(n)
}

/// Consecutive chunks of `order`; a short tail is dropped when `drop_last`.
pub fn batches(order: &[usize], batch: usize, drop_last: bool) -> Vec<&[usize]> {
    order
        .chunks(batch.max(1))
        .filter(|c| !drop_last || c.len() == batch)
        .collect()
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Two augmented views of every image in `idx`. Image `i` draws from
/// `rng.derive([i])`, so the result does not depend on batch composition
/// or thread scheduling.
pub fn ssl_batch(set: &ImageSet, idx: &[usize], policy: &AugPolicy, rng: &SeededRng) -> Result<(Tensor, Tensor)> {
    let pairs: Vec<_> = idx
        .par_iter()
        .map(|&i| make_view_pair(i, &set.images[i], policy, &rng.derive(&[i as u64])))
        .collect();
    let a: Vec<Tensor> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Tensor> = pairs.into_iter().map(|p| p.b).collect();
    Ok((stack(&a)?, stack(&b)?))
}

/// Fine-tuning inputs at resolution `r`; evaluation ignores `rng`.
pub fn supervised_batch(
    set: &ImageSet,
    idx: &[usize],
    train: bool,
    r: usize,
    policy: &AugPolicy,
    rng: &SeededRng,
) -> Result<Tensor> {
    let views: Vec<Tensor> = idx
        .par_iter()
        .map(|&i| finetune_transform(&set.images[i], train, r, policy, &mut rng.derive(&[i as u64])))
        .collect();
    stack(&views)
}
