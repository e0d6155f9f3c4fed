use crate::data::{IdentityDataset, Sample};
use crate::error::Result;
use crate::numerics::Vector;
use crate::par;

/// Anything that maps a sample to an embedding: a model or a teacher oracle.
pub trait Embedder: Sync {
    fn embed(&self, sample: &Sample) -> Result<Vector>;

    fn embed_dim(&self) -> usize;
}

/// Embeds `indices` of `ds` in order.
pub fn embed_indices<E: Embedder + ?Sized>(embedder: &E, ds: &IdentityDataset, indices: &[usize]) -> Result<Vec<Vector>> {
    par::map(indices, |&i| embedder.embed(ds.sample(i))).into_iter().collect()
}
