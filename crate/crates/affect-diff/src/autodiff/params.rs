//! Named parameter storage with group tags.
//!
//! Parameters live outside any single computation graph so that one set of
//! weights can back many forward passes. Groups separate the backbone
//! (encoders, causal graph, fusion, VAE, classifier) from the denoiser
//! (U-Net plus conditioning), which is what the stop-gradient contract and
//! the EMA shadow operate on.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::rng::StreamRng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Which optimization path a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoders, causal graph, fusion, VAE, classifier head.
    Backbone,
    /// Denoiser U-Net and its conditioning embeddings.
    Diffusion,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub group: ParamGroup,
}

/// Flat, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar count restricted to one group.
    pub fn num_scalars_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Uniform init on [-bound, bound] with bound = sqrt(1 / fan_in)
/// (the familiar linear-layer default).
pub fn linear_init(rng: &mut StreamRng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    a
}

/// Zero-filled tensor, used for biases and norm offsets.
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// One-filled tensor, used for norm gains.
pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Small Gaussian init, used for embedding tables.
pub fn normal_init(rng: &mut StreamRng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = crate::rng::normal(rng) * std;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn add_and_lookup() {
        let mut ps = ParamStore::new();
        let id = ps.add("enc.text.proj.w", zeros(&[4, 8]), ParamGroup::Backbone);
        assert_eq!(ps.name(id), "enc.text.proj.w");
        assert_eq!(ps.value(id).shape(), &[4, 8]);
        assert_eq!(ps.num_scalars(), 32);
        assert_eq!(ps.find("enc.text.proj.w"), Some(id));
    }

    #[test]
    fn group_counts() {
        let mut ps = ParamStore::new();
        ps.add("a", zeros(&[3]), ParamGroup::Backbone);
        ps.add("b", zeros(&[5]), ParamGroup::Diffusion);
        assert_eq!(ps.num_scalars_in(ParamGroup::Backbone), 3);
        assert_eq!(ps.num_scalars_in(ParamGroup::Diffusion), 5);
    }

    #[test]
    fn init_is_deterministic() {
        let mut r1 = stream(7, "init", &[]);
        let mut r2 = stream(7, "init", &[]);
        let a = linear_init(&mut r1, &[3, 3], 3);
        let b = linear_init(&mut r2, &[3, 3], 3);
        assert_eq!(a, b);
    }
}
