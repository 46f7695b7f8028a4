//! Full segmentation model: parameter initialization and the forward pass
//! from image to class-by-patch mask logits.

use crate::config::Config;
use crate::data::GzlssSplit;
use crate::decoder::{decode, init_decoder, predict};
use crate::encoder::{encode, filter_name, init_backbone, init_prompts};
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::metrics::LabelMap;
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use std::sync::Arc;

/// Name of the frozen `C × D` class-embedding table in a parameter store.
pub const CLASS_EMBEDDINGS: &str = "class.embeddings";

/// Which of the two spectral components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub spt: bool,
    pub sgd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { spt: true, sgd: true }
    }
}

impl Ablation {
    /// Applies the switches to a config: no spectral prompt layers and/or a
    /// plain attention decoder.
    pub fn apply(self, cfg: &mut Config) {
        if !self.spt {
            cfg.encoder.spt_range.clear();
        }
        if !self.sgd {
            cfg.decoder.spectral_guided = false;
        }
    }
}

/// Class registry plus every parameter, initialized from the config seed.
///
/// Each parameter group draws from its own sub-stream, so turning a component
/// off leaves the initial values of the others unchanged.
pub fn init_model(cfg: &Config) -> (GzlssSplit, ParamStore) {
    let seed = cfg.train.seed;
    let mut store = init_backbone(&cfg.encoder, &mut rng::stream(seed, "init.backbone"));
    let split = GzlssSplit::new(&cfg.data, cfg.encoder.width, &mut rng::stream(seed, "init.classes"));
    store.insert(CLASS_EMBEDDINGS, split.embeddings().clone(), false);
    store.merge(init_prompts(&cfg.encoder, &mut rng::stream(seed, "init.prompts")));
    store.merge(init_decoder(&cfg.decoder, cfg.encoder.width, &mut rng::stream(seed, "init.decoder")));
    (split, store)
}

/// Registry from a stored class-embedding table.
pub fn split_from_store(cfg: &Config, store: &ParamStore) -> Result<GzlssSplit> {
    GzlssSplit::from_embeddings(cfg.data.seen_classes, store.get(CLASS_EMBEDDINGS)?.clone())
}

/// Removes every spectral filter, giving the prompt-only configuration.
pub fn strip_spectral_filters(cfg: &Config, store: &mut ParamStore) {
    for l in 1..=cfg.encoder.layers {
        store.remove(&filter_name(l));
    }
}

/// Mask logits `|classes| × N` for the given class ids, in that order.
pub fn forward(g: &mut Graph, b: &mut Binder, cfg: &Config, image: &Tensor, classes: &[usize]) -> Result<Var, TensorError> {
    let enc = encode(g, b, &cfg.encoder, image)?;
    let table = b.var(g, CLASS_EMBEDDINGS)?;
    let t = g.gather_rows(table, Arc::from(classes))?;
    decode(g, b, &cfg.decoder, enc.patches, enc.cls, t)
}

/// Logits over every class id `0..C`.
pub fn mask_logits(store: &ParamStore, cfg: &Config, image: &Tensor) -> Result<Tensor, TensorError> {
    let classes: Vec<usize> = (0..store.get(CLASS_EMBEDDINGS)?.rows()).collect();
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let m = forward(&mut g, &mut b, cfg, image, &classes)?;
    Ok(g.value(m).clone())
}

/// Pixel label map, argmax restricted to `subset`.
pub fn segment(store: &ParamStore, cfg: &Config, image: &Tensor, subset: &[usize]) -> Result<LabelMap, TensorError> {
    let logits = mask_logits(store, cfg, image)?;
    predict(&logits, subset, cfg.encoder.patch_size)
}
