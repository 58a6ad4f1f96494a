use alloc::format;

use super::{embedding_rows, Model};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Changes the encoder memory size of a trained model.
///
/// Shrinking keeps the first `new_m` memory embeddings. Growing keeps all of
/// them and appends `new_m - m` rows drawn from the embedding initializer
/// with `seed`. No other parameter is touched.
pub fn lesion_memory(model: &Model, new_m: usize, seed: u64) -> Result<Model> {
    let variant = model.config.variant;
    let Some(mem_id) = model.weights.mem_embed else {
        return Err(Error::config(format!(
            "variant {} has no encoder memory to lesion",
            variant.name()
        )));
    };
    if variant.is_bottleneck() && new_m == 0 {
        return Err(Error::config(format!(
            "{} cannot run without memory",
            variant.name()
        )));
    }
    let d = model.config.d_model;
    let current = model.params.value(mem_id);
    let m = current.shape()[0];
    let value = if new_m <= m {
        current.slice_rows(0, new_m)
    } else {
        let mut rng = Rng::derive(seed, 0x1e51, m as u64);
        let extra = embedding_rows(new_m - m, d, &mut rng);
        let mut data = current.data().to_vec();
        data.extend_from_slice(extra.data());
        Tensor::new(&[new_m, d], data)?
    };
    let mut out = model.clone();
    out.params.replace(mem_id, value);
    out.config.m_enc = new_m;
    Ok(out)
}
