//! Causal transformer text encoder producing `[16, width]` hidden states.

use cife_tensor::{Scalar, Var};

use super::config::TextConfig;
use super::tokenizer::{vocab_size, TEXT_LEN};
use crate::error::{CifeError, Result};
use crate::nn::Net;
use crate::params::{Init, ParamStore};

pub fn init(cfg: &TextConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut i = Init::new(&mut store, seed, "init.text");
    i.table("text.token_embedding", vec![vocab_size(), cfg.width], 1.0);
    i.table("text.position_embedding", vec![TEXT_LEN, cfg.width], 0.1);
    for b in 0..cfg.layers {
        i.transformer_block(&format!("text.blocks.{b}"), cfg.width, cfg.mlp, false);
    }
    i.norm("text.ln_final", cfg.width);
    store
}

/// Encodes `N` token sequences laid end to end in `ids` into `[N, 16, width]`.
pub(crate) fn encode<T: Scalar>(net: &mut Net<'_, T>, cfg: &TextConfig, ids: &[usize]) -> Result<Var> {
    let vocab = vocab_size();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(CifeError::UnknownToken { id, vocab });
    }
    if ids.is_empty() || ids.len() % TEXT_LEN != 0 {
        return Err(CifeError::Config(format!(
            "token count {} is not a positive multiple of {TEXT_LEN}",
            ids.len()
        )));
    }
    let n = ids.len() / TEXT_LEN;
    let table = net.p("text.token_embedding")?;
    let tok = net.tape.embedding(table, ids)?;
    let tok = net.tape.reshape(tok, &[n, TEXT_LEN, cfg.width])?;
    let pos = net.p("text.position_embedding")?;
    let mut h = net.tape.add_bias(tok, pos)?;
    for b in 0..cfg.layers {
        h = net.transformer_block(&format!("text.blocks.{b}"), h, cfg.heads, true)?;
    }
    net.layer_norm("text.ln_final", h)
}
