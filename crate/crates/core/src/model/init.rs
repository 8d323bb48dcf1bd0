use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::numeric::{ParameterStore, Tensor};

const REL_STD: f64 = 0.1;

/// How the value projection of newly created cross-attention blocks starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueInit {
    Random,
    Zero,
}

fn linear(store: &mut ParameterStore<f32>, name: &str, fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert_normal(name, &[fan_in, fan_out], scale / (fan_in as f64).sqrt(), rng)?;
    Ok(())
}

fn gain(store: &mut ParameterStore<f32>, name: &str, d: usize) -> Result<()> {
    store.insert(name, Tensor::full(&[d], 1.0))?;
    Ok(())
}

fn attention_block(
    store: &mut ParameterStore<f32>,
    prefix: &str,
    cfg: &ModelConfig,
    d_q: usize,
    d_kv: usize,
    out_scale: f64,
    value: ValueInit,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let w = cfg.attn_width();
    gain(store, &format!("{prefix}.norm"), d_q)?;
    linear(store, &format!("{prefix}.wq"), d_q, w, 1.0, rng)?;
    linear(store, &format!("{prefix}.wk"), d_kv, w, 1.0, rng)?;
    match value {
        ValueInit::Random => linear(store, &format!("{prefix}.wv"), d_kv, w, 1.0, rng)?,
        ValueInit::Zero => {
            store.insert(&format!("{prefix}.wv"), Tensor::zeros(&[d_kv, w]))?;
        }
    }
    linear(store, &format!("{prefix}.wo"), w, d_q, out_scale, rng)?;
    store.insert_normal(&format!("{prefix}.rel"), &[cfg.heads, cfg.rel_features], REL_STD, rng)?;
    Ok(())
}

fn ffw_block(store: &mut ParameterStore<f32>, prefix: &str, d: usize, d_ffw: usize, out_scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    gain(store, &format!("{prefix}.norm"), d)?;
    linear(store, &format!("{prefix}.w1"), d, d_ffw, 1.0, rng)?;
    linear(store, &format!("{prefix}.w2"), d_ffw, d, out_scale, rng)?;
    Ok(())
}

fn base_params(store: &mut ParameterStore<f32>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d_model;
    let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    store.insert_normal("dec.embed", &[cfg.vocab, d], 1.0, rng)?;
    for l in 1..=cfg.layers {
        attention_block(store, &format!("dec.{l}.attn"), cfg, d, d, out_scale, ValueInit::Random, rng)?;
        ffw_block(store, &format!("dec.{l}.ffw"), d, cfg.d_ffw, out_scale, rng)?;
    }
    gain(store, "dec.norm_f", d)?;
    linear(store, "dec.readout", d, cfg.vocab, 1.0, rng)
}

/// Adds the neighbour encoder and every CCA block of `cfg` to `store`.
pub fn add_retrieval_params(store: &mut ParameterStore<f32>, cfg: &ModelConfig, value: ValueInit, rng: &mut ChaCha8Rng) -> Result<()> {
    let (d, de) = (cfg.d_model, cfg.d_enc);
    let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    let enc_scale = 1.0 / (2.0 * cfg.enc_layers.max(1) as f64).sqrt();
    for &l in &cfg.cca_layers {
        attention_block(store, &format!("dec.{l}.cca"), cfg, d, de, out_scale, value, rng)?;
    }
    if !cfg.shared_embeddings {
        store.insert_normal("enc.embed", &[cfg.vocab, de], 1.0, rng)?;
    }
    for l in 1..=cfg.enc_layers {
        attention_block(store, &format!("enc.{l}.attn"), cfg, de, de, enc_scale, ValueInit::Random, rng)?;
        if cfg.enc_ca_layers.contains(&l) {
            attention_block(store, &format!("enc.{l}.ca"), cfg, de, d, enc_scale, value, rng)?;
            gain(store, &format!("enc.{l}.ca.cond_norm"), d)?;
        }
        ffw_block(store, &format!("enc.{l}.ffw"), de, cfg.enc_d_ffw, enc_scale, rng)?;
    }
    gain(store, "enc.norm_f", de)
}

/// Fresh parameters for `cfg`, fully determined by `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    base_params(&mut store, cfg, &mut rng)?;
    if cfg.retrieval_enabled() {
        add_retrieval_params(&mut store, cfg, ValueInit::Random, &mut rng)?;
    }
    Ok(store)
}

/// True for parameters that belong to the encoder or a CCA block.
pub fn is_retrieval_param(name: &str) -> bool {
    name.starts_with("enc.") || name.contains(".cca.")
}

/// Turns a retrieval-off model into a retrieval model: base tensors are
/// frozen and new encoder and CCA blocks start with zero value projections.
pub fn retrofit_params(base: &ParameterStore<f32>, base_cfg: &ModelConfig, cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    ensure!(
        !base.names().iter().any(|n| is_retrieval_param(n)),
        "base checkpoint already contains retrieval weights"
    );
    ensure!(cfg.retrieval_enabled(), "retrofit target config must enable retrieval");
    let same = |a: &ModelConfig, b: &ModelConfig| {
        a.vocab == b.vocab && a.d_model == b.d_model && a.layers == b.layers && a.heads == b.heads && a.head_dim == b.head_dim && a.d_ffw == b.d_ffw && a.rel_features == b.rel_features
    };
    ensure!(same(base_cfg, cfg), "retrofit config must keep the base decoder shape");
    let mut store = base.clone();
    for id in store.ids().collect::<Vec<_>>() {
        store.set_frozen(id, true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_retrieval_params(&mut store, cfg, ValueInit::Zero, &mut rng)?;
    Ok(store)
}
