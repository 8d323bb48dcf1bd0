//! Central-difference check of the full model's gradients in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retro_desk::model::forward::random_tokens;
use retro_desk::model::{init_params, loss_on_tape, ModelConfig, Retrieval};
use retro_desk::numeric::gradcheck::check_gradients;

fn main() -> retro_desk::Result<()> {
    let mut cfg = ModelConfig::small(32, 8, 32, 4);
    cfg.heads = 2;
    cfg.head_dim = 16;
    let store = init_params(&cfg, 1)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = random_tokens(&mut rng, 32, 50);
    let neighbors: Vec<Vec<Vec<u32>>> = (0..4).map(|_| (0..2).map(|_| random_tokens(&mut rng, 16, 50)).collect()).collect();
    let report = check_gradients(&store, 1e-5, 4, &mut rng, |tape, s| {
        Ok(loss_on_tape(tape, s, &cfg, &tokens, Retrieval::On(&neighbors), None)?.0)
    })?;
    println!(
        "{} coordinates over {} tensors, max relative error {:.2e} ({} [{}]: analytic {:.6e}, numeric {:.6e})",
        report.coords_checked,
        store.len(),
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    Ok(())
}
