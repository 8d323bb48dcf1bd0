//! Shapes and the identity region of chunked cross-attention on a
//! 128-token sequence with 16-token chunks and 4 neighbours per chunk.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_desk::model::{cca, encode_neighbors, init_params, ModelConfig};
use retro_desk::numeric::relpos::{cca_distance, DistanceTable};
use retro_desk::numeric::{Tape, Tensor};

fn main() -> retro_desk::Result<()> {
    let (n, m, k, d) = (128, 16, 4, 16);
    let mut cfg = ModelConfig::small(n, m, d, 2);
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.num_neighbors = k;
    let store = init_params(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut tape = Tape::<f32>::new();
    let h = tape.constant(Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.random::<f32>() - 0.5).collect())?);
    let neighbors: Vec<Vec<Vec<u32>>> = (0..n / m)
        .map(|_| (0..k).map(|_| (0..2 * m).map(|_| rng.random_range(1..257)).collect()).collect())
        .collect();
    let e = encode_neighbors(&mut tape, &store, &cfg, &neighbors, h, 0)?;
    println!("encoded neighbours E: {:?}", e.shape());
    let out = cca(&mut tape, &store, "dec.2.cca", &cfg, h, &e, 0)?;
    println!("CCA output: {:?}", tape.value(out).shape());

    let untouched = (0..n).take_while(|&p| tape.value(out).row(p) == tape.value(h).row(p)).count();
    println!("first {untouched} positions pass through unchanged (m - 1 = {})", m - 1);

    let table = DistanceTable::new(m, 2 * m, cfg.rel_features, |i, j| cca_distance(i, j, m));
    println!("query 0 sees relative distances {}..={}", table.distance(0, 2 * m - 1), table.distance(0, 0));
    Ok(())
}
