use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use crate::corpus::PAD;
use crate::error::{ensure, Result};
use crate::numeric::relpos::{cca_distance, encoder_distance, self_distance, DistanceTable};
use crate::numeric::{AttnGroup, AttnLayout, Float, ParameterStore, Tape, Var};

pub const NORM_EPS: f64 = 1e-6;

/// Retrieved values for one sequence: `neighbors[u][j]` is the `[N, F]`
/// token list (length `2m`) of neighbour `j` of chunk `u`.
pub type ChunkNeighbors = [Vec<Vec<u32>>];

#[derive(Debug, Clone, Copy)]
pub enum Retrieval<'a> {
    Off,
    On(&'a ChunkNeighbors),
}

/// Encoder output: `chunks * k * r` rows of width `d_enc`, row-major in
/// `(chunk, neighbour, position)` order.
#[derive(Debug, Clone, Copy)]
pub struct EncodedNeighbors {
    pub var: Var,
    pub chunks: usize,
    pub k: usize,
    pub r: usize,
    pub width: usize,
}

impl EncodedNeighbors {
    pub fn shape(&self) -> [usize; 4] {
        [self.chunks, self.k, self.r, self.width]
    }
}

pub struct ForwardOutput {
    /// `[T, V]`, row `p` predicts token `p + 1`.
    pub logits: Var,
    /// Final normalized hidden states `[T, d]`, the readout input.
    pub hidden: Var,
    pub encoded: Option<EncodedNeighbors>,
}

/// Training-time dropout; `None` disables it.
pub type DropoutRng<'a> = Option<&'a mut dyn rand::RngCore>;

struct Ctx<'s, 'r, T: Float> {
    store: &'s ParameterStore<T>,
    cfg: &'s ModelConfig,
    rng: DropoutRng<'r>,
}

impl<T: Float> Ctx<'_, '_, T> {
    fn p(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        Ok(tape.param(self.store, self.store.id(name)?))
    }

    fn dropout(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => tape.dropout(x, self.cfg.dropout, &mut RngRef(rng)),
            _ => Ok(x),
        }
    }
}

struct RngRef<'a>(&'a mut dyn rand::RngCore);

impl rand::RngCore for RngRef<'_> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

fn norm<T: Float>(tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(store, store.id(name)?);
    tape.rmsnorm(x, g, NORM_EPS)
}

/// Multi-head attention of `queries` over `keys` with the projections under
/// `prefix` and a relative bias from `table`. Returns the projected output
/// (no residual). `queries` are already normalized.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Float>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    heads: usize,
    queries: Var,
    keys: Var,
    groups: Vec<AttnGroup>,
    causal: bool,
    table: DistanceTable,
) -> Result<Var> {
    let p = |tape: &mut Tape<T>, n: &str| -> Result<Var> { Ok(tape.param(store, store.id(&format!("{prefix}.{n}"))?)) };
    let (wq, wk, wv, wo, rel) = (p(tape, "wq")?, p(tape, "wk")?, p(tape, "wv")?, p(tape, "wo")?, p(tape, "rel")?);
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys, wk)?;
    let v = tape.matmul(keys, wv)?;
    let bias = tape.rel_bias(rel, Rc::new(table))?;
    let a = tape.attention(q, k, v, Some(bias), Rc::new(AttnLayout { groups, heads, causal }))?;
    tape.matmul(a, wo)
}

/// Residual cross-attention `h + CA(norm h, y)`: every row of `h` attends
/// all rows of `y`, with relative bias from `table` (`rows(h) x rows(y)`).
pub fn ca<T: Float>(tape: &mut Tape<T>, store: &ParameterStore<T>, prefix: &str, heads: usize, h: Var, y: Var, table: DistanceTable) -> Result<Var> {
    let (hq, hy) = (tape.value(h).rows(), tape.value(y).rows());
    ensure!(table.rows == hq && table.cols == hy, "distance table {}x{} does not match {hq}x{hy}", table.rows, table.cols);
    let hn = norm(tape, store, h, &format!("{prefix}.norm"))?;
    let groups = vec![AttnGroup { q_start: 0, q_len: hq, k_start: 0, k_len: hy }];
    let out = attend(tape, store, prefix, heads, hn, y, groups, false, table)?;
    tape.add(h, out)
}

fn ffw<T: Float>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, '_, T>, prefix: &str, x: Var) -> Result<Var> {
    let xn = norm(tape, ctx.store, x, &format!("{prefix}.norm"))?;
    let w1 = ctx.p(tape, &format!("{prefix}.w1"))?;
    let w2 = ctx.p(tape, &format!("{prefix}.w2"))?;
    let h = tape.matmul(xn, w1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2)?;
    let h = ctx.dropout(tape, h)?;
    tape.add(x, h)
}

/// Chunked cross-attention: returns `H + CCA(H, E)` for `H` of `T` rows.
///
/// Attending chunk `u` covers positions `u m + m - 1 .. u m + 2m - 2` and
/// attends the `k r` encoded rows of chunk `u`. Positions before `m - 1`
/// are left untouched.
pub fn cca<T: Float>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    h: Var,
    e: &EncodedNeighbors,
    pos_offset: usize,
) -> Result<Var> {
    let m = cfg.chunk_len;
    let t = tape.value(h).rows();
    ensure!(e.chunks <= t / m, "encoded neighbours cover {} chunks but the sequence has {} complete chunks", e.chunks, t / m);
    ensure!(tape.value(e.var).rows() == e.chunks * e.k * e.r, "encoded neighbour rows do not match their shape");
    if e.chunks == 0 {
        return Ok(h);
    }
    let hn = norm(tape, store, h, &format!("{prefix}.norm"))?;
    let mut rows = Vec::new();
    let mut groups = Vec::with_capacity(e.chunks);
    for u in 0..e.chunks {
        let start = u * m + m - 1;
        let end = (start + m).min(t);
        groups.push(AttnGroup {
            q_start: rows.len(),
            q_len: end - start,
            k_start: u * e.k * e.r,
            k_len: e.k * e.r,
        });
        rows.extend(start..end);
    }
    let mut scatter = vec![None; t];
    for (i, &p) in rows.iter().enumerate() {
        scatter[p] = Some(i);
    }
    let q_rows = tape.gather_rows(hn, rows.into_iter().map(Some).collect())?;
    let r = e.r;
    let table = DistanceTable::new(m, e.k * r, cfg.rel_features, |i, j| cca_distance(i, j % r + pos_offset, m));
    let out = attend(tape, store, prefix, cfg.heads, q_rows, e.var, groups, false, table)?;
    let placed = tape.gather_rows(out, scatter)?;
    tape.add(h, placed)
}

/// Encodes retrieved tokens `ret[u][j]` (each `r` tokens, already cut to the
/// active span) conditioned on decoder activations `h_cond` (`T x d`).
pub fn encode_neighbors<T: Float>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    ret: &[Vec<Vec<u32>>],
    h_cond: Var,
    pos_offset: usize,
) -> Result<EncodedNeighbors> {
    encode_impl(tape, &mut Ctx { store, cfg, rng: None }, ret, h_cond, pos_offset)
}

fn encode_impl<T: Float>(tape: &mut Tape<T>, ctx: &mut Ctx<'_, '_, T>, ret: &[Vec<Vec<u32>>], h_cond: Var, pos_offset: usize) -> Result<EncodedNeighbors> {
    let cfg = ctx.cfg;
    let store = ctx.store;
    let m = cfg.chunk_len;
    let chunks = ret.len();
    ensure!(chunks > 0, "no neighbours to encode");
    let k = ret[0].len();
    ensure!(k >= 1, "each chunk needs at least one neighbour");
    let r = ret[0][0].len();
    ensure!(r >= 1, "retrieved values must not be empty");
    for (u, nb) in ret.iter().enumerate() {
        ensure!(nb.len() == k, "chunk {u} has {} neighbours, expected {k}", nb.len());
        ensure!(nb.iter().all(|v| v.len() == r), "chunk {u} has a neighbour whose length differs from {r}");
    }
    let hc = tape.value(h_cond);
    ensure!(hc.cols() == cfg.d_model, "conditioning activations must have width {}", cfg.d_model);
    ensure!(hc.rows() >= chunks * m, "conditioning activations cover fewer than {chunks} chunks");
    let ids: Vec<u32> = ret.iter().flatten().flatten().copied().collect();
    let embed = if cfg.shared_embeddings { "dec.embed" } else { "enc.embed" };
    let table = ctx.p(tape, embed)?;
    let mut x = tape.embedding(table, &ids)?;
    let self_groups: Vec<AttnGroup> = (0..chunks * k)
        .map(|g| AttnGroup { q_start: g * r, q_len: r, k_start: g * r, k_len: r })
        .collect();
    let ca_groups: Vec<AttnGroup> = (0..chunks * k)
        .map(|g| AttnGroup { q_start: g * r, q_len: r, k_start: (g / k) * m, k_len: m })
        .collect();
    for l in 1..=cfg.enc_layers {
        let prefix = format!("enc.{l}.attn");
        let xn = norm(tape, store, x, &format!("{prefix}.norm"))?;
        let table = DistanceTable::new(r, r, cfg.rel_features, self_distance);
        let a = attend(tape, store, &prefix, cfg.heads, xn, xn, self_groups.clone(), false, table)?;
        let a = ctx.dropout(tape, a)?;
        x = tape.add(x, a)?;
        if cfg.enc_ca_layers.contains(&l) {
            let prefix = format!("enc.{l}.ca");
            let xn = norm(tape, store, x, &format!("{prefix}.norm"))?;
            let hn = norm(tape, store, h_cond, &format!("{prefix}.cond_norm"))?;
            let table = DistanceTable::new(r, m, cfg.rel_features, |j, i| encoder_distance(j + pos_offset, i));
            let a = attend(tape, store, &prefix, cfg.heads, xn, hn, ca_groups.clone(), false, table)?;
            let a = ctx.dropout(tape, a)?;
            x = tape.add(x, a)?;
        }
        x = ffw(tape, ctx, &format!("enc.{l}.ffw"), x)?;
    }
    let x = norm(tape, store, x, "enc.norm_f")?;
    Ok(EncodedNeighbors {
        var: x,
        chunks,
        k,
        r,
        width: cfg.d_enc,
    })
}

/// Cuts each `[N, F]` value down to the span the configured neighbour mode
/// lets the encoder see, keeping only chunks that are complete in `t` tokens.
pub fn active_neighbors(cfg: &ModelConfig, neighbors: &ChunkNeighbors, t: usize) -> Result<Vec<Vec<Vec<u32>>>> {
    let m = cfg.chunk_len;
    let complete = t / m;
    ensure!(
        neighbors.len() >= complete,
        "{} complete chunks but neighbours for only {}",
        complete,
        neighbors.len()
    );
    let (len, off) = cfg.active_span();
    let mut out = Vec::with_capacity(complete);
    for (u, nb) in neighbors[..complete].iter().enumerate() {
        ensure!(!nb.is_empty(), "chunk {u} has no neighbours");
        let mut row = Vec::with_capacity(nb.len());
        for v in nb {
            ensure!(v.len() == 2 * m, "neighbour value of chunk {u} has length {}, expected {}", v.len(), 2 * m);
            row.push(v[off..off + len].to_vec());
        }
        out.push(row);
    }
    Ok(out)
}

/// Full decoder pass over `tokens` (any length up to `n`).
pub fn forward<T: Float>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    retrieval: Retrieval<'_>,
    rng: DropoutRng<'_>,
) -> Result<ForwardOutput> {
    ensure!(!tokens.is_empty(), "cannot run the model on an empty sequence");
    ensure!(tokens.len() <= cfg.seq_len, "sequence of {} tokens exceeds n = {}", tokens.len(), cfg.seq_len);
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(crate::Error::invalid(format!("token id {bad} outside vocabulary {}", cfg.vocab)));
    }
    let t = tokens.len();
    let m = cfg.chunk_len;
    let ret = match retrieval {
        Retrieval::On(nb) if cfg.retrieval_enabled() && t / m > 0 => Some(active_neighbors(cfg, nb, t)?),
        _ => None,
    };
    let mut ctx = Ctx { store, cfg, rng };
    let embed = ctx.p(tape, "dec.embed")?;
    let mut h = tape.embedding(embed, tokens)?;
    h = ctx.dropout(tape, h)?;
    let mut encoded = None;
    let cond = cfg.condition_layer();
    let (_, pos_offset) = cfg.active_span();
    for l in 1..=cfg.layers {
        let prefix = format!("dec.{l}.attn");
        let hn = norm(tape, store, h, &format!("{prefix}.norm"))?;
        let table = DistanceTable::new(t, t, cfg.rel_features, self_distance);
        let groups = vec![AttnGroup { q_start: 0, q_len: t, k_start: 0, k_len: t }];
        let a = attend(tape, store, &prefix, cfg.heads, hn, hn, groups, true, table)?;
        let a = ctx.dropout(tape, a)?;
        h = tape.add(h, a)?;
        if let Some(ret) = &ret {
            if Some(l) == cond {
                encoded = Some(encode_impl(tape, &mut ctx, ret, h, pos_offset)?);
            }
            if cfg.cca_layers.contains(&l) {
                let e = encoded.as_ref().expect("encoder runs at the first CCA layer");
                h = cca(tape, store, &format!("dec.{l}.cca"), cfg, h, e, pos_offset)?;
            }
        }
        h = ffw(tape, &mut ctx, &format!("dec.{l}.ffw"), h)?;
    }
    let hidden = norm(tape, store, h, "dec.norm_f")?;
    let readout = ctx.p(tape, "dec.readout")?;
    let logits = tape.matmul(hidden, readout)?;
    Ok(ForwardOutput { logits, hidden, encoded })
}

/// Next-token targets: row `p` is scored against `tokens[p + 1]` unless it is
/// a pad. The last row has no target.
pub fn next_token_targets(tokens: &[u32]) -> Vec<Option<u32>> {
    (0..tokens.len())
        .map(|p| tokens.get(p + 1).copied().filter(|&t| t != PAD))
        .collect()
}

/// Per-token negative log-likelihood in nats. Entry `p` is the loss of
/// `tokens[p]`; position 0 and pads are unscored (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLosses {
    pub losses: Vec<Option<f64>>,
}

impl TokenLosses {
    pub fn total_nats(&self) -> f64 {
        self.losses.iter().flatten().sum()
    }

    pub fn total_bits(&self) -> f64 {
        self.total_nats() / std::f64::consts::LN_2
    }

    pub fn scored(&self) -> usize {
        self.losses.iter().flatten().count()
    }
}

/// Records the summed next-token loss of `tokens` on `tape`.
pub fn loss_on_tape<T: Float>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    retrieval: Retrieval<'_>,
    rng: DropoutRng<'_>,
) -> Result<(Var, ForwardOutput)> {
    let out = forward(tape, store, cfg, tokens, retrieval, rng)?;
    let loss = tape.cross_entropy(out.logits, &next_token_targets(tokens))?;
    Ok((loss, out))
}

/// Retrieval-enhanced log-likelihood of one sequence.
pub fn log_likelihood<T: Float>(store: &ParameterStore<T>, cfg: &ModelConfig, tokens: &[u32], retrieval: Retrieval<'_>) -> Result<TokenLosses> {
    let mut tape = Tape::new();
    let (loss, _) = loss_on_tape(&mut tape, store, cfg, tokens, retrieval, None)?;
    let rows = tape.row_losses(loss).expect("cross-entropy node");
    let targets = next_token_targets(tokens);
    let mut losses = vec![None; tokens.len()];
    for (p, t) in targets.iter().enumerate() {
        if t.is_some() {
            losses[p + 1] = Some(rows[p].to_f64());
        }
    }
    Ok(TokenLosses { losses })
}

/// Next-token distribution after the last token of `tokens`.
pub fn next_token_logits<T: Float>(store: &ParameterStore<T>, cfg: &ModelConfig, tokens: &[u32], retrieval: Retrieval<'_>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, cfg, tokens, retrieval, None)?;
    Ok(tape.value(out.logits).row(tokens.len() - 1).to_vec())
}

/// Draws a uniform token in `1..vocab`, used to fill random test inputs.
pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(1..vocab as u32)).collect()
}
