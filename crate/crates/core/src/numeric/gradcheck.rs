//! Central-difference gradient checking in f64.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / (|a| + |n| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compares tape gradients against central differences with step `h`.
///
/// `loss` records a scalar loss on a fresh tape from the given store.
/// At most `max_coords` coordinates per trainable tensor are checked, drawn
/// uniformly without replacement; frozen tensors are skipped.
pub fn check_gradients<F>(store: &ParameterStore<f64>, h: f64, max_coords: usize, rng: &mut impl Rng, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let analytic = tape.param_grads(&grads, store.len());
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, s)?;
        Ok(t.value(l).data()[0])
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids().collect::<Vec<ParamId>>() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.tensor(id).numel();
        let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { sample(rng, n, max_coords).into_vec() };
        let zero = Tensor::zeros(store.tensor(id).shape());
        let a_t = analytic[id.0].as_ref().unwrap_or(&zero);
        for c in coords {
            let orig = store.tensor(id).data()[c];
            work.tensor_mut(id).data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work.tensor_mut(id).data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work.tensor_mut(id).data_mut()[c] = orig;
            let num = (up - down) / (2.0 * h);
            let a = a_t.data()[c];
            let err = relative_error(a, num);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst_param = store.name(id).to_string();
                    report.worst_index = c;
                    report.analytic = a;
                    report.numeric = num;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::relpos::{self_distance, DistanceTable};
    use crate::numeric::tape::{AttnGroup, AttnLayout};

    fn store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, shape) in shapes {
            s.insert_normal(name, shape, 0.7, rng).unwrap();
        }
        s
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.coords_checked > 0);
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = store(&mut rng, &[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[3, 5]), ("bt", &[5, 4])]);
        let r = check_gradients(&s, 1e-5, 100, &mut rng, |t, s| {
            let a = t.param(s, s.id("a")?);
            let b = t.param(s, s.id("b")?);
            let c = t.param(s, s.id("c")?);
            let bt = t.param(s, s.id("bt")?);
            let ab = t.matmul(a, b)?;
            let abt = t.matmul_t(a, bt)?;
            let x = t.mul(ab, c)?;
            let x = t.add(x, abt)?;
            let x = t.gelu(x);
            let x = t.scale(x, 0.3);
            Ok(t.sum(x))
        })
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn rmsnorm_embedding_gather_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = store(&mut rng, &[("emb", &[7, 6]), ("g", &[6]), ("w", &[6, 7])]);
        let r = check_gradients(&s, 1e-5, 100, &mut rng, |t, s| {
            let e = t.param(s, s.id("emb")?);
            let x = t.embedding(e, &[1, 3, 3, 6, 0])?;
            let x = t.gather_rows(x, vec![Some(4), None, Some(1), Some(1), Some(0)])?;
            let g = t.param(s, s.id("g")?);
            let x = t.rmsnorm(x, g, 1e-6)?;
            let w = t.param(s, s.id("w")?);
            let logits = t.matmul(x, w)?;
            t.cross_entropy(logits, &[Some(2), Some(0), None, Some(6), Some(5)])
        })
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn grouped_attention_with_relative_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = store(&mut rng, &[("q", &[6, 4]), ("k", &[7, 4]), ("v", &[7, 4]), ("rel", &[2, 4])]);
        for causal in [false, true] {
            let r = check_gradients(&s, 1e-5, 100, &mut rng, |t, s| {
                let q = t.param(s, s.id("q")?);
                let k = t.param(s, s.id("k")?);
                let v = t.param(s, s.id("v")?);
                let w = t.param(s, s.id("rel")?);
                let table = Rc::new(DistanceTable::new(4, 4, 4, self_distance));
                let bias = t.rel_bias(w, table)?;
                let layout = Rc::new(AttnLayout {
                    groups: vec![
                        AttnGroup { q_start: 0, q_len: 4, k_start: 0, k_len: 4 },
                        AttnGroup { q_start: 4, q_len: 2, k_start: 4, k_len: 3 },
                    ],
                    heads: 2,
                    causal,
                });
                let o = t.attention(q, k, v, Some(bias), layout)?;
                let sq = t.mul(o, o)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert_ok(r);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = store(&mut rng, &[("a", &[2, 2]), ("b", &[2, 2])]);
        s.set_frozen(s.id("a").unwrap(), true);
        let mut t = Tape::new();
        let a = t.param(&s, s.id("a").unwrap());
        let b = t.param(&s, s.id("b").unwrap());
        let m = t.matmul(a, b).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        let pg = t.param_grads(&g, s.len());
        assert!(pg[0].is_none());
        assert!(pg[1].is_some());
    }
}
