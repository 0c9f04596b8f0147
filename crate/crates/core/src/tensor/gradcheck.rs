use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;

const STEP: f64 = 1e-5;

/// Compares tape gradients with central differences on `probes` randomly
/// chosen scalar entries and returns the largest relative error.
///
/// `f` builds a fresh tape for the given parameters and returns it together
/// with its scalar loss node.
pub fn check_gradients<F>(f: F, params: &ParamStore, probes: usize, seed: u64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, NodeId)>,
{
    let total = params.num_scalars();
    if total == 0 || probes == 0 {
        return Ok(0.0);
    }
    let (tape, loss) = f(params)?;
    let grads = tape.backward(loss, params)?;

    let offsets: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probe_params = params.clone();
    for _ in 0..probes {
        let (id, i) = offsets[rng.gen_range(0..total)];
        let orig = params.get(id).data()[i];
        let eval = |store: &mut ParamStore, x: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = x;
            let (t, l) = f(store)?;
            Ok(t.value(l).data()[0])
        };
        let up = eval(&mut probe_params, orig + STEP)?;
        let down = eval(&mut probe_params, orig - STEP)?;
        probe_params.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.get(id).data()[i];
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-6 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}
