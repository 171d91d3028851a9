use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Compares tape gradients against central finite differences for every
/// scalar of every parameter in `params`.
///
/// `loss` must build a scalar loss on the supplied tape from the supplied
/// store (reading parameters through [`Tape::param`]) and must be
/// deterministic. Returns the maximum over coordinates of
/// `|g_fd − g_tape| / max(1e-8, |g_fd| + |g_tape|)`.
pub fn finite_difference_check<F>(params: &ParameterStore, step: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, params)?;
    let grads = tape.backward(l)?;

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, store)?;
        Ok(t.value(l).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        let analytic = grads.param(name);
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let tape_g = analytic.map_or(0.0, |g| g.data()[i]);
            let rel = (fd - tape_g).abs() / (fd.abs() + tape_g.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(3.0)).unwrap();
        let err = finite_difference_check(&s, 1e-5, |t, p| {
            let x = t.param(p, "x")?;
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = finite_difference_check(&s, 1e-5, |t, p| {
            let _ = t.param(p, "x")?;
            let c = t.constant(Tensor::scalar(4.0));
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
