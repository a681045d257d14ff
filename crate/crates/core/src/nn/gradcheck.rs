//! Central finite-difference verification of [`Network::backward`].

use super::network::{Network, SequenceBatch};
use crate::error::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Block name and flat index of the worst parameter.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Both gradients below this magnitude count as agreeing.
const ABS_FLOOR: f64 = 1e-10;

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares every parameter's backpropagated gradient with a central
/// difference using step `1e-4·max(1, |θ|)`. `loss` maps network outputs to
/// `(loss, dloss/doutput)`.
pub fn check_gradients<F>(net: &Network, x: &SequenceBatch, loss: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), NnError>,
{
    let (out, mut tape) = net.forward(x)?;
    let (_, d_out) = loss(&out)?;
    let grads = net.backward(&mut tape, &d_out)?;
    let names = net.param_names();
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (k, name) in names.iter().enumerate() {
        for i in 0..grads.blocks[k].len() {
            let theta = probe.params()[k].data()[i];
            let eps = 1e-4 * theta.abs().max(1.0);
            probe.params_mut()[k].data_mut()[i] = theta + eps;
            let up = loss(&probe.predict(x)?)?.0;
            probe.params_mut()[k].data_mut()[i] = theta - eps;
            let dn = loss(&probe.predict(x)?)?.0;
            probe.params_mut()[k].data_mut()[i] = theta;
            let numeric = (up - dn) / (2.0 * eps);
            let analytic = grads.blocks[k].data()[i];
            let err = rel_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.0.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = (name.clone(), i);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::{mse_loss, pinball_loss_batch, HUB_QUANTILES};
    use crate::nn::network::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, output_dim: usize, static_dim: usize) -> (Network, SequenceBatch, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(
            NetworkSpec { input_dim: 10, lstm_units: vec![4, 4], dense_units: 3, output_dim, static_dim },
            &mut rng,
        )
        .unwrap();
        let (b, t) = (3, 5);
        let data = (0..b * t * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = SequenceBatch::new(b, t, 10, data).unwrap();
        if static_dim > 0 {
            x = x.with_statics((0..b * static_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        (net, x, rng)
    }

    #[test]
    fn mse_network_gradients() {
        let (net, x, mut rng) = setup(7, 1, 0);
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_gradients(&net, &x, |o| mse_loss(o, &y)).unwrap();
        assert_eq!(r.checked, net.spec.param_count());
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn hybrid_network_gradients() {
        let (net, x, mut rng) = setup(8, 1, 2);
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_gradients(&net, &x, |o| mse_loss(o, &y)).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn pinball_network_gradients() {
        let (net, x, _) = setup(9, 7, 0);
        let out = net.predict(&x).unwrap();
        // targets far from every output keep the loss away from its kinks
        let y: Vec<f64> = (0..3).map(|b| out[b * 7 + 3] + if b % 2 == 0 { 5.0 } else { -5.0 }).collect();
        let r = check_gradients(&net, &x, |o| pinball_loss_batch(o, &y, &HUB_QUANTILES)).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
