//! Independent verification oracles: finite-difference gradient checks, an
//! exhaustive best-matching-unit scan, and a closed-form quadratic probe for
//! the synaptic-importance path integral.
//!
//! These deliberately avoid the implementation paths they check (no calls to
//! `backward`, `find_bmu` internals, or the SI accumulator update) so they can
//! back both the test suites and the CLI `selftest` command.

use crate::backbone::{softmax_xent, Network, ParamSet};
use crate::error::Result;

/// Relative error with an absolute floor, as used by gradient checking.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn loss_of(net: &Network, x: &[f64], y: usize) -> Result<f64> {
    let rec = net.forward(x)?;
    Ok(softmax_xent(rec.output(), y)?.0)
}

/// Smallest absolute rectifier pre-activation of `net` on `x`, recomputed
/// here by plain matrix arithmetic. Finite differences are unreliable for
/// instances where this margin is tiny (a unit sits at the kink), so gradient
/// checks skip instances below a safety margin.
pub fn rectifier_margin(net: &Network, x: &[f64]) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let mut input = x.to_vec();
    for layer in &net.layers {
        let mut pre = Vec::with_capacity(layer.spec.out_dim);
        for row in 0..layer.spec.out_dim {
            let mut acc = layer.bias[row];
            for (j, &v) in input.iter().enumerate() {
                acc += layer.weights[row * layer.spec.in_dim + j] * v;
            }
            pre.push(acc);
        }
        if layer.spec.activation == crate::backbone::Activation::Rectifier {
            for &p in &pre {
                margin = margin.min(p.abs());
            }
            for p in &mut pre {
                *p = p.max(0.0);
            }
        }
        input = pre;
    }
    Ok(margin)
}

/// Central finite differences of the softmax cross-entropy loss w.r.t. every
/// network parameter.
pub fn finite_diff_network_grads(
    net: &Network,
    x: &[f64],
    y: usize,
    step: f64,
) -> Result<ParamSet> {
    let mut grads = ParamSet::zeros_like(net);
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        for wi in 0..net.layers[li].weights.len() {
            let orig = probe.layers[li].weights[wi];
            probe.layers[li].weights[wi] = orig + step;
            let plus = loss_of(&probe, x, y)?;
            probe.layers[li].weights[wi] = orig - step;
            let minus = loss_of(&probe, x, y)?;
            probe.layers[li].weights[wi] = orig;
            grads.layers[li].weights[wi] = (plus - minus) / (2.0 * step);
        }
        for bi in 0..net.layers[li].bias.len() {
            let orig = probe.layers[li].bias[bi];
            probe.layers[li].bias[bi] = orig + step;
            let plus = loss_of(&probe, x, y)?;
            probe.layers[li].bias[bi] = orig - step;
            let minus = loss_of(&probe, x, y)?;
            probe.layers[li].bias[bi] = orig;
            grads.layers[li].bias[bi] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Reference distance of input `x` to neuron `j`: alpha-weighted sum of the
/// input and context Euclidean norms, recomputed from the raw neuron fields.
pub fn gwr_distance_reference(
    net: &crate::gwr::GammaGwrNet,
    j: usize,
    x: &[f64],
) -> Result<f64> {
    let neuron = net
        .neuron(j)
        .ok_or_else(|| crate::error::Error::State(format!("neuron {j} does not exist")))?;
    let cfg = net.config();
    let euclid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let mut d = cfg.alpha[0] * euclid(x, &neuron.weight);
    for k in 0..cfg.context_depth {
        d += cfg.alpha[k + 1] * euclid(&net.global_context()[k], &neuron.contexts[k]);
    }
    Ok(d)
}

/// Exhaustive best/second-best scan over all neurons using the reference
/// distance; ties to the lowest id.
pub fn gwr_bmu_scan(
    net: &crate::gwr::GammaGwrNet,
    x: &[f64],
) -> Result<(usize, Option<usize>)> {
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for id in net.neuron_ids() {
        scored.push((id, gwr_distance_reference(net, id, x)?));
    }
    if scored.is_empty() {
        return Err(crate::error::Error::State("empty network".into()));
    }
    let mut best = scored[0];
    for &(id, d) in &scored[1..] {
        if d < best.1 {
            best = (id, d);
        }
    }
    let mut second: Option<(usize, f64)> = None;
    for &(id, d) in &scored {
        if id == best.0 {
            continue;
        }
        match second {
            None => second = Some((id, d)),
            Some((_, sd)) if d < sd => second = Some((id, d)),
            _ => {}
        }
    }
    Ok((best.0, second.map(|(id, _)| id)))
}

/// Worst relative error between the analytic synaptic-importance penalty
/// gradient and central finite differences of the penalty value.
pub fn max_si_penalty_gradient_error(
    si: &crate::reg::SIState,
    theta: &ParamSet,
    step: f64,
) -> Result<f64> {
    let analytic = si.penalty_grad(theta)?;
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for li in 0..theta.layers.len() {
        for wi in 0..theta.layers[li].weights.len() {
            let orig = probe.layers[li].weights[wi];
            probe.layers[li].weights[wi] = orig + step;
            let plus = si.penalty(&probe)?;
            probe.layers[li].weights[wi] = orig - step;
            let minus = si.penalty(&probe)?;
            probe.layers[li].weights[wi] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let av = analytic.layers[li].weights[wi];
            if av == 0.0 && numeric.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(relative_error(av, numeric));
        }
        for bi in 0..theta.layers[li].bias.len() {
            let orig = probe.layers[li].bias[bi];
            probe.layers[li].bias[bi] = orig + step;
            let plus = si.penalty(&probe)?;
            probe.layers[li].bias[bi] = orig - step;
            let minus = si.penalty(&probe)?;
            probe.layers[li].bias[bi] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let av = analytic.layers[li].bias[bi];
            if av == 0.0 && numeric.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(relative_error(av, numeric));
        }
    }
    Ok(worst)
}

/// Drive a single scalar parameter down the quadratic loss 0.5*(theta - a)^2
/// with plain SGD while feeding the synaptic-importance accumulator, and
/// return (accumulated path integral, closed-form total loss decrease).
pub fn si_quadratic_probe(theta0: f64, a: f64, lr: f64, steps: usize) -> Result<(f64, f64)> {
    use crate::backbone::{Activation, LayerSpec};
    let mut net = Network::new(vec![LayerSpec::new(1, 1, Activation::Identity)], 0)?;
    net.layers[0].weights[0] = theta0;
    net.layers[0].bias[0] = 0.0;
    let mut si = crate::reg::SIState::new(&net, 0.1, 1.0)?;
    let mut theta = theta0;
    for _ in 0..steps {
        let mut grads = ParamSet::zeros_like(&net);
        grads.layers[0].weights[0] = theta - a;
        // bias gradient stays zero: only the weight walks the quadratic
        let deltas = net.sgd_step(&grads, lr)?;
        si.accumulate(&grads, &deltas)?;
        theta = net.layers[0].weights[0];
    }
    let decrease = 0.5 * (theta0 - a).powi(2) - 0.5 * (theta - a).powi(2);
    Ok((si.omega_path.layers[0].weights[0], decrease))
}

/// Worst relative error between analytic backprop and central finite
/// differences over all parameters of `net` for one (x, y) instance.
pub fn max_network_gradient_error(net: &Network, x: &[f64], y: usize, step: f64) -> Result<f64> {
    let rec = net.forward(x)?;
    let (_, dlogits) = softmax_xent(rec.output(), y)?;
    let analytic = net.backward(&rec, &dlogits, 0)?;
    let numeric = finite_diff_network_grads(net, x, y, step)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.layers.iter().zip(&numeric.layers) {
        for (&av, &nv) in a.weights.iter().zip(&n.weights) {
            // skip entries where both sides vanish (dead rectifier units)
            if av == 0.0 && nv.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(relative_error(av, nv));
        }
        for (&av, &nv) in a.bias.iter().zip(&n.bias) {
            if av == 0.0 && nv.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(relative_error(av, nv));
        }
    }
    Ok(worst)
}
