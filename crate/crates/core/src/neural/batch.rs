//! Per-sample graphs with gradients summed in sample order, and the
//! mini-batch training loop built on them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::optim::{AdamConfig, OptimizerState};
use super::params::{Gradients, ParamStore};
use super::{NeuralError, SeededRng};

/// Builds one graph per sample, runs backward on each and returns the summed
/// loss and gradients. Samples are processed in parallel; the sum is taken in
/// sample order, so the result does not depend on the worker count.
pub fn sum_gradients<S, F>(
    params: &ParamStore,
    samples: &[S],
    loss_fn: F,
) -> Result<(f64, Gradients), NeuralError>
where
    S: Sync,
    F: Fn(&mut Graph<'_>, usize, &S) -> Result<NodeId, NeuralError> + Sync,
{
    let parts: Vec<(f64, Gradients)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = Graph::new(params);
            let loss = loss_fn(&mut g, i, s)?;
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads))
        })
        .collect::<Result<_, NeuralError>>()?;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.accumulate(g)?;
    }
    Ok((loss, total))
}

/// Mini-batch training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Mean sample loss of every optimizer step and of every epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Runs `config.epochs` epochs of Adam on the mean per-sample loss.
///
/// `epoch_samples(e)` supplies the samples of epoch `e`; they are shuffled
/// with a stream derived from `(config.seed, e)`. `loss_fn` receives a
/// dropout generator unique to `(seed, step, position in batch)`.
pub fn fit<S, E, D, F>(
    params: &mut ParamStore,
    config: &FitConfig,
    mut epoch_samples: D,
    loss_fn: F,
) -> Result<FitReport, E>
where
    S: Sync,
    E: From<NeuralError>,
    D: FnMut(usize) -> Result<Vec<S>, E>,
    F: Fn(&mut Graph<'_>, &S, &mut SeededRng) -> Result<NodeId, NeuralError> + Sync,
{
    if config.batch_size == 0 {
        return Err(NeuralError::InvalidConfig("batch_size must be positive".into()).into());
    }
    let mut opt = OptimizerState::new(params, config.adam.clone());
    let mut report = FitReport::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut samples = epoch_samples(epoch)?;
        let mut order_rng = SeededRng::seed_from_u64(config.seed);
        order_rng.set_stream(epoch as u64);
        samples.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in samples.chunks(config.batch_size) {
            let (loss, mut grads) = sum_gradients(params, batch, |g, i, s| {
                let mut rng = SeededRng::seed_from_u64(config.seed);
                rng.set_stream((1 << 63) | (step << 16) | i as u64);
                loss_fn(g, s, &mut rng)
            })?;
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            opt.step(params, &grads)?;
            report.step_losses.push(loss / n);
            epoch_loss += loss;
            step += 1;
        }
        report
            .epoch_losses
            .push(epoch_loss / samples.len().max(1) as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    #[test]
    fn sum_matches_sequential_and_fit_descends() {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let targets = vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 3.0]];
        let loss = |g: &mut Graph<'_>, t: &Vec<f64>| {
            let p = g.param(w);
            let c = g.input(Tensor::new(vec![2], t.iter().map(|v| -v).collect()).unwrap());
            let d = g.add(p, c);
            Ok(g.sum_squares(d))
        };
        let (total, grads) = sum_gradients(&params, &targets, |g, _, t| loss(g, t)).unwrap();
        let mut expect = 0.0;
        let mut expect_grad = [0.0; 2];
        for t in &targets {
            let d = [1.0 - t[0], -2.0 - t[1]];
            expect += d[0] * d[0] + d[1] * d[1];
            expect_grad[0] += 2.0 * d[0];
            expect_grad[1] += 2.0 * d[1];
        }
        assert!((total - expect).abs() < 1e-12);
        assert_eq!(grads.get(w).data(), &expect_grad);

        let config = FitConfig {
            epochs: 50,
            batch_size: 2,
            adam: AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            seed: 3,
        };
        let report = fit::<_, NeuralError, _, _>(
            &mut params,
            &config,
            |_| Ok(targets.clone()),
            |g, t, _| loss(g, t),
        )
        .unwrap();
        assert_eq!(report.step_losses.len(), 100);
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    }
}
