//! Finite-difference gradient checking for the adapter, shared by unit and
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::adapter::{param_group, AdapterConfig, AdapterParams, ParamGroup};
use crate::error::Result;
use crate::features::StackedTokens;
use crate::tensor::{Tape, Tensor};
use crate::training::record_group_penalty;

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Setup for [`adapter_gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckSetup {
    pub config: AdapterConfig,
    pub input_dim: usize,
    pub tokens: usize,
    pub batch: usize,
    pub lambda: f64,
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    pub seed: u64,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Projection => "projection",
        ParamGroup::ClsPos => "cls_pos",
        ParamGroup::Transformer => "transformer",
        ParamGroup::Head => "head",
    }
}

fn loss_and_grads(
    params: &AdapterParams<f64>,
    samples: &[StackedTokens<f64>],
    labels: &[usize],
    setup: &GradCheckSetup,
    rows: &[(String, std::ops::Range<usize>)],
    want_grads: bool,
) -> Result<(f64, Option<crate::GradStore<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.store().register(&mut tape);
    let refs: Vec<&StackedTokens<f64>> = samples.iter().collect();
    let logits = params.record_batch_logits(&mut tape, &vars, &refs)?;
    let mut loss = tape.cross_entropy(logits, labels)?;
    if setup.lambda > 0.0 {
        let pen = record_group_penalty(&mut tape, vars[params.projection_index()], rows, setup.lambda)?;
        loss = tape.add(loss, pen)?;
    }
    let value = tape.value(loss).item();
    let grads = if want_grads { Some(tape.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Compares tape gradients of `CE + λ·Σ s_k` against central differences for
/// every element of every parameter, at a randomly perturbed point (so the
/// zero-initialized head does not mask upstream gradients). Returns the worst
/// relative error per parameter group.
pub fn adapter_gradient_check(setup: &GradCheckSetup) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut params = AdapterParams::<f64>::init(&setup.config, setup.input_dim, setup.tokens, setup.seed)?;
    for p in params.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let classes = params.num_classes();
    let samples: Vec<StackedTokens<f64>> = (0..setup.batch)
        .map(|_| StackedTokens {
            data: Tensor::from_fn(&[setup.tokens, setup.input_dim], |_| rng.sample(StandardNormal)),
        })
        .collect();
    let labels: Vec<usize> = (0..setup.batch).map(|i| i % classes).collect();
    // Two equal halves of the input axis act as two backbones.
    let half = setup.input_dim / 2;
    let rows = vec![("a".to_string(), 0..half), ("b".to_string(), half..setup.input_dim)];

    let (_, grads) = loss_and_grads(&params, &samples, &labels, setup, &rows, true)?;
    let grads = grads.expect("requested");
    let mut out: Vec<GroupCheck> = Vec::new();
    for i in 0..params.store().len() {
        let id = params.store().get(i).id.clone();
        let n = params.store().get(i).numel();
        let analytic: Vec<f64> = match grads.get(i) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut worst = 0.0f64;
        for j in 0..n {
            let orig = params.store().get(i).value.data()[j];
            params.store_mut().get_mut(i).value.data_mut()[j] = orig + setup.step;
            let (lp, _) = loss_and_grads(&params, &samples, &labels, setup, &rows, false)?;
            params.store_mut().get_mut(i).value.data_mut()[j] = orig - setup.step;
            let (lm, _) = loss_and_grads(&params, &samples, &labels, setup, &rows, false)?;
            params.store_mut().get_mut(i).value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * setup.step);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(setup.floor);
            worst = worst.max(rel);
        }
        let name = group_name(param_group(&id));
        match out.iter_mut().find(|g| g.group == name) {
            Some(g) => {
                g.elements += n;
                if worst > g.max_rel_err {
                    g.max_rel_err = worst;
                    g.worst_param = id;
                }
            }
            None => out.push(GroupCheck {
                group: name.into(),
                elements: n,
                max_rel_err: worst,
                worst_param: id,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_adapter_gradients_match() {
        let config = AdapterConfig {
            num_classes: Some(3),
            ..AdapterConfig::small(4, 1, 2)
        };
        let setup = GradCheckSetup {
            config,
            input_dim: 6,
            tokens: 4,
            batch: 2,
            lambda: 0.05,
            step: 1e-5,
            floor: 1e-6,
            seed: 3,
        };
        let checks = adapter_gradient_check(&setup).unwrap();
        assert_eq!(checks.len(), 4);
        for c in checks {
            assert!(c.max_rel_err < 1e-4, "{c:?}");
        }
    }
}
