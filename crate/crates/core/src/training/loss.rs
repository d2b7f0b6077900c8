use std::ops::Range;

use crate::error::{ComboError, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Rows of the projection weight owned by each backbone.
pub type BackboneRows = [(String, Range<usize>)];

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let mut tape = Tape::new();
    let z = tape.input_ref(logits);
    let l = tape.cross_entropy(z, labels)?;
    Ok(tape.value(l).item())
}

pub fn check_partition(rows: usize, groups: &BackboneRows) -> Result<()> {
    let mut next = 0;
    for (id, r) in groups {
        if r.start != next || r.end <= r.start {
            return Err(ComboError::Manifest(format!(
                "backbone {id} rows {r:?} do not continue the partition at {next}"
            )));
        }
        next = r.end;
    }
    if next != rows {
        return Err(ComboError::Manifest(format!(
            "backbone rows cover {next} of {rows} projection rows"
        )));
    }
    Ok(())
}

/// Importance score per backbone: the ℓ2 norm of the projection-weight rows
/// fed by that backbone's layers. The bias is not included.
pub fn group_norms<S: Scalar>(weight: &Tensor<S>, groups: &BackboneRows) -> Result<Vec<f64>> {
    check_partition(weight.rows(), groups)?;
    let c = weight.cols();
    Ok(groups
        .iter()
        .map(|(_, r)| {
            weight.data()[r.start * c..r.end * c]
                .iter()
                .map(|v| {
                    let v = v.to_f64().unwrap();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `L_task + λ·Σ s_k`.
pub fn total_loss(task: f64, scores: &[f64], lambda: f64) -> f64 {
    task + lambda * scores.iter().sum::<f64>()
}

/// Records `λ·Σ s_k` for the projection weight `weight` on `tape`.
pub fn record_group_penalty<S: Scalar>(
    tape: &mut Tape<'_, S>,
    weight: Var,
    groups: &BackboneRows,
    lambda: f64,
) -> Result<Var> {
    check_partition(tape.value(weight).rows(), groups)?;
    let mut acc: Option<Var> = None;
    for (_, r) in groups {
        let s = tape.row_block_norm(weight, r.clone())?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
    }
    let sum = acc.expect("non-empty partition");
    Ok(tape.scale(sum, S::of(lambda)))
}

/// Records `L_task + λ·Σ s_k`; with `λ = 0` the task loss is returned as is.
pub fn record_total_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    task: Var,
    weight: Var,
    groups: &BackboneRows,
    lambda: f64,
) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(task);
    }
    let penalty = record_group_penalty(tape, weight, groups, lambda)?;
    tape.add(task, penalty)
}
