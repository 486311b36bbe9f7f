//! Central finite differences against the tape's analytic gradients on a tiny
//! model, in f64, for every parameter group.

mod common;

use tapasr::autograd::Tape;
use tapasr::nnet::{joint_objective, AsrModel, ForwardCtx};
use tapasr::tensor::Mat;

use common::{tiny_config, tiny_input, tiny_transfer};

const STEP: f64 = 1e-5;

fn loss<M: AsrModel<f64>>(model: &M, x: &Mat<f64>, tokens: &[usize]) -> f64 {
    let mut tape = Tape::new(model.params(), false);
    // a fixed seed replays the same dropout masks on every evaluation
    let mut ctx = ForwardCtx::train(7, 0.1);
    let t = joint_objective(model, &mut tape, x, tokens, 0.3, &mut ctx).unwrap();
    tape.scalar(t.loss)
}

/// Per-group error `|g_a - g_n| / max(|g_a|, |g_n|, 1e-6)` (2-norms).
pub fn worst_group_error<M: AsrModel<f64>>(model: &mut M, x: &Mat<f64>, tokens: &[usize]) -> Vec<(String, f64)> {
    let analytic = {
        let mut tape = Tape::new(model.params(), true);
        let mut ctx = ForwardCtx::train(7, 0.1);
        let t = joint_objective(&*model, &mut tape, x, tokens, 0.3, &mut ctx).unwrap();
        tape.backward(t.loss).unwrap()
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let name = model.params().name(id).to_string();
        let n = model.params().value(id).len();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().value(id).data()[j];
            model.params_mut().value_mut(id).data_mut()[j] = orig + STEP;
            let up = loss(&*model, x, tokens);
            model.params_mut().value_mut(id).data_mut()[j] = orig - STEP;
            let down = loss(&*model, x, tokens);
            model.params_mut().value_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        let a: Vec<f64> = analytic.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let diff = a.iter().zip(&numeric).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        // groups with a vanishing gradient (attention key bias) are judged absolutely
        out.push((name, diff / scale.max(1e-6)));
    }
    out
}

#[test]
fn conformer_joint_loss_gradients() {
    let mut model = tapasr::nnet::ConformerModel::<f64>::new(tiny_config(), 3).unwrap();
    let errs = worst_group_error(&mut model, &tiny_input(), &[4]);
    assert!(errs.len() > 40);
    for (name, e) in &errs {
        assert!(*e < 1e-4, "{name}: relative error {e:e}");
    }
}

#[test]
fn gradients_cross_the_tap_boundary() {
    let mut model = tiny_transfer(false);
    let errs = worst_group_error(&mut model, &tiny_input(), &[4]);
    assert!(errs.iter().any(|(n, _)| n.starts_with("extractor.encoder.embed")));
    assert!(errs.iter().any(|(n, _)| n.starts_with("bridge.")));
    for (name, e) in &errs {
        assert!(*e < 1e-4, "{name}: relative error {e:e}");
    }
}
