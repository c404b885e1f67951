//! Compares tape gradients with central finite differences on a tiny
//! PMP model over one teacher-forced rollout.

use pmp::dataset::{generate, DatasetSpec};
use pmp::diff::Tape;
use pmp::model::{run_rollout, Mode, ModelConfig, ModelKind, ModelParams};

fn loss(params: &ModelParams, rollout: &pmp::dataset::Rollout) -> pmp::Result<f64> {
    let mut tape = Tape::new(&params.set);
    let run = run_rollout(params, &mut tape, rollout, Mode::TeacherForced)?;
    Ok(tape.scalar(run.loss.expect("teacher forcing yields a loss")))
}

fn main() -> pmp::Result<()> {
    let rollout = &generate(&DatasetSpec::in_distribution(3, 1))?[0];
    let config = ModelConfig {
        hidden: 8,
        rounds: 3,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::new(ModelKind::Pmp, config, 3);
    let grads = {
        let mut tape = Tape::new(&params.set);
        let run = run_rollout(&params, &mut tape, rollout, Mode::TeacherForced)?;
        tape.backward(run.loss.expect("teacher forcing yields a loss"))
    };

    let base = loss(&params, rollout)?;
    let h = 1e-6;
    let ids: Vec<_> = params.set.ids().collect();
    for id in ids {
        let orig = params.set.get(id).as_slice()[0];
        params.set.get_mut(id).as_mut_slice()[0] = orig + h;
        let up = loss(&params, rollout)?;
        params.set.get_mut(id).as_mut_slice()[0] = orig - h;
        let down = loss(&params, rollout)?;
        params.set.get_mut(id).as_mut_slice()[0] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).as_slice()[0];
        // one-sided slopes disagree where a relu or max switches inside the step
        let kink = ((up - base) - (base - down)).abs() / h > 1e-3 * (1.0 + numeric.abs());
        let note = if kink { "  (switch point)" } else { "" };
        println!("{:<28} analytic {analytic:>12.4e}  numeric {numeric:>12.4e}{note}", params.set.name(id));
    }
    Ok(())
}
