//! Steps an untrained PMP model through one rollout and prints, per step,
//! how many memory states exist and which ones are relevant or persisted.

use pmp::dataset::{generate, DatasetSpec};
use pmp::diff::Tape;
use pmp::model::{Mode, ModelConfig, ModelKind, ModelParams, RolloutSession};

fn main() -> pmp::Result<()> {
    let rollout = &generate(&DatasetSpec::in_distribution(11, 1))?[0];
    let params = ModelParams::new(ModelKind::Pmp, ModelConfig::default(), 0);
    let mut tape = Tape::new(&params.set);
    let mut session = RolloutSession::start(&params, &mut tape, rollout, Mode::TeacherForced)?;
    println!("initial array {:?}, {} states", rollout.initial_array, session.state().store.len());

    while let Some(rec) = session.step(&mut tape)? {
        print!(
            "step {:>2} {:<6} states {:>2} -> {:>2}  relevant {:?}",
            rec.step, rec.kind, rec.states_before, rec.states_after, rec.relevance_truth
        );
        if !rec.persist_truth.is_empty() {
            print!("  persisted {:?}", rec.persist_truth);
        }
        if let (Some(truth), Some(pred)) = (rec.answer_truth, rec.answer_pred) {
            print!("  answer {truth} (model says {pred})");
        }
        println!();
    }

    let run = session.finish(&mut tape)?;
    println!("loss {:.4} {:?}", tape.scalar(run.loss.expect("teacher forcing yields a loss")), run.trace.loss);
    Ok(())
}
