mod common;

use common::finite_difference_check;
use pmp::model::ModelKind;

#[test]
fn total_loss_gradient_matches_finite_differences() {
    for kind in [ModelKind::Pmp, ModelKind::Overwrite, ModelKind::Selective, ModelKind::Oracle] {
        let (checked, skipped, worst) = finite_difference_check(kind, 3);
        eprintln!("{kind}: {checked} checked, {skipped} skipped, worst relative error {worst:e}");
        assert!(checked > 20 && skipped * 5 < checked, "{kind}: {checked} checked, {skipped} skipped");
        assert!(worst < 1e-4, "{kind}: worst relative error {worst:e}");
    }
}
