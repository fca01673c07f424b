//! Property tests for the algebraic invariants of the additive estimators.

use genius_core::additive::{genius_single, genius_single_opts, GeniusOptions};
use genius_core::data::{ExposureKind, ObservationTable};
use genius_core::nuisance::NuisancePolicy;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Build a table whose exposure noise scale depends on the instrument, so
/// the heteroscedasticity condition holds by construction.
fn build_table(rows: &[(bool, f64, f64)]) -> ObservationTable {
    let n = rows.len();
    let g: Vec<f64> = rows.iter().map(|(b, _, _)| *b as u8 as f64).collect();
    let a: Vec<f64> = rows
        .iter()
        .map(|(b, raw, _)| 0.7 * (*b as u8 as f64) + raw * (1.0 + 2.0 * (*b as u8 as f64)))
        .collect();
    let y: Vec<f64> =
        rows.iter().zip(&a).map(|((_, _, noise), ai)| 0.5 * ai + noise).collect();
    ObservationTable::new(
        DMatrix::from_column_slice(n, 1, &g),
        DVector::from_vec(a),
        DVector::from_vec(y),
        ExposureKind::Continuous,
        None,
        None,
    )
    .unwrap()
}

fn rows_strategy() -> impl Strategy<Value = Vec<(bool, f64, f64)>> {
    prop::collection::vec((any::<bool>(), -2.0..2.0f64, -2.0..2.0f64), 30..60)
}

proptest! {
    #[test]
    fn shifting_the_instrument_leaves_the_estimate_unchanged(
        rows in rows_strategy(),
        shift in -5.0..5.0f64,
    ) {
        let both_levels = rows.iter().any(|r| r.0) && rows.iter().any(|r| !r.0);
        prop_assume!(both_levels);
        let table = build_table(&rows);
        let base = match genius_single(&table) {
            Ok(e) => e,
            Err(_) => return Ok(()), // degenerate draw; nothing to check
        };

        let g_shifted = DMatrix::from_fn(table.n(), 1, |i, _| table.g()[(i, 0)] + shift);
        let shifted = ObservationTable::new(
            g_shifted,
            table.a().clone(),
            table.y().clone(),
            ExposureKind::Continuous,
            None,
            None,
        )
        .unwrap();
        let est = genius_single(&shifted).unwrap();
        prop_assert!(
            (est.beta_hat - base.beta_hat).abs() <= 1e-10 * (1.0 + base.beta_hat.abs()),
            "shift {} changed the estimate: {} vs {}", shift, est.beta_hat, base.beta_hat
        );
    }

    #[test]
    fn adding_a_multiple_of_the_exposure_shifts_the_estimate_exactly(
        rows in rows_strategy(),
        d in -3.0..3.0f64,
    ) {
        let both_levels = rows.iter().any(|r| r.0) && rows.iter().any(|r| !r.0);
        prop_assume!(both_levels);
        let table = build_table(&rows);
        let opts = GeniusOptions { policy: NuisancePolicy::Linear, level: 0.95 };
        let base = match genius_single_opts(&table, &opts) {
            Ok(e) => e,
            Err(_) => return Ok(()),
        };
        let y_shifted = DVector::from_fn(table.n(), |i, _| {
            table.y()[i] + d * table.a()[i]
        });
        let shifted = ObservationTable::new(
            table.g().clone(),
            table.a().clone(),
            y_shifted,
            ExposureKind::Continuous,
            None,
            None,
        )
        .unwrap();
        let est = genius_single_opts(&shifted, &opts).unwrap();
        prop_assert!(
            (est.beta_hat - (base.beta_hat + d)).abs() <= 1e-9 * (1.0 + base.beta_hat.abs() + d.abs()),
            "expected {} got {}", base.beta_hat + d, est.beta_hat
        );
    }
}
