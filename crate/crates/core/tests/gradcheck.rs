mod common;

use rgat::layer::Mode;

const TRIALS: u64 = 20;

#[test]
fn every_primitive_matches_central_differences() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for trial in 0..TRIALS {
        for (name, err) in common::primitive_errors(trial) {
            match worst.iter_mut().find(|w| w.0 == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    for (name, err) in &worst {
        assert!(*err < 1e-6, "{name}: relative error {err:e}");
    }
    assert_eq!(worst.len(), 21);
}

#[test]
fn full_pipeline_matches_central_differences() {
    for trial in 0..TRIALS {
        let mut p = common::end_to_end_pipeline(trial);
        let err = p.gradient_error(Mode::Eval);
        assert!(err < 1e-5, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn full_pipeline_with_dropout_masks() {
    for trial in 0..5 {
        let mut p = common::end_to_end_pipeline(100 + trial);
        let err = p.gradient_error(Mode::Train { seed: trial });
        assert!(err < 1e-5, "trial {trial}: relative error {err:e}");
    }
}
