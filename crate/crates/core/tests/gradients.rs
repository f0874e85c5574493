mod common;

use phishloc::model::{ClassifierInput, SelectorInput};

use common::{gradient_check, gradient_check_with, tiny_config, Loss};

// A step of 1e-5 crosses a relu kink in some fixtures.
const STEP: f64 = 1e-6;

#[test]
fn joint_loss_matches_finite_differences() {
    for seed in 0..20 {
        let e = gradient_check(seed, Loss::Joint, STEP);
        assert!(e <= 1e-4, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn random_mask_loss_matches_finite_differences() {
    for seed in 0..20 {
        let e = gradient_check(seed, Loss::RandomMask, STEP);
        assert!(e <= 1e-4, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn other_network_layouts_match_finite_differences() {
    let layouts = [
        (SelectorInput::Flatten, ClassifierInput::Flatten),
        (SelectorInput::PerSentence, ClassifierInput::Flatten),
        (SelectorInput::Flatten, ClassifierInput::SumPool),
    ];
    for (sel, cls) in layouts {
        let mut config = tiny_config();
        config.selector_input = sel;
        config.classifier_input = cls;
        for seed in 0..5 {
            for which in [Loss::Joint, Loss::RandomMask] {
                let e = gradient_check_with(&config, seed, which, STEP);
                assert!(e <= 1e-4, "{sel:?}/{cls:?} seed {seed} {which:?}: relative error {e:e}");
            }
        }
    }
}
