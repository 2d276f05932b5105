use mstop_core::ddtm::gradcheck::{check_surrogate, surrogate_loss};
use mstop_core::ddtm::{DdtmConfig, DdtmParams, DecodeMode};
use mstop_core::instance::{generate, GenConfig, PrizeMode};

#[test]
fn full_surrogate_matches_central_differences() {
    let report = check_surrogate(100, 3, 0.7, 0.5).unwrap();
    println!("surrogate: worst relative error {:e}", report.worst);
    assert!(report.passed(), "{:?}", report.first_failure);
}

#[test]
fn entropy_term_matches_central_differences() {
    let report = check_surrogate(100, 4, 0.0, 1.0).unwrap();
    println!("entropy: worst relative error {:e}", report.worst);
    assert!(report.passed(), "{:?}", report.first_failure);
}

fn setup() -> (DdtmParams, mstop_core::instance::Instance, Vec<usize>) {
    let p = DdtmParams::new(DdtmConfig::default(), 8).unwrap();
    let inst = generate(&GenConfig::from_preset("mstop10", PrizeMode::Constant, 8).unwrap()).unwrap();
    let actions = p.rollout(&inst, &[0, 1], DecodeMode::Sample(1)).unwrap().actions();
    (p, inst, actions)
}

#[test]
fn zero_advantage_gradient_is_alpha_times_entropy_gradient() {
    let (p, inst, actions) = setup();
    let grads = |adv: f64, alpha: f64| {
        let (tape, loss) = surrogate_loss(&p, &inst, &[0, 1], &actions, adv, alpha).unwrap();
        tape.backward(loss).unwrap().param_grads(&p.store)
    };
    let alpha = 0.01;
    let mixed = grads(0.0, alpha);
    let pure = grads(0.0, 1.0);
    for id in p.store.trainable_ids() {
        let (a, b) = (mixed.get(id).unwrap(), pure.get(id).unwrap());
        for (x, y) in a.iter().zip(b) {
            assert!((x - alpha * y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
    let null = grads(0.0, 0.0);
    assert!(null.global_norm() <= 1e-9);
}

#[test]
fn running_buffers_receive_no_gradient() {
    let (p, inst, actions) = setup();
    let (tape, loss) = surrogate_loss(&p, &inst, &[0, 1], &actions, 1.0, 0.01).unwrap();
    let g = tape.backward(loss).unwrap().param_grads(&p.store);
    for slot in p.bn_slots() {
        assert!(g.get(slot.running_mean).is_none());
        assert!(g.get(slot.running_var).is_none());
    }
}
