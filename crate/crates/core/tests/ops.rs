mod common;

use common::{bound_check, grad_check, op_case};
use tolver_core::exec::{execute, execute_fp64_all, DeviceProfile};
use tolver_core::graph::OpKind;
use tolver_core::rng::Rng;

#[test]
fn every_op_stays_within_its_deterministic_bound() {
    for kind in OpKind::ALL {
        let st = bound_check(kind, 300, 11);
        assert_eq!(st.failures, 0, "{kind}: worst |err|/bound {:.3}", st.worst);
        assert!(st.worst <= 1.0);
    }
}

#[test]
fn every_vjp_matches_central_differences() {
    for kind in OpKind::ALL {
        let st = grad_check(kind, 20, 12, 1e-3);
        assert_eq!(st.failures, 0, "{kind}: worst relative error {:.3e}", st.worst);
    }
}

#[test]
fn data_movement_is_exact_on_every_profile() {
    let mut rng = Rng::new(5);
    for kind in OpKind::ALL.into_iter().filter(|k| k.is_data_movement()) {
        for _ in 0..50 {
            let c = op_case(kind, &mut rng);
            let reference = execute_fp64_all(&c.graph, &c.feeds(), &[]).unwrap().remove(0);
            for p in DeviceProfile::pool() {
                let (out, _) = execute(&c.graph, &c.feeds(), &p).unwrap();
                assert_eq!(out[0].to_f64(), reference, "{kind} on {}", p.id);
            }
        }
    }
}

#[test]
fn fp32_and_fp64_agree_closely_on_generated_cases() {
    let mut rng = Rng::new(6);
    for kind in OpKind::ALL {
        let c = op_case(kind, &mut rng);
        let reference = execute_fp64_all(&c.graph, &c.feeds(), &[]).unwrap().remove(0);
        let (out, _) = execute(&c.graph, &c.feeds(), &DeviceProfile::sequential()).unwrap();
        for (a, b) in out[0].to_f64().iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{kind}: {a} vs {b}");
        }
    }
}
