mod common;

use common::*;
use mfedch::losses::{log_sum_exp, loss_breakdown};
use mfedch::{reconstruction_penalty, sample_infonce, structural_contrastive, total_loss, Hyperparams};

#[test]
fn losses_match_nested_loop_oracles() {
    for seed in 0..50 {
        let inst = random_instance(seed, 8, 5);
        let w = w_rows(&inst.w);
        let p = inst.p.stacked();

        let s = sample_infonce(&inst.p, &inst.ds, &inst.h).unwrap();
        let so = sample_oracle(p, &inst.ds, &inst.h);
        assert!(rel_close(s, so, 1e-10), "seed {seed}: sample {s} vs {so}");

        let st = structural_contrastive(&inst.w, &inst.h).unwrap();
        let sto = structural_oracle(&w, &inst.h);
        assert!(rel_close(st, sto, 1e-10), "seed {seed}: structural {st} vs {sto}");

        let r = reconstruction_penalty(&inst.p, &inst.ds, &inst.w, &inst.h).unwrap();
        let ro = reconstruction_oracle(p, &inst.ds, &w, &inst.h);
        assert!(rel_close(r, ro, 1e-10), "seed {seed}: reconstruction {r} vs {ro}");

        let t = total_loss(&inst.p, &inst.w, &inst.ds, &inst.h).unwrap();
        let to = total_oracle(p, &inst.ds, &w, &inst.h);
        assert!(rel_close(t, to, 1e-10), "seed {seed}: total {t} vs {to}");
        assert!(s >= 0.0 && st >= 0.0 && r >= 0.0);
    }
}

#[test]
fn zero_reconstruction_weights_leave_both_contrastive_terms() {
    let inst = instance(3, 5, &[3, 4], 2);
    let h = Hyperparams {
        alpha: 0.0,
        beta: 0.0,
        lambda: 1.0,
        ..inst.h.clone()
    };
    let b = loss_breakdown(&inst.p, &inst.w, &inst.ds, &h).unwrap();
    assert_eq!(b.reconstruction, 0.0);
    assert_eq!(
        total_loss(&inst.p, &inst.w, &inst.ds, &h).unwrap(),
        sample_infonce(&inst.p, &inst.ds, &h).unwrap() + structural_contrastive(&inst.w, &h).unwrap()
    );
}

#[test]
fn stabilized_matches_naive_where_naive_is_finite() {
    // small temperatures push logits toward the overflow boundary of exp()
    for (seed, tau) in [(1u64, 1.0), (2, 0.05), (3, 0.01), (4, 0.002)] {
        let mut inst = instance(seed, 6, &[4, 3, 5], 2);
        inst.h.tau1 = tau;
        inst.h.tau2 = tau;
        let w = w_rows(&inst.w);
        let naive_s = sample_oracle(inst.p.stacked(), &inst.ds, &inst.h);
        let naive_st = structural_oracle(&w, &inst.h);
        let s = sample_infonce(&inst.p, &inst.ds, &inst.h).unwrap();
        let st = structural_contrastive(&inst.w, &inst.h).unwrap();
        if naive_s.is_finite() {
            assert!(
                rel_close(s, naive_s, 1e-12) || (s - naive_s).abs() < 1e-12,
                "tau {tau}: {s} vs {naive_s}"
            );
        }
        if naive_st.is_finite() {
            assert!(
                rel_close(st, naive_st, 1e-12) || (st - naive_st).abs() < 1e-12,
                "tau {tau}: {st} vs {naive_st}"
            );
        }
    }
}

#[test]
fn tiny_temperature_stays_finite() {
    // exp(1/tau) overflows f64 for tau = 1e-3; the shifted path does not
    let mut inst = instance(9, 5, &[3, 3], 2);
    inst.h.tau1 = 1e-3;
    inst.h.tau2 = 1e-3;
    let naive = sample_oracle(inst.p.stacked(), &inst.ds, &inst.h);
    assert!(!naive.is_finite());
    assert!(total_loss(&inst.p, &inst.w, &inst.ds, &inst.h).unwrap().is_finite());
    assert!((log_sum_exp(&[1e3, 1e3 - 1.0]) - (1e3 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-12);
}

#[test]
fn total_loss_secant_slopes_are_bounded() {
    // perturbation by h changes the loss by O(h): secant slopes at two step
    // sizes agree to leading order
    let inst = instance(21, 5, &[3, 4], 2);
    let base = total_loss(&inst.p, &inst.w, &inst.ds, &inst.h).unwrap();
    for coord in [0usize, 5, 9] {
        let slope = |step: f64| {
            let mut p = inst.p.clone();
            p.stacked_mut().as_mut_slice()[coord] += step;
            (total_loss(&p, &inst.w, &inst.ds, &inst.h).unwrap() - base) / step
        };
        let (a, b) = (slope(1e-4), slope(1e-5));
        assert!((a - b).abs() <= 1e-2 * (1.0 + a.abs()), "P[{coord}]: {a} vs {b}");
    }
    for (m, i, r) in [(0usize, 1usize, 2usize), (1, 4, 0)] {
        let slope = |step: f64| {
            let mut w = inst.w.clone();
            w.view_mut(m)[(r, i)] += step;
            (total_loss(&inst.p, &w, &inst.ds, &inst.h).unwrap() - base) / step
        };
        let (a, b) = (slope(1e-4), slope(1e-5));
        assert!((a - b).abs() <= 1e-2 * (1.0 + a.abs()), "W^{m}[{r},{i}]: {a} vs {b}");
    }
}
