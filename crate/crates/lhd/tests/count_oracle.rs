//! Exhaustive-enumeration oracle for the closed-form space counts on every
//! instance small enough to enumerate.

use lhd::complexity::{
    brute_force_cell_count_with, continuous_complexity, valid_cell_count_with, valid_complexity,
};
use lhd::discretize::OutputRule;
use lhd::space::{CellKind, PolicyId, SpaceFamily, SpaceSpec};

fn spec(family: SpaceFamily, n: usize, m: usize) -> SpaceSpec {
    SpaceSpec {
        family,
        n_intermediate: n,
        n_ops: m,
        cell_kinds: vec![CellKind::Normal, CellKind::Reduction],
    }
}

#[test]
fn closed_form_matches_enumeration_on_small_grid() {
    let mut checked = 0;
    for n in 1..=3 {
        for m in 1..=2 {
            for k in 1..=2 {
                let s = spec(SpaceFamily::Lhd, n, m);
                if k > 2 * m {
                    continue;
                }
                let closed = valid_cell_count_with(&s, k, OutputRule::Threshold).unwrap();
                let brute = brute_force_cell_count_with(&s, k, OutputRule::Threshold).unwrap();
                assert_eq!(closed, brute, "lhd n={n} m={m} k={k}");
                checked += 1;
            }
        }
    }
    for n in 1..=3 {
        for m in 1..=2 {
            let s = spec(SpaceFamily::Dss, n, m);
            let closed = valid_cell_count_with(&s, 2, OutputRule::Dense).unwrap();
            let brute = brute_force_cell_count_with(&s, 2, OutputRule::Dense).unwrap();
            assert_eq!(closed, brute, "dss n={n} m={m}");
            checked += 1;
        }
    }
    assert!(checked >= 16, "grid too sparse: {checked} instances");
}

#[test]
fn top_four_outputs_match_enumeration_at_five_nodes() {
    let s = spec(SpaceFamily::Lhd, 5, 1);
    let closed = valid_cell_count_with(&s, 2, OutputRule::TopFour).unwrap();
    let brute = brute_force_cell_count_with(&s, 2, OutputRule::TopFour).unwrap();
    assert_eq!(closed, brute);
}

#[test]
fn whole_space_counts_square_the_cell_counts() {
    for (s, policy) in [
        (SpaceSpec::lhd(), PolicyId::Base),
        (SpaceSpec::dss(), PolicyId::Original),
    ] {
        let cell = lhd::complexity::valid_cell_count(&s, policy).unwrap();
        assert_eq!(valid_complexity(&s, policy).unwrap(), (&cell * &cell));
        let cont_cell =
            lhd::complexity::continuous_cell_count(s.family, s.n_ops, s.n_edges());
        assert_eq!(
            continuous_complexity(&s).unwrap(),
            (&cont_cell * &cont_cell)
        );
    }
}
