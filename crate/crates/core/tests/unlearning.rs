mod common;

use advanchor_core::advanchor::AdvLossVariant;
use advanchor_core::prompts::{AnchorSpec, AnchorTable};
use advanchor_core::unlearner::{run_unlearning, Strategy, UnlearnConfig, UnlearnResult};
use advanchor_core::weights::{is_cross_attention, BaseModel};
use common::{quick_unlearn, random_base};

fn run(base: &BaseModel, cfg: &UnlearnConfig) -> UnlearnResult {
    run_unlearning(base, &AnchorTable::default(), cfg, None).unwrap()
}

#[test]
fn frozen_weights_are_bit_exact_and_base_is_untouched() {
    let base = random_base(1);
    let before = base.weights.content_hash();
    for strategy in Strategy::ALL {
        let res = run(
            &base,
            &UnlearnConfig {
                strategy,
                ..quick_unlearn()
            },
        );
        let mut moved = 0;
        for (name, t) in res.weights.iter() {
            let orig = base.weights.get(name).unwrap();
            let same = t
                .data()
                .iter()
                .zip(orig.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if is_cross_attention(name) {
                moved += usize::from(!same);
            } else {
                assert!(same, "{strategy:?}: frozen tensor {name} changed");
            }
        }
        assert!(moved > 0, "{strategy:?}: no cross-attention tensor moved");
        assert_eq!(res.theta_ori_hash, before);
        assert_eq!(base.weights.content_hash(), before);
        assert_eq!(
            res.frozen_hash,
            res.weights.hash_where(|n| !is_cross_attention(n))
        );
        assert_eq!(res.loss_trace.len(), quick_unlearn().outer_steps);
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let base = random_base(2);
    let cfg = UnlearnConfig {
        loss_variant: AdvLossVariant::V2,
        ..quick_unlearn()
    };
    let a = run(&base, &cfg);
    let b = run(&base, &cfg);
    assert_eq!(a.weights.content_hash(), b.weights.content_hash());
    assert_eq!(a.e_adv, b.e_adv);
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.anchor_trace, b.anchor_trace);
    let c = run(&base, &UnlearnConfig { seed: 1, ..cfg });
    assert_ne!(a.weights.content_hash(), c.weights.content_hash());
}

#[test]
fn sequential_and_cyclical_agree_on_a_single_input() {
    let base = random_base(3);
    let one = UnlearnConfig {
        outer_steps: 1,
        s: 6,
        ..quick_unlearn()
    };
    let seq = run(
        &base,
        &UnlearnConfig {
            strategy: Strategy::Sequential,
            ..one.clone()
        },
    );
    let cyc = run(
        &base,
        &UnlearnConfig {
            strategy: Strategy::Cyclical,
            ..one
        },
    );
    let traj = |r: &UnlearnResult| -> Vec<(f64, bool, String)> {
        r.anchor_trace
            .iter()
            .map(|a| (a.value, a.stepped, a.fingerprint.clone()))
            .collect()
    };
    assert!(!seq.anchor_trace.is_empty());
    assert_eq!(traj(&seq), traj(&cyc));
    assert_eq!(seq.e_adv, cyc.e_adv);
}

#[test]
fn budget_of_one_caps_every_input() {
    let base = random_base(4);
    for strategy in Strategy::ALL {
        let res = run(
            &base,
            &UnlearnConfig {
                strategy,
                s: 1,
                ..quick_unlearn()
            },
        );
        assert!(!res.stops.is_empty());
        for s in &res.stops {
            assert!(
                s.record.iterations_used <= 1,
                "{strategy:?}: {}",
                s.record.iterations_used
            );
        }
    }
}

#[test]
fn stop_rule_halts_inner_loop_at_first_nonpositive_value() {
    let base = random_base(5);
    let res = run(
        &base,
        &UnlearnConfig {
            loss_variant: AdvLossVariant::V2,
            s: 12,
            ..quick_unlearn()
        },
    );
    for s in &res.stops {
        let v = &s.record.values;
        if let Some(first) = v.iter().position(|&x| x <= 0.0) {
            assert!(s.record.reached);
            assert_eq!(
                first,
                v.len() - 1,
                "kept optimizing after reaching the criterion"
            );
            assert_eq!(s.record.iterations_used, first);
        } else {
            assert!(!s.record.reached);
            assert_eq!(s.record.iterations_used, 12);
        }
    }
}

#[test]
fn anchoring_the_concept_to_itself_changes_nothing() {
    let base = random_base(6);
    let cfg = UnlearnConfig {
        anchor: AnchorSpec::Word {
            word: "style_A".into(),
        },
        ..quick_unlearn()
    };
    let res = run(&base, &cfg);
    assert_eq!(res.weights.content_hash(), base.weights.content_hash());
    assert!(res
        .loss_trace
        .iter()
        .all(|r| r.l_op == 0.0 && r.l_reg == 0.0));
    assert!(res.e_adv.is_none() && res.anchor_trace.is_empty());
}

#[test]
fn empty_defining_set_makes_desc_anchors_identical() {
    let base = random_base(7);
    let mut table = AnchorTable::default();
    table
        .0
        .get_mut("style_A")
        .unwrap()
        .defining_attributes
        .clear();
    let go = |spec: AnchorSpec| {
        let cfg = UnlearnConfig {
            anchor: spec,
            ..quick_unlearn()
        };
        run_unlearning(&base, &table, &cfg, None).unwrap()
    };
    let inc = go(AnchorSpec::DescInclusive { attributes: None });
    let exc = go(AnchorSpec::DescExclusive { attributes: None });
    assert_eq!(inc.weights.content_hash(), exc.weights.content_hash());
    assert_eq!(inc.loss_trace, exc.loss_trace);
}
