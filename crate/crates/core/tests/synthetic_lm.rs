use stepprune_core::backend::synth::{exact_joint, synth_generate, Slot, StepLayout, SyntheticLm, FIRST_CONTENT};
use stepprune_core::entropy::{self, EntropyMode};
use stepprune_core::segment::segment;

fn plogp(row: &[(usize, f64)]) -> f64 {
    row.iter().filter(|(_, p)| *p > 0.0).map(|(_, p)| -p * p.log2()).sum()
}

fn three_step_lm(seed: u64) -> SyntheticLm {
    SyntheticLm::random(seed, 3, 2, StepLayout::new(vec![2, 1, 2], 1)).unwrap()
}

#[test]
fn step_entropies_match_exact_conditionals() {
    for seed in 0..25 {
        let lm = three_step_lm(seed);
        let trace = synth_generate(&format!("p{seed}"), &lm).unwrap();
        let seq: Vec<usize> = trace
            .tokens
            .iter()
            .map(|t| lm.vocab.iter().position(|v| *v == t.text).unwrap())
            .collect();
        let slots = lm.layout.slots();
        let mut expected = vec![0.0; 3];
        for (pos, slot) in slots.iter().enumerate() {
            if let Slot::Step(j) = slot {
                expected[*j] += plogp(lm.row(&seq[..pos]).unwrap());
            }
        }
        let seg = segment(&trace).unwrap();
        let report = entropy::analyze(&seg).unwrap();
        assert_eq!(report.mode, EntropyMode::Exact);
        assert_eq!(report.per_step_bits.len(), 3);
        for (got, want) in report.per_step_bits.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn joint_marginals_match_token_entropies() {
    // order 0: every position has the same context, so the marginal entropy
    // of each position equals its row entropy
    let lm = SyntheticLm::random(11, 3, 0, StepLayout::new(vec![2, 2], 1)).unwrap();
    let joint = exact_joint(&lm, lm.layout.len()).unwrap();
    assert!((joint.total_mass() - 1.0).abs() < 1e-9);
    let slots = lm.layout.slots();
    let row_bits = plogp(lm.row(&[]).unwrap());
    for (pos, slot) in slots.iter().enumerate() {
        let mut marginal = std::collections::BTreeMap::<usize, f64>::new();
        for (seq, p) in &joint.sequences {
            *marginal.entry(seq[pos]).or_default() += p;
        }
        let h = plogp(&marginal.into_iter().collect::<Vec<_>>());
        match slot {
            Slot::Forced(_) => assert!(h.abs() < 1e-12),
            _ => assert!((h - row_bits).abs() < 1e-9),
        }
    }
}

#[test]
fn sequences_use_content_symbols_in_content_slots() {
    let lm = three_step_lm(5);
    let joint = exact_joint(&lm, lm.layout.len()).unwrap();
    for (seq, _) in &joint.sequences {
        for (sym, slot) in seq.iter().zip(lm.layout.slots()) {
            match slot {
                Slot::Forced(f) => assert_eq!(*sym, f),
                _ => assert!(*sym >= FIRST_CONTENT),
            }
        }
    }
}
