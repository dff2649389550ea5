use prodial_core::linalg::matmul;
use prodial_harness::config::{SeqConfig, Structure, TeacherConfig};
use prodial_harness::tasks::{
    derive_seed, gen_seq_task, gen_teacher_task, payload_class, shift_label, Variant, MARKER,
};
use proptest::prelude::*;

fn teacher(structure: Structure) -> TeacherConfig {
    TeacherConfig {
        structure,
        samples: 200,
        ..TeacherConfig::default()
    }
}

#[test]
fn teacher_is_deterministic_per_seed() {
    let c = teacher(Structure::DiagDominant);
    assert_eq!(gen_teacher_task(4, &c).unwrap().train_y, gen_teacher_task(4, &c).unwrap().train_y);
    assert_ne!(gen_teacher_task(4, &c).unwrap().w, gen_teacher_task(5, &c).unwrap().w);
}

#[test]
fn unperturbed_teacher_is_the_frozen_weight() {
    let c = TeacherConfig {
        diag_scale: 0.0,
        offdiag_std: 0.0,
        eps_scale: 0.0,
        noise_std: 0.0,
        ..teacher(Structure::DiagDominant)
    };
    let t = gen_teacher_task(1, &c).unwrap();
    assert_eq!(t.w_star, t.w);
    let pred = matmul(&t.test_u, &t.w.transpose()).unwrap();
    assert!(pred.sub(&t.test_y).unwrap().max_abs() < 1e-12);
}

#[test]
fn teacher_split_and_shapes() {
    let c = teacher(Structure::Full);
    let t = gen_teacher_task(0, &c).unwrap();
    assert_eq!(t.w.shape(), (c.d_out, c.d_in));
    assert_eq!(t.t_star.shape(), (c.d_in, c.d_in));
    assert_eq!(t.train_u.rows() + t.test_u.rows(), c.samples);
    assert_eq!(t.train_u.rows(), 160);
    assert_eq!(t.train_y.cols(), c.d_out);
}

#[test]
fn block_structure_is_respected() {
    for s in [Structure::DiagDominant, Structure::OffdiagHeavy] {
        let c = TeacherConfig {
            eps_scale: 0.0,
            ..teacher(s)
        };
        let t = gen_teacher_task(2, &c).unwrap().t_star;
        let bs = c.d_in / c.blocks;
        for i in 0..c.d_in {
            for j in 0..c.d_in {
                if i / bs != j / bs {
                    assert_eq!(t.get(i, j), 0.0, "{s:?} ({i}, {j})");
                }
            }
        }
    }
    let c = TeacherConfig {
        eps_scale: 0.0,
        ..teacher(Structure::OffdiagHeavy)
    };
    let t = gen_teacher_task(2, &c).unwrap().t_star;
    for i in 0..t.rows() {
        assert_eq!(t.get(i, i), 1.0);
    }
}

#[test]
fn diagonal_of_a_dominant_teacher_stays_in_range() {
    let c = TeacherConfig {
        eps_scale: 0.0,
        ..teacher(Structure::DiagDominant)
    };
    let t = gen_teacher_task(3, &c).unwrap().t_star;
    for i in 0..t.rows() {
        assert!((t.get(i, i) - 1.0).abs() <= c.diag_scale);
    }
}

#[test]
fn low_rank_term_has_the_requested_size() {
    let c = teacher(Structure::DiagDominant);
    let with = gen_teacher_task(6, &c).unwrap();
    let without = gen_teacher_task(6, &TeacherConfig { eps_scale: 0.0, ..c }).unwrap();
    let eps = with.w_star.sub(&without.w_star).unwrap();
    let ratio = eps.frobenius() / with.w.frobenius();
    assert!((ratio - c.eps_scale).abs() < 1e-12, "{ratio}");
}

#[test]
fn bad_teacher_shapes_are_config_errors() {
    let c = TeacherConfig {
        blocks: 5,
        ..TeacherConfig::default()
    };
    assert!(gen_teacher_task(0, &c).is_err());
}

fn seq() -> SeqConfig {
    SeqConfig {
        seq_len: 16,
        payload: 1,
        train_size: 40,
        test_size: 12,
    }
}

#[test]
fn single_payload_labels_are_the_payload_class() {
    let d = gen_seq_task(0, &seq(), 16, 4, Variant::Base).unwrap();
    for ex in d.train.iter().chain(&d.test) {
        let at = ex.tokens.iter().position(|&t| t == MARKER).expect("one marker");
        assert_eq!(ex.label, ex.tokens[at + 1] % 4);
        assert_eq!(ex.tokens.iter().filter(|&&t| t == MARKER).count(), 1);
    }
}

#[test]
fn shifted_is_the_base_with_permuted_labels() {
    let base = gen_seq_task(9, &seq(), 16, 4, Variant::Base).unwrap();
    let shifted = gen_seq_task(9, &seq(), 16, 4, Variant::Shifted).unwrap();
    for (b, s) in base.train.iter().zip(&shifted.train) {
        assert_eq!(b.tokens, s.tokens);
        assert_eq!(s.label, shift_label(b.label, 4));
    }
}

#[test]
fn classes_are_balanced() {
    let d = gen_seq_task(1, &seq(), 16, 4, Variant::Base).unwrap();
    let mut counts = [0; 4];
    for ex in &d.train {
        counts[ex.label] += 1;
    }
    assert_eq!(counts, [10; 4]);
}

#[test]
fn bad_seq_settings_are_rejected() {
    assert!(gen_seq_task(0, &seq(), 4, 2, Variant::Base).is_err());
    assert!(gen_seq_task(0, &seq(), 16, 16, Variant::Base).is_err());
    let short = SeqConfig { seq_len: 8, ..seq() };
    assert!(gen_seq_task(0, &short, 16, 4, Variant::Base).is_err());
}

proptest! {
    #[test]
    fn multi_payload_labels_follow_the_residue_sum(seed in any::<u64>(), payload in 1usize..5, classes in 2usize..7) {
        let cfg = SeqConfig { seq_len: 16, payload, train_size: 14, test_size: 0 };
        let d = gen_seq_task(seed, &cfg, 16, classes, Variant::Base).unwrap();
        for ex in &d.train {
            let picked: Vec<usize> = (0..8)
                .filter(|&s| ex.tokens[2 * s] == MARKER)
                .map(|s| ex.tokens[2 * s + 1])
                .collect();
            prop_assert_eq!(picked.len(), payload);
            prop_assert_eq!(payload_class(&picked, classes), ex.label);
            prop_assert!(ex.tokens.iter().all(|&t| t < 16));
        }
    }

    #[test]
    fn shift_is_a_permutation(classes in 2usize..50) {
        let mut seen: Vec<usize> = (0..classes).map(|c| shift_label(c, classes)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..classes).collect::<Vec<_>>());
    }

    #[test]
    fn derived_seeds_separate_tags(seed in any::<u64>()) {
        let tags: Vec<u64> = (1..7).map(|t| derive_seed(seed, t)).collect();
        for i in 0..tags.len() {
            for j in i + 1..tags.len() {
                prop_assert_ne!(tags[i], tags[j]);
            }
        }
    }
}
