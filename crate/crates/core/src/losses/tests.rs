use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensorcore::grad_check_sampled;

fn vecs(tape: &mut Tape, rows: &[&[f64]]) -> Vec<Var> {
    rows.iter().map(|r| tape.param(Tensor::vector(r.to_vec()))).collect()
}

fn unit(cos: f64) -> Vec<f64> {
    vec![cos, (1.0 - cos * cos).sqrt()]
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

#[test]
fn raml_examples() {
    let mut tape = Tape::new();
    let v = vecs(&mut tape, &[&unit(0.9), &unit(0.5), &[1.0, 0.0]]);
    let l = l_raml(&mut tape, v[0], v[1], v[2], 0.2).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let v = vecs(&mut tape, &[&unit(0.7), &unit(0.8), &[1.0, 0.0]]);
    let l = l_raml(&mut tape, v[0], v[1], v[2], 0.2).unwrap();
    assert!(close(tape.scalar(l), 0.3));

    let v = vecs(&mut tape, &[&[0.3, -2.0, 1.0], &[0.7, 0.1, 0.2]]);
    let l = l_raml(&mut tape, v[0], v[0], v[1], 0.35).unwrap();
    assert!(close(tape.scalar(l), 0.35));
}

#[test]
fn raun_examples() {
    let mut tape = Tape::new();
    let v = vecs(&mut tape, &[&[1.0, 0.0], &unit(0.1), &unit(0.9)]);
    let l = l_raun(&mut tape, v[0], v[1], v[2], 0.2).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let v = vecs(&mut tape, &[&[1.0, 0.0], &unit(0.6), &unit(0.5)]);
    let l = l_raun(&mut tape, v[0], v[1], v[2], 0.2).unwrap();
    assert!(close(tape.scalar(l), 0.3));

    let v = vecs(&mut tape, &[&[0.3, -2.0, 1.0], &[0.7, 0.1, 0.2]]);
    let l = l_raun(&mut tape, v[0], v[1], v[1], 0.2).unwrap();
    assert!(close(tape.scalar(l), 0.2));
}

#[test]
fn contrast_set_definitions() {
    let tags = [0, 0, 1, 1];
    let (multi, uni) = build_contrast_sets(&tags).unwrap();
    assert_eq!(multi.positives(0), &[0, 1]);
    assert_eq!(multi.negatives(0), &[2, 3]);
    assert_eq!(uni.positives(0), &[1]);
    assert_eq!(uni.negatives(0), &[2, 3]);

    let (multi, uni) = build_contrast_sets(&[4, 4, 4]).unwrap();
    assert!(multi.negatives(1).is_empty() && uni.negatives(1).is_empty());

    let err = ContrastSets::uni_modal(&[0, 0, 1]).unwrap_err();
    assert!(err.to_string().contains("sample 2"));
    assert!(ContrastSets::new(vec![vec![0], vec![1]], vec![vec![0], vec![]]).is_err());
    assert!(ContrastSets::new(vec![vec![0], vec![5]], vec![vec![], vec![]]).is_err());
}

fn matrix(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
    tape.param(Tensor::from_rows(rows).unwrap())
}

#[test]
fn erml_examples() {
    let mut tape = Tape::new();
    // equal logits for the one positive and the one negative
    let ev = matrix(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let q = matrix(&mut tape, &[vec![1.0, 1.0], vec![2.0, 2.0]]);
    let sets = ContrastSets::multi_modal(&[0, 1]).unwrap();
    let l = l_erml(&mut tape, ev, q, &sets, 0.1).unwrap();
    assert!(close(tape.scalar(l), std::f64::consts::LN_2));

    let sets = ContrastSets::multi_modal(&[0, 0]).unwrap();
    let l = l_erml(&mut tape, ev, q, &sets, 0.1).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);

    // cos(ev_i, own query) = 0.8, cos(ev_i, other query) = 0.2
    let ev = matrix(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    let r = 0.32f64.sqrt();
    let q = matrix(&mut tape, &[vec![0.8, 0.2, r], vec![0.2, 0.8, r]]);
    let sets = ContrastSets::multi_modal(&[0, 1]).unwrap();
    let l = l_erml(&mut tape, ev, q, &sets, 0.1).unwrap();
    assert!(close(tape.scalar(l), 0.002_476), "{}", tape.scalar(l));
}

#[test]
fn erun_examples() {
    let mut tape = Tape::new();
    // each row: one identical positive and one orthogonal negative
    let ev = matrix(
        &mut tape,
        &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
    );
    let sets = ContrastSets::new(
        vec![vec![1], vec![0], vec![3], vec![2]],
        vec![vec![2], vec![3], vec![0], vec![1]],
    )
    .unwrap();
    let l = l_erun(&mut tape, ev, &sets, 1.0).unwrap();
    assert!(close(tape.scalar(l), 0.313_262), "{}", tape.scalar(l));

    let sets = ContrastSets::uni_modal(&[1, 1, 1, 1]).unwrap();
    let l = l_erun(&mut tape, ev, &sets, 1.0).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn erml_erun(ev: &[Vec<f64>], q: &[Vec<f64>], tags: &[usize], tau: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let e = matrix(&mut tape, ev);
    let qv = matrix(&mut tape, q);
    let (multi, uni) = build_contrast_sets(tags).unwrap();
    let a = l_erml(&mut tape, e, qv, &multi, tau).unwrap();
    let b = l_erun(&mut tape, e, &uni, tau).unwrap();
    (tape.scalar(a), tape.scalar(b))
}

#[test]
fn inter_sample_losses_are_scale_and_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tags = [0, 1, 0, 2, 1, 2];
    for _ in 0..20 {
        let ev = random_rows(&mut rng, 6, 5);
        let q = random_rows(&mut rng, 6, 5);
        let (a, b) = erml_erun(&ev, &q, &tags, 0.1);
        assert!(a >= 0.0 && b >= 0.0);
        for c in [0.5, 3.0] {
            let i = rng.random_range(0..6);
            let mut ev2 = ev.clone();
            ev2[i].iter_mut().for_each(|v| *v *= c);
            let mut q2 = q.clone();
            q2[(i + 1) % 6].iter_mut().for_each(|v| *v *= c);
            let (a2, b2) = erml_erun(&ev2, &q2, &tags, 0.1);
            assert!((a - a2).abs() < 1e-10 && (b - b2).abs() < 1e-10);
        }
        let perm = [3, 5, 0, 2, 4, 1];
        let pe: Vec<_> = perm.iter().map(|&i| ev[i].clone()).collect();
        let pq: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| tags[i]).collect();
        let (a3, b3) = erml_erun(&pe, &pq, &pt, 0.1);
        assert!((a - a3).abs() < 1e-12 && (b - b3).abs() < 1e-12);
    }
}

fn grnd(label: PartialLabel, start: f64, end: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.param(Tensor::scalar(start));
    let e = tape.param(Tensor::scalar(end));
    let l = l_grnd(&mut tape, s, e, &label).unwrap();
    tape.scalar(l)
}

#[test]
fn grnd_examples() {
    let clip = PartialLabel::new(4.0, 2.0);
    assert_eq!(grnd(clip, 2.0, 7.0), 0.0);
    assert_eq!(grnd(clip, 4.0, 6.0), 1.0);
    assert_eq!(grnd(PartialLabel::new(5.0, 0.0), 5.0, 9.0), 0.0);
}

#[test]
fn grnd_is_zero_exactly_on_containment() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10_000 {
        // integer-ish grids make boundary coincidences common
        let snap = |v: f64| if i % 2 == 0 { (v * 2.0).round() / 2.0 } else { v };
        let label = PartialLabel::new(snap(rng.random_range(2.0..30.0)), snap(rng.random_range(0.0..4.0)));
        let s = snap(rng.random_range(0.0..32.0));
        let e = s + snap(rng.random_range(0.0..16.0));
        let l = grnd(label, s, e);
        let contained = s <= label.start() && label.end() <= e;
        assert_eq!(l == 0.0, contained, "{label:?} [{s}, {e}] → {l}");
        assert!(l >= 0.0);
    }
}

#[test]
fn total_loss_arithmetic() {
    let mut tape = Tape::new();
    let w = LossWeights {
        lambda: 2.0,
        gamma: 3.0,
        ..LossWeights::default()
    };
    let one = tape.param(Tensor::scalar(1.0));
    let parts = LossParts {
        raml: Some(one),
        raun: Some(one),
        erml: Some(one),
        erun: Some(one),
        grnd: Some(one),
    };
    let l = total_implicit_loss(&mut tape, &parts, &w).unwrap();
    assert_eq!(tape.scalar(l), 9.0);

    let zero = tape.param(Tensor::scalar(0.0));
    let parts = LossParts {
        raml: Some(zero),
        raun: Some(zero),
        erml: Some(zero),
        erun: Some(zero),
        grnd: Some(zero),
    };
    let l = total_implicit_loss(&mut tape, &parts, &LossWeights::default()).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
}

/// Four samples in two clusters, every vector a parameter leaf.
struct Fixture {
    tape: Tape,
    batch: BatchEmbeddings,
    leaves: Vec<Var>,
}

fn fixture(values: &[Tensor]) -> Fixture {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
    let (batch, _) = bind_fixture(&leaves);
    Fixture {
        tape,
        batch,
        leaves,
    }
}

fn bind_fixture(vars: &[Var]) -> (BatchEmbeddings, GroundingInputs) {
    let b = 4;
    let batch = BatchEmbeddings {
        events: vars[0..b].to_vec(),
        backgrounds: vars[b..2 * b].to_vec(),
        videos: vars[2 * b..3 * b].to_vec(),
        queries: vars[3 * b..4 * b].to_vec(),
        tags: vec![0, 1, 0, 1],
    };
    let grounding = GroundingInputs {
        starts: vars[4 * b..5 * b].to_vec(),
        ends: vars[5 * b..6 * b].to_vec(),
        labels: vec![
            PartialLabel::new(5.0, 0.0),
            PartialLabel::new(7.0, 2.0),
            PartialLabel::new(3.0, 1.0),
            PartialLabel::new(9.0, 0.0),
        ],
    };
    (batch, grounding)
}

fn fixture_values(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = (0..16)
        .map(|_| Tensor::vector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    for i in 0..4 {
        let c = [5.0, 7.0, 3.0, 9.0][i];
        v.push(Tensor::scalar(c + rng.random_range(-3.0..1.0)));
    }
    for i in 0..4 {
        let c = [5.0, 7.0, 3.0, 9.0][i];
        v.push(Tensor::scalar(c + rng.random_range(-1.0..3.0)));
    }
    v
}

#[test]
fn full_objective_passes_grad_check() {
    let weights = LossWeights::default();
    for seed in 0..20 {
        let report = grad_check_sampled(
            fixture_values,
            |tape, vars| {
                let (batch, grounding) = bind_fixture(vars);
                let parts = implicit_parts(tape, &batch, Some(&grounding), &weights, LossFlags::default())?;
                total_implicit_loss(tape, &parts, &weights)
            },
            1e-4,
            seed,
            50,
        )
        .unwrap();
        assert!(report.min_kink_distance >= 1e-3, "seed {seed}: no kink-free draw");
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn margin_inactive_hinge_has_zero_gradient_error() {
    let report = crate::tensorcore::grad_check(
        |tape, v| l_raml(tape, v[0], v[1], v[2], 0.2),
        &[
            Tensor::vector(unit(0.9)),
            Tensor::vector(unit(0.5)),
            Tensor::vector(vec![1.0, 0.0]),
        ],
        1e-4,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

/// Gradient of the objective restricted to `flags` (grounding off).
fn gradient_under(values: &[Tensor], flags: LossFlags, weights: &LossWeights) -> (Vec<f64>, LossParts) {
    let mut fx = fixture(values);
    let parts = implicit_parts(&mut fx.tape, &fx.batch, None, weights, flags).unwrap();
    let total = total_implicit_loss(&mut fx.tape, &parts, weights).unwrap();
    let grads = fx.tape.backward(total).unwrap();
    let flat = fx
        .leaves
        .iter()
        .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect();
    (flat, parts)
}

#[test]
fn ablation_rows_enable_exactly_their_losses() {
    // large margins keep both hinges active so every enabled term has gradient
    let weights = LossWeights {
        alpha: 2.5,
        beta: 2.5,
        lambda: 0.7,
        ..LossWeights::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values = fixture_values(&mut rng);
    let single = |raml, raun, erml, erun| LossFlags { raml, raun, erml, erun };
    let terms = [
        single(true, false, false, false),
        single(false, true, false, false),
        single(false, false, true, false),
        single(false, false, false, true),
    ];
    let term_grads: Vec<Vec<f64>> = terms.iter().map(|f| gradient_under(&values, *f, &weights).0).collect();
    for g in &term_grads {
        assert!(g.iter().any(|v| v.abs() > 1e-6));
    }
    for row in Ablation::ALL {
        let flags = row.flags();
        let (grad, parts) = gradient_under(&values, flags, &weights);
        let on = [flags.raml, flags.raun, flags.erml, flags.erun];
        let present = [
            parts.raml.is_some(),
            parts.raun.is_some(),
            parts.erml.is_some(),
            parts.erun.is_some(),
        ];
        assert_eq!(on, present, "{row}");
        let expect: Vec<f64> = (0..grad.len())
            .map(|i| (0..4).filter(|&t| on[t]).map(|t| term_grads[t][i]).sum())
            .collect();
        for (a, b) in grad.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{row}");
        }
    }
    assert_eq!(
        [Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A4, Ablation::A5, Ablation::A6].map(|a| a.flags().to_string()),
        ["raml", "raml,raun", "raml,erml", "raml,raun,erml", "raml,erml,erun", "raml,raun,erml,erun"]
    );
}

#[test]
fn flags_and_rows_parse() {
    assert_eq!("raml".parse::<LossFlags>().unwrap(), Ablation::A1.flags());
    assert_eq!("raml,raun,erml,erun".parse::<LossFlags>().unwrap(), Ablation::A6.flags());
    assert!(!"".parse::<LossFlags>().unwrap().any());
    assert!("raml,foo".parse::<LossFlags>().is_err());
    assert_eq!("a4".parse::<Ablation>().unwrap(), Ablation::A4);
    assert!("A7".parse::<Ablation>().is_err());
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { alpha: -0.1, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights { gamma: f64::NAN, ..LossWeights::default() }.validate().is_err());
}
