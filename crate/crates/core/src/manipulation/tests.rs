use super::*;
use crate::data::{make_toy_dataset, AttributeRule, BatchPlan, RuleShape, Sample, ToySpec};

fn small_model() -> ManipModelConfig {
    ManipModelConfig {
        resolution: 16,
        num_classes: 4,
        domains: vec!["a".into(), "b".into()],
        style_widths: vec![8, 4],
        bottleneck: 4,
        channel_divisor: 16,
        ..ManipModelConfig::paper()
    }
}

fn optim() -> OptimConfig {
    OptimConfig {
        lr: 1e-4,
        beta1: 0.0,
        beta2: 0.99,
        eps: 1e-8,
        batch_size: 3,
        steps: 10,
        accumulate: 1,
    }
}

fn trainer(seed: u64) -> ManipTrainer {
    ManipTrainer::new(small_model(), ManipLossConfig::paper(), optim(), seed).unwrap()
}

fn toy_samples(n: usize) -> Vec<Sample> {
    let spec = ToySpec {
        resolution: 16,
        num_classes: 4,
        rules: vec![
            AttributeRule {
                name: "a".into(),
                region: 3,
                shape: RuleShape::Bar,
                presence: 0.5,
            },
            AttributeRule {
                name: "b".into(),
                region: 3,
                shape: RuleShape::Hat,
                presence: 0.5,
            },
        ],
        seed: 5,
        min_pixels: 2,
        rgb: false,
    };
    make_toy_dataset(&spec, n).unwrap()
}

fn batch(seed: u64) -> Batch {
    let data = toy_samples(12);
    BatchPlan::new(12, 3, seed).unwrap().batch(&data, 0).unwrap()
}

fn bits(v: &[u8]) -> AttributeAssignment {
    AttributeAssignment::new(v.to_vec()).unwrap()
}

fn z(b: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Var::constant(Tensor::randn(&[b, 16], &mut rng))
}

#[test]
fn map_style_branches_are_isolated() {
    let t = trainer(1);
    let z = z(1, 2);
    let a = t.nets.map_style(&z, &[bits(&[0, 0])]).unwrap().tensor();
    let b = t.nets.map_style(&z, &[bits(&[0, 1])]).unwrap().tensor();
    let c = t.nets.map_style(&z, &[bits(&[1, 1])]).unwrap().tensor();
    assert_eq!(a.data()[..8], b.data()[..8]);
    assert!(a.data()[8..].iter().zip(&b.data()[8..]).all(|(x, y)| x != y));
    // all-zeros vs all-ones share no slice
    assert!(a.data().iter().zip(c.data()).all(|(x, y)| x != y));
}

#[test]
fn map_style_differs_across_noise() {
    let t = trainer(1);
    let target = vec![bits(&[1, 0]); 100];
    let s = t.nets.map_style(&z(100, 3), &target).unwrap().tensor();
    let s2 = t.nets.map_style(&z(100, 4), &target).unwrap().tensor();
    for row in 0..100 {
        let r = &s.data()[row * 12..(row + 1) * 12];
        let r2 = &s2.data()[row * 12..(row + 1) * 12];
        assert!(r[..8] != r2[..8] && r[8..] != r2[8..]);
    }
}

#[test]
fn encode_style_shares_trunk_across_selections() {
    let t = trainer(1);
    let b = batch(0);
    let x = Var::constant(b.masks.clone());
    let f1 = t.nets.encoder.trunk(&x).unwrap().tensor();
    let f2 = t.nets.encoder.trunk(&x).unwrap().tensor();
    assert_eq!(f1, f2);
    let heads = t.nets.encoder.all_heads(&Var::constant(f1));
    let s0 = t.nets.encoder.select(&heads, &vec![bits(&[0, 0]); 3]).unwrap().tensor();
    let s1 = t.nets.encoder.select(&heads, &vec![bits(&[1, 0]); 3]).unwrap().tensor();
    let full = heads.tensor();
    // row 0: domain 0 absent head is columns 0..8, present head 8..16
    assert_eq!(s0.data()[..8], full.data()[..8]);
    assert_eq!(s1.data()[..8], full.data()[8..16]);
    assert_eq!(s0.data()[8..12], s1.data()[8..12]);
}

#[test]
fn identical_masks_encode_identically() {
    let t = trainer(1);
    let m = toy_samples(1).remove(0).mask;
    let x = stack_masks(&[&m, &m]).unwrap();
    let s = t.nets.encode_style(&Var::constant(x), &[bits(&[1, 0]), bits(&[1, 0])]).unwrap().tensor();
    assert_eq!(s.data()[..12], s.data()[12..]);
}

#[test]
fn generate_keeps_shape_and_is_deterministic() {
    let t = trainer(1);
    let t2 = trainer(1);
    let b = batch(0);
    let x = Var::constant(b.masks.clone());
    let style = t.nets.map_style(&z(3, 1), &b.labels).unwrap();
    let out = t.nets.generate(&x, &style).unwrap().tensor();
    assert_eq!(out.shape(), b.masks.shape());
    let style2 = t2.nets.map_style(&z(3, 1), &b.labels).unwrap();
    assert_eq!(out, t2.nets.generate(&x, &style2).unwrap().tensor());
    let bad = Var::constant(Tensor::zeros(&[3, 5, 16, 16]));
    assert!(matches!(t.nets.generate(&bad, &style), Err(Error::Dimension(_))));
}

#[test]
fn discriminator_heads_follow_bits() {
    let t = trainer(1);
    let x = Var::constant(batch(0).masks.narrow(0, 0, 2).unwrap());
    let a = t.nets.discriminate(&x, &[bits(&[0, 0]), bits(&[1, 1])]).unwrap().tensor();
    let b = t.nets.discriminate(&x, &[bits(&[0, 1]), bits(&[1, 1])]).unwrap().tensor();
    assert_eq!(a.shape(), &[2, 2]);
    assert_eq!(a.data()[0], b.data()[0]);
    assert_ne!(a.data()[1], b.data()[1]);
    assert_eq!(a.data()[2..], b.data()[2..]);
}

#[test]
fn l1_matches_hand_value() {
    let a = Var::constant(Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]));
    let b = Var::constant(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.5, -1.0]));
    // |1| + |-2| + 0 + |3| over 4
    assert!((l1(&a, &b).item() - 1.5).abs() < 1e-15);
    assert_eq!(l1(&a, &a).item(), 0.0);
}

#[test]
fn style_reconstruction_is_zero_when_encoder_reproduces_style() {
    let t = trainer(1);
    let b = batch(0);
    let x = Var::constant(b.masks.clone());
    let s = t.nets.encode_style(&x, &b.labels).unwrap();
    let loss = loss_style_reconstruction(&t.nets, &x, &b.labels, &s.detach()).unwrap();
    assert_eq!(loss.item(), 0.0);
    let other = t.nets.map_style(&z(3, 9), &b.labels).unwrap();
    assert!(loss_style_reconstruction(&t.nets, &x, &b.labels, &other).unwrap().item() > 0.0);
}

#[test]
fn diversity_ascent_increases_the_term() {
    let t = trainer(2);
    let b = batch(0);
    let x = Var::constant(b.masks.clone());
    let s1 = Var::param(t.nets.map_style(&z(3, 1), &b.labels).unwrap().tensor());
    let s2 = t.nets.map_style(&z(3, 2), &b.labels).unwrap().detach();
    let f2 = t.nets.generate(&x, &s2).unwrap().softmax_channels().detach();
    let f1 = t.nets.generate(&x, &s1).unwrap().softmax_channels();
    assert_eq!(loss_diversity(&f2, &f2).item(), 0.0);
    let before = loss_diversity(&f1, &f2);
    let g = grad_values(&before, &[&s1]).remove(0);
    let stepped = s1.tensor().zip_with(&g, |a, b| a + 1e-2 * b).unwrap();
    let f1b = t.nets.generate(&x, &Var::constant(stepped)).unwrap().softmax_channels();
    assert!(loss_diversity(&f1b, &f2).item() > before.item());
}

#[test]
fn cycle_loss_never_reaches_the_style_encoder() {
    let t = trainer(3);
    let b = batch(1);
    let target: Vec<_> = b.labels.iter().rev().cloned().collect();
    let x = Var::constant(b.masks.clone());
    let s_hat = t.nets.map_style(&z(3, 5), &target).unwrap();
    let fake = t.nets.generate(&x, &s_hat).unwrap().softmax_channels();
    let cyc = loss_cycle(&t.nets, &x, &b.labels, &fake).unwrap();
    let s_params = t.nets.s_params.vars();
    assert!(grad(&cyc, &s_params, false).iter().all(Option::is_none));
    // while the generator does receive gradient
    let g = grad_values(&cyc, &t.nets.g_params.vars());
    assert!(g.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    let sty = loss_style_reconstruction(&t.nets, &fake, &target, &s_hat).unwrap();
    let gs = grad_values(&sty, &s_params);
    assert!(gs.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn adversarial_terms_at_zero_logits() {
    let zero = Var::constant(Tensor::zeros(&[3, 2]));
    let w = Tensor::ones(&[3, 2]);
    let ln2 = std::f64::consts::LN_2;
    assert!((adversarial_g(&zero, &w).item() - ln2).abs() < 1e-15);
    let (r, f) = adversarial_d(&zero, &zero, &w);
    assert!((r.item() - ln2).abs() < 1e-15 && (f.item() - ln2).abs() < 1e-15);
}

#[test]
fn adversarial_terms_match_softplus_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let real = Tensor::randn(&[4, 3], &mut rng);
    let fake = Tensor::randn(&[4, 3], &mut rng);
    let w = Tensor::from_vec(&[4, 3], (0..12).map(|i| (i % 2) as f64).collect());
    let sp = |v: f64| (1.0 + v.exp()).ln();
    let n: f64 = w.data().iter().sum();
    let oracle = |t: &Tensor, sign: f64| -> f64 {
        t.data().iter().zip(w.data()).map(|(v, wi)| wi * sp(sign * v)).sum::<f64>() / n
    };
    let (r, f) = adversarial_d(&Var::constant(real.clone()), &Var::constant(fake.clone()), &w);
    assert!((r.item() - oracle(&real, -1.0)).abs() < 1e-12);
    assert!((f.item() - oracle(&fake, 1.0)).abs() < 1e-12);
    let g = adversarial_g(&Var::constant(fake.clone()), &w);
    assert!((g.item() - oracle(&fake, -1.0)).abs() < 1e-12);
}

#[test]
fn r1_is_zero_for_input_independent_logits() {
    let x = Var::param(Tensor::ones(&[2, 4, 2, 2]));
    let logits = x.sum_axes(&[1, 2, 3]).reshape(&[2, 1]).scale(0.0).add_scalar(3.0);
    assert_eq!(r1_penalty(&logits, &x).item(), 0.0);
    // linear D: gradient is the constant weight
    let logits = x.scale(2.0).sum_axes(&[1, 2, 3]).reshape(&[2, 1]);
    // per-sample ‖∇‖² = 16 · 4, halved
    assert!((r1_penalty(&logits, &x).item() - 32.0).abs() < 1e-12);
}

#[test]
fn changed_heads_weighting() {
    let w = head_weights(AdversarialHeads::Changed, &[bits(&[0, 1]), bits(&[1, 1])], &[bits(&[1, 1]), bits(&[1, 0])]);
    assert_eq!(w.data(), &[1.0, 0.0, 0.0, 1.0]);
    let w = head_weights(AdversarialHeads::All, &[bits(&[0, 1])], &[bits(&[0, 1])]);
    assert_eq!(w.data(), &[1.0, 1.0]);
}

#[test]
fn label_shuffle_preserves_multiset() {
    let mut t = trainer(4);
    let b = batch(2);
    let d = t.draws(&b);
    let mut a: Vec<_> = b.labels.iter().map(|l| l.bits().to_vec()).collect();
    let mut c: Vec<_> = d.target.iter().map(|l| l.bits().to_vec()).collect();
    a.sort();
    c.sort();
    assert_eq!(a, c);
}

#[test]
fn discriminator_gradient_stays_in_trunk_and_selected_heads() {
    let t = trainer(5);
    let b = batch(0);
    let labels = vec![bits(&[1, 0]); 3];
    let x = Var::constant(b.masks.clone());
    let loss = t.nets.discriminate(&x, &labels).unwrap().sum();
    let names: Vec<&str> = t.nets.d_params.entries().iter().map(|(n, _)| n.as_str()).collect();
    let grads = grad_values(&loss, &t.nets.d_params.vars());
    for (name, g) in names.iter().zip(&grads) {
        if *name == "D.heads.weight" {
            // heads laid out [a0, a1, b0, b1]; selected: a1 and b0
            for (row, chunk) in g.data().chunks(g.shape()[1]).enumerate() {
                let selected = row == 1 || row == 2;
                assert_eq!(chunk.iter().any(|&v| v != 0.0), selected, "row {row}");
            }
        } else if *name == "D.heads.bias" {
            assert_eq!(g.data(), &[0.0, 3.0, 3.0, 0.0]);
        } else {
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
}

#[test]
fn zero_lambdas_leave_only_adversarial_gradient() {
    let loss = ManipLossConfig {
        lambda_rec: 0.0,
        lambda_sty: 0.0,
        lambda_sd: 0.0,
        ..ManipLossConfig::paper()
    };
    let t = ManipTrainer::new(small_model(), loss, optim(), 6).unwrap();
    let b = batch(0);
    let target: Vec<_> = b.labels.iter().rev().cloned().collect();
    let (z1, z2) = (z(3, 1).tensor(), z(3, 2).tensor());
    let obj = t.generator_objective(&b, &target, &z1, &z2, 0.0).unwrap();
    let g = t.nets.g_params.vars();
    let total = grad_values(&obj.total, &g);
    let adv = grad_values(&obj.adv, &g);
    assert_eq!(total, adv);
    let other = grad_values(&obj.cyc.add(&obj.sty).add(&obj.sd), &g);
    assert!(other.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn training_steps_are_deterministic() {
    let run = || {
        let mut t = trainer(7);
        let data = toy_samples(12);
        let plan = BatchPlan::new(12, 3, 1).unwrap();
        for k in 0..2 {
            t.train_step(&[plan.batch(&data, k).unwrap()]).unwrap();
        }
        t.tensors()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn accumulation_of_one_matches_plain_step() {
    let mut a = trainer(8);
    let mut b = trainer(8);
    let bt = batch(3);
    let ra = a.train_step(std::slice::from_ref(&bt)).unwrap();
    let rb = b.train_step(&[bt]).unwrap();
    assert_eq!(ra, rb);
    let mut c = trainer(8);
    let r = c.train_step(&[batch(3), batch(4)]).unwrap();
    assert!(r.d_total.is_finite() && c.step == 1);
}

#[test]
fn translate_outputs_valid_masks_and_needs_reference() {
    let t = trainer(9);
    let b = batch(0);
    let target = vec![bits(&[1, 1]); 3];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = translate(&t.nets, &b.masks, TranslateMode::Latent, None, &target, &mut rng).unwrap();
    assert_eq!(out.len(), 3);
    for m in &out {
        assert_eq!(SemanticMask::from_onehot(&m.to_onehot()).unwrap(), *m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(out, translate(&t.nets, &b.masks, TranslateMode::Latent, None, &target, &mut rng).unwrap());
    let err = translate(&t.nets, &b.masks, TranslateMode::Reference, None, &target, &mut rng);
    assert!(matches!(err, Err(Error::Usage(_))));
    assert!(translate(&t.nets, &b.masks, TranslateMode::Reference, Some(&b.masks), &target, &mut rng).is_ok());
}

#[test]
fn lambda_sd_decays_linearly() {
    let l = ManipLossConfig {
        sd_decay_steps: 100,
        ..ManipLossConfig::paper()
    };
    assert_eq!(l.lambda_sd_at(0), 20.0);
    assert_eq!(l.lambda_sd_at(50), 10.0);
    assert_eq!(l.lambda_sd_at(500), 0.0);
}

#[test]
fn checkpoint_tensors_round_trip() {
    let mut a = trainer(10);
    a.train_step(&[batch(0)]).unwrap();
    let map: BTreeMap<String, Tensor> = a.tensors().into_iter().collect();
    let mut b = trainer(11);
    b.load_tensors(&map, a.step).unwrap();
    assert_eq!(a.tensors(), b.tensors());
}
