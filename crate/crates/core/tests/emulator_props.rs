use flexitok::autograd::Graph;
use flexitok::model::{Emulator, ModelConfig};
use flexitok::params::{ParamId, ParamStore};
use flexitok::processor::{rollout_loss, Processor, ProcessorConfig};
use flexitok::tensor::Tensor;
use flexitok::tokeniser::{all_choices, sample_compression, tokeniser_loss, CompressionMode, TokeniserConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tiny_model(c_total: usize, seed: u64) -> Emulator<f64> {
    let tok = TokeniserConfig::tiny(c_total);
    let cfg = ModelConfig { processor: ProcessorConfig::tiny(tok.latent_channels), tokeniser: tok };
    Emulator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn processor_only(cfg: ProcessorConfig, seed: u64) -> (Processor, ParamStore<f64>) {
    let p = Processor::new(cfg).unwrap();
    let mut s = ParamStore::new();
    p.init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (p, s)
}

#[test]
fn projection_shapes() {
    let (p, s) = processor_only(ProcessorConfig::reference(), 0);
    let mut g = Graph::new();
    let z = g.constant(randn(&[1, 18, 3, 8, 8], 1));
    let t = p.project_in(&mut g, &s, z).unwrap();
    assert_eq!(g.shape(t), &[1, 3, 8, 8, 1088]);
    let back = p.project_out(&mut g, &s, t).unwrap();
    assert_eq!(g.shape(back), &[1, 18, 3, 8, 8]);

    let (p, s) = processor_only(ProcessorConfig::desk(), 0);
    let mut g = Graph::new();
    let z = g.constant(randn(&[2, 18, 3, 4, 4], 1));
    let t = p.project_in(&mut g, &s, z).unwrap();
    assert_eq!(g.shape(t), &[2, 3, 4, 4, 128]);
    let back = p.project_out(&mut g, &s, t).unwrap();
    assert_eq!(g.shape(back), &[2, 18, 3, 4, 4]);
    let bad = g.constant(randn(&[1, 17, 3, 4, 4], 1));
    assert!(p.project_in(&mut g, &s, bad).is_err());
}

#[test]
fn processor_is_shape_preserving_causal_and_deterministic() {
    let (p, s) = processor_only(ProcessorConfig::tiny(8), 3);
    let x0 = randn(&[2, 5, 3, 2, 32], 4);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = p.forward::<f64, ChaCha8Rng>(&mut g, &s, v, None).unwrap();
        g.value(y).clone()
    };
    let y0 = run(&x0);
    assert_eq!(y0.shape(), x0.shape());
    assert!(y0.bit_eq(&run(&x0)));
    let mut x1 = x0.clone();
    let per_t = 3 * 2 * 32;
    for b in 0..2 {
        for v in &mut x1.as_mut_slice()[(b * 5 + 2) * per_t..(b * 5 + 3) * per_t] {
            *v += 3.0;
        }
    }
    let y1 = run(&x1);
    assert!(y0.narrow(1, 0, 2).unwrap().bit_eq(&y1.narrow(1, 0, 2).unwrap()));
    assert!(!y0.narrow(1, 2, 1).unwrap().bit_eq(&y1.narrow(1, 2, 1).unwrap()));
}

#[test]
fn drop_path_only_in_training() {
    let (p, s) = processor_only(ProcessorConfig { drop_path_max: 0.5, blocks: 3, ..ProcessorConfig::tiny(8) }, 3);
    let x0 = randn(&[4, 2, 2, 2, 32], 4);
    let mut g = Graph::new();
    let v = g.constant(x0.clone());
    let eval = p.forward::<f64, ChaCha8Rng>(&mut g, &s, v, None).unwrap();
    let mut differs = false;
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = p.forward(&mut g, &s, v, Some(&mut rng)).unwrap();
        differs |= !g.value(tr).bit_eq(g.value(eval));
    }
    assert!(differs);
}

#[test]
fn rollout_loss_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
    let y = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let l = rollout_loss(&mut g, x, y).unwrap();
    assert_eq!(g.value(l).as_slice(), &[1.0]);
    let l = rollout_loss(&mut g, x, x).unwrap();
    assert_eq!(g.value(l).as_slice(), &[0.0]);
    let xs = g.scale(x, -3.0);
    let ys = g.scale(y, -3.0);
    let l = rollout_loss(&mut g, xs, ys).unwrap();
    assert_eq!(g.value(l).as_slice(), &[3.0]);
}

#[test]
fn pipeline_prediction_shape_and_causality() {
    let m = tiny_model(3, 8);
    let active = [0, 1, 2];
    let ctx = randn(&[1, 3, 9, 32, 32], 2);
    let choice = sample_compression(&m.tokeniser.cfg, CompressionMode::Validate, &mut ChaCha8Rng::seed_from_u64(0));
    let schema = flexitok::data::FieldSchema::advection();
    let pred = m.predict_next_frame(&ctx, &schema, &choice, &active).unwrap();
    assert_eq!(pred.shape(), &[1, 3, 1, 32, 32]);
    assert!(m.predict_next_frame(&ctx.narrow(2, 0, 4).unwrap(), &schema, &choice, &active).is_err());

    // Appending the would-be future frames must not change the prediction
    // read at the last context position.
    let extra = choice.temporal();
    for choice in all_choices(&m.tokeniser.cfg).into_iter().filter(|c| c.temporal() == extra) {
        let base = randn(&[1, 3, 9 + extra, 32, 32], 5);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = m.forward_sequence(&mut g, v, &choice, &active, None).unwrap();
            g.value(y).narrow(2, 8, 1).unwrap()
        };
        let mut pert = base.clone();
        for c in 0..3 {
            for t in 9..9 + extra {
                let o = (c * (9 + extra) + t) * 1024;
                for v in &mut pert.as_mut_slice()[o..o + 1024] {
                    *v = -*v * 7.0;
                }
            }
        }
        assert!(run(&base).bit_eq(&run(&pert)), "{choice}");
    }
}

/// Central-difference check of selected parameter entries.
fn check_gradients(m: &mut Emulator<f64>, loss: &dyn Fn(&Emulator<f64>, &mut Graph<f64>) -> flexitok::autograd::Var) {
    let mut g = Graph::new();
    let l = loss(m, &mut g);
    let grads = g.backward(l).unwrap().into_param_grads();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<ParamId> = m.params.ids().collect();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let id = ids[rng.random_range(0..ids.len())];
        let Some((_, grad)) = grads.iter().find(|(gid, _)| *gid == id) else { continue };
        let k = rng.random_range(0..grad.numel());
        let h = 1e-6;
        let orig = m.params.get(id).as_slice()[k];
        let mut eval = |v: f64| {
            m.params.get_mut(id).as_mut_slice()[k] = v;
            let mut g = Graph::new();
            let l = loss(m, &mut g);
            g.value(l).as_slice()[0]
        };
        let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        m.params.get_mut(id).as_mut_slice()[k] = orig;
        let analytic = grad.as_slice()[k];
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        worst = worst.max(rel);
        assert!(rel <= 1e-3, "{}[{k}]: analytic {analytic} numeric {numeric}", m.params.name(id));
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} entries checked (worst {worst})");
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = tiny_model(2, 11);
    let ctx = randn(&[1, 2, 9, 16, 16], 1);
    let target = randn(&[1, 2, 1, 16, 16], 2);
    let choice = sample_compression(&m.tokeniser.cfg, CompressionMode::Validate, &mut ChaCha8Rng::seed_from_u64(0));
    let active = [0, 1];
    check_gradients(&mut m, &|m, g| {
        let x = g.constant(ctx.clone());
        let y = g.constant(target.clone());
        let p = m.predict_next_frame_var(g, x, &choice, &active, None).unwrap();
        rollout_loss(g, y, p).unwrap()
    });
    check_gradients(&mut m, &|m, g| {
        let x = g.constant(ctx.clone());
        let z = m.tokeniser.encode(g, &m.params, x, &choice, &active).unwrap();
        let r = m.tokeniser.decode(g, &m.params, z, &choice, &active).unwrap();
        tokeniser_loss(g, x, r).unwrap()
    });
}
