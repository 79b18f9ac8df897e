use framewise::nn::{bce_grad, bce_loss, Mode, Network, Penalty, Tensor};
use framewise::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use framewise::zoo::{ModelClass, ModelKind, N_KEYS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_class(kind: ModelKind) -> ModelClass {
    let bins = if kind == ModelKind::AllConv { 208 } else { 24 };
    let mut mc = ModelClass::new(kind, bins);
    mc.hidden_width = 16;
    mc
}

fn inputs(mc: &ModelClass, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(mc.input_shape());
    let len = shape.iter().product();
    Tensor::from_vec(&shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn targets(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * N_KEYS).map(|_| f64::from(rng.gen_bool(0.1) as u8)).collect();
    Tensor::from_vec(&[n, N_KEYS], data).unwrap()
}

fn loss(net: &Network, x: &Tensor, t: &Tensor, mode: Mode) -> f64 {
    bce_loss(&net.forward(x, mode).unwrap().0, t).unwrap()
}

fn slice(t: &Tensor, start: usize, n: usize) -> Tensor {
    let row = t.sample_len();
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    Tensor::from_vec(&shape, t.data()[start * row..(start + n) * row].to_vec()).unwrap()
}

#[test]
fn every_model_class_passes_gradient_check() {
    let mode = Mode::Train { dropout_seed: 17 };
    for kind in ModelKind::ALL {
        let mc = small_class(kind);
        let mut net = mc.build().unwrap().initialized(2);
        let x = inputs(&mc, 4, 1);
        let t = targets(4, 2);
        let (y, cache) = net.forward(&x, mode).unwrap();
        let grads = net
            .backward(&cache, &bce_grad(&y, &t).unwrap(), Penalty::default())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for ti in 0..grads.grads.len() {
            let len = grads.grads[ti].len();
            for _ in 0..12 {
                let i = rng.gen_range(0..len);
                let an = grads.grads[ti].data()[i];
                // A ReLU or max-pool switch inside the difference interval
                // spoils the quotient; a failure at the nominal step is only
                // accepted as such if a tenfold smaller step agrees.
                let err = [1e-5, 1e-6]
                    .into_iter()
                    .map(|h| {
                        let orig = net.params()[ti].data()[i];
                        net.params_mut()[ti].data_mut()[i] = orig + h;
                        let hi = loss(&net, &x, &t, mode);
                        net.params_mut()[ti].data_mut()[i] = orig - h;
                        let lo = loss(&net, &x, &t, mode);
                        net.params_mut()[ti].data_mut()[i] = orig;
                        let fd = (hi - lo) / (2.0 * h);
                        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
                    })
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "{kind}: worst relative error {worst:e}");
    }
}

#[test]
fn every_model_class_outputs_probabilities() {
    for kind in ModelKind::ALL {
        let mc = small_class(kind);
        let net = mc.build().unwrap().initialized(5);
        let y = net.predict(&inputs(&mc, 3, 9)).unwrap();
        assert_eq!(y.shape(), &[3, N_KEYS]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0), "{kind}");
    }
}

#[test]
fn every_model_class_can_overfit_a_small_set() {
    for kind in ModelKind::ALL {
        let mc = small_class(kind);
        let mut net = mc.build().unwrap().initialized(11);
        let x = inputs(&mc, 50, 4);
        let t = targets(50, 5);
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.01);
        let mut state = OptimizerState::for_network(cfg.kind, &net);
        let initial = loss(&net, &x, &t, Mode::Eval);
        let batches: Vec<(Tensor, Tensor)> = (0..5)
            .map(|b| (slice(&x, b * 10, 10), slice(&t, b * 10, 10)))
            .collect();
        for step in 0..200u64 {
            let (bx, bt) = &batches[step as usize % batches.len()];
            let (y, cache) = net.forward(bx, Mode::Train { dropout_seed: step }).unwrap();
            let g = net
                .backward(&cache, &bce_grad(&y, bt).unwrap(), Penalty::default())
                .unwrap();
            state.step_network(&cfg, &mut net, &g, cfg.learning_rate).unwrap();
        }
        net.batchnorm_finalize(&vec![x.clone()]).unwrap();
        let after = loss(&net, &x, &t, Mode::Eval);
        assert!(after <= 0.5 * initial, "{kind}: {initial} -> {after}");
    }
}
