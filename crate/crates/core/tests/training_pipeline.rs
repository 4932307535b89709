use ssnn_core::checkpoint;
use ssnn_core::eventdata::{self, SynthConfig};
use ssnn_core::network::{build_network, Architecture, LayerSpec, Mode, Model, NetworkSpec};
use ssnn_core::training::{self, compute_gradients, evaluate, train_step, FrameDataset, LossWeights, Sgd, SgdConfig, TrainConfig};
use ssnn_core::Tensor;

fn tiny_spec(ts: &[usize]) -> NetworkSpec {
    let conv = |c| LayerSpec::Conv {
        out_channels: c,
        stride: 1,
    };
    let stages = (0..ts.len())
        .map(|i| if i == 0 { vec![conv(4), LayerSpec::AvgPool] } else { vec![conv(6)] })
        .collect();
    let mut spec = NetworkSpec::new(Architecture::Custom(stages), ts, 2, (8, 8));
    spec.width_scale = 1;
    spec
}

fn bars<F: ssnn_core::Scalar>(n: usize, seed: u64) -> FrameDataset<F> {
    let samples = eventdata::synth_moving_bars(&SynthConfig::new(n, 8, 6, seed)).unwrap();
    eventdata::to_frame_dataset(&samples, 10.0, 6, None).unwrap()
}

fn warmed<F: ssnn_core::Scalar>(spec: &NetworkSpec, data: &FrameDataset<F>) -> Model<F> {
    let mut m = build_network::<F>(spec, 3).unwrap();
    let mut sgd = Sgd::new(SgdConfig::default());
    let w = LossWeights::default_for(spec.stage_timesteps.len()).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(8) {
        let (x, y) = data.batch(chunk, spec.stage_timesteps[0]).unwrap();
        train_step(&mut m, &mut sgd, &x, &y, &w, 0.05).unwrap();
    }
    m
}

#[test]
fn total_gradient_is_weighted_sum_of_head_gradients() {
    let spec = tiny_spec(&[4, 3, 2]);
    let model = build_network::<f64>(&spec, 1).unwrap();
    let data = bars::<f64>(6, 2);
    let (x, y) = data.batch(&[0, 1, 2, 3, 4, 5], 4).unwrap();
    let lambda = [0.2, 0.3, 0.5];
    let (mixed, _, _) = compute_gradients(&model, &x, &y, &LossWeights::new(&lambda).unwrap()).unwrap();
    let per_head: Vec<_> = (0..3)
        .map(|h| {
            let mut one = [0.0; 3];
            one[h] = 1.0;
            compute_gradients(&model, &x, &y, &LossWeights::new(&one).unwrap()).unwrap().0
        })
        .collect();
    let mut checked = 0;
    for (k, g) in mixed.iter().enumerate() {
        let Some(g) = g else { continue };
        for (e, &v) in g.data().iter().enumerate() {
            let expect: f64 = (0..3)
                .map(|h| per_head[h][k].as_ref().map_or(0.0, |t| t.data()[e]) * lambda[h])
                .sum();
            assert!((v - expect).abs() <= 1e-6 * (1.0 + expect.abs()), "{}", model.params()[k].name);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn zero_weight_heads_leave_their_parameters_untouched() {
    let spec = tiny_spec(&[4, 3, 2]);
    let mut model = build_network::<f32>(&spec, 1).unwrap();
    let before = model.clone();
    let data = bars::<f32>(16, 4);
    let w = LossWeights::new(&[0.0, 0.0, 1.0]).unwrap();
    let mut sgd = Sgd::new(SgdConfig::default());
    for step in 0..6 {
        let (x, y) = data.batch(&[step, step + 5, step + 10], 4).unwrap();
        train_step(&mut model, &mut sgd, &x, &y, &w, 0.1).unwrap();
    }
    let mut moved_backbone = false;
    for (a, b) in before.params().iter().zip(model.params()) {
        if !a.trainable {
            continue;
        }
        if a.name.starts_with("ec") {
            assert_eq!(a.value, b.value, "{}", a.name);
        } else if a.value != b.value {
            moved_backbone = true;
        }
    }
    assert!(moved_backbone);
}

#[test]
fn one_epoch_reduces_loss_on_separable_data() {
    let spec = tiny_spec(&[6, 4]);
    let data = bars::<f32>(48, 5);
    let mut cfg = TrainConfig::new(LossWeights::default_for(2).unwrap());
    cfg.batch = 8;
    cfg.epochs = 1;
    let mut model = build_network::<f32>(&spec, 7).unwrap();
    let (x, y) = data.batch(&(0..48).collect::<Vec<_>>(), 6).unwrap();
    let (_, before, _) = compute_gradients(&model, &x, &y, &cfg.weights).unwrap();
    training::fit(&mut model, &data, &data, &cfg, |_, _| Ok(())).unwrap();
    let (_, after, _) = compute_gradients(&model, &x, &y, &cfg.weights).unwrap();
    assert!(after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let spec = tiny_spec(&[4, 2]);
    let data = bars::<f32>(24, 6);
    let mut cfg = TrainConfig::new(LossWeights::default_for(2).unwrap());
    cfg.batch = 6;
    cfg.epochs = 2;
    cfg.seed = 11;
    let run = || {
        let mut m = build_network::<f32>(&spec, 11).unwrap();
        let hist = training::fit(&mut m, &data, &data, &cfg, |_, _| Ok(())).unwrap();
        let rows: Vec<String> = hist.iter().map(|r| r.csv_row()).collect();
        (rows, checkpoint::to_bytes(&m))
    };
    assert_eq!(run(), run());
}

#[test]
fn inference_ignores_early_classifiers() {
    let spec = tiny_spec(&[5, 3, 2]);
    let data = bars::<f32>(16, 8);
    let mut model = warmed(&spec, &data);
    model.set_mode(Mode::Eval);
    let mut bare_spec = spec.clone();
    bare_spec.early_classifiers = false;
    let mut bare = build_network::<f32>(&bare_spec, 99).unwrap();
    bare.copy_shared_from(&model);
    bare.set_mode(Mode::Eval);
    for i in 0..4 {
        let (x, _) = data.batch(&[i, i + 4, i + 8], 5).unwrap();
        let full = model.forward_train(&x).unwrap();
        assert_eq!(full.ec_logits.len(), 2);
        let infer = model.forward_infer(&x).unwrap();
        assert_eq!(infer, full.final_logits);
        assert_eq!(bare.forward_infer(&x).unwrap(), infer);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let spec = tiny_spec(&[4, 2]);
    let data = bars::<f64>(12, 3);
    let model = warmed(&spec, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ssnn");
    checkpoint::save(&model, &path).unwrap();
    let mut loaded = build_network::<f64>(&spec, 0).unwrap();
    checkpoint::load(&mut loaded, &path).unwrap();
    assert_eq!(evaluate(&model, &data, 5).unwrap(), evaluate(&loaded, &data, 5).unwrap());

    let mut other = build_network::<f64>(&tiny_spec(&[5, 2]), 0).unwrap();
    assert!(checkpoint::load(&mut other, &path).is_err());
    std::fs::write(&path, b"SSNN\x01\x00").unwrap();
    assert!(checkpoint::load(&mut loaded, &path).is_err());
}

#[test]
fn firing_rates_are_probabilities() {
    let spec = tiny_spec(&[4, 2]);
    let data = bars::<f32>(8, 1);
    let mut model = warmed(&spec, &data);
    model.set_mode(Mode::Eval);
    let (x, _) = data.batch(&[0, 1, 2], 4).unwrap();
    let rates = model.firing_rates(&x).unwrap();
    assert_eq!(rates.len(), 2);
    for l in &rates {
        assert_eq!(l.rates.len(), l.shape.iter().product::<usize>());
        assert!(l.rates.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    let (_, tele) = model.infer_with_telemetry(&x).unwrap();
    assert!(tele.iter().all(|s| s.synaptic_ops >= s.spikes));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = eventdata::synth_moving_bars(&SynthConfig::new(20, 8, 4, 2)).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (tr, te) = eventdata::split(&labels, 0.1, 0).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    eventdata::write_dataset(dir.path(), &pick(&tr), &pick(&te)).unwrap();
    assert_eq!(eventdata::load_split(dir.path(), "train").unwrap(), pick(&tr));
    assert_eq!(eventdata::load_split(dir.path(), "test").unwrap(), pick(&te));
    let digest = eventdata::manifest_digest(dir.path()).unwrap();
    assert_eq!(digest.len(), 64);

    // tampering is caught by the manifest
    let victim = dir.path().join(format!("test/{}/{:06}.evst", samples[te[0]].label, te[0]));
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(eventdata::load_split(dir.path(), "test").is_err());
}

#[test]
fn resnet_forward_shapes() {
    let mut spec = NetworkSpec::new(Architecture::ResNet18, &[3, 2, 1], 4, (8, 8));
    spec.width_scale = 16;
    let m = build_network::<f32>(&spec, 0).unwrap();
    assert_eq!(m.plan().units(), vec![7, 6, 4]);
    let x = Tensor::from_fn(&[3, 2, 2, 8, 8], |i| ((i / 3) % 2) as f32);
    let out = m.forward_train(&x).unwrap();
    assert_eq!(out.final_logits.shape(), &[1, 2, 4]);
    assert_eq!(out.ec_logits.iter().map(|t| t.shape()[0]).collect::<Vec<_>>(), vec![2, 1]);
}
