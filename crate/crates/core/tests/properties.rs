use proptest::prelude::*;

use ssnn_core::eventdata::{self, downsample, integrate_frames, parse_evt, serialize, split, Event, EventStream};
use ssnn_core::kernels;
use ssnn_core::neuron::{lif_step, LifState, NeuronConfig};
use ssnn_core::temporal::{self, TemporalTransformer};
use ssnn_core::Tensor;

fn transformer_case() -> impl Strategy<Value = (Tensor<f64>, TemporalTransformer<f64>)> {
    (2usize..=10, 1usize..=3, 1usize..=3, 1usize..=3)
        .prop_flat_map(|(t1, n, c, hw)| {
            let len = t1 * n * c * hw * hw;
            (
                Just((t1, n, c, hw)),
                1..t1,
                prop::collection::vec(0.0f64..2.0, len),
                prop::collection::vec(-4.0f64..4.0, t1 * (t1 - 1)),
            )
        })
        .prop_map(|((t1, n, c, hw), t2, o, w)| {
            let o = Tensor::new(vec![t1, n, c, hw, hw], o).unwrap();
            let w = Tensor::new(vec![t2, t1], w[..t2 * t1].to_vec()).unwrap();
            (o, TemporalTransformer { weight: w })
        })
}

fn stream() -> impl Strategy<Value = EventStream> {
    (1u32..=16, 1u32..=16).prop_flat_map(|(w, h)| {
        prop::collection::vec((0u32..50_000, 0..w as u16, 0..h as u16, 0u8..=1), 0..60).prop_map(move |mut ev| {
            ev.sort_by_key(|e| e.0);
            let events = ev.into_iter().map(|(t_us, x, y, p)| Event { t_us, x, y, p }).collect();
            EventStream::new(w, h, events).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn reassignment_conserves_time_sums((o, tt) in transformer_case()) {
        let i2 = tt.apply(&o).unwrap();
        let so = o.outer_stride();
        for e in 0..so {
            let a: f64 = (0..o.shape()[0]).map(|t| o.data()[t * so + e]).sum();
            let b: f64 = (0..i2.shape()[0]).map(|t| i2.data()[t * so + e]).sum();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn scores_form_a_distribution((o, tt) in transformer_case()) {
        let avg = temporal::temporal_descriptor(&o).unwrap();
        let d = temporal::temporal_score(&avg, &tt).unwrap();
        let n = d.shape()[1];
        for s in 0..n {
            let sum: f64 = (0..d.shape()[0]).map(|t| d.data()[t * n + s]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!((0..d.shape()[0]).all(|t| d.data()[t * n + s] >= 0.0));
        }
    }

    #[test]
    fn reset_identity_and_membrane_bound(inputs in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let cfg = NeuronConfig::default();
        let mut st = LifState::<f64>::zeros(&[1]);
        for &i in &inputs {
            let s = lif_step(&mut st, &Tensor::from_f64(&[1], &[i]).unwrap(), &cfg).unwrap();
            let (u, h, s) = (st.u.item(), st.h.item(), s.item());
            prop_assert_eq!(u + s * cfg.theta, h);
            // inputs in [0, theta] keep the reset potential in [0, theta)
            prop_assert!((0.0..cfg.theta).contains(&u));
        }
    }

    #[test]
    fn sub_threshold_potential_leaks_geometrically(u0 in 0.0f64..0.99, steps in 1usize..20) {
        let cfg = NeuronConfig::default();
        let mut st = LifState::<f64>::zeros(&[1]);
        lif_step(&mut st, &Tensor::from_f64(&[1], &[u0]).unwrap(), &cfg).unwrap();
        for k in 1..=steps {
            let s = lif_step(&mut st, &Tensor::zeros(&[1]), &cfg).unwrap();
            prop_assert_eq!(s.item(), 0.0);
            prop_assert_eq!(st.h.item(), u0 * cfg.leak().powi(k as i32));
        }
    }

    #[test]
    fn surrogate_window_is_open(h in -3.0f64..3.0, a in 0.1f64..3.0) {
        let g = kernels::surrogate_grad(h, 1.0, a);
        if (h - 1.0).abs() < a / 2.0 {
            prop_assert_eq!(g, 1.0 / a);
        } else {
            prop_assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn evst_round_trip(s in stream()) {
        prop_assert_eq!(parse_evt(&serialize(&s)).unwrap(), s);
    }

    #[test]
    fn frame_counts_are_conserved(s in stream(), window in 1.0f64..30.0, t_max in 1usize..8) {
        let clip = integrate_frames(&s, window, t_max).unwrap();
        let limit = t_max as f64 * window * 1000.0;
        let expected = s.events.iter().filter(|e| f64::from(e.t_us) < limit).count();
        prop_assert_eq!(clip.frames.sum(), expected as f64);
    }

    #[test]
    fn downsampling_is_linear(s in stream(), k in 0.1f64..5.0, th in 1usize..4, tw in 1usize..4) {
        let clip = integrate_frames(&s, 10.0, 3).unwrap();
        let (h, w) = (s.height as usize, s.width as usize);
        let target = (th.min(h), tw.min(w));
        let mut scaled = clip.clone();
        scaled.frames = clip.frames.map(|v| v * k);
        let a = downsample(&scaled, target).unwrap();
        let b = downsample(&clip, target).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!((x - k * y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        // area averaging preserves the mean
        let ratio = (h * w) as f64 / (target.0 * target.1) as f64;
        prop_assert!((b.frames.sum() * ratio - clip.frames.sum()).abs() <= 1e-9 * (1.0 + clip.frames.sum()));
    }

    #[test]
    fn split_is_stratified_disjoint_and_exhaustive(
        labels in prop::collection::vec(0usize..3, 6..120),
        seed in any::<u64>(),
    ) {
        let mut counts = [0usize; 3];
        labels.iter().for_each(|&l| counts[l] += 1);
        prop_assume!(counts.iter().all(|&c| c == 0 || c >= 2));
        let (tr, te) = split(&labels, 0.1, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), labels.len());
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..3 {
            let in_test = te.iter().filter(|&&i| labels[i] == c).count();
            if counts[c] > 0 {
                let want = ((counts[c] as f64 * 0.1).round() as usize).clamp(1, counts[c] - 1);
                prop_assert_eq!(in_test, want);
            }
        }
        prop_assert_eq!(split(&labels, 0.1, seed).unwrap(), (tr, te));
    }
}

#[test]
fn class_zero_centroid_moves_right_and_class_one_left() {
    let mut cfg = eventdata::SynthConfig::new(20, 16, 8, 9);
    cfg.classes = 2;
    for s in eventdata::synth_moving_bars(&cfg).unwrap() {
        let clip = integrate_frames(&s.stream, cfg.window_ms, cfg.frames).unwrap();
        let mut prev: Option<f64> = None;
        for t in 0..cfg.frames {
            let frame = &clip.frames.data()[t * 2 * 256..(t + 1) * 2 * 256];
            let mut cols: Vec<usize> = (0..16)
                .filter(|&x| (0..2).any(|c| (0..16).any(|y| frame[c * 256 + y * 16 + x] > 0.0)))
                .collect();
            cols.dedup();
            assert!(!cols.is_empty());
            let centroid = cols.iter().sum::<usize>() as f64 / cols.len() as f64;
            if let Some(p) = prev {
                if s.label == 0 {
                    assert!(centroid > p, "sample {} frame {t}", s.id);
                } else {
                    assert!(centroid < p, "sample {} frame {t}", s.id);
                }
            }
            prev = Some(centroid);
        }
    }
}

#[test]
fn leading_edge_is_on_and_trailing_edge_is_off() {
    let samples = eventdata::synth_moving_bars(&eventdata::SynthConfig::new(4, 16, 8, 1)).unwrap();
    let s = &samples[0];
    assert_eq!(s.label, 0);
    let clip = integrate_frames(&s.stream, 10.0, 8).unwrap();
    let f = &clip.frames.data()[2 * 256..4 * 256]; // frame 1
    let col_of = |ch: usize| (0..16).find(|&x| (0..16).any(|y| f[ch * 256 + y * 16 + x] > 0.0)).unwrap();
    assert!(col_of(1) > col_of(0));
}
