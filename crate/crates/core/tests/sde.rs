use coupled_core::rng::{derive_seed, stream_rng};
use coupled_core::sde::{
    kernel_score, mean_traj, normalize_logits, pc_sample, perturb_sample, OuveParams, PcConfig,
    ToySignalSpec, ToySignals,
};
use coupled_core::Tensor;
use proptest::prelude::*;

fn analytic_terminal_mse(x0: &Tensor, x_cor: &Tensor, steps: usize, seed: u64) -> f64 {
    let p = OuveParams::default();
    let out = pc_sample(
        |x, t, xc| kernel_score(x, x0, xc, t, &p),
        x_cor,
        PcConfig { steps, snr: 0.5 },
        &p,
        &mut stream_rng(seed, 0),
    )
    .unwrap();
    out.terminal.mse(x0).unwrap()
}

#[test]
fn kernel_statistics_match_mean_and_sigma() {
    let p = OuveParams::default();
    let n = 100_000;
    let mut rng = stream_rng(11, 0);
    for &t in &[0.0, 0.3, 0.7, 1.0] {
        let x0 = Tensor::full(&[n], 0.4);
        let xc = Tensor::full(&[n], -0.6);
        let z = Tensor::randn(&[n], &mut rng);
        let xs = perturb_sample(&x0, &xc, t, &z, &p).unwrap();
        let mu = mean_traj(&Tensor::from_vec(vec![0.4]), &Tensor::from_vec(vec![-0.6]), t, &p)
            .unwrap()
            .data()[0];
        let mean = xs.data().iter().sum::<f64>() / n as f64;
        let std = (xs.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let s = p.sigma(t);
        assert!((mean - mu).abs() < 3.0 * s / (n as f64).sqrt(), "t={t}");
        assert!((std - s).abs() < 0.01 * s, "t={t}: std {std} vs {s}");
        assert!((std - s).abs() < 3.0 * s / (2.0 * n as f64).sqrt(), "t={t}");
    }
}

#[test]
fn analytic_score_terminal_mean_hits_x0() {
    let p = OuveParams::default();
    let x0 = Tensor::from_vec(vec![0.5, -0.25, 1.0]);
    let xc = Tensor::from_vec(vec![0.0, 0.5, 0.2]);
    let runs = 1000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for r in 0..runs {
        let out = pc_sample(
            |x, t, c| kernel_score(x, &x0, c, t, &p),
            &xc,
            PcConfig::default(),
            &p,
            &mut stream_rng(derive_seed(5, r), 0),
        )
        .unwrap();
        for k in 0..3 {
            sum[k] += out.terminal.data()[k];
            sq[k] += out.terminal.data()[k].powi(2);
        }
    }
    for k in 0..3 {
        let m = sum[k] / runs as f64;
        let var = sq[k] / runs as f64 - m * m;
        let se = (var / runs as f64).sqrt();
        assert!((m - x0.data()[k]).abs() < 3.0 * se, "dim {k}: mean {m}, se {se}");
    }
}

#[test]
fn analytic_mse_shrinks_with_more_steps() {
    let data = ToySignals::generate(&ToySignalSpec {
        count: 400,
        ..Default::default()
    })
    .unwrap();
    let mut means = Vec::new();
    for &steps in &[5usize, 10, 25, 50] {
        let m: f64 = (0..400)
            .map(|i| analytic_terminal_mse(&data.clean[i], &data.corrupted[i], steps, 1000 + i as u64))
            .sum::<f64>()
            / 400.0;
        means.push(m);
    }
    println!("terminal mse by steps {{5,10,25,50}}: {means:?}");
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn snr_zero_matches_predictor_only_bitwise() {
    let p = OuveParams::default();
    let data = ToySignals::generate(&ToySignalSpec {
        count: 1,
        ..Default::default()
    })
    .unwrap();
    let (x0, xc) = (&data.clean[0], &data.corrupted[0]);
    let run = |snr: f64| {
        pc_sample(
            |x, t, c| kernel_score(x, x0, c, t, &p),
            xc,
            PcConfig { steps: 20, snr },
            &p,
            &mut stream_rng(9, 0),
        )
        .unwrap()
    };
    let a = run(0.0);
    let b = run(0.0);
    assert_eq!(a.terminal, b.terminal);
    assert_eq!(a.trajectory.len(), 21);
    for ((ta, xa), (tb, xb)) in a.trajectory.iter().zip(&b.trajectory) {
        assert_eq!(ta.to_bits(), tb.to_bits());
        assert_eq!(xa, xb);
    }
    assert_ne!(run(0.5).terminal, a.terminal);
}

proptest! {
    #[test]
    fn normalize_preserves_argmax(v in proptest::collection::vec(-50.0f64..50.0, 2..10), m in -3.0f64..3.0, s in 0.1f64..5.0) {
        let y = Tensor::from_vec(v);
        let (n, rec) = normalize_logits(&y, m, s);
        prop_assert_eq!(n.argmax_rows(), y.argmax_rows());
        let back = rec.invert(&n);
        for (a, b) in back.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
