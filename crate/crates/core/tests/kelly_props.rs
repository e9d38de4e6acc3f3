use diffinfo::kelly::{channel_rate_gain, discrete_mi, doubling_rate, simulate_wealth, BettingGame, Channel};
use diffinfo::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let t: f64 = v.iter().sum();
    v.into_iter().map(|x| x / t).collect()
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(normalize)
}

/// Mutual information in bits computed straight from its definition.
fn mi_bits(p_x: &[f64], confusion: &[Vec<f64>]) -> f64 {
    let ny = confusion[0].len();
    let p_y: Vec<f64> = (0..ny).map(|j| p_x.iter().zip(confusion).map(|(p, row)| p * row[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, px) in p_x.iter().enumerate() {
        for j in 0..ny {
            let pxy = px * confusion[i][j];
            if pxy > 0.0 {
                mi += pxy * (pxy / (px * p_y[j])).log2();
            }
        }
    }
    mi
}

#[test]
fn kelly_bet_beats_every_perturbation() {
    let game = BettingGame::new(6.0, normalize(vec![3.0, 1.0, 1.0, 2.0, 0.5, 0.5]), 0).unwrap();
    let best = doubling_rate(&game, &game.p_true).unwrap();
    let mut r = rng::seeded(1);
    for _ in 0..50 {
        let bet = normalize(game.p_true.iter().map(|p| p * (1.0 + 0.5 * r.gen_range(-1.0..1.0))).collect());
        assert!(best >= doubling_rate(&game, &bet).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gain_equals_channel_mutual_information(
        p in distribution(4),
        rows in prop::collection::vec(distribution(3), 4),
    ) {
        let game = BettingGame::new(4.0, p.clone(), 0).unwrap();
        let channel = Channel::new(rows.clone()).unwrap();
        let gain = channel_rate_gain(&game, &channel).unwrap();
        let reference = mi_bits(&p, &rows);
        prop_assert!((gain - reference).abs() < 1e-12, "{gain} vs {reference}");
        let from_joint = discrete_mi(&channel.joint(&p).unwrap());
        prop_assert!((gain - from_joint).abs() < 1e-12);
    }
}

#[test]
fn simulated_rate_error_shrinks_like_inverse_root_n() {
    let game = BettingGame::new(6.0, normalize(vec![3.0, 1.0, 1.0, 2.0, 0.5, 0.5]), 0).unwrap();
    let channel = Channel::symmetric(6, 0.3).unwrap();
    let analytic = doubling_rate(&game, &game.p_true).unwrap() + channel_rate_gain(&game, &channel).unwrap();
    // root-mean-square error over replicates at each n
    let rms = |n: u64| -> f64 {
        let reps = 40;
        let sq: f64 = (0..reps)
            .map(|k| (simulate_wealth(&game, Some(&channel), n, 1000 * n + k).unwrap().rate - analytic).powi(2))
            .sum();
        (sq / reps as f64).sqrt()
    };
    let e = [rms(1_000), rms(10_000), rms(100_000)];
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        // √10 ≈ 3.16 expected; allow replicate noise
        assert!((2.0..5.0).contains(&ratio), "errors {e:?}");
    }
}

#[test]
fn desk_rates_at_one_hundred_thousand_throws() {
    let game = BettingGame::fair_die(0);
    let plain = simulate_wealth(&game, None, 100_000, 3).unwrap();
    assert!(plain.rate.abs() < 0.02);
    let sighted = simulate_wealth(&game, Some(&Channel::identity(6)), 100_000, 3).unwrap();
    assert!((sighted.rate - 6f64.log2()).abs() < 0.02);
}
