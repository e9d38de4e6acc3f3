//! Proportional betting on a die with side information.
//!
//! Rates are in bits per throw. Wealth is tracked as `log₂ V`, so long runs
//! never overflow or underflow.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::rng;

const SUM_TOL: f64 = 1e-12;

fn check_distribution(name: &'static str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(invalid(name, "empty distribution"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid(name, "entries must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(invalid(name, format!("sums to {total}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BettingGame {
    pub odds: f64,
    pub p_true: Vec<f64>,
    pub seed: u64,
}

impl BettingGame {
    pub fn new(odds: f64, p_true: Vec<f64>, seed: u64) -> Result<Self> {
        if !(odds > 0.0) || !odds.is_finite() {
            return Err(invalid("odds", "must be positive"));
        }
        check_distribution("p_true", &p_true)?;
        Ok(Self { odds, p_true, seed })
    }

    /// Six-sided fair die at 6-for-1.
    pub fn fair_die(seed: u64) -> Self {
        Self {
            odds: 6.0,
            p_true: vec![1.0 / 6.0; 6],
            seed,
        }
    }

    pub fn n_outcomes(&self) -> usize {
        self.p_true.len()
    }

    fn draw(&self, rng: &mut rng::Rng) -> usize {
        sample_index(&self.p_true, rng)
    }
}

fn sample_index(p: &[f64], rng: &mut rng::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// A noisy side channel `P(y | x)`: row `x` is a distribution over `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub confusion: Vec<Vec<f64>>,
}

impl Channel {
    pub fn new(confusion: Vec<Vec<f64>>) -> Result<Self> {
        if confusion.is_empty() {
            return Err(invalid("confusion", "empty channel"));
        }
        let width = confusion[0].len();
        for row in &confusion {
            check_dim("channel row", width, row.len())?;
            check_distribution("confusion row", row)?;
        }
        Ok(Self { confusion })
    }

    /// Transmits the outcome exactly.
    pub fn identity(n: usize) -> Self {
        let confusion = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { confusion }
    }

    /// Output independent of the input.
    pub fn useless(n: usize) -> Self {
        Self {
            confusion: vec![vec![1.0 / n as f64; n]; n],
        }
    }

    /// Flips each symbol to one of the others with total probability `flip`.
    pub fn symmetric(n: usize, flip: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip) || n < 2 {
            return Err(invalid("flip", "need 0 ≤ flip ≤ 1 and n ≥ 2"));
        }
        let off = flip / (n - 1) as f64;
        let confusion = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 - flip } else { off }).collect())
            .collect();
        Ok(Self { confusion })
    }

    pub fn n_inputs(&self) -> usize {
        self.confusion.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.confusion[0].len()
    }

    /// `P(x, y) = p(x) P(y | x)`.
    pub fn joint(&self, p_x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_dim("channel inputs", p_x.len(), self.n_inputs())?;
        Ok(p_x
            .iter()
            .zip(&self.confusion)
            .map(|(px, row)| row.iter().map(|c| px * c).collect())
            .collect())
    }

    /// Posterior `p(x | y)` for every output symbol; `None` where `P(y) = 0`.
    pub fn posteriors(&self, p_x: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let joint = self.joint(p_x)?;
        Ok((0..self.n_outputs())
            .map(|y| {
                let col: Vec<f64> = joint.iter().map(|r| r[y]).collect();
                let py: f64 = col.iter().sum();
                (py > 0.0).then(|| col.iter().map(|v| v / py).collect())
            })
            .collect())
    }
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// `Σ_x p_true(x) log₂(o · p_bet(x))`. A zero bet on a possible outcome gives `−∞`.
pub fn doubling_rate(game: &BettingGame, p_bet: &[f64]) -> Result<f64> {
    check_dim("p_bet", game.n_outcomes(), p_bet.len())?;
    check_distribution("p_bet", p_bet)?;
    let mut rate = 0.0;
    for (p, b) in game.p_true.iter().zip(p_bet) {
        if *p == 0.0 {
            continue;
        }
        if *b == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        rate += p * (game.odds * b).log2();
    }
    Ok(rate)
}

/// Increase in the optimal doubling rate from observing the channel output,
/// `H(X) − H(X|Y)` in bits.
pub fn channel_rate_gain(game: &BettingGame, channel: &Channel) -> Result<f64> {
    let joint = channel.joint(&game.p_true)?;
    let h_x = entropy_bits(&game.p_true);
    let mut h_x_given_y = 0.0;
    for y in 0..channel.n_outputs() {
        let col: Vec<f64> = joint.iter().map(|r| r[y]).collect();
        let py: f64 = col.iter().sum();
        if py > 0.0 {
            let post: Vec<f64> = col.iter().map(|v| v / py).collect();
            h_x_given_y += py * entropy_bits(&post);
        }
    }
    Ok(h_x - h_x_given_y)
}

/// Mutual information of a joint probability table, in bits.
pub fn discrete_mi(joint: &[Vec<f64>]) -> f64 {
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let width = joint.first().map_or(0, Vec::len);
    let py: Vec<f64> = (0..width).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, pxy) in row.iter().enumerate() {
            if *pxy > 0.0 {
                mi += pxy * (pxy / (px[i] * py[j])).log2();
            }
        }
    }
    mi
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WealthRecord {
    pub log2_wealth: f64,
    pub rate: f64,
    pub n_throws: u64,
}

/// Sequential proportional betting. Without a channel the bet is `p_true`;
/// with one, it is the posterior `p(x | y)` for the observed `y`.
pub fn simulate_wealth(game: &BettingGame, channel: Option<&Channel>, n_throws: u64, seed: u64) -> Result<WealthRecord> {
    if n_throws == 0 {
        return Err(invalid("n_throws", "must be at least 1"));
    }
    let posteriors = match channel {
        Some(c) => Some(c.posteriors(&game.p_true)?),
        None => None,
    };
    let mut r = rng::seeded(seed);
    let log2_odds = game.odds.log2();
    let mut log2_wealth = 0.0;
    for _ in 0..n_throws {
        let x = game.draw(&mut r);
        let bet = match (&posteriors, channel) {
            (Some(post), Some(c)) => {
                let y = sample_index(&c.confusion[x], &mut r);
                post[y].as_ref().expect("observed y has positive probability")[x]
            }
            _ => game.p_true[x],
        };
        log2_wealth += log2_odds + bet.log2();
    }
    Ok(WealthRecord {
        log2_wealth,
        rate: log2_wealth / n_throws as f64,
        n_throws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fair_die_kelly_rate_is_zero() {
        let g = BettingGame::fair_die(0);
        assert!(doubling_rate(&g, &g.p_true).unwrap().abs() < 1e-15);
    }

    #[test]
    fn loaded_die_rate_is_log6_minus_entropy() {
        let p = vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1];
        let g = BettingGame::new(6.0, p.clone(), 0).unwrap();
        let h = -(0.5f64 * 0.5f64.log2() + 5.0 * 0.1 * 0.1f64.log2());
        assert!((doubling_rate(&g, &p).unwrap() - (6f64.log2() - h)).abs() < 1e-14);
    }

    #[test]
    fn zero_bet_on_possible_outcome_is_ruin() {
        let g = BettingGame::fair_die(0);
        let bet = vec![0.2, 0.2, 0.2, 0.2, 0.2, 0.0];
        assert_eq!(doubling_rate(&g, &bet).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(BettingGame::new(6.0, vec![0.5, 0.4], 0).is_err());
        assert!(BettingGame::new(0.0, vec![1.0], 0).is_err());
        assert!(Channel::new(vec![vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn channel_gains() {
        let g = BettingGame::fair_die(0);
        assert!((channel_rate_gain(&g, &Channel::identity(6)).unwrap() - 6f64.log2()).abs() < 1e-14);
        assert!(channel_rate_gain(&g, &Channel::useless(6)).unwrap().abs() < 1e-14);
        let coin = BettingGame::new(2.0, vec![0.5, 0.5], 0).unwrap();
        let bsc = Channel::symmetric(2, 0.1).unwrap();
        let h2 = -(0.1f64 * 0.1f64.log2() + 0.9 * 0.9f64.log2());
        let gain = channel_rate_gain(&coin, &bsc).unwrap();
        assert!((gain - (1.0 - h2)).abs() < 1e-14);
        assert!((gain - 0.5310).abs() < 1e-4);
    }

    #[test]
    fn simulation_is_reproducible() {
        let g = BettingGame::fair_die(0);
        let a = simulate_wealth(&g, Some(&Channel::symmetric(6, 0.3).unwrap()), 1000, 9).unwrap();
        let b = simulate_wealth(&g, Some(&Channel::symmetric(6, 0.3).unwrap()), 1000, 9).unwrap();
        assert_eq!(a, b);
        assert!(simulate_wealth(&g, None, 0, 9).is_err());
    }

    #[test]
    fn noiseless_channel_grows_by_log6() {
        let g = BettingGame::fair_die(0);
        let r = simulate_wealth(&g, Some(&Channel::identity(6)), 10_000, 1).unwrap();
        assert!((r.rate - 6f64.log2()).abs() < 1e-12);
    }
}
