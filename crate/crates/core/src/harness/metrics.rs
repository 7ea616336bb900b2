use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::trajectory::SessionOutcome;

/// Sessions per window in trend series.
pub const TREND_WINDOW: usize = 200;

const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: usize,
    pub advice_rate: f64,
    pub accuracy: f64,
    pub total_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: usize,
    pub advice_cost: f64,
    pub advice_rate: f64,
    pub accuracy: f64,
    pub total_score: f64,
    /// Complete windows of [`TREND_WINDOW`] sessions.
    pub windows: Vec<WindowStats>,
}

fn rates(outcomes: &[SessionOutcome]) -> (f64, f64, f64) {
    let n = outcomes.len() as f64;
    let advice = outcomes.iter().filter(|o| o.sought_advice).count() as f64 / n;
    let acc = outcomes.iter().filter(|o| o.correct).count() as f64 / n;
    let total = outcomes.iter().map(|o| o.reward).sum::<f64>() / n;
    (advice, acc, total)
}

/// Advice rate, accuracy and total score, checking
/// `total = accuracy − c · advice_rate`.
pub fn compute_metrics(outcomes: &[SessionOutcome], advice_cost: f64) -> Result<EvalReport, HarnessError> {
    if outcomes.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let (advice_rate, accuracy, total_score) = rates(outcomes);
    let implied = accuracy - advice_cost * advice_rate;
    if (total_score - implied).abs() > IDENTITY_TOL {
        return Err(HarnessError::InvariantViolation(format!(
            "total score {total_score} != accuracy − c·advice_rate = {implied}"
        )));
    }
    let windows = outcomes
        .chunks_exact(TREND_WINDOW)
        .enumerate()
        .map(|(i, w)| {
            let (a, c, t) = rates(w);
            WindowStats {
                start: i * TREND_WINDOW,
                advice_rate: a,
                accuracy: c,
                total_score: t,
            }
        })
        .collect();
    Ok(EvalReport {
        sessions: outcomes.len(),
        advice_cost,
        advice_rate,
        accuracy,
        total_score,
        windows,
    })
}

/// `n` sessions with the given advice rate and accuracy, every advised
/// session answered correctly.
pub fn outcomes_from_rates(
    advice_rate: f64,
    accuracy: f64,
    advice_cost: f64,
    n: usize,
) -> Vec<SessionOutcome> {
    let advised = (advice_rate * n as f64).round() as usize;
    let correct = ((accuracy * n as f64).round() as usize).max(advised);
    (0..n)
        .map(|i| {
            let sought_advice = i < advised;
            let correct = i < correct;
            let reward = match (sought_advice, correct) {
                (true, _) => 1.0 - advice_cost,
                (false, true) => 1.0,
                (false, false) => 0.0,
            };
            SessionOutcome {
                sought_advice,
                correct,
                reward,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub window: usize,
    pub advice_rates: Vec<f64>,
    /// Spearman correlation of advice rate against window index.
    pub spearman: f64,
}

/// Windowed advice-rate series and its rank correlation with time.
pub fn trend_report(outcomes: &[SessionOutcome], window: usize) -> Result<TrendReport, HarnessError> {
    if window == 0 {
        return Err(HarnessError::InvalidConfig("window must be positive".into()));
    }
    if outcomes.len() < 2 * window {
        return Err(HarnessError::TooFewSessions {
            needed: 2 * window,
            got: outcomes.len(),
        });
    }
    let advice_rates: Vec<f64> = outcomes
        .chunks_exact(window)
        .map(|w| w.iter().filter(|o| o.sought_advice).count() as f64 / window as f64)
        .collect();
    let index: Vec<f64> = (0..advice_rates.len()).map(|i| i as f64).collect();
    Ok(TrendReport {
        window,
        spearman: spearman(&index, &advice_rates),
        advice_rates,
    })
}

/// Ranks with ties sharing their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_records() {
        assert!(matches!(compute_metrics(&[], 0.3), Err(HarnessError::EmptyRecords)));
    }

    #[test]
    fn identity_violation_is_reported() {
        // an advised session that is wrong breaks the expert-always-correct regime
        let bad = [SessionOutcome { sought_advice: true, correct: false, reward: 0.7 }];
        assert!(matches!(compute_metrics(&bad, 0.3), Err(HarnessError::InvariantViolation(_))));
    }

    #[test]
    fn windows_and_trend() {
        let mut outs = outcomes_from_rates(0.5, 0.9, 0.3, 400);
        outs.reverse(); // advised sessions last: rising advice rate
        let r = compute_metrics(&outs, 0.3).unwrap();
        assert_eq!(r.windows.len(), 2);
        let t = trend_report(&outs, 200).unwrap();
        assert_eq!(t.advice_rates, vec![0.0, 1.0]);
        assert!((t.spearman - 1.0).abs() < 1e-12);
        assert!(matches!(trend_report(&outs[..399], 200), Err(HarnessError::TooFewSessions { .. })));
    }

    #[test]
    fn constant_series_has_zero_correlation() {
        let outs = vec![SessionOutcome { sought_advice: true, correct: true, reward: 0.7 }; 1000];
        assert_eq!(trend_report(&outs, 200).unwrap().spearman, 0.0);
    }

    #[test]
    fn spearman_with_ties() {
        // ranks of y: [1.5, 1.5, 3, 4]; exact value from the Pearson formula on ranks
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 5.0, 6.0, 9.0]);
        assert!((s - 0.9486832980505138).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn identity_holds_for_any_mix(adv in 0.0f64..1.0, extra in 0.0f64..1.0, c in 0.01f64..0.99, n in 1usize..500) {
            let acc = adv + (1.0 - adv) * extra;
            let outs = outcomes_from_rates(adv, acc, c, n);
            let r = compute_metrics(&outs, c).unwrap();
            prop_assert!((r.total_score - (r.accuracy - c * r.advice_rate)).abs() <= 1e-9);
        }
    }
}
