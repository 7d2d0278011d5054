//! Independent transition scorer and random stream generator.

use emgadapt::model::RELAX;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Straight-line scorer: one `(passed, detected, flicker_free)` per change in
/// `truth`, found by plain scanning.
pub fn brute_force(truth: &[usize], pred: &[usize], buffer: usize) -> Vec<(bool, bool, bool)> {
    let n = truth.len();
    let mut out = Vec::new();
    for i in 1..n {
        if truth[i] == truth[i - 1] {
            continue;
        }
        let c = truth[i];
        let mut next = n;
        for j in i + 1..n {
            if truth[j] != truth[j - 1] {
                next = j;
                break;
            }
        }
        let mut hit = None;
        let mut j = i;
        while j < next && j < i + buffer {
            let entered = pred[j] == c && (j == 0 || pred[j - 1] != c);
            if entered {
                hit = Some(j);
                break;
            }
            j += 1;
        }
        let from = match hit {
            Some(j) => j,
            None => (i + buffer).min(next),
        };
        let mut clean = true;
        for p in &pred[from..next] {
            if *p != c {
                clean = false;
            }
        }
        out.push((hit.is_some() && clean, hit.is_some(), clean));
    }
    out
}

/// Relax-bounded run-length truth plus a prediction that lags, flickers and
/// occasionally misses.
pub fn random_stream(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut truth = vec![RELAX; rng.gen_range(1..20)];
    for _ in 0..rng.gen_range(0..8) {
        let k = rng.gen_range(0..3);
        truth.extend(std::iter::repeat(k).take(rng.gen_range(1..40)));
    }
    truth.extend(std::iter::repeat(RELAX).take(rng.gen_range(1..20)));
    let lag = rng.gen_range(0..6);
    let flip = rng.gen_range(0.0..0.1);
    let pred = (0..truth.len())
        .map(|t| {
            if rng.gen_bool(flip) {
                rng.gen_range(0..3)
            } else {
                truth[t.saturating_sub(lag)]
            }
        })
        .collect();
    (truth, pred)
}
