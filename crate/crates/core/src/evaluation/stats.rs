use crate::image::ImageRGB;

/// Exact one-sided binomial tail `P[X ≥ successes]` for `X ~ Bin(trials, chance)`.
pub fn binomial_pvalue(successes: usize, trials: usize, chance: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    if chance <= 0.0 {
        return 0.0;
    }
    if chance >= 1.0 {
        return 1.0;
    }
    let ln_p = chance.ln();
    let ln_q = (1.0 - chance).ln();
    let mut ln_choose = ln_choose(trials, successes);
    let mut total = 0.0;
    for k in successes..=trials {
        total += (ln_choose + k as f64 * ln_p + (trials - k) as f64 * ln_q).exp();
        if k < trials {
            ln_choose += ((trials - k) as f64).ln() - ((k + 1) as f64).ln();
        }
    }
    total.clamp(0.0, 1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Mean over all unordered pairs of the per-pixel mean RGB distance.
pub fn mean_pairwise_diversity(images: &[ImageRGB]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += images[i].mean_pixel_distance(&images[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
