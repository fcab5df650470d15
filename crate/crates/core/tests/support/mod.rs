//! Brute-force reference implementations for the acceptance suite.
//!
//! Everything here is written straight from the mathematical definitions on
//! plain nested `Vec`s, deliberately sharing no code with the library so the
//! two paths can check each other.

pub type Mat = Vec<Vec<f64>>;

/// Pairwise cosine similarities with the diagonal pinned to exactly 1 and
/// off-diagonal values clamped into [-1, 1].
pub fn cosine_by_hand(rows: &Mat) -> Mat {
    let n = rows.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                s[i][j] = 1.0;
                continue;
            }
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for k in 0..rows[i].len() {
                dot += rows[i][k] * rows[j][k];
                nu += rows[i][k] * rows[i][k];
                nv += rows[j][k] * rows[j][k];
            }
            s[i][j] = (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0);
        }
    }
    s
}

/// Per row, keep the weights of the k most similar other shots (value
/// descending, then column ascending); everything else is zero.
pub fn top_k_by_hand(s: &Mat, k: usize) -> Mat {
    let n = s.len();
    let mut e = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| s[i][b].partial_cmp(&s[i][a]).unwrap().then(a.cmp(&b)));
        for &j in cand.iter().take(k) {
            e[i][j] = s[i][j];
        }
    }
    e
}

/// How many entries of row i lie strictly above the mean of the whole
/// matrix (diagonal included on both sides of the comparison).
pub fn counts_by_hand(s: &Mat) -> Vec<usize> {
    let n = s.len();
    let mut sum = 0.0;
    for row in s {
        for &v in row {
            sum += v;
        }
    }
    let mean = sum / (n * n) as f64;
    s.iter()
        .map(|row| row.iter().filter(|&&v| v > mean).count())
        .collect()
}

/// Strict local maxima of the count sequence, with virtual minus-infinity
/// sentinels at both ends; falls back to the smallest argmax when no
/// interior maximum exists.
pub fn wide_by_hand(counts: &[usize]) -> Vec<usize> {
    let n = counts.len();
    let mut wide = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || counts[i] > counts[i - 1];
        let right_ok = i == n - 1 || counts[i] > counts[i + 1];
        if left_ok && right_ok {
            wide.push(i);
        }
    }
    if wide.is_empty() {
        let best = (0..n).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
        wide.push(best.unwrap());
    }
    wide
}

/// For every non-wide shot, the wide shot maximizing similarity plus inverse
/// distance; ties prefer the nearer wide shot, then the smaller index.
pub fn affiliation_by_hand(s: &Mat, wide: &[usize]) -> Vec<Option<usize>> {
    let n = s.len();
    (0..n)
        .map(|i| {
            if wide.contains(&i) {
                return None;
            }
            let mut best: Option<(f64, usize, usize)> = None;
            for &j in wide {
                let dist = i.abs_diff(j);
                let score = s[i][j] + 1.0 / dist as f64;
                let better = match best {
                    None => true,
                    Some((bs, bd, bj)) => {
                        score > bs || (score == bs && (dist < bd || (dist == bd && j < bj)))
                    }
                };
                if better {
                    best = Some((score, dist, j));
                }
            }
            best.map(|(_, _, j)| j)
        })
        .collect()
}

/// Bilinear edge score (W1·xr)·(W2·xc).
pub fn bilinear_by_hand(w1: &Mat, w2: &Mat, xr: &[f64], xc: &[f64]) -> f64 {
    let d = w1.len();
    let mut score = 0.0;
    for i in 0..d {
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..d {
            a += w1[i][k] * xr[k];
            b += w2[i][k] * xc[k];
        }
        score += a * b;
    }
    score
}

/// Row-wise softmax treating minus infinity as "no edge"; rows with no
/// finite entry become all zeros.
pub fn softmax_by_hand(e: &Mat) -> Mat {
    e.iter()
        .map(|row| {
            let max = row.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return vec![0.0; row.len()];
            }
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|&v| v / z).collect()
        })
        .collect()
}

/// One smoothing block: layer-normalize x plus the rectified aggregated
/// messages a·(x·w), with layer-norm epsilon 1e-5.
pub fn smooth_block_by_hand(a: &Mat, x: &Mat, w: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let mut m = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            for k in 0..d {
                m[i][j] += x[i][k] * w[k][j];
            }
        }
    }
    let mut y = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            let mut msg = 0.0;
            for k in 0..n {
                msg += a[i][k] * m[k][j];
            }
            y[i][j] = x[i][j] + msg.max(0.0);
        }
    }
    for row in &mut y {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            row[j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
        }
    }
    y
}

pub struct PsdByHand {
    pub counts: Vec<usize>,
    pub wide: Vec<usize>,
    pub affiliation: Vec<Option<usize>>,
    pub e1: Mat,
    pub a1: Mat,
    pub x1: Mat,
    pub e2: Mat,
    pub a2: Mat,
    pub x2: Mat,
}

pub struct PsdWeights<'a> {
    pub d2w_w1: &'a Mat,
    pub d2w_w2: &'a Mat,
    pub g1_w: &'a Mat,
    pub g1_gamma: &'a [f64],
    pub g1_beta: &'a [f64],
    pub w2d_w1: &'a Mat,
    pub w2d_w2: &'a Mat,
    pub g2_w: &'a Mat,
    pub g2_gamma: &'a [f64],
    pub g2_beta: &'a [f64],
}

/// The whole partition-and-smooth pipeline by hand: partition from the
/// cosine matrix of x, detail-to-wide edges and smoothing on x, then
/// wide-to-detail edges and smoothing on the stage-one output.
pub fn psd_by_hand(x: &Mat, w: &PsdWeights) -> PsdByHand {
    let n = x.len();
    let s = cosine_by_hand(x);
    let counts = counts_by_hand(&s);
    let wide = wide_by_hand(&counts);
    let affiliation = affiliation_by_hand(&s, &wide);

    let ninf = f64::NEG_INFINITY;
    let mut e1 = vec![vec![ninf; n]; n];
    for i in 0..n {
        if let Some(j) = affiliation[i] {
            e1[j][i] = bilinear_by_hand(w.d2w_w1, w.d2w_w2, &x[j], &x[i]);
        }
    }
    let a1 = softmax_by_hand(&e1);
    let x1 = smooth_block_by_hand(&a1, x, w.g1_w, w.g1_gamma, w.g1_beta);

    let mut e2 = vec![vec![ninf; n]; n];
    for i in 0..n {
        if let Some(j) = affiliation[i] {
            e2[i][j] = bilinear_by_hand(w.w2d_w1, w.w2d_w2, &x1[i], &x1[j]);
        }
    }
    let a2 = softmax_by_hand(&e2);
    let x2 = smooth_block_by_hand(&a2, &x1, w.g2_w, w.g2_gamma, w.g2_beta);

    PsdByHand {
        counts,
        wide,
        affiliation,
        e1,
        a1,
        x1,
        e2,
        a2,
        x2,
    }
}

/// Average precision by brute force: sort by score descending (ties by
/// index ascending) and, at every positive rank, recount true positives
/// from scratch.
pub fn ap_by_hand(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut sum = 0.0;
    let mut positives = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            let tp = order[..=rank].iter().filter(|&&j| labels[j] == 1).count();
            sum += tp as f64 / (rank + 1) as f64;
            positives += 1;
        }
    }
    sum / positives as f64
}
