//! Place continuity graph: splits a window's shots into wide shots (local
//! maxima of the similar-shot count) and detail shots, affiliates each
//! detail shot to one wide shot, then runs two message-passing stages with
//! learned bilinear edge scores — details into wides, wides back into
//! details — to produce short-range affinity features.
//!
//! The partition and affiliation are fixed functions of the window; the
//! bilinear edge scores, unlike the entity graph's cosine weights, are
//! differentiable and trained.

use rand::Rng;

use crate::blocks::{
    smooth_block_backward, smooth_block_forward, SmoothBlock, SmoothBlockCache,
};
use crate::ejg::cosine_matrix;
use crate::error::Result;
use crate::ops::{masked_softmax, masked_softmax_backward};
use crate::params::{init_uniform, Gradients, ParamStore, SlotId};
use crate::tensor::{Scalar, Tensor};

/// Wide/detail split of one window plus the detail→wide affiliation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WideDetailPartition {
    /// Per shot, how many shots in the window are more similar to it than
    /// the window-wide average similarity.
    pub counts: Vec<usize>,
    /// Sorted indices of wide shots; never empty.
    pub wide: Vec<usize>,
    /// Sorted indices of detail shots (the complement).
    pub detail: Vec<usize>,
    /// Per shot: `Some(j)` gives the affiliated wide shot of a detail shot,
    /// `None` marks a wide shot.
    pub affiliation: Vec<Option<usize>>,
}

/// Counts, per shot, the entries of its similarity row that strictly exceed
/// the mean over the whole matrix (diagonal included on both sides).
pub fn similar_shot_counts<T: Scalar>(s: &Tensor<T>) -> Vec<usize> {
    let n = s.rows();
    let mean = s.data().iter().map(|v| v.as_f64()).sum::<f64>() / (n * n) as f64;
    (0..n)
        .map(|i| s.row(i).iter().filter(|v| v.as_f64() > mean).count())
        .collect()
}

/// Strict local maxima of the count vector, with virtual `-∞` sentinels
/// beyond both ends so edge positions compare against one neighbor only.
/// When no position qualifies (e.g. a constant vector), falls back to the
/// smallest index attaining the maximum, so the result is never empty.
pub fn select_wide_shots(counts: &[usize]) -> Vec<usize> {
    let n = counts.len();
    let mut wide: Vec<usize> = (0..n)
        .filter(|&i| {
            (i == 0 || counts[i] > counts[i - 1]) && (i + 1 == n || counts[i] > counts[i + 1])
        })
        .collect();
    if wide.is_empty() {
        let max = *counts.iter().max().expect("non-empty counts");
        wide.push(counts.iter().position(|&c| c == max).unwrap());
    }
    wide
}

/// Affiliates each detail shot `i` to the wide shot maximizing
/// `S[i][j] + 1/|i-j|`; exact ties prefer the temporally nearer wide shot,
/// then the smaller index.
pub fn affiliate_details<T: Scalar>(
    s: &Tensor<T>,
    wide: &[usize],
    detail: &[usize],
) -> Vec<Option<usize>> {
    let n = s.rows();
    let mut affiliation = vec![None; n];
    for &i in detail {
        let mut best: Option<(f64, usize, usize)> = None;
        for &j in wide {
            let dist = i.abs_diff(j);
            let score = s.at(i, j).as_f64() + 1.0 / dist as f64;
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
        affiliation[i] = best.map(|(_, _, j)| j);
    }
    affiliation
}

/// Runs counting, wide-shot selection, and affiliation on one window's
/// place-similarity matrix.
pub fn partition_window<T: Scalar>(s: &Tensor<T>) -> WideDetailPartition {
    let counts = similar_shot_counts(s);
    let wide = select_wide_shots(&counts);
    let detail: Vec<usize> = (0..counts.len()).filter(|i| !wide.contains(i)).collect();
    let affiliation = affiliate_details(s, &wide, &detail);
    WideDetailPartition {
        counts,
        wide,
        detail,
        affiliation,
    }
}

/// Slots of one learned bilinear edge scorer.
#[derive(Clone, Debug)]
pub struct BilinearEdges {
    pub w1: SlotId,
    pub w2: SlotId,
}

impl BilinearEdges {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        let w1 = store.register(
            &format!("{prefix}.w1"),
            init_uniform(rng, &[dim, dim], dim, dim),
        )?;
        let w2 = store.register(
            &format!("{prefix}.w2"),
            init_uniform(rng, &[dim, dim], dim, dim),
        )?;
        Ok(BilinearEdges { w1, w2 })
    }
}

pub struct BilinearCache<T> {
    /// `x · W1ᵀ`: row `r` holds `W1 x_r`.
    pub u: Tensor<T>,
    /// `x · W2ᵀ`: row `c` holds `W2 x_c`.
    pub v: Tensor<T>,
}

/// Scores each `(receiver, sender)` pair as `(W1 x_r)ᵀ(W2 x_c)` and writes it
/// at entry `(r, c)`; everything else is the `-∞` sentinel understood by the
/// masked softmax.
pub fn bilinear_edges<T: Scalar>(
    store: &ParamStore<T>,
    params: &BilinearEdges,
    x: &Tensor<T>,
    pairs: &[(usize, usize)],
) -> (Tensor<T>, BilinearCache<T>) {
    let n = x.rows();
    let u = x.matmul_nt(store.get(params.w1));
    let v = x.matmul_nt(store.get(params.w2));
    let mut e = Tensor::zeros(&[n, n]);
    e.fill(T::neg_infinity());
    for &(r, c) in pairs {
        let score = u
            .row(r)
            .iter()
            .zip(v.row(c))
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        e.set(r, c, score);
    }
    (e, BilinearCache { u, v })
}

/// Accumulates gradients for both bilinear matrices and returns the gradient
/// with respect to `x`. `de` carries upstream gradients on the scored
/// entries; sentinel positions are zero there by construction.
pub fn bilinear_edges_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &BilinearEdges,
    grads: &mut Gradients<T>,
    x: &Tensor<T>,
    cache: &BilinearCache<T>,
    pairs: &[(usize, usize)],
    de: &Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut du = Tensor::zeros(&[n, d]);
    let mut dv = Tensor::zeros(&[n, d]);
    for &(r, c) in pairs {
        let g = de.at(r, c);
        for (out, &vv) in du.row_mut(r).iter_mut().zip(cache.v.row(c)) {
            *out += g * vv;
        }
        for (out, &uu) in dv.row_mut(c).iter_mut().zip(cache.u.row(r)) {
            *out += g * uu;
        }
    }
    grads
        .get_mut(params.w1)
        .add_scaled(&du.matmul_tn(x), T::one());
    grads
        .get_mut(params.w2)
        .add_scaled(&dv.matmul_tn(x), T::one());
    let mut dx = du.matmul(store.get(params.w1));
    dx.add_scaled(&dv.matmul(store.get(params.w2)), T::one());
    dx
}

/// Parameters of the two-stage short-range smoothing stack.
#[derive(Clone, Debug)]
pub struct PcgParams {
    pub d2w: BilinearEdges,
    pub block1: SmoothBlock,
    pub w2d: BilinearEdges,
    pub block2: SmoothBlock,
}

impl PcgParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
    ) -> Result<Self> {
        Ok(PcgParams {
            d2w: BilinearEdges::register(store, rng, "psd.d2w", dim)?,
            block1: SmoothBlock::register(store, rng, "psd.block1", dim)?,
            w2d: BilinearEdges::register(store, rng, "psd.w2d", dim)?,
            block2: SmoothBlock::register(store, rng, "psd.block2", dim)?,
        })
    }
}

pub struct PsdCache<T> {
    pub partition: WideDetailPartition,
    /// `(wide, detail)` pairs of the first stage.
    pub pairs_in: Vec<(usize, usize)>,
    /// `(detail, wide)` pairs of the second stage.
    pub pairs_out: Vec<(usize, usize)>,
    pub bi1: BilinearCache<T>,
    /// Row-normalized first-stage edges; detail rows are all-zero.
    pub a1: Tensor<T>,
    pub b1: SmoothBlockCache<T>,
    pub bi2: BilinearCache<T>,
    /// Row-normalized second-stage edges; wide rows are all-zero.
    pub a2: Tensor<T>,
    pub b2: SmoothBlockCache<T>,
}

/// Runs both smoothing stages over one window of place features and returns
/// the short-range affinity features.
pub fn psd_forward<T: Scalar>(
    store: &ParamStore<T>,
    params: &PcgParams,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, PsdCache<T>)> {
    let sims = cosine_matrix(x)?;
    let partition = partition_window(&sims);

    // Stage one: wide rows aggregate from their affiliated detail columns.
    let pairs_in: Vec<(usize, usize)> = partition
        .detail
        .iter()
        .map(|&i| (partition.affiliation[i].expect("detail affiliation"), i))
        .collect();
    let (e1, bi1) = bilinear_edges(store, &params.d2w, x, &pairs_in);
    let a1 = masked_softmax(&e1);
    let (x1, b1) = smooth_block_forward(store, &params.block1, &a1, x)?;

    // Stage two: detail rows aggregate from their single wide shot.
    let pairs_out: Vec<(usize, usize)> = partition
        .detail
        .iter()
        .map(|&i| (i, partition.affiliation[i].expect("detail affiliation")))
        .collect();
    let (e2, bi2) = bilinear_edges(store, &params.w2d, &x1, &pairs_out);
    let a2 = masked_softmax(&e2);
    let (x2, b2) = smooth_block_forward(store, &params.block2, &a2, &x1)?;

    Ok((
        x2,
        PsdCache {
            partition,
            pairs_in,
            pairs_out,
            bi1,
            a1,
            b1,
            bi2,
            a2,
            b2,
        },
    ))
}

/// Accumulates parameter gradients (smoothing blocks and both bilinear edge
/// scorers) and returns the gradient with respect to the input features. The
/// partition and affiliation are constants of the window.
pub fn psd_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &PcgParams,
    grads: &mut Gradients<T>,
    cache: &PsdCache<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    // Stage two: the block consumed (a2, x1); its input gradient joins the
    // edge-score path back into x1.
    let (mut dx1, da2) =
        smooth_block_backward(store, &params.block2, grads, &cache.a2, &cache.b2, dy);
    let de2 = masked_softmax_backward(&cache.a2, &da2);
    let x1 = &cache.b2.x;
    dx1.add_scaled(
        &bilinear_edges_backward(
            store,
            &params.w2d,
            grads,
            x1,
            &cache.bi2,
            &cache.pairs_out,
            &de2,
        ),
        T::one(),
    );

    // Stage one.
    let (mut dx, da1) =
        smooth_block_backward(store, &params.block1, grads, &cache.a1, &cache.b1, &dx1);
    let de1 = masked_softmax_backward(&cache.a1, &da1);
    let x0 = &cache.b1.x;
    dx.add_scaled(
        &bilinear_edges_backward(
            store,
            &params.d2w,
            grads,
            x0,
            &cache.bi1,
            &cache.pairs_in,
            &de1,
        ),
        T::one(),
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, KinkTracker};
    use crate::ops::layer_norm_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut impl Rng, n: usize, d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, d]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn identical_shots_count_nothing_above_the_mean() {
        // Axis-aligned rows keep every cosine at exactly 1.0, so the strict
        // comparison against the mean sees a perfectly flat matrix.
        let x = Tensor::from_rows(&vec![vec![0.0, 2.0]; 5]);
        let s = cosine_matrix(&x).unwrap();
        assert_eq!(similar_shot_counts(&s), vec![0; 5]);
    }

    #[test]
    fn two_orthogonal_clusters_count_their_own_sizes() {
        let mut rows = vec![vec![1.0, 0.0]; 5];
        rows.extend(vec![vec![0.0, 1.0]; 2]);
        let s = cosine_matrix(&Tensor::from_rows(&rows)).unwrap();
        // Mean is 29/49; each row counts exactly its own cluster.
        assert_eq!(similar_shot_counts(&s), vec![5, 5, 5, 5, 5, 2, 2]);
    }

    #[test]
    fn an_off_pattern_shot_counts_only_itself() {
        let mut rows = vec![vec![1.0, 0.0]; 4];
        rows.push(vec![0.0, 1.0]);
        let s = cosine_matrix(&Tensor::from_rows(&rows)).unwrap();
        assert_eq!(similar_shot_counts(&s), vec![4, 4, 4, 4, 1]);
    }

    #[test]
    fn wide_selection_hand_cases() {
        assert_eq!(select_wide_shots(&[1, 3, 2, 5, 4]), vec![1, 3]);
        assert_eq!(select_wide_shots(&[0, 0, 0, 0]), vec![0], "fallback");
        assert_eq!(select_wide_shots(&[5, 1, 1, 1]), vec![0], "edge sentinel");
        assert_eq!(select_wide_shots(&[1, 1, 4, 1]), vec![2]);
    }

    #[test]
    fn affiliation_prefers_similarity_plus_proximity() {
        // Wide shots at 0 and 4; detail 1 sees equal similarity to both, so
        // proximity decides (distance 1 vs 3).
        let mut s: Tensor<f64> = Tensor::zeros(&[5, 5]);
        s.set(1, 0, 0.5);
        s.set(1, 4, 0.5);
        let aff = affiliate_details(&s, &[0, 4], &[1, 2, 3]);
        assert_eq!(aff[1], Some(0));

        // An adjacent wide shot with weak similarity (0.2 + 1/1 = 1.2) beats
        // a distant one with strong similarity (0.9 + 1/5 = 1.1).
        let mut s: Tensor<f64> = Tensor::zeros(&[7, 7]);
        s.set(1, 0, 0.2);
        s.set(1, 6, 0.9);
        let aff = affiliate_details(&s, &[0, 6], &[1, 2, 3, 4, 5]);
        assert_eq!(aff[1], Some(0));

        // Exact ties (same score, same distance) resolve to the smaller
        // index.
        let mut s: Tensor<f64> = Tensor::zeros(&[3, 3]);
        s.set(1, 0, 0.3);
        s.set(1, 2, 0.3);
        let aff = affiliate_details(&s, &[0, 2], &[1]);
        assert_eq!(aff[1], Some(0));

        // A single wide shot absorbs every detail.
        let s: Tensor<f64> = Tensor::zeros(&[4, 4]);
        let aff = affiliate_details(&s, &[2], &[0, 1, 3]);
        assert_eq!(aff, vec![Some(2), Some(2), None, Some(2)]);
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(4..=8);
            let x = random_features(&mut rng, n, 3);
            let s = cosine_matrix(&x).unwrap();
            let p = partition_window(&s);
            assert!(!p.wide.is_empty());
            let mut all: Vec<usize> = p.wide.iter().chain(p.detail.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for &i in &p.detail {
                let j = p.affiliation[i].expect("every detail shot is affiliated");
                assert!(p.wide.contains(&j));
            }
            for &j in &p.wide {
                assert_eq!(p.affiliation[j], None);
            }
        }
    }

    #[test]
    fn identity_bilinear_matrices_reduce_to_dot_products() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let w1 = store.register("t.w1", eye.clone()).unwrap();
        let w2 = store.register("t.w2", eye).unwrap();
        let params = BilinearEdges { w1, w2 };
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 2.0]]);
        let (e, _) = bilinear_edges(&store, &params, &x, &[(0, 1)]);
        let expected = 1.0 * 0.5 + 2.0 * (-1.0);
        assert!((e.at(0, 1) - expected).abs() < 1e-15);
        assert_eq!(e.at(1, 0), f64::NEG_INFINITY);
    }

    #[test]
    fn empty_pair_set_yields_all_sentinels_and_zero_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = BilinearEdges::register(&mut store, &mut rng, "t", 3).unwrap();
        let x = random_features(&mut rng, 4, 3);
        let (e, _) = bilinear_edges(&store, &params, &x, &[]);
        assert!(e.data().iter().all(|v| *v == f64::NEG_INFINITY));
        let a = masked_softmax(&e);
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equal_scores_split_softmax_mass_evenly() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut eye = Tensor::zeros(&[2, 2]);
        eye.set(0, 0, 1.0);
        eye.set(1, 1, 1.0);
        let w1 = store.register("t.w1", eye.clone()).unwrap();
        let w2 = store.register("t.w2", eye).unwrap();
        let params = BilinearEdges { w1, w2 };
        // Details 1 and 2 have identical features, so their scores into the
        // wide row 0 coincide.
        let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.3, 0.8], vec![0.3, 0.8]]);
        let (e, _) = bilinear_edges(&store, &params, &x, &[(0, 1), (0, 2)]);
        let a = masked_softmax(&e);
        assert_eq!(a.at(0, 1), 0.5);
        assert_eq!(a.at(0, 2), 0.5);
    }

    #[test]
    fn stage_softmax_rows_vanish_off_pattern() {
        // Detail rows receive nothing in stage one; wide rows receive
        // nothing in stage two.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = PcgParams::register(&mut store, &mut rng, 4).unwrap();
        for _ in 0..20 {
            let x = random_features(&mut rng, 7, 4);
            let (_, cache) = psd_forward(&store, &params, &x).unwrap();
            for &i in &cache.partition.detail {
                assert!(cache.a1.row(i).iter().all(|v| *v == 0.0));
            }
            for &j in &cache.partition.wide {
                assert!(cache.a2.row(j).iter().all(|v| *v == 0.0));
                let touched: f64 = cache.a1.row(j).iter().sum();
                let has_details = cache
                    .partition
                    .affiliation
                    .iter()
                    .any(|a| *a == Some(j));
                assert_eq!(touched != 0.0, has_details);
            }
        }
    }

    #[test]
    fn zero_weights_reduce_the_stack_to_double_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = PcgParams::register(&mut store, &mut rng, 4).unwrap();
        store.get_mut(params.block1.weight).fill(0.0);
        store.get_mut(params.block2.weight).fill(0.0);
        let x = random_features(&mut rng, 6, 4);
        let (y, _) = psd_forward(&store, &params, &x).unwrap();

        let ones = {
            let mut t = Tensor::zeros(&[4]);
            t.fill(1.0);
            t
        };
        let zeros = Tensor::zeros(&[4]);
        let (l1, _) = layer_norm_forward(&x, &ones, &zeros);
        let (l2, _) = layer_norm_forward(&l1, &ones, &zeros);
        assert_eq!(y.data(), l2.data());
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut store: ParamStore<f64> = ParamStore::new();
            let params = PcgParams::register(&mut store, &mut rng, 4).unwrap();
            let x = random_features(&mut rng, 7, 4);
            let probe = random_features(&mut rng, 7, 4);

            let (_, cache) = psd_forward(&store, &params, &x).unwrap();
            let mut grads = Gradients::zeros_like(&store);
            psd_backward(&store, &params, &mut grads, &cache, &probe);

            let report = grad_check(&mut store, &grads, 1e-3, |s, _| {
                let (y, c) = psd_forward(s, &params, &x).unwrap();
                let mut tracker = KinkTracker::new();
                // Zeros in the pre-activations are structural here: they are
                // the messages of empty aggregation rows.
                tracker.note_relu_skip_exact_zero(c.b1.pre_act.data());
                tracker.note_relu_skip_exact_zero(c.b2.pre_act.data());
                let loss = y
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(v, p)| v * p)
                    .sum::<f64>();
                (loss, tracker.finish())
            });
            assert!(
                report.passed(1e-4),
                "seed {seed}: max rel err {}",
                report.max_rel_err()
            );
            assert!(report.total_checked() > 0);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences_where_the_partition_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = PcgParams::register(&mut store, &mut rng, 4).unwrap();
        let x = random_features(&mut rng, 6, 4);
        let probe = random_features(&mut rng, 6, 4);

        let (_, cache) = psd_forward(&store, &params, &x).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        let dx = psd_backward(&store, &params, &mut grads, &cache, &probe);

        let f = |x: &Tensor<f64>| -> (f64, WideDetailPartition) {
            let (y, c) = psd_forward(&store, &params, x).unwrap();
            let loss = y.data().iter().zip(probe.data()).map(|(v, p)| v * p).sum();
            (loss, c.partition)
        };
        let eps = 1e-6;
        let mut compared = 0;
        for idx in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[idx] += eps;
            let mut m = x.clone();
            m.data_mut()[idx] -= eps;
            let (fp, part_p) = f(&p);
            let (fm, part_m) = f(&m);
            // The split itself is piecewise constant in the features; skip
            // coordinates whose perturbation flips it.
            if part_p != cache.partition || part_m != cache.partition {
                continue;
            }
            let num = (fp - fm) / (2.0 * eps);
            assert!(
                (num - dx.data()[idx]).abs() < 1e-6,
                "dx[{idx}]: analytic {} vs numeric {num}",
                dx.data()[idx]
            );
            compared += 1;
        }
        assert!(compared > x.len() / 2, "too few stable coordinates");
    }
}
