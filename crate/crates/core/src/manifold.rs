//! Affinity matrices, the feature-label discrepancy indicator and the
//! clean/noisy partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelState, PrototypeBank};

/// Cosine affinity between all pairs of rows of `v`.
pub fn affinity_square(v: &Tensor) -> Result<Tensor> {
    let (b, _) = v.dims2()?;
    if b < 2 {
        return Err(Error::InvalidArgument(format!("affinity needs >= 2 rows, got {b}")));
    }
    kernels::cosine_matrix(v, v)
}

/// Cosine affinity between noisy rows and clean rows, `B_N x B_C`.
pub fn affinity_cross(noisy: &Tensor, clean: &Tensor) -> Result<Tensor> {
    kernels::cosine_matrix(noisy, clean)
}

/// Differentiable [`affinity_square`].
pub fn affinity_square_graph(g: &mut Graph, v: Var) -> Result<Var> {
    let (b, _) = g.value(v).dims2()?;
    if b < 2 {
        return Err(Error::InvalidArgument(format!("affinity needs >= 2 rows, got {b}")));
    }
    g.cosine_matrix(v, v)
}

/// Differentiable [`affinity_cross`].
pub fn affinity_cross_graph(g: &mut Graph, noisy: Var, clean: Var) -> Result<Var> {
    g.cosine_matrix(noisy, clean)
}

/// Per-sample cross-entropy between `softmax(A_g[i])` and `softmax(A_m[i])`.
///
/// With `include_diag` false the self-similarity entry is dropped from both
/// softmaxes.
pub fn noise_indicator(a_m: &Tensor, a_g: &Tensor, include_diag: bool) -> Result<Vec<f64>> {
    let (b, c) = a_m.dims2()?;
    if a_g.shape() != a_m.shape() || b != c {
        return Err(Error::InvalidShape(format!(
            "indicator needs equal square matrices, got {:?} and {:?}",
            a_m.shape(),
            a_g.shape()
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument("indicator needs >= 2 samples".into()));
    }
    let keep = |i: usize, j: usize| include_diag || i != j;
    let eta = (0..b)
        .map(|i| {
            let (m_row, g_row) = (a_m.row(i), a_g.row(i));
            let m_max = (0..b).filter(|&j| keep(i, j)).map(|j| m_row[j]).fold(f64::NEG_INFINITY, f64::max);
            let g_max = (0..b).filter(|&j| keep(i, j)).map(|j| g_row[j]).fold(f64::NEG_INFINITY, f64::max);
            let m_lse = (0..b).filter(|&j| keep(i, j)).map(|j| (m_row[j] - m_max).exp()).sum::<f64>().ln();
            let g_sum: f64 = (0..b).filter(|&j| keep(i, j)).map(|j| (g_row[j] - g_max).exp()).sum();
            (0..b)
                .filter(|&j| keep(i, j))
                .map(|j| {
                    let q = (g_row[j] - g_max).exp() / g_sum;
                    let log_p = m_row[j] - m_max - m_lse;
                    -q * log_p
                })
                .sum()
        })
        .collect();
    Ok(eta)
}

/// Shuffles `0..n` with `seed` and cuts it into chunks of `batch_size`,
/// folding a tail shorter than 2 into the previous chunk.
pub fn scoring_chunks(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 samples to score, got {n}")));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("scoring batch must be >= 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().unwrap().len() < 2 {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    Ok(chunks)
}

/// Indicator of every sample, computed chunk by chunk and returned in dataset order.
pub fn score_dataset(
    data: &Dataset,
    model: &ModelState,
    bank: &PrototypeBank,
    batch_size: usize,
    seed: u64,
    include_diag: bool,
) -> Result<Vec<f64>> {
    let mut eta = vec![0.0; data.len()];
    for chunk in scoring_chunks(data.len(), batch_size, seed)? {
        let (_, z) = model.embed(&data.inputs(&chunk)?)?;
        let p = bank.embed(&z)?;
        let a_m = affinity_square(&p)?;
        let a_g = affinity_square(&data.observed_vectors(&chunk)?)?;
        for (&i, e) in chunk.iter().zip(noise_indicator(&a_m, &a_g, include_diag)?) {
            eta[i] = e;
        }
    }
    Ok(eta)
}

/// Per-sample L1 training loss, the alternative indicator.
pub fn l1_indicator(data: &Dataset, model: &ModelState) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let idx = data.all_indices();
    let pred = model.predict(&data.inputs(&idx)?)?;
    Ok(data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ((pred.get(i, 0) - s.y_obs.0).abs() + (pred.get(i, 1) - s.y_obs.1).abs()) / 2.0)
        .collect())
}

/// Clean/noisy split of the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionState {
    pub eta: Vec<f64>,
    /// Ascending.
    pub clean_indices: Vec<usize>,
    /// In descending indicator order.
    pub noisy_indices: Vec<usize>,
    pub t_percent: f64,
    pub epoch_of_scoring: usize,
}

/// Number of samples the top-`t_percent` rule flags among `n`.
pub fn noisy_count(n: usize, t_percent: f64) -> usize {
    (t_percent / 100.0 * n as f64).round() as usize
}

/// Flags the `round(t% * N)` largest indicator values as noisy; ties go to
/// the lower index.
pub fn partition(eta: &[f64], t_percent: f64, epoch: usize) -> Result<PartitionState> {
    if !(0.0..100.0).contains(&t_percent) {
        return Err(Error::InvalidConfig(format!("t_percent {t_percent} outside [0, 100)")));
    }
    let n = eta.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("partition needs >= 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eta[b].total_cmp(&eta[a]).then(a.cmp(&b)));
    let k = noisy_count(n, t_percent);
    let noisy_indices = order[..k].to_vec();
    let mut clean_indices = order[k..].to_vec();
    clean_indices.sort_unstable();
    Ok(PartitionState {
        eta: eta.to_vec(),
        clean_indices,
        noisy_indices,
        t_percent,
        epoch_of_scoring: epoch,
    })
}

impl PartitionState {
    /// Disjoint, exhaustive, correctly sized, and ordered by indicator.
    pub fn check(&self) -> Result<()> {
        let n = self.eta.len();
        let mut seen = vec![false; n];
        for &i in self.clean_indices.iter().chain(&self.noisy_indices) {
            if i >= n || seen[i] {
                return Err(Error::InvalidState(format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidState("partition is not exhaustive".into()));
        }
        let want = noisy_count(n, self.t_percent);
        if self.noisy_indices.len() != want {
            return Err(Error::InvalidState(format!(
                "{} noisy samples, expected {want}",
                self.noisy_indices.len()
            )));
        }
        let min_noisy = self.noisy_indices.iter().map(|&i| self.eta[i]).fold(f64::INFINITY, f64::min);
        let max_clean = self.clean_indices.iter().map(|&i| self.eta[i]).fold(f64::NEG_INFINITY, f64::max);
        if min_noisy < max_clean {
            return Err(Error::InvalidState(format!(
                "noisy minimum {min_noisy} below clean maximum {max_clean}"
            )));
        }
        Ok(())
    }

    pub fn noisy_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.eta.len()];
        for &i in &self.noisy_indices {
            m[i] = true;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pitchyaw_to_vec, Dataset, GazeSample};
    use crate::model::ModelDims;
    use proptest::prelude::*;
    use rand::Rng;

    // Scalar transcription of the indicator formula.
    fn eta_naive(a_m: &Tensor, a_g: &Tensor) -> Vec<f64> {
        let b = a_m.rows();
        let mut out = vec![0.0; b];
        for i in 0..b {
            let mut zm = 0.0;
            let mut zg = 0.0;
            for j in 0..b {
                zm += a_m.get(i, j).exp();
                zg += a_g.get(i, j).exp();
            }
            for j in 0..b {
                let yg = a_g.get(i, j).exp() / zg;
                let ym = a_m.get(i, j).exp() / zm;
                out[i] -= yg * ym.ln();
            }
        }
        out
    }

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        Tensor::uniform(&[b, d], 1.0, rng)
    }

    #[test]
    fn affinity_examples() {
        let a = affinity_square(&Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap()).unwrap();
        assert!((a.get(0, 1) + 1.0).abs() < 1e-11);
        let a = affinity_square(&Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(a.get(0, 1), 0.0);
        let c = affinity_cross(
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-11 && c.get(0, 1) == 0.0);
        let zero = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(affinity_square(&zero), Err(Error::DegenerateInput(_))));
        assert!(affinity_square(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn indicator_examples() {
        let a = Tensor::from_rows(&[[0.3, 0.3], [0.3, 0.3]]).unwrap();
        let eta = noise_indicator(&a, &a, true).unwrap();
        for e in eta {
            assert!((e - 2f64.ln()).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_rows(&mut rng, 6, 4);
        let a = affinity_square(&p).unwrap();
        let soft = kernels::row_softmax(&a).unwrap();
        for (i, e) in noise_indicator(&a, &a, true).unwrap().into_iter().enumerate() {
            let h: f64 = -soft.row(i).iter().map(|q| q * q.ln()).sum::<f64>();
            assert!((e - h).abs() < 1e-12);
        }
        assert!(noise_indicator(&a, &Tensor::zeros(&[5, 5]), true).is_err());
    }

    #[test]
    fn indicator_grows_as_manifold_probability_vanishes() {
        let a_g = Tensor::from_rows(&[[0.0, 50.0], [50.0, 0.0]]).unwrap();
        let mut last = 0.0;
        for gap in [1.0, 10.0, 100.0] {
            let a_m = Tensor::from_rows(&[[gap, 0.0], [0.0, gap]]).unwrap();
            let e = noise_indicator(&a_m, &a_g, true).unwrap()[0];
            assert!(e > last);
            last = e;
        }
        assert!(last > 90.0);
    }

    #[test]
    fn excluding_diagonal_changes_support() {
        let a = Tensor::from_rows(&[[1.0, 0.2, -0.4], [0.2, 1.0, 0.1], [-0.4, 0.1, 1.0]]).unwrap();
        let g = Tensor::from_rows(&[[1.0, 0.9, -0.9], [0.9, 1.0, 0.0], [-0.9, 0.0, 1.0]]).unwrap();
        let e = noise_indicator(&a, &g, false).unwrap();
        // row 0 over {1, 2}
        let (q1, q2) = (0.9f64.exp(), (-0.9f64).exp());
        let (p1, p2) = (0.2f64.exp(), (-0.4f64).exp());
        let want = -(q1 / (q1 + q2) * (p1 / (p1 + p2)).ln() + q2 / (q1 + q2) * (p2 / (p1 + p2)).ln());
        assert!((e[0] - want).abs() < 1e-12);
    }

    #[test]
    fn vectorized_indicator_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let b = rng.random_range(2..12);
            let a_m = affinity_square(&random_rows(&mut rng, b, 5)).unwrap();
            let a_g = affinity_square(&random_rows(&mut rng, b, 3)).unwrap();
            let fast = noise_indicator(&a_m, &a_g, true).unwrap();
            for (x, y) in fast.iter().zip(eta_naive(&a_m, &a_g)) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    fn gaze_dataset(labels: &[(f64, f64)], inputs: &[Vec<f64>]) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .zip(inputs)
                .map(|(&y, x)| GazeSample {
                    x: x.clone(),
                    y_obs: y,
                    y_clean: y,
                    is_noisy: false,
                    domain_id: "t".into(),
                })
                .collect(),
        )
    }

    #[test]
    fn score_single_chunk_matches_direct_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10;
        let labels: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-0.5..0.5), rng.random_range(-0.7..0.7)))
            .collect();
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let data = gaze_dataset(&labels, &inputs);
        let model = ModelState::init(ModelDims::default(), 2);
        let bank = PrototypeBank::random(12, 16, 0.95, 0.1, 3).unwrap();
        let eta = score_dataset(&data, &model, &bank, n, 4, true).unwrap();
        let again = score_dataset(&data, &model, &bank, n, 4, true).unwrap();
        assert_eq!(eta, again);

        let idx = data.all_indices();
        let (_, z) = model.embed(&data.inputs(&idx).unwrap()).unwrap();
        let a_m = affinity_square(&bank.embed(&z).unwrap()).unwrap();
        let a_g = affinity_square(&data.observed_vectors(&idx).unwrap()).unwrap();
        let direct = noise_indicator(&a_m, &a_g, true).unwrap();
        for (a, b) in eta.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(score_dataset(&gaze_dataset(&labels[..1], &inputs[..1]), &model, &bank, 4, 0, true).is_err());
    }

    #[test]
    fn chunking_folds_short_tail() {
        let c = scoring_chunks(9, 4, 0).unwrap();
        assert_eq!(c.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let c = scoring_chunks(10, 4, 0).unwrap();
        assert_eq!(c.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = c.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn flipped_twin_scores_higher() {
        // 16 samples whose manifold coordinates reproduce their label
        // geometry; sample 15 duplicates sample 0 with its label flipped.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut labels: Vec<(f64, f64)> = (0..15)
            .map(|_| (rng.random_range(-0.6..0.6), rng.random_range(-0.8..0.8)))
            .collect();
        let (p0, y0) = labels[0];
        labels.push((-p0, if y0 > 0.0 { y0 - std::f64::consts::PI } else { y0 + std::f64::consts::PI }));
        let flipped = pitchyaw_to_vec(labels[15].0, labels[15].1);
        let orig = pitchyaw_to_vec(p0, y0);
        for k in 0..3 {
            assert!((flipped[k] + orig[k]).abs() < 1e-12);
        }
        let mut p_rows: Vec<[f64; 3]> = labels[..15].iter().map(|&(p, y)| pitchyaw_to_vec(p, y)).collect();
        p_rows.push(orig);
        let a_m = affinity_square(&Tensor::from_rows(&p_rows).unwrap()).unwrap();
        let g_rows: Vec<[f64; 3]> = labels.iter().map(|&(p, y)| pitchyaw_to_vec(p, y)).collect();
        let a_g = affinity_square(&Tensor::from_rows(&g_rows).unwrap()).unwrap();
        let eta = noise_indicator(&a_m, &a_g, true).unwrap();
        let naive = eta_naive(&a_m, &a_g);
        assert!((eta[15] - naive[15]).abs() < 1e-10);
        assert!(eta[15] > eta[0], "{} vs {}", eta[15], eta[0]);
    }

    #[test]
    fn partition_examples() {
        let p = partition(&[0.9, 0.1, 0.5, 0.7], 25.0, 0).unwrap();
        assert_eq!(p.noisy_indices, vec![0]);
        assert_eq!(p.clean_indices, vec![1, 2, 3]);
        let p = partition(&[0.9, 0.1, 0.5, 0.7], 0.0, 0).unwrap();
        assert!(p.noisy_indices.is_empty());
        let p = partition(&[1.0; 4], 50.0, 0).unwrap();
        assert_eq!(p.noisy_indices, vec![0, 1]);
        p.check().unwrap();
        assert!(matches!(partition(&[1.0; 4], 100.0, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(partition(&[1.0; 4], -1.0, 0), Err(Error::InvalidConfig(_))));
        assert!(partition(&[1.0], 10.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_exhaustive_and_sized(
            eta in prop::collection::vec(-3.0f64..3.0, 2..60),
            t in 0.0f64..99.9,
        ) {
            let p = partition(&eta, t, 0).unwrap();
            prop_assert!(p.check().is_ok());
            prop_assert_eq!(p.noisy_indices.len(), noisy_count(eta.len(), t));
        }

        #[test]
        fn affinity_symmetric_unit_diag_scale_invariant(
            v in prop::collection::vec(-1.0f64..1.0, 20),
            s in 0.1f64..10.0,
            row in 0usize..5,
        ) {
            let t = Tensor::matrix(5, 4, v).unwrap();
            prop_assume!(kernels::row_norms(&t, "").map(|n| n.iter().all(|&x| x > 1e-3)).unwrap_or(false));
            let a = affinity_square(&t).unwrap();
            for i in 0..5 {
                prop_assert!((a.get(i, i) - 1.0).abs() < 1e-9);
                for j in 0..5 {
                    prop_assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-12);
                    prop_assert!(a.get(i, j).abs() <= 1.0);
                }
            }
            let mut scaled = t.clone();
            for x in &mut scaled.values_mut()[row * 4..(row + 1) * 4] {
                *x *= s;
            }
            let b = affinity_square(&scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn indicator_permutation_equivariant_and_shift_invariant(
            seed in 0u64..1000,
            shift in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = 7;
            let pm = random_rows(&mut rng, b, 4);
            let pg = random_rows(&mut rng, b, 3);
            let eta = noise_indicator(&affinity_square(&pm).unwrap(), &affinity_square(&pg).unwrap(), true).unwrap();
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut rng);
            let a_m = affinity_square(&pm.select_rows(&perm).unwrap()).unwrap();
            let a_g = affinity_square(&pg.select_rows(&perm).unwrap()).unwrap();
            let eta_p = noise_indicator(&a_m, &a_g, true).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((eta_p[k] - eta[i]).abs() < 1e-12);
            }
            let shifted = Tensor::new(a_m.shape().to_vec(), a_m.values().iter().map(|v| v + shift).collect()).unwrap();
            let eta_s = noise_indicator(&shifted, &a_g, true).unwrap();
            for (x, y) in eta_s.iter().zip(&eta_p) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
