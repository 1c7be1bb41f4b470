//! Class prototypes (normalized class centers of an embedding matrix) and
//! brute-force K-nearest-neighbor queries among them.

use crate::error::{Error, Result};
use crate::linalg::{cosine, l2_normalize, Matrix};

/// Which feature space a prototype set lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    /// Frozen old model.
    Old,
    /// In-training new model.
    New,
    /// Old prototypes displaced by a perturbation; rows may be non-unit.
    PseudoOld,
}

/// Labeled embedding rows. Labels are contiguous ids in `[0, class_count)`.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub rows: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if rows.n_rows() != labels.len() {
            return Err(Error::DimMismatch(rows.n_rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !rows.is_finite() {
            return Err(Error::config("embedding matrix contains non-finite values"));
        }
        Ok(EmbeddingMatrix {
            rows,
            labels,
            class_count,
        })
    }
}

/// One prototype row per class.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub protos: Matrix,
    pub tag: SpaceTag,
}

impl PrototypeSet {
    pub fn class_count(&self) -> usize {
        self.protos.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.n_cols()
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.protos.row(class)
    }
}

/// Neighbor classes of a query prototype, most similar first. Only neighbors
/// with strictly positive cosine are retained, so the list may hold fewer
/// than the K that were asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub class_ids: Vec<usize>,
    pub sims: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Per-class prototypes: the renormalized mean of the L2-normalized rows of
/// each class.
pub fn compute_prototypes(data: &EmbeddingMatrix, tag: SpaceTag) -> Result<PrototypeSet> {
    let dim = data.rows.n_cols();
    let c = data.class_count;
    let mut sums = Matrix::zeros(c, dim);
    let mut counts = vec![0usize; c];

    for (row, &label) in data.rows.rows_iter().zip(&data.labels) {
        let unit = l2_normalize(row).map_err(|_| Error::ZeroVector(Some(label)))?;
        let acc = sums.row_mut(label);
        for (a, u) in acc.iter_mut().zip(&unit) {
            *a += u;
        }
        counts[label] += 1;
    }

    let mut protos = Matrix::zeros(c, dim);
    for class in 0..c {
        if counts[class] == 0 {
            return Err(Error::EmptyClass(class));
        }
        let mean: Vec<f64> = sums
            .row(class)
            .iter()
            .map(|s| s / counts[class] as f64)
            .collect();
        let unit = l2_normalize(&mean).map_err(|_| Error::ZeroVector(Some(class)))?;
        protos.row_mut(class).copy_from_slice(&unit);
    }
    Ok(PrototypeSet { protos, tag })
}

/// K nearest other-class prototypes of `query_class` within `set`.
pub fn knn(query_class: usize, set: &PrototypeSet, k: usize) -> Result<NeighborList> {
    knn_cross(set.row(query_class), set, query_class, k)
}

/// K nearest prototypes of `set` to an arbitrary query vector, excluding
/// `exclude_class`. Ties break toward the lower class id; non-positive
/// similarities are dropped after truncation to K.
pub fn knn_cross(
    query: &[f64],
    set: &PrototypeSet,
    exclude_class: usize,
    k: usize,
) -> Result<NeighborList> {
    let c = set.class_count();
    if k == 0 || k > c.saturating_sub(1) {
        return Err(Error::BadK { k, classes: c });
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(c.saturating_sub(1));
    for class in 0..c {
        if class == exclude_class {
            continue;
        }
        scored.push((class, cosine(query, set.row(class))?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored.retain(|&(_, s)| s > 0.0);

    Ok(NeighborList {
        class_ids: scored.iter().map(|&(c, _)| c).collect(),
        sims: scored.iter().map(|&(_, s)| s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn unit_set(rows: &[Vec<f64>]) -> PrototypeSet {
        let protos = Matrix::from_rows(
            &rows
                .iter()
                .map(|r| l2_normalize(r).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        PrototypeSet {
            protos,
            tag: SpaceTag::Old,
        }
    }

    fn random_set(c: usize, dim: usize, seed: u64) -> PrototypeSet {
        let mut rng = SeededRng::new(seed);
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        unit_set(&rows)
    }

    /// Oracle: exhaustive sort of all other-class similarities.
    fn brute_force(query: &[f64], set: &PrototypeSet, exclude: usize, k: usize) -> NeighborList {
        let mut all: Vec<(usize, f64)> = (0..set.class_count())
            .filter(|&c| c != exclude)
            .map(|c| (c, cosine(query, set.row(c)).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.retain(|&(_, s)| s > 0.0);
        NeighborList {
            class_ids: all.iter().map(|&(c, _)| c).collect(),
            sims: all.iter().map(|&(_, s)| s).collect(),
        }
    }

    #[test]
    fn single_sample_prototype_is_the_normalized_sample() {
        let rows = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let data = EmbeddingMatrix::new(rows, vec![0, 1], 2).unwrap();
        let set = compute_prototypes(&data, SpaceTag::Old).unwrap();
        assert_eq!(set.row(0), &[1.0, 0.0]);
        assert_eq!(set.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn two_unit_rows_average_then_renormalize() {
        let rows = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let data = EmbeddingMatrix::new(rows, vec![0, 0], 1).unwrap();
        let set = compute_prototypes(&data, SpaceTag::Old).unwrap();
        let expect = std::f64::consts::FRAC_1_SQRT_2;
        assert!((set.row(0)[0] - expect).abs() < 1e-12);
        assert!((set.row(0)[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn antipodal_rows_degenerate() {
        let rows = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let data = EmbeddingMatrix::new(rows, vec![0, 0], 1).unwrap();
        assert!(matches!(
            compute_prototypes(&data, SpaceTag::Old),
            Err(Error::ZeroVector(Some(0)))
        ));
    }

    #[test]
    fn empty_class_detected() {
        let rows = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let data = EmbeddingMatrix::new(rows, vec![0], 2).unwrap();
        assert!(matches!(
            compute_prototypes(&data, SpaceTag::Old),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn knn_k1_is_argmax() {
        let set = unit_set(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![-1.0, 0.1],
        ]);
        let nl = knn(0, &set, 1).unwrap();
        assert_eq!(nl.class_ids, vec![1]);
    }

    #[test]
    fn knn_exhaustive_when_k_is_c_minus_1() {
        let set = unit_set(&[vec![1.0, 0.1], vec![0.9, 0.2], vec![0.8, 0.3]]);
        let nl = knn(0, &set, 2).unwrap();
        assert_eq!(nl.class_ids.len(), 2);
        assert!(nl.sims[0] >= nl.sims[1]);
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        for seed in 0..20 {
            let set = random_set(20, 6, seed);
            for q in [0usize, 7, 19] {
                let got = knn(q, &set, 5).unwrap();
                let want = brute_force(set.row(q), &set, q, 5);
                assert_eq!(got, want, "seed {seed} query {q}");
            }
        }
    }

    #[test]
    fn knn_bad_k_rejected() {
        let set = random_set(4, 3, 1);
        assert!(matches!(knn(0, &set, 0), Err(Error::BadK { .. })));
        assert!(matches!(knn(0, &set, 4), Err(Error::BadK { .. })));
    }

    #[test]
    fn knn_cross_finds_itself_first() {
        let set = random_set(8, 4, 3);
        let query = set.row(2).to_vec();
        // Class 2 not excluded here; exclude some other class.
        let nl = knn_cross(&query, &set, 5, 3).unwrap();
        assert_eq!(nl.class_ids[0], 2);
        assert!((nl.sims[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn knn_cross_excludes_requested_class() {
        let set = random_set(8, 4, 3);
        let query = set.row(2).to_vec();
        let nl = knn_cross(&query, &set, 2, 7).unwrap();
        assert!(!nl.class_ids.contains(&2));
    }

    #[test]
    fn knn_cross_matches_brute_force_oracle() {
        let mut rng = SeededRng::new(99);
        for trial in 0..20 {
            let set = random_set(15, 5, 1000 + trial);
            let query: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let got = knn_cross(&query, &set, 3, 6).unwrap();
            let want = brute_force(&query, &set, 3, 6);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn prototypes_invariant_to_row_permutation(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let c = 4usize;
            let n = 12usize;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.normal() + 0.5).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % c).collect();

            let data = EmbeddingMatrix::new(
                Matrix::from_rows(&rows).unwrap(), labels.clone(), c).unwrap();
            let base = compute_prototypes(&data, SpaceTag::Old).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let pdata = EmbeddingMatrix::new(
                Matrix::from_rows(&prows).unwrap(), plabels, c).unwrap();
            let permuted = compute_prototypes(&pdata, SpaceTag::Old).unwrap();

            for class in 0..c {
                for (a, b) in base.row(class).iter().zip(permuted.row(class)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn knn_never_contains_query_and_prefixes_nest(seed in 0u64..200, k in 1usize..8) {
            let set = random_set(10, 4, seed);
            let nl_k = knn(0, &set, k).unwrap();
            prop_assert!(!nl_k.class_ids.contains(&0));
            if k < 9 {
                let nl_k1 = knn(0, &set, k + 1).unwrap();
                prop_assert!(nl_k1.sims.len() >= nl_k.sims.len());
                prop_assert_eq!(&nl_k1.sims[..nl_k.sims.len()], &nl_k.sims[..]);
                prop_assert_eq!(&nl_k1.class_ids[..nl_k.class_ids.len()], &nl_k.class_ids[..]);
            }
        }
    }
}
