//! Seeded synthetic datasets with controllable inter-class overlap.
//!
//! Class means live on the unit sphere of the input space; a configurable
//! number of mean pairs is re-placed at a small chordal separation so that
//! those classes become hard to tell apart for any model, reproducing the
//! entangled-class pathology the perturbation methods target. Samples are
//! isotropic Gaussian clouds around the means.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, l2_normalize, norm, Matrix};
use crate::rng::{gaussian_sample, SeededRng};

/// Generation parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation of each class cloud.
    pub cluster_sigma: f64,
    /// Number of class-mean pairs re-placed at small separation.
    pub overlap_pairs: usize,
    /// Chordal distance between the means of an overlap pair.
    pub overlap_delta: f64,
    /// Fraction of classes in the old training split, in (0, 1].
    pub old_fraction: f64,
    /// Per-class fraction of samples held out as queries, in (0, 1).
    pub query_fraction: f64,
    /// Not read from config files; the experiment's global seed fans out to
    /// a per-stage child seed instead.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 40,
            samples_per_class: 100,
            input_dim: 16,
            cluster_sigma: 0.08,
            overlap_pairs: 8,
            overlap_delta: 0.15,
            old_fraction: 0.3,
            query_fraction: 0.2,
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(Error::config("counts must be positive"));
        }
        if self.overlap_pairs * 2 > self.class_count {
            return Err(Error::config(format!(
                "overlap_pairs {} needs {} classes but only {} exist",
                self.overlap_pairs,
                self.overlap_pairs * 2,
                self.class_count
            )));
        }
        if !(self.old_fraction > 0.0 && self.old_fraction <= 1.0) {
            return Err(Error::config("old_fraction must be in (0, 1]"));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::config("query_fraction must be in (0, 1)"));
        }
        if self.cluster_sigma < 0.0 || self.overlap_delta < 0.0 {
            return Err(Error::config("sigma and delta must be non-negative"));
        }
        Ok(())
    }
}

/// Raw rows plus global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training splits plus the shared evaluation sets. Labels are global class
/// ids, consistent across all four members.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub old_train: LabeledData,
    pub new_train: LabeledData,
    pub query: LabeledData,
    pub gallery: LabeledData,
    pub class_count: usize,
    /// Global ids of the classes the old model trains on.
    pub old_classes: Vec<usize>,
    /// Global ids of the classes the new model trains on.
    pub new_classes: Vec<usize>,
    /// Global ids of classes whose means were placed at overlap distance,
    /// in pairs: (pairs[2i], pairs[2i+1]).
    pub overlap_members: Vec<usize>,
}

struct GeneratedWorld {
    /// Per-class samples, query part first.
    class_samples: Vec<Matrix>,
    n_query: usize,
    /// Master seeded permutation of class ids; nested fraction prefixes come
    /// from here.
    class_perm: Vec<usize>,
    overlap_members: Vec<usize>,
}

fn build_world(cfg: &SynthConfig) -> Result<GeneratedWorld> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let c = cfg.class_count;
    let d = cfg.input_dim;

    // Class means uniform on the sphere.
    let mut rng_means = root.child("means");
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        loop {
            let g: Vec<f64> = (0..d).map(|_| rng_means.normal()).collect();
            if let Ok(u) = l2_normalize(&g) {
                means.push(u);
                break;
            }
        }
    }

    // Re-place overlap pairs at chordal distance delta.
    let mut rng_overlap = root.child("overlap");
    let mut pair_perm: Vec<usize> = (0..c).collect();
    rng_overlap.shuffle(&mut pair_perm);
    let overlap_members: Vec<usize> = pair_perm[..cfg.overlap_pairs * 2].to_vec();
    for pair in 0..cfg.overlap_pairs {
        let a = pair_perm[2 * pair];
        let b = pair_perm[2 * pair + 1];
        if cfg.overlap_delta == 0.0 {
            means[b] = means[a].clone();
            continue;
        }
        // Unit tangent at mean[a], then rotate by the arc that gives the
        // requested chord length.
        let anchor = means[a].clone();
        let tangent = loop {
            let g: Vec<f64> = (0..d).map(|_| rng_overlap.normal()).collect();
            let mut t = g.clone();
            let p = dot(&g, &anchor);
            axpy(-p, &anchor, &mut t);
            if norm(&t) > 1e-9 {
                break l2_normalize(&t)?;
            }
        };
        let theta = 2.0 * (cfg.overlap_delta / 2.0).asin();
        let (s, co) = theta.sin_cos();
        means[b] = anchor
            .iter()
            .zip(&tangent)
            .map(|(m, t)| co * m + s * t)
            .collect();
    }

    // Per-class clouds with per-class child streams; the query rows are the
    // leading rows of each class block.
    let rng_samples = root.child("samples");
    let n = cfg.samples_per_class;
    let n_query = ((cfg.query_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut class_samples = Vec::with_capacity(c);
    for (class, mean) in means.iter().enumerate() {
        let mut rng_c = rng_samples.child_idx(class as u64);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| gaussian_sample(&mut rng_c, mean, cfg.cluster_sigma))
            .collect();
        class_samples.push(Matrix::from_rows(&rows)?);
    }

    // Master class permutation for old/new and sequential fraction splits.
    let mut rng_split = root.child("classsplit");
    let mut class_perm: Vec<usize> = (0..c).collect();
    rng_split.shuffle(&mut class_perm);

    Ok(GeneratedWorld {
        class_samples,
        n_query,
        class_perm,
        overlap_members,
    })
}

impl GeneratedWorld {
    /// First ceil(fraction * C) classes of the master permutation, sorted.
    fn fraction_classes(&self, fraction: f64) -> Vec<usize> {
        let c = self.class_perm.len();
        let take = ((fraction * c as f64).ceil() as usize).clamp(1, c);
        let mut ids = self.class_perm[..take].to_vec();
        ids.sort_unstable();
        ids
    }

    /// Training rows (the non-query part) of the given classes.
    fn train_rows(&self, classes: &[usize]) -> LabeledData {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &class in classes {
            let m = &self.class_samples[class];
            for i in self.n_query..m.n_rows() {
                rows.push(m.row(i).to_vec());
                labels.push(class);
            }
        }
        LabeledData {
            inputs: Matrix::from_rows(&rows).expect("uniform row width"),
            labels,
        }
    }

    fn eval_sets(&self) -> (LabeledData, LabeledData) {
        let mut q_rows = Vec::new();
        let mut q_labels = Vec::new();
        let mut g_rows = Vec::new();
        let mut g_labels = Vec::new();
        for (class, m) in self.class_samples.iter().enumerate() {
            for i in 0..m.n_rows() {
                if i < self.n_query {
                    q_rows.push(m.row(i).to_vec());
                    q_labels.push(class);
                } else {
                    g_rows.push(m.row(i).to_vec());
                    g_labels.push(class);
                }
            }
        }
        (
            LabeledData {
                inputs: Matrix::from_rows(&q_rows).expect("uniform row width"),
                labels: q_labels,
            },
            LabeledData {
                inputs: Matrix::from_rows(&g_rows).expect("uniform row width"),
                labels: g_labels,
            },
        )
    }
}

/// Generate the single-step dataset: the old split holds the first
/// `old_fraction` of a seeded class permutation, the new split all classes.
/// Queries are held out per class; the remaining rows double as gallery and
/// training rows.
pub fn generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    let world = build_world(cfg)?;
    let old_classes = world.fraction_classes(cfg.old_fraction);
    let new_classes: Vec<usize> = (0..cfg.class_count).collect();
    let (query, gallery) = world.eval_sets();
    Ok(DatasetSplit {
        old_train: world.train_rows(&old_classes),
        new_train: world.train_rows(&new_classes),
        query,
        gallery,
        class_count: cfg.class_count,
        old_classes,
        new_classes,
        overlap_members: world.overlap_members,
    })
}

/// Nested class-subset splits over one underlying sample set, for sequential
/// compatibility chains. `fractions` must be strictly increasing and end at
/// 1.0. Split `i` trains on the fraction-`i` classes; its `old_*` members
/// point at the previous fraction (for `i = 0`, at the plain `old_fraction`
/// split, which step one trains independently anyway).
pub fn sequential_splits(cfg: &SynthConfig, fractions: &[f64]) -> Result<Vec<DatasetSplit>> {
    if fractions.is_empty() {
        return Err(Error::config("fractions must be non-empty"));
    }
    for w in fractions.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::config("fractions must be strictly increasing"));
        }
    }
    if (fractions[fractions.len() - 1] - 1.0).abs() > 1e-12 {
        return Err(Error::config("last fraction must be 1.0"));
    }
    if fractions[0] <= 0.0 {
        return Err(Error::config("fractions must be positive"));
    }

    let world = build_world(cfg)?;
    let (query, gallery) = world.eval_sets();
    let mut splits = Vec::with_capacity(fractions.len());
    for (i, &f) in fractions.iter().enumerate() {
        let new_classes = world.fraction_classes(f);
        let old_classes = if i == 0 {
            world.fraction_classes(cfg.old_fraction)
        } else {
            world.fraction_classes(fractions[i - 1])
        };
        splits.push(DatasetSplit {
            old_train: world.train_rows(&old_classes),
            new_train: world.train_rows(&new_classes),
            query: query.clone(),
            gallery: gallery.clone(),
            class_count: cfg.class_count,
            old_classes,
            new_classes,
            overlap_members: world.overlap_members.clone(),
        });
    }
    Ok(splits)
}

impl LabeledData {
    fn to_container(&self, class_count: usize, extra_meta: &str) -> crate::store::Container {
        let mut c = crate::store::Container::new();
        c.put_matrix("X", &self.inputs);
        let labels: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        c.put_labels("Y", &labels);
        c.put_meta(
            "META",
            &format!("kind=dataset\nclass_count={class_count}\n{extra_meta}"),
        );
        c
    }

    fn from_container(c: &crate::store::Container) -> Result<LabeledData> {
        Ok(LabeledData {
            inputs: c.matrix("X")?,
            labels: c.labels("Y")?.iter().map(|&l| l as usize).collect(),
        })
    }
}

fn distinct_sorted(labels: &[usize]) -> Vec<usize> {
    let mut ids = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

impl DatasetSplit {
    /// Write the four container files (`old_train`, `new_train`, `query`,
    /// `gallery`, extension `.bclg`) into a directory.
    pub fn save_dir(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let overlap = self
            .overlap_members
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.old_train
            .to_container(self.class_count, "")
            .save(dir.join("old_train.bclg"))?;
        self.new_train
            .to_container(self.class_count, "")
            .save(dir.join("new_train.bclg"))?;
        self.query
            .to_container(self.class_count, &format!("overlap={overlap}\n"))
            .save(dir.join("query.bclg"))?;
        self.gallery
            .to_container(self.class_count, "")
            .save(dir.join("gallery.bclg"))?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<std::path::Path>) -> Result<DatasetSplit> {
        let dir = dir.as_ref();
        let query_container = crate::store::Container::load(dir.join("query.bclg"))?;
        let query = LabeledData::from_container(&query_container)?;
        let meta = query_container.meta_map("META")?;
        let class_count: usize = meta
            .get("class_count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::BadSection("META".into(), "missing class_count".into()))?;
        let overlap_members: Vec<usize> = meta
            .get("overlap")
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .filter_map(|s| s.parse().ok())
                    .collect()
            })
            .unwrap_or_default();

        let old_train = LabeledData::from_container(&crate::store::Container::load(
            dir.join("old_train.bclg"),
        )?)?;
        let new_train = LabeledData::from_container(&crate::store::Container::load(
            dir.join("new_train.bclg"),
        )?)?;
        let gallery =
            LabeledData::from_container(&crate::store::Container::load(dir.join("gallery.bclg"))?)?;
        let old_classes = distinct_sorted(&old_train.labels);
        let new_classes = distinct_sorted(&new_train.labels);
        Ok(DatasetSplit {
            old_train,
            new_train,
            query,
            gallery,
            class_count,
            old_classes,
            new_classes,
            overlap_members,
        })
    }
}
