//! Dataset assembly: PGM trees on disk, the synthetic generator, and the
//! seeded train/test and k-fold splits.
//!
//! On-disk layout: `<root>/manifest.txt` holds one class name per line and
//! defines label order; `<root>/<class>/*.pgm` hold the images. Loading is
//! single-threaded and order-deterministic — classes in manifest order,
//! files in lexicographic order — so a tree always produces the same
//! Dataset. All split randomness comes from the caller's seeded RNG.

mod pgm;
mod synth;

pub use pgm::{load_pgm, save_pgm};
pub use synth::{
    diff_bbox, foreground_fraction, gen_synthetic, make_query_pair, SynthConfig, CLASS_NAMES,
};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::augment::{normalize, GrayImage};
use crate::error::{Error, Result};

/// One image with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub image: GrayImage,
    pub label: usize,
}

/// An ordered, label-consistent collection of same-size square images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    class_names: Vec<String>,
}

impl Dataset {
    /// Validates labels against `class_names` and requires every image to be
    /// square with one common side.
    pub fn new(examples: Vec<LabeledExample>, class_names: Vec<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Dataset("dataset has no examples".into()));
        }
        if class_names.is_empty() {
            return Err(Error::Dataset("dataset has no class names".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(Error::Dataset("empty class name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Dataset(format!("duplicate class name {name:?}")));
            }
        }
        let side = examples[0].image.width();
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= class_names.len() {
                return Err(Error::Dataset(format!(
                    "example {i} has label {} but only {} classes exist",
                    ex.label,
                    class_names.len()
                )));
            }
            if ex.image.width() != side || ex.image.height() != side {
                return Err(Error::Dataset(format!(
                    "example {i} is {}x{}, expected {side}x{side}",
                    ex.image.width(),
                    ex.image.height()
                )));
            }
        }
        Ok(Self { examples, class_names })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Common image side, pixels.
    pub fn side(&self) -> usize {
        self.examples[0].image.width()
    }

    /// New dataset holding clones of the chosen examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self.examples.get(i).ok_or_else(|| {
                Error::Dataset(format!("subset index {i} out of range {}", self.len()))
            })?;
            examples.push(ex.clone());
        }
        Dataset::new(examples, self.class_names.clone())
    }
}

/// Disjoint validation groups over training-set indices; fold i validates
/// on group i and trains on the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    groups: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Requires the groups to partition 0..n for some n.
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for idx in groups.iter().flatten() {
            if *idx >= n || seen[*idx] {
                return Err(Error::Dataset(format!(
                    "groups do not partition 0..{n}: index {idx} repeated or out of range"
                )));
            }
            seen[*idx] = true;
        }
        Ok(Self { groups })
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Validation indices of fold `i`.
    pub fn validation(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    /// Training indices of fold `i`: every other group, ascending.
    pub fn training(&self, i: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .groups
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != i)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Reads `<root>/manifest.txt` + one PGM directory per class. Examples come
/// back in manifest order, then lexicographic filename order.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path).map_err(|source| Error::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let class_names: Vec<String> = manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "manifest {} names no classes",
            manifest_path.display()
        )));
    }

    let mut examples = Vec::new();
    let mut side: Option<usize> = None;
    for (label, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        let entries = fs::read_dir(&dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        let mut files: Vec<_> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} holds no .pgm files",
                dir.display()
            )));
        }
        files.sort();
        for path in files {
            let raw = load_pgm(&path)?;
            let expect = *side.get_or_insert(raw.width());
            if raw.width() != expect || raw.height() != expect {
                return Err(Error::Format {
                    path,
                    offset: 0,
                    message: format!(
                        "image is {}x{}, expected {expect}x{expect}",
                        raw.width(),
                        raw.height()
                    ),
                });
            }
            examples.push(LabeledExample { image: normalize(&raw), label });
        }
    }
    Dataset::new(examples, class_names)
}

/// Seeded per-class split: `per_class_train` examples of each class go to
/// train, the rest to test. Membership is random; each side keeps the
/// original dataset order.
pub fn split_train_test(
    ds: &Dataset,
    per_class_train: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Dataset)> {
    if per_class_train == 0 {
        return Err(Error::Parameter("per_class_train must be at least 1".into()));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..ds.class_count() {
        let mut members: Vec<usize> = ds
            .examples()
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < per_class_train {
            return Err(Error::Dataset(format!(
                "class {:?} has {} examples, fewer than per_class_train {per_class_train}",
                ds.class_names()[class],
                members.len()
            )));
        }
        members.shuffle(rng);
        let (tr, te) = members.split_at(per_class_train);
        train_idx.extend_from_slice(tr);
        test_idx.extend_from_slice(te);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx)?, ds.subset(&test_idx)?))
}

/// Seeded k-fold split: shuffles all indices and deals them into k equal
/// groups, each reported in ascending order.
pub fn kfold_split(train: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k >= 2, got {k}")));
    }
    let n = train.len();
    if n % k != 0 {
        return Err(Error::Dataset(format!(
            "training size {n} not divisible into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let group = n / k;
    let mut groups: Vec<Vec<usize>> = idx
        .chunks(group)
        .map(|chunk| chunk.to_vec())
        .collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    FoldSplit::new(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::quantize;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_dataset() -> Dataset {
        gen_synthetic(&SynthConfig {
            counts: [10, 10, 12],
            size: 20,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn dataset_validation() {
        let ds = tiny_dataset();
        assert_eq!(ds.len(), 32);
        assert_eq!(ds.side(), 20);
        // bad label
        let mut ex = ds.examples().to_vec();
        ex[0].label = 7;
        assert!(Dataset::new(ex, ds.class_names().to_vec()).is_err());
        // duplicate names
        assert!(Dataset::new(
            ds.examples().to_vec(),
            vec!["a".into(), "a".into(), "b".into()]
        )
        .is_err());
        // mixed sizes
        let mut ex = ds.examples().to_vec();
        ex[3].image = GrayImage::new(10, 10, vec![0.5; 100]).unwrap();
        assert!(Dataset::new(ex, ds.class_names().to_vec()).is_err());
    }

    #[test]
    fn save_and_reload_tree_round_trips() {
        let dir = std::env::temp_dir().join("data-tree-test");
        let _ = std::fs::remove_dir_all(&dir);
        let ds = tiny_dataset();
        // write the tree by hand, the same shape cmd_gen_data produces
        let mut manifest = String::new();
        for name in ds.class_names() {
            manifest.push_str(name);
            manifest.push('\n');
            std::fs::create_dir_all(dir.join(name)).unwrap();
        }
        std::fs::write(dir.join("manifest.txt"), manifest).unwrap();
        let mut counters = vec![0usize; ds.class_count()];
        for ex in ds.examples() {
            let name = &ds.class_names()[ex.label];
            let file = dir.join(name).join(format!("{:04}.pgm", counters[ex.label]));
            counters[ex.label] += 1;
            save_pgm(&quantize(&ex.image), file).unwrap();
        }

        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.class_names(), ds.class_names());
        for (a, b) in loaded.examples().iter().zip(ds.examples()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image, b.image);
        }
        // loading twice gives identical ordering
        let again = load_dataset(&dir).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn loader_rejects_empty_class_dir_and_size_mismatch() {
        let dir = std::env::temp_dir().join("data-tree-bad");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("crab")).unwrap();
        std::fs::create_dir_all(dir.join("lion")).unwrap();
        std::fs::write(dir.join("manifest.txt"), "crab\nlion\n").unwrap();
        let img = crate::augment::RawImage::new(20, 20, vec![128; 400]).unwrap();
        save_pgm(&img, dir.join("crab/a.pgm")).unwrap();
        // lion dir empty -> dataset error
        match load_dataset(&dir).unwrap_err() {
            Error::Dataset(msg) => assert!(msg.contains("lion"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
        // size mismatch -> format error naming the file
        let odd = crate::augment::RawImage::new(19, 20, vec![0; 380]).unwrap();
        save_pgm(&odd, dir.join("lion/bad.pgm")).unwrap();
        match load_dataset(&dir).unwrap_err() {
            Error::Format { path, message, .. } => {
                assert!(path.ends_with("lion/bad.pgm"));
                assert!(message.contains("19x20"), "{message}");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = gen_synthetic(&SynthConfig {
            counts: [100, 100, 105],
            size: 20,
            ..Default::default()
        })
        .unwrap();
        let (train, test) = split_train_test(&ds, 80, &mut rng(1)).unwrap();
        assert_eq!(train.len(), 240);
        assert_eq!(test.len(), 65);
        let mut tr_counts = [0usize; 3];
        for ex in train.examples() {
            tr_counts[ex.label] += 1;
        }
        assert_eq!(tr_counts, [80, 80, 80]);
        let mut te_counts = [0usize; 3];
        for ex in test.examples() {
            te_counts[ex.label] += 1;
        }
        assert_eq!(te_counts, [20, 20, 25]);
        // disjoint: images are unique per index, so pixel-identity works as
        // an index check
        for te in test.examples() {
            assert!(
                !train.examples().iter().any(|tr| tr.image == te.image),
                "train and test share an image"
            );
        }
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let ds = tiny_dataset();
        let a = split_train_test(&ds, 8, &mut rng(7)).unwrap();
        let b = split_train_test(&ds, 8, &mut rng(7)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = split_train_test(&ds, 8, &mut rng(8)).unwrap();
        assert_ne!(a.0, c.0, "different seeds should pick different members");
    }

    #[test]
    fn split_rejects_small_class() {
        let ds = tiny_dataset(); // 10/10/12
        match split_train_test(&ds, 11, &mut rng(1)).unwrap_err() {
            Error::Dataset(msg) => assert!(msg.contains("11"), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn kfold_partitions_into_equal_sorted_groups() {
        let ds = gen_synthetic(&SynthConfig {
            counts: [100, 100, 105],
            size: 20,
            ..Default::default()
        })
        .unwrap();
        let (train, _) = split_train_test(&ds, 80, &mut rng(2)).unwrap();
        let split = kfold_split(&train, 4, &mut rng(3)).unwrap();
        assert_eq!(split.k(), 4);
        let mut all = Vec::new();
        for g in split.groups() {
            assert_eq!(g.len(), 60);
            assert!(g.windows(2).all(|w| w[0] < w[1]), "group not ascending");
            all.extend_from_slice(g);
        }
        all.sort_unstable();
        assert_eq!(all, (0..240).collect::<Vec<_>>());
        // training view of fold 1 excludes exactly group 1
        let tr = split.training(1);
        assert_eq!(tr.len(), 180);
        assert!(split.validation(1).iter().all(|i| !tr.contains(i)));
    }

    #[test]
    fn kfold_determinism_and_divisibility() {
        let ds = tiny_dataset(); // 32 examples
        let a = kfold_split(&ds, 4, &mut rng(4)).unwrap();
        let b = kfold_split(&ds, 4, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert!(kfold_split(&ds, 5, &mut rng(4)).is_err());
        assert!(kfold_split(&ds, 1, &mut rng(4)).is_err());
    }

    #[test]
    fn foldsplit_rejects_non_partitions() {
        assert!(FoldSplit::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(FoldSplit::new(vec![vec![0, 1], vec![2, 4]]).is_err());
        assert!(FoldSplit::new(vec![vec![0, 1], vec![2, 3]]).is_ok());
    }

    #[test]
    fn subset_clones_in_order() {
        let ds = tiny_dataset();
        let sub = ds.subset(&[5, 1, 9]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.examples()[0], ds.examples()[5]);
        assert_eq!(sub.examples()[1], ds.examples()[1]);
        assert_eq!(sub.examples()[2], ds.examples()[9]);
        assert!(ds.subset(&[999]).is_err());
    }
}
