//! Datasets and client partitions.
//!
//! MNIST is read from the raw IDX files; `synthetic_blobs` provides a small
//! Gaussian-cluster dataset for fast runs. Partitions always produce disjoint
//! shards whose union is the input dataset.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Example;
use crate::rng::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidPartition("dataset is empty".into()));
        }
        if let Some(ex) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::ClassOutOfRange {
                class: ex.label,
                num_classes,
            });
        }
        Ok(Dataset {
            examples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.examples[0].features.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub examples: Vec<Example>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// SHA-256 over labels and feature bit patterns, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.client_id as u64).to_le_bytes());
        for ex in &self.examples {
            h.update((ex.label as u64).to_le_bytes());
            for f in &ex.features {
                h.update(f.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl Reader<'_> {
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Truncated {
                file: self.file.to_path_buf(),
                field,
            })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&mut self, len: usize, field: &'static str) -> Result<&[u8]> {
        let end = self.pos + len;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Truncated {
                file: self.file.to_path_buf(),
                field,
            })?;
        self.pos = end;
        Ok(chunk)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic")?;
        if found != expected {
            return Err(Error::BadMagic {
                file: self.file.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` by `/255`;
/// the number of classes is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;

    let mut images = Reader {
        bytes: &image_bytes,
        pos: 0,
        file: images_path,
    };
    images.magic(IDX_IMAGES_MAGIC)?;
    let n_images = images.u32("image count")? as usize;
    let rows = images.u32("row count")? as usize;
    let cols = images.u32("column count")? as usize;

    let mut labels = Reader {
        bytes: &label_bytes,
        pos: 0,
        file: labels_path,
    };
    labels.magic(IDX_LABELS_MAGIC)?;
    let n_labels = labels.u32("label count")? as usize;

    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixels = images.payload(n_images * rows * cols, "pixel data")?;
    let label_data = labels.payload(n_labels, "label data")?;
    let dim = rows * cols;
    let examples: Vec<Example> = label_data
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let features = pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect();
            Example::new(features, label as usize)
        })
        .collect();
    let num_classes = label_data
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);
    Dataset::new(examples, num_classes.max(2))
}

/// Writes an IDX image/label pair. Features are quantized back to bytes.
pub fn write_idx(
    ds: &[Example],
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for ex in ds {
        if ex.features.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                left: ex.features.len(),
                right: rows * cols,
            });
        }
        img.extend(
            ex.features
                .iter()
                .map(|f| (f * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        lab.push(ex.label as u8);
    }
    fs::write(images_path, img)
        .map_err(|e| Error::io(format!("writing {}", images_path.display()), e))?;
    fs::write(labels_path, lab)
        .map_err(|e| Error::io(format!("writing {}", labels_path.display()), e))?;
    Ok(())
}

/// Gaussian clusters around seeded unit-norm centers, mapped into `[0, 1]`
/// by `(x + 1) / 2` and clipped. Examples are ordered class by class.
pub fn synthetic_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 || dim == 0 || spread < 0.0 {
        return Err(Error::validation(
            "synthetic",
            "num_classes >= 2, per_class >= 1, dim >= 1 and spread >= 0",
        ));
    }
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            raw.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    ((c + spread * z + 1.0) / 2.0).clamp(0.0, 1.0)
                })
                .collect();
            examples.push(Example::new(features, label));
        }
    }
    Dataset::new(examples, num_classes)
}

fn shards_from_chunks(chunks: Vec<Vec<Example>>) -> Vec<ClientShard> {
    chunks
        .into_iter()
        .enumerate()
        .map(|(client_id, examples)| ClientShard {
            client_id,
            examples,
        })
        .collect()
}

/// Shuffles, then cuts into `n_clients` contiguous chunks whose sizes differ by
/// at most one (the first `len % n_clients` chunks get the extra example).
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if n_clients == 0 || ds.len() < n_clients {
        return Err(Error::InvalidPartition(format!(
            "cannot split {} examples across {} clients",
            ds.len(),
            n_clients
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Partition, &[]));
    let base = ds.len() / n_clients;
    let extra = ds.len() % n_clients;
    let mut chunks = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        chunks.push(
            order[start..start + size]
                .iter()
                .map(|&i| ds.examples[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(shards_from_chunks(chunks))
}

/// Client `i` receives every example whose label is in `label_sets[i]`,
/// in dataset order. The sets must be disjoint and cover `0..num_classes`.
pub fn partition_label_split(
    ds: &Dataset,
    label_sets: &[BTreeSet<usize>],
) -> Result<Vec<ClientShard>> {
    let mut owner = vec![None; ds.num_classes];
    for (client, set) in label_sets.iter().enumerate() {
        for &label in set {
            match owner.get_mut(label) {
                None => {
                    return Err(Error::InvalidPartition(format!(
                        "label {label} outside 0..{}",
                        ds.num_classes
                    )))
                }
                Some(Some(prev)) => {
                    return Err(Error::InvalidPartition(format!(
                        "label {label} assigned to both client {prev} and client {client}"
                    )))
                }
                Some(slot) => *slot = Some(client),
            }
        }
    }
    if let Some(missing) = owner.iter().position(Option::is_none) {
        return Err(Error::InvalidPartition(format!(
            "label {missing} not assigned to any client"
        )));
    }
    let mut chunks = vec![Vec::new(); label_sets.len()];
    for ex in &ds.examples {
        chunks[owner[ex.label].unwrap()].push(ex.clone());
    }
    Ok(shards_from_chunks(chunks))
}

/// Parses label sets written as `0-4;5-9` or `0,2,4;1,3`.
pub fn parse_label_sets(text: &str) -> Result<Vec<BTreeSet<usize>>> {
    let bad = |part: &str| {
        Error::validation(
            "label_sets",
            format!("`a-b` ranges or comma lists separated by `;` (got `{part}`)"),
        )
    };
    text.split(';')
        .map(|group| {
            let mut set = BTreeSet::new();
            for part in group.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                if let Some((lo, hi)) = part.split_once('-') {
                    let lo: usize = lo.trim().parse().map_err(|_| bad(part))?;
                    let hi: usize = hi.trim().parse().map_err(|_| bad(part))?;
                    if lo > hi {
                        return Err(bad(part));
                    }
                    set.extend(lo..=hi);
                } else {
                    set.insert(part.parse().map_err(|_| bad(part))?);
                }
            }
            if set.is_empty() {
                return Err(bad(group));
            }
            Ok(set)
        })
        .collect()
}

/// Stratified subsample without replacement. Each class gets
/// `floor(n * count / total)` examples; the leftover goes one at a time to
/// the largest classes (ties to the lower label). Selected examples keep
/// their original relative order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::validation(
            "subsample",
            format!("between 1 and {} (got {n})", ds.len()),
        ));
    }
    let counts = ds.class_counts();
    let total = ds.len();
    let mut quota: Vec<usize> = counts.iter().map(|&c| n * c / total).collect();
    let mut leftover = n - quota.iter().sum::<usize>();
    let mut by_size: Vec<usize> = (0..ds.num_classes).collect();
    by_size.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    while leftover > 0 {
        for &c in &by_size {
            if leftover == 0 {
                break;
            }
            if quota[c] < counts[c] {
                quota[c] += 1;
                leftover -= 1;
            }
        }
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, ex) in ds.examples.iter().enumerate() {
        per_class[ex.label].push(i);
    }
    let mut chosen = Vec::with_capacity(n);
    for (label, mut idx) in per_class.into_iter().enumerate() {
        let mut rng = rng::stream(seed, Purpose::Subsample, &[label as u64]);
        let (picked, _) = idx.partial_shuffle(&mut rng, quota[label]);
        chosen.extend_from_slice(picked);
    }
    chosen.sort_unstable();
    Dataset::new(
        chosen.into_iter().map(|i| ds.examples[i].clone()).collect(),
        ds.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(labels: &[usize], k: usize) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Example::new(vec![i as f64], l))
                .collect(),
            k,
        )
        .unwrap()
    }

    fn ids(shards: &[ClientShard]) -> Vec<Vec<u64>> {
        shards
            .iter()
            .map(|s| s.examples.iter().map(|e| e.features[0] as u64).collect())
            .collect()
    }

    #[test]
    fn blobs_counts_determinism_and_zero_spread() {
        let ds = synthetic_blobs(3, 50, 8, 0.3, 5).unwrap();
        assert_eq!(ds.len(), 150);
        assert_eq!(ds.class_counts(), vec![50, 50, 50]);
        assert_eq!(ds, synthetic_blobs(3, 50, 8, 0.3, 5).unwrap());
        assert!(ds
            .examples
            .iter()
            .all(|e| e.features.iter().all(|&f| (0.0..=1.0).contains(&f))));

        let flat = synthetic_blobs(3, 10, 8, 0.0, 5).unwrap();
        for c in 0..3 {
            let first = &flat.examples[c * 10].features;
            assert!(flat.examples[c * 10..(c + 1) * 10]
                .iter()
                .all(|e| &e.features == first));
        }
    }

    #[test]
    fn iid_split_sizes() {
        let ds = labelled(&vec![0; 100], 2);
        let shards = partition_iid(&ds, 2, 1).unwrap();
        assert_eq!((shards[0].len(), shards[1].len()), (50, 50));

        let ds = labelled(&vec![1; 101], 2);
        let shards = partition_iid(&ds, 2, 1).unwrap();
        assert_eq!((shards[0].len(), shards[1].len()), (51, 50));

        let mut all: Vec<u64> = ids(&shards).concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(partition_iid(&ds, 0, 1).is_err());
        assert!(partition_iid(&labelled(&[0], 2), 2, 1).is_err());
    }

    #[test]
    fn label_split_semantics() {
        let ds = labelled(&[0, 3, 1, 2, 3, 0], 4);
        let sets = parse_label_sets("0-1;2,3").unwrap();
        let shards = partition_label_split(&ds, &sets).unwrap();
        assert_eq!(ids(&shards), vec![vec![0, 2, 5], vec![1, 3, 4]]);

        let whole = partition_label_split(&ds, &parse_label_sets("0-3").unwrap()).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].examples, ds.examples);

        assert!(partition_label_split(&ds, &parse_label_sets("0-2;2-3").unwrap()).is_err());
        assert!(partition_label_split(&ds, &parse_label_sets("0-1;3").unwrap()).is_err());
        assert!(partition_label_split(&ds, &parse_label_sets("0-4").unwrap()).is_err());
    }

    #[test]
    fn label_set_parsing() {
        let sets = parse_label_sets("0-4;5-9").unwrap();
        assert_eq!(sets[0], (0..5).collect());
        assert_eq!(sets[1], (5..10).collect());
        assert!(parse_label_sets("3-1").is_err());
        assert!(parse_label_sets("a").is_err());
        assert!(parse_label_sets("0;").is_err());
    }

    #[test]
    fn stratified_subsample() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
        let ds = labelled(&labels, 10);
        let sub = subsample(&ds, 1000, 4).unwrap();
        assert_eq!(sub.class_counts(), vec![100; 10]);
        assert_eq!(sub, subsample(&ds, 1000, 4).unwrap());
        assert_ne!(sub, subsample(&ds, 1000, 5).unwrap());

        let full = subsample(&ds, ds.len(), 4).unwrap();
        assert_eq!(full.examples, ds.examples);
        assert!(subsample(&ds, 0, 1).is_err());
        assert!(subsample(&ds, 2001, 1).is_err());
    }

    #[test]
    fn subsample_remainder_goes_to_largest_classes() {
        // counts 5/3/2, n = 5 -> floors 2/1/1, leftover 1 -> class 0.
        let ds = labelled(&[0, 0, 0, 0, 0, 1, 1, 1, 2, 2], 3);
        assert_eq!(subsample(&ds, 5, 0).unwrap().class_counts(), vec![3, 1, 1]);
    }
}
