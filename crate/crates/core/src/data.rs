//! Dataset loading, adaptation, splitting, and random-patch pairing.
//!
//! All images live in `(N, C, H, W)` f32 arrays with values in `[0, 1]`.
//! Loaders accept plain or gzip-compressed IDX files (sniffed by magic bytes)
//! and class-per-directory image folders. Every randomized operation takes an
//! explicit seed and is bit-reproducible.

use crate::io::{sha256_hex, write_atomic};
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected IDX magic {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },
    #[error("{path}: payload truncated (needed {needed} bytes, have {have})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        have: usize,
    },
    #[error("{path}: {extra} trailing bytes after declared payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("class {class:?} has {available} images, but the split needs {needed}")]
    InsufficientClass {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("cannot convert {from}-channel images to {to} channels")]
    UnsupportedConversion { from: usize, to: usize },
    #[error("batch size {requested} exceeds dataset size {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("{root}: no class subdirectories found")]
    NoClasses { root: PathBuf },
    #[error("undecodable images:\n{}", listing.join("\n"))]
    Undecodable { listing: Vec<String> },
    #[error("mixed image dimensions: {first_path} is {first_dims:?} but {other_path} is {other_dims:?}")]
    MixedDimensions {
        first_path: PathBuf,
        first_dims: (usize, usize),
        other_path: PathBuf,
        other_dims: (usize, usize),
    },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

/// Images plus integer labels plus the ordered class-name table.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(channels, height, width)` of each image.
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    /// Copy out the images and labels at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut out = Array4::<f32>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.gather(indices);
        LabeledDataset {
            images,
            labels,
            class_names: self.class_names.clone(),
        }
    }

    /// Full scan of the dataset invariants: values finite and in [0,1],
    /// labels within range, lengths consistent.
    pub fn check_invariants(&self) -> Result<(), DataError> {
        if self.labels.len() != self.images.dim().0 {
            return Err(DataError::Invariant(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.images.dim().0
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(DataError::Invariant(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        for (i, &v) in self.images.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invariant(format!(
                    "pixel value {v} at flat index {i} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class split sizes with the shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

/// Random square patches: side drawn uniformly from `[min_size, max_size]`,
/// position uniform over valid placements, pixels i.i.d. uniform `[0,1]`.
#[derive(Debug, Clone, Copy)]
pub struct RandomPatchSpec {
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

/// Aligned (patched, clean, label) triples.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub patched: Array4<f32>,
    pub clean: Array4<f32>,
    pub labels: Vec<usize>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Load a big-endian IDX image/label pair (plain or gzipped) into a dataset
/// of grayscale images scaled to [0,1]. Class names are the digit strings.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let img_bytes = read_maybe_gzipped(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let h = be_u32(&img_bytes, 8, images_path)? as usize;
    let w = be_u32(&img_bytes, 12, images_path)? as usize;
    let payload = &img_bytes[16..];
    let needed = n * h * w;
    if payload.len() < needed {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            needed: needed + 16,
            have: img_bytes.len(),
        });
    }
    if payload.len() > needed {
        return Err(DataError::TrailingBytes {
            path: images_path.to_path_buf(),
            extra: payload.len() - needed,
        });
    }

    let lbl_bytes = read_maybe_gzipped(labels_path)?;
    let lmagic = be_u32(&lbl_bytes, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            actual: lmagic,
        });
    }
    let ln = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    let lpayload = &lbl_bytes[8..];
    if lpayload.len() < ln {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            needed: ln + 8,
            have: lbl_bytes.len(),
        });
    }
    if lpayload.len() > ln {
        return Err(DataError::TrailingBytes {
            path: labels_path.to_path_buf(),
            extra: lpayload.len() - ln,
        });
    }
    if n != ln {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }

    let mut images = Array4::<f32>::zeros((n, 1, h, w));
    {
        let dst = images.as_slice_mut().unwrap();
        for (d, &b) in dst.iter_mut().zip(payload.iter()) {
            *d = b as f32 / 255.0;
        }
    }
    let labels: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let class_names = (0..k).map(|d| d.to_string()).collect();
    Ok(LabeledDataset {
        images,
        labels,
        class_names,
    })
}

/// Load a class-per-subdirectory image folder. Class ids follow lexicographic
/// subdirectory order. Returns the dataset plus human-readable warnings
/// (e.g. empty class directories). All images must share dimensions; resizing
/// is the job of [`adapt`].
pub fn load_image_folder(root: &Path) -> Result<(LabeledDataset, Vec<String>), DataError> {
    let io_err = |source, p: &Path| DataError::Io {
        path: p.to_path_buf(),
        source,
    };
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| io_err(e, root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses {
            root: root.to_path_buf(),
        });
    }
    let mut warnings = Vec::new();
    let mut decode_errors = Vec::new();
    let mut decoded: Vec<(usize, Vec<f32>, (usize, usize), PathBuf)> = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io_err(e, dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            warnings.push(format!("class directory {} is empty", dir.display()));
            continue;
        }
        for file in files {
            match image::open(&file) {
                Ok(img) => {
                    let rgb = img.to_rgb8();
                    let (w, h) = rgb.dimensions();
                    let (w, h) = (w as usize, h as usize);
                    // channel-major (C, H, W) like the dataset layout
                    let mut px = vec![0.0f32; 3 * h * w];
                    for (y, x, p) in rgb.enumerate_pixels().map(|(x, y, p)| (y, x, p)) {
                        let (y, x) = (y as usize, x as usize);
                        for c in 0..3 {
                            px[c * h * w + y * w + x] = p.0[c] as f32 / 255.0;
                        }
                    }
                    decoded.push((class_id, px, (h, w), file));
                }
                Err(e) => decode_errors.push(format!("{}: {e}", file.display())),
            }
        }
    }
    if !decode_errors.is_empty() {
        return Err(DataError::Undecodable {
            listing: decode_errors,
        });
    }
    if decoded.is_empty() {
        return Ok((
            LabeledDataset {
                images: Array4::zeros((0, 3, 0, 0)),
                labels: Vec::new(),
                class_names,
            },
            warnings,
        ));
    }
    let (h0, w0) = decoded[0].2;
    if let Some(bad) = decoded.iter().find(|(_, _, dims, _)| *dims != (h0, w0)) {
        return Err(DataError::MixedDimensions {
            first_path: decoded[0].3.clone(),
            first_dims: (h0, w0),
            other_path: bad.3.clone(),
            other_dims: bad.2,
        });
    }
    let n = decoded.len();
    let mut images = Array4::<f32>::zeros((n, 3, h0, w0));
    let mut labels = Vec::with_capacity(n);
    for (row, (class_id, px, _, _)) in decoded.into_iter().enumerate() {
        images
            .index_axis_mut(Axis(0), row)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&px);
        labels.push(class_id);
    }
    Ok((
        LabeledDataset {
            images,
            labels,
            class_names,
        },
        warnings,
    ))
}

/// Bilinear resample one channel plane (half-pixel-center convention).
fn resize_plane(src: ndarray::ArrayView2<'_, f32>, dst_h: usize, dst_w: usize) -> ndarray::Array2<f32> {
    let (sh, sw) = src.dim();
    let mut dst = ndarray::Array2::<f32>::zeros((dst_h, dst_w));
    let scale_y = sh as f32 / dst_h as f32;
    let scale_x = sw as f32 / dst_w as f32;
    for y in 0..dst_h {
        let sy = ((y as f32 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f32;
        for x in 0..dst_w {
            let sx = ((x as f32 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f32;
            let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
            let bottom = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
            dst[(y, x)] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
        }
    }
    dst
}

/// Convert a dataset to `target_shape = (channels, height, width)`:
/// grayscale replicates to three channels, spatial dims resample bilinearly.
/// A dataset already at the target passes through unchanged, so the
/// operation is idempotent.
pub fn adapt(dataset: &LabeledDataset, target_shape: [usize; 3]) -> Result<LabeledDataset, DataError> {
    let [sc, sh, sw] = dataset.image_shape();
    let [tc, th, tw] = target_shape;
    if !(sc == tc || (sc == 1 && tc == 3)) {
        return Err(DataError::UnsupportedConversion { from: sc, to: tc });
    }
    if [sc, sh, sw] == target_shape {
        return Ok(dataset.clone());
    }
    let n = dataset.len();
    let mut images = Array4::<f32>::zeros((n, tc, th, tw));
    for i in 0..n {
        for c in 0..sc {
            let plane = dataset.images.slice(s![i, c, .., ..]);
            let resized = if (sh, sw) == (th, tw) {
                plane.to_owned()
            } else {
                resize_plane(plane, th, tw)
            };
            if sc == 1 && tc == 3 {
                for cc in 0..3 {
                    images.slice_mut(s![i, cc, .., ..]).assign(&resized);
                }
            } else {
                images.slice_mut(s![i, c, .., ..]).assign(&resized);
            }
        }
    }
    Ok(LabeledDataset {
        images,
        labels: dataset.labels.clone(),
        class_names: dataset.class_names.clone(),
    })
}

/// Stratified split with exact per-class counts, deterministic in the seed.
pub fn split(
    dataset: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), DataError> {
    let needed = spec.per_class_train + spec.per_class_val + spec.per_class_test;
    let k = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class_id, members) in by_class.iter().enumerate() {
        if members.len() < needed {
            return Err(DataError::InsufficientClass {
                class: dataset.class_names[class_id].clone(),
                available: members.len(),
                needed,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train_idx, mut val_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        let t = spec.per_class_train;
        let v = t + spec.per_class_val;
        let e = v + spec.per_class_test;
        train_idx.extend_from_slice(&members[..t]);
        val_idx.extend_from_slice(&members[t..v]);
        test_idx.extend_from_slice(&members[v..e]);
    }
    Ok((
        dataset.subset(&train_idx),
        dataset.subset(&val_idx),
        dataset.subset(&test_idx),
    ))
}

/// Overwrite a square region of `image` (C,H,W view) with the given patch
/// placed at `(top, left)`.
pub(crate) fn stamp_square(
    mut image: ndarray::ArrayViewMut3<'_, f32>,
    patch: &ndarray::Array3<f32>,
    top: usize,
    left: usize,
) {
    let (c, s, _) = patch.dim();
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                image[(ci, top + dy, left + dx)] = patch[(ci, dy, dx)];
            }
        }
    }
}

/// Pair every clean image with a copy carrying one random square patch.
pub fn make_random_patched(dataset: &LabeledDataset, spec: &RandomPatchSpec) -> PairedDataset {
    let [c, h, w] = dataset.image_shape();
    assert!(
        1 <= spec.min_size && spec.min_size <= spec.max_size && spec.max_size <= h.min(w),
        "patch size range [{}, {}] invalid for {h}x{w} images",
        spec.min_size,
        spec.max_size
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clean = dataset.images.clone();
    let mut patched = dataset.images.clone();
    for i in 0..dataset.len() {
        let s = rng.random_range(spec.min_size..=spec.max_size);
        let top = rng.random_range(0..=h - s);
        let left = rng.random_range(0..=w - s);
        let mut patch = ndarray::Array3::<f32>::zeros((c, s, s));
        for v in patch.iter_mut() {
            *v = rng.random::<f32>();
        }
        stamp_square(patched.index_axis_mut(Axis(0), i), &patch, top, left);
    }
    PairedDataset {
        patched,
        clean,
        labels: dataset.labels.clone(),
    }
}

/// Without-replacement batch order over one epoch.
pub struct EpochSampler {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::EmptyBatch);
        }
        if batch_size > len {
            return Err(DataError::BatchTooLarge {
                requested: batch_size,
                available: len,
            });
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Ok(Self {
            order,
            batch_size,
            cursor: 0,
        })
    }

    /// Next batch of indices; the final batch may be short. `None` ends the
    /// epoch.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = &self.order[self.cursor..end];
        self.cursor = end;
        Some(batch)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// One uniformly sampled batch (without replacement) from the dataset.
pub fn sample_batch(
    dataset: &LabeledDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f32>, Vec<usize>), DataError> {
    let mut sampler = EpochSampler::new(dataset.len(), batch_size, rng)?;
    let indices = sampler.next_indices().unwrap().to_vec();
    Ok(dataset.gather(&indices))
}

/// Hash of the exact image bytes + labels, used in manifests to pin split
/// membership.
pub fn membership_hash(images: &Array4<f32>, labels: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(images.len() * 4 + labels.len() * 8);
    for v in images.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Write the structured text manifest for a named split.
pub fn write_dataset_manifest(
    path: &Path,
    split_name: &str,
    dataset: &LabeledDataset,
    split_seed: u64,
) -> Result<(), DataError> {
    let mut out = String::new();
    writeln!(out, "dataset-manifest v1").unwrap();
    writeln!(out, "split {split_name}").unwrap();
    writeln!(out, "seed {split_seed}").unwrap();
    let [c, h, w] = dataset.image_shape();
    writeln!(out, "image_shape {c}x{h}x{w}").unwrap();
    writeln!(out, "total {}", dataset.len()).unwrap();
    let mut counts = vec![0usize; dataset.num_classes()];
    for &l in &dataset.labels {
        counts[l] += 1;
    }
    for (name, count) in dataset.class_names.iter().zip(&counts) {
        writeln!(out, "class {name} {count}").unwrap();
    }
    writeln!(
        out,
        "membership_sha256 {}",
        membership_hash(&dataset.images, &dataset.labels)
    )
    .unwrap();
    write_atomic(path, out.as_bytes()).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}
