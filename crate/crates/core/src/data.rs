//! Dataset ingestion (IDX), static binarization, splitting, and synthetic
//! corpora for tests and desk-scale runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a dataset came from, including the binarization seed — static
/// binarization changes the effective dataset, so results are only
/// reproducible with this recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub binarize_seed: Option<u64>,
}

/// Train/val/test matrices (`examples × d`) with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub d: usize,
    pub binarized: bool,
    pub provenance: Provenance,
}

impl Dataset {
    /// Serialize provenance as a JSON sidecar next to other run artifacts.
    pub fn write_provenance_sidecar(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.provenance)
            .expect("provenance serialization cannot fail");
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

// ── IDX container ────────────────────────────────────────────────────

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Parsed content of an IDX file.
#[derive(Debug, Clone)]
pub enum IdxContent {
    /// Flattened images `[count, rows·cols]` scaled to `[0, 1]` by `/255`.
    Images { data: Tensor, rows: usize, cols: usize },
    /// Label bytes, accepted but unused by this pipeline.
    Labels(Vec<u8>),
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(_) => Err(Error::Idx {
                offset: self.offset,
                msg: format!("truncated file: expected {} more bytes", buf.len()),
            }),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parse a big-endian IDX file (the classic MNIST container).
pub fn load_idx(path: &Path) -> Result<IdxContent> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut r = OffsetReader { inner: BufReader::new(file), offset: 0 };
    let magic = r.read_u32_be()?;
    match magic {
        IDX_MAGIC_IMAGES => {
            let count = r.read_u32_be()? as usize;
            let rows = r.read_u32_be()? as usize;
            let cols = r.read_u32_be()? as usize;
            let d = rows * cols;
            let mut bytes = vec![0u8; count * d];
            r.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxContent::Images { data: Tensor::new(vec![count, d], data), rows, cols })
        }
        IDX_MAGIC_LABELS => {
            let count = r.read_u32_be()? as usize;
            let mut bytes = vec![0u8; count];
            r.read_exact(&mut bytes)?;
            Ok(IdxContent::Labels(bytes))
        }
        other => Err(Error::Idx { offset: 0, msg: format!("bad magic 0x{other:08x}") }),
    }
}

/// Write images in the IDX format read by [`load_idx`].  Values are mapped
/// back to bytes as `round(v·255)`, so a loaded file round-trips bit-exactly.
pub fn write_idx_images(path: &Path, images: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if images.rank() != 2 || images.cols() != rows * cols {
        return Err(Error::ShapeMismatch {
            op: "write_idx_images",
            lhs: images.shape().to_vec(),
            rhs: vec![images.rows(), rows * cols],
        });
    }
    let io_err = |e: std::io::Error| Error::Io { path: path.display().to_string(), msg: e.to_string() };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let write_u32 = |w: &mut BufWriter<File>, v: u32| w.write_all(&v.to_be_bytes());
    write_u32(&mut w, IDX_MAGIC_IMAGES).map_err(io_err)?;
    write_u32(&mut w, images.rows() as u32).map_err(io_err)?;
    write_u32(&mut w, rows as u32).map_err(io_err)?;
    write_u32(&mut w, cols as u32).map_err(io_err)?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

// ── binarization and splitting ───────────────────────────────────────

/// One-time Bernoulli sampling of pixel intensities: each pixel is drawn once
/// with its real value as the success probability and stays fixed.
pub fn static_binarize(images: &Tensor, seed: u64) -> Result<Tensor> {
    if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::OutOfRange {
            op: "static_binarize",
            msg: "pixel values must lie in [0, 1]".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = images.clone();
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < *v { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Seeded permutation split of a training pool: the first `n_train` permuted
/// rows become the training split, the next `n_val` the validation split.
pub fn split_pool(pool: &Tensor, n_train: usize, n_val: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let n = pool.rows();
    if n_train + n_val > n {
        return Err(Error::InvalidConfig {
            msg: format!("split needs {n_train}+{n_val} examples but pool has {n}"),
        });
    }
    if n_val == 0 {
        log::warn!("validation split is empty; early stopping will be unavailable");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let train = pool.gather_rows(&idx[..n_train]);
    let val = pool.gather_rows(&idx[n_train..n_train + n_val]);
    Ok((train, val))
}

/// Load an IDX image pair into a [`Dataset`]: the training pool is split
/// `n_train`/`n_val` with `split_seed`, the test file is taken whole, and
/// any non-binary input is statically binarized with `binarize_seed`.
pub fn load_idx_dataset(
    train_images: &Path,
    test_images: &Path,
    n_train: usize,
    n_val: usize,
    split_seed: u64,
    binarize_seed: u64,
) -> Result<Dataset> {
    let pool = match load_idx(train_images)? {
        IdxContent::Images { data, .. } => data,
        IdxContent::Labels(_) => {
            return Err(Error::Idx { offset: 0, msg: "expected an images file, got labels".into() })
        }
    };
    let test = match load_idx(test_images)? {
        IdxContent::Images { data, .. } => data,
        IdxContent::Labels(_) => {
            return Err(Error::Idx { offset: 0, msg: "expected an images file, got labels".into() })
        }
    };
    if pool.cols() != test.cols() {
        return Err(Error::ShapeMismatch {
            op: "load_idx_dataset",
            lhs: pool.shape().to_vec(),
            rhs: test.shape().to_vec(),
        });
    }
    let already_binary = pool.data().iter().chain(test.data()).all(|&v| v == 0.0 || v == 1.0);
    let (pool, test, bin_seed) = if already_binary {
        (pool, test, None)
    } else {
        (
            static_binarize(&pool, binarize_seed)?,
            static_binarize(&test, binarize_seed.wrapping_add(1))?,
            Some(binarize_seed),
        )
    };
    let d = pool.cols();
    let (train, val) = split_pool(&pool, n_train, n_val, split_seed)?;
    Ok(Dataset {
        train,
        val,
        test,
        d,
        binarized: true,
        provenance: Provenance {
            source: format!(
                "idx:{}|{} split_seed={split_seed}",
                train_images.display(),
                test_images.display()
            ),
            binarize_seed: bin_seed,
        },
    })
}

// ── synthetic data ───────────────────────────────────────────────────

/// Mixture of binary prototypes with per-pixel flip noise 0.05, split
/// 60/20/20.
pub fn synthetic_dataset(n: usize, d: usize, clusters: usize, seed: u64) -> Dataset {
    synthetic_dataset_with_noise(n, d, clusters, 0.05, seed).0
}

/// Like [`synthetic_dataset`] with an explicit flip probability.  Also
/// returns the prototypes (`[clusters, d]`) and the per-row cluster
/// assignment in `[train; val; test]` order, for recovery tests.
pub fn synthetic_dataset_with_noise(
    n: usize,
    d: usize,
    clusters: usize,
    flip: f64,
    seed: u64,
) -> (Dataset, Tensor, Vec<usize>) {
    assert!(n >= 1 && d >= 1 && clusters >= 1, "n, d, clusters must be ≥ 1");
    assert!((0.0..=1.0).contains(&flip), "flip probability must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prototypes = Tensor::zeros(&[clusters, d]);
    for v in prototypes.data_mut() {
        *v = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    let mut rows = Tensor::zeros(&[n, d]);
    let mut assignment = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..clusters);
        assignment.push(c);
        let proto = prototypes.row(c).to_vec();
        let row: Vec<f64> = proto
            .iter()
            .map(|&p| if rng.random::<f64>() < flip { 1.0 - p } else { p })
            .collect();
        rows.set_row(i, &row);
    }
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let dataset = Dataset {
        train: rows.slice_rows(0, n_train),
        val: rows.slice_rows(n_train, n_train + n_val),
        test: rows.slice_rows(n_train + n_val, n),
        d,
        binarized: true,
        provenance: Provenance {
            source: format!("synthetic(n={n},d={d},clusters={clusters},flip={flip},seed={seed})"),
            binarize_seed: None,
        },
    };
    (dataset, prototypes, assignment)
}
