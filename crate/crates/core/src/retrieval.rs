//! Nearest-neighbor retrieval over salient-object embeddings.
//!
//! Each image's object is summarized by the l2-normalized mean of its pixel
//! embeddings; retrieval ranks index entries by cosine similarity (a plain
//! dot product on unit vectors) and is scored by precision@k against
//! ground-truth classes.

use crate::data::{Dataset, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::eval::SegmentDescriptor;
use crate::model::ModelParams;
use crate::ops;
use crate::tensor::Scalar;
use std::collections::HashSet;
use std::io::{Read, Write as _};
use std::path::Path;

/// File identification for saved indexes.
pub const INDEX_MAGIC: [u8; 4] = *b"MCSI";
pub const INDEX_VERSION: u32 = 1;

/// An immutable collection of segment descriptors from one dataset split.
/// Ids are unique and every embedding shares one dimension and unit norm,
/// so concurrent queries need no synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentIndex {
    split: String,
    entries: Vec<SegmentDescriptor>,
}

impl SegmentIndex {
    /// Wraps descriptors after checking id uniqueness and dimensions.
    pub fn new(split: impl Into<String>, entries: Vec<SegmentDescriptor>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &entries {
            if !seen.insert(d.image_id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate object id '{}' in segment index",
                    d.image_id
                )));
            }
        }
        if let Some(first) = entries.first() {
            let dim = first.dim();
            for d in &entries {
                if d.dim() != dim {
                    return Err(Error::Shape(format!(
                        "descriptor '{}' has dim {} but '{}' has {dim}",
                        d.image_id,
                        d.dim(),
                        first.image_id
                    )));
                }
            }
        }
        Ok(SegmentIndex {
            split: split.into(),
            entries,
        })
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SegmentDescriptor] {
        &self.entries
    }

    /// Embedding dimension, or 0 for an empty index.
    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |d| d.dim())
    }

    /// Writes the index: magic, version, split tag, entry count, embedding
    /// dimension, then one record per descriptor (id, class, embedding).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e| Error::io(path, e);
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&INDEX_MAGIC).map_err(io_err)?;
        w.write_all(&INDEX_VERSION.to_le_bytes()).map_err(io_err)?;
        write_string(&mut w, path, &self.split)?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Data("segment index too large to save".into()))?;
        w.write_all(&count.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.dim() as u32).to_le_bytes()).map_err(io_err)?;
        for d in &self.entries {
            write_string(&mut w, path, &d.image_id)?;
            w.write_all(&d.class.to_le_bytes()).map_err(io_err)?;
            for &v in d.embedding() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads an index written by [`SegmentIndex::save`], re-validating id
    /// uniqueness and unit norms.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut pos = 0u64;

        let mut magic = [0u8; 4];
        read_exact(&mut r, path, &mut pos, &mut magic)?;
        if magic != INDEX_MAGIC {
            return Err(Error::format(
                path,
                0,
                format!("bad index magic {magic:?}, expected {INDEX_MAGIC:?}"),
            ));
        }
        let version = read_u32(&mut r, path, &mut pos)?;
        if version != INDEX_VERSION {
            return Err(Error::format(
                path,
                pos - 4,
                format!("unsupported index version {version}, expected {INDEX_VERSION}"),
            ));
        }
        let split = read_string(&mut r, path, &mut pos)?;
        let count = read_u32(&mut r, path, &mut pos)? as usize;
        let dim = read_u32(&mut r, path, &mut pos)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let id = read_string(&mut r, path, &mut pos)?;
            let class = read_u32(&mut r, path, &mut pos)?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut buf = [0u8; 4];
                read_exact(&mut r, path, &mut pos, &mut buf)?;
                embedding.push(f32::from_le_bytes(buf));
            }
            let at = pos;
            entries.push(
                SegmentDescriptor::from_unit(id, class, embedding)
                    .map_err(|e| Error::format(path, at, e.to_string()))?,
            );
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, pos, "trailing bytes after final record"));
        }
        SegmentIndex::new(split, entries)
    }
}

fn write_string(w: &mut impl std::io::Write, path: &Path, s: &str) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let len = u32::try_from(s.len())
        .map_err(|_| Error::Data(format!("string '{s}' too long for index file")))?;
    w.write_all(&len.to_le_bytes()).map_err(io_err)?;
    w.write_all(s.as_bytes()).map_err(io_err)
}

fn read_exact(r: &mut impl Read, path: &Path, pos: &mut u64, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, *pos, "file ends before the record does")
        } else {
            Error::io(path, e)
        }
    })?;
    *pos += buf.len() as u64;
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path, pos: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, path, pos, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, path: &Path, pos: &mut u64) -> Result<String> {
    let len = read_u32(r, path, pos)? as usize;
    if len > 1 << 20 {
        return Err(Error::format(
            path,
            *pos - 4,
            format!("string length {len} is implausibly large"),
        ));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, path, pos, &mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| Error::format(path, *pos - len as u64, "string is not valid UTF-8"))
}

/// Majority ground-truth class over the labeled foreground pixels of the
/// sample's mask (ties toward the lower class id); 0 when no labels exist.
fn object_class(sample: &crate::data::Sample) -> u32 {
    let Some(labels) = &sample.labels else {
        return 0;
    };
    let values = labels.values();
    let mut counts = std::collections::BTreeMap::new();
    for &flat in &sample.saliency.foreground_indices() {
        let v = values[flat];
        if v != IGNORE_LABEL {
            *counts.entry(v).or_insert(0usize) += 1;
        }
    }
    // Ascending iteration plus a strict comparison breaks ties toward the
    // lower class id.
    let mut best = (0u32, 0usize);
    for (v, n) in counts {
        if n > best.1 {
            best = (v as u32, n);
        }
    }
    best.0
}

/// Runs the model over every sample and summarizes each salient object as a
/// descriptor: the l2-normalized masked mean of its pixel embeddings, pooled
/// over the dataset's saliency mask. Samples with an empty mask are skipped
/// with a warning.
pub fn build_index<S: Scalar>(
    dataset: &Dataset,
    params: &ModelParams<S>,
    split: impl Into<String>,
) -> Result<SegmentIndex> {
    let mut entries = Vec::new();
    for sample in dataset.iter() {
        if sample.saliency.is_empty() {
            log::warn!("image '{}' has an empty mask; skipped in the index", sample.id);
            continue;
        }
        let (embedding, _) = params.forward(&sample.image.cast::<S>())?;
        let mean = ops::masked_mean_pool(embedding.tensor(), &sample.saliency)?;
        let raw: Vec<f64> = mean.data().iter().map(|v| v.to_f64()).collect();
        entries.push(SegmentDescriptor::new(
            sample.id.clone(),
            object_class(sample),
            &raw,
        )?);
    }
    SegmentIndex::new(split, entries)
}

/// Ranks index entries against a probe descriptor by cosine similarity,
/// descending; equal similarities keep index order. `topk` must not exceed
/// the index size.
pub fn query(
    index: &SegmentIndex,
    probe: &SegmentDescriptor,
    topk: usize,
) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::Data("cannot query an empty segment index".into()));
    }
    if topk == 0 || topk > index.len() {
        return Err(Error::Config(format!(
            "topk must lie in 1..={}, got {topk}",
            index.len()
        )));
    }
    if probe.dim() != index.dim() {
        return Err(Error::Shape(format!(
            "query dim {} does not match index dim {}",
            probe.dim(),
            index.dim()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = index
        .entries()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let sim: f64 = d
                .embedding()
                .iter()
                .zip(probe.embedding())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            (i, sim)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("similarities are finite"));
    ranked.truncate(topk);
    Ok(ranked)
}

/// Precision@k scores: overall and broken down by query class.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScore {
    /// Mean over queries of the fraction of neighbors sharing the query's class.
    pub precision: f64,
    /// Per query class: `(class, mean precision over that class's queries)`,
    /// ascending by class id.
    pub per_class: Vec<(u32, f64)>,
}

/// Queries the index with every descriptor in `queries` and averages the
/// fraction of retrieved neighbors whose class matches the query's.
pub fn retrieval_score(
    index: &SegmentIndex,
    queries: &[SegmentDescriptor],
    topk: usize,
) -> Result<RetrievalScore> {
    if queries.is_empty() {
        return Err(Error::Data("retrieval scoring needs at least one query".into()));
    }
    let mut by_class: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    let mut total = 0.0f64;
    for probe in queries {
        let hits = query(index, probe, topk)?;
        let matching = hits
            .iter()
            .filter(|&&(i, _)| index.entries()[i].class == probe.class)
            .count();
        let fraction = matching as f64 / topk as f64;
        total += fraction;
        let slot = by_class.entry(probe.class).or_insert((0.0, 0));
        slot.0 += fraction;
        slot.1 += 1;
    }
    Ok(RetrievalScore {
        precision: total / queries.len() as f64,
        per_class: by_class
            .into_iter()
            .map(|(class, (sum, n))| (class, sum / n as f64))
            .collect(),
    })
}
