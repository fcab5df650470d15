//! Dataset loading: the JSON-lines manifest, the binary feature-file
//! format, and window extraction.
//!
//! A dataset is a manifest with one JSON object per line:
//!
//! ```json
//! {"video_id": "...", "num_shots": 120, "dim_entity": 512, "dim_place": 2048,
//!  "entity_path": "features/x.ent.bin", "place_path": "features/x.plc.bin",
//!  "labels": [0,0,1, ...], "pseudo_labels": [0,1,0, ...]}
//! ```
//!
//! `labels` and `pseudo_labels` are optional; label `1` marks the last shot
//! of a scene. Feature paths are resolved relative to the manifest's
//! directory. A feature file is little-endian binary: 4-byte magic `MSRC`,
//! `u32` version (1), `u64` row count, `u64` dimension, then the rows as
//! `f32`, row-major.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"MSRC";
const FEATURE_VERSION: u32 = 1;

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub num_shots: usize,
    pub dim_entity: usize,
    pub dim_place: usize,
    pub entity_path: String,
    pub place_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<Vec<u8>>,
}

/// A manifest line with its feature paths resolved and headers validated.
#[derive(Clone, Debug)]
pub struct SequenceDescriptor {
    pub entry: ManifestEntry,
    pub entity_file: PathBuf,
    pub place_file: PathBuf,
}

/// A fully loaded video: per-shot feature rows plus optional labels.
#[derive(Clone, Debug)]
pub struct ShotSequence {
    pub video_id: String,
    /// `[num_shots, dim_entity]`
    pub entity: Tensor<f32>,
    /// `[num_shots, dim_place]`
    pub place: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub pseudo_labels: Option<Vec<u8>>,
}

impl ShotSequence {
    pub fn num_shots(&self) -> usize {
        self.entity.rows()
    }
}

/// One training/evaluation sample: a fixed-length window of shot features
/// centered so that the boundary decision concerns the shot at position
/// `window_len/2 - 1`.
#[derive(Clone, Debug)]
pub struct WindowSample {
    /// `[window_len, dim_entity]`
    pub entity: Tensor<f32>,
    /// `[window_len, dim_place]`
    pub place: Tensor<f32>,
    /// Index of the center shot in the source video.
    pub center: usize,
}

fn feature_header(r: &mut impl Read, path: &Path) -> Result<(usize, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: missing feature header", path.display())))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, expected {FEATURE_MAGIC:?}",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let version = u32::from_le_bytes(buf4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported feature version {version}",
            path.display()
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let rows = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let dim = u64::from_le_bytes(buf8) as usize;
    Ok((rows, dim))
}

/// Writes a `[rows, dim]` feature matrix in the binary feature format.
pub fn write_feature_file(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.rows() as u64).to_le_bytes())?;
    w.write_all(&(features.cols() as u64).to_le_bytes())?;
    for v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file written by [`write_feature_file`].
pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (rows, dim) = feature_header(&mut r, path)?;
    let mut raw = vec![0u8; rows * dim * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("{}: truncated feature data", path.display())))?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after {rows}x{dim} feature rows",
            path.display()
        )));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&[rows, dim], data))
}

/// Checks length and the 0/1 alphabet. The final shot's label may be either
/// value: scene reconstruction closes the last scene with or without an
/// explicit trailing 1.
fn validate_labels(what: &str, labels: &[u8], num_shots: usize, video_id: &str) -> Result<()> {
    if labels.len() != num_shots {
        return Err(Error::Invalid(format!(
            "{video_id}: {what} length {} does not match {num_shots} shots",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::Invalid(format!(
            "{video_id}: {what} must be 0/1, found {bad}"
        )));
    }
    Ok(())
}

/// Parses a manifest and validates every referenced feature file's header
/// against the manifest's declared shot counts and dimensions. Feature data
/// itself is not read yet.
pub fn load_manifest(path: &Path) -> Result<Vec<SequenceDescriptor>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Invalid(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!(
                "{}:{}: bad manifest line: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if entry.num_shots == 0 {
            return Err(Error::Invalid(format!("{}: zero shots", entry.video_id)));
        }
        if entry.dim_entity == 0 || entry.dim_place == 0 {
            return Err(Error::Invalid(format!(
                "{}: zero feature dimension",
                entry.video_id
            )));
        }
        if let Some(labels) = &entry.labels {
            validate_labels("labels", labels, entry.num_shots, &entry.video_id)?;
        }
        if let Some(pseudo) = &entry.pseudo_labels {
            validate_labels("pseudo_labels", pseudo, entry.num_shots, &entry.video_id)?;
        }
        let entity_file = base.join(&entry.entity_path);
        let place_file = base.join(&entry.place_path);
        for (file, dim, what) in [
            (&entity_file, entry.dim_entity, "entity"),
            (&place_file, entry.dim_place, "place"),
        ] {
            let mut r = BufReader::new(std::fs::File::open(file).map_err(|e| {
                Error::Invalid(format!(
                    "{}: cannot open {what} features {}: {e}",
                    entry.video_id,
                    file.display()
                ))
            })?);
            let (rows, file_dim) = feature_header(&mut r, file)?;
            if rows != entry.num_shots {
                return Err(Error::Invalid(format!(
                    "{}: {what} file has {rows} rows but manifest declares {} shots",
                    entry.video_id, entry.num_shots
                )));
            }
            if file_dim != dim {
                return Err(Error::Invalid(format!(
                    "{}: {what} file has dimension {file_dim} but manifest declares {dim}",
                    entry.video_id
                )));
            }
        }
        out.push(SequenceDescriptor {
            entry,
            entity_file,
            place_file,
        });
    }
    Ok(out)
}

/// Reads the full feature data for one descriptor. Rejects all-zero feature
/// rows, which have no direction and would poison cosine similarities.
pub fn load_sequence(desc: &SequenceDescriptor) -> Result<ShotSequence> {
    let entity = read_feature_file(&desc.entity_file)?;
    let place = read_feature_file(&desc.place_file)?;
    for (t, what) in [(&entity, "entity"), (&place, "place")] {
        for i in 0..t.rows() {
            let row = t.row(i);
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "{}: non-finite {what} feature in shot {i}",
                    desc.entry.video_id
                )));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!(
                    "{}: all-zero {what} feature row at shot {i}",
                    desc.entry.video_id
                )));
            }
        }
    }
    Ok(ShotSequence {
        video_id: desc.entry.video_id.clone(),
        entity,
        place,
        labels: desc.entry.labels.clone(),
        pseudo_labels: desc.entry.pseudo_labels.clone(),
    })
}

/// Convenience: manifest → fully loaded sequences.
pub fn load_dataset(path: &Path) -> Result<Vec<ShotSequence>> {
    load_manifest(path)?.iter().map(load_sequence).collect()
}

/// Writes sequences as feature files plus a manifest at
/// `dir/<manifest_name>`. Feature files land in `dir/features/`.
pub fn write_dataset(dir: &Path, manifest_name: &str, sequences: &[ShotSequence]) -> Result<()> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let manifest_path = dir.join(manifest_name);
    let mut m = BufWriter::new(std::fs::File::create(&manifest_path)?);
    for seq in sequences {
        let entity_rel = format!("features/{}.ent.bin", seq.video_id);
        let place_rel = format!("features/{}.plc.bin", seq.video_id);
        write_feature_file(&dir.join(&entity_rel), &seq.entity)?;
        write_feature_file(&dir.join(&place_rel), &seq.place)?;
        let entry = ManifestEntry {
            video_id: seq.video_id.clone(),
            num_shots: seq.num_shots(),
            dim_entity: seq.entity.cols(),
            dim_place: seq.place.cols(),
            entity_path: entity_rel,
            place_path: place_rel,
            labels: seq.labels.clone(),
            pseudo_labels: seq.pseudo_labels.clone(),
        };
        serde_json::to_writer(&mut m, &entry)?;
        m.write_all(b"\n")?;
    }
    m.flush()?;
    Ok(())
}

/// Extracts the window of `window_len` shots used to judge the boundary
/// after shot `t`: source rows `t - window_len/2 + 1 ..= t + window_len/2`,
/// with out-of-range rows replaced by the nearest valid shot (replicate
/// padding).
pub fn cut_window(seq: &ShotSequence, t: usize, window_len: usize) -> Result<WindowSample> {
    let n = seq.num_shots();
    if window_len < 2 || window_len % 2 != 0 {
        return Err(Error::Config(format!(
            "window length must be even and >= 2, got {window_len}"
        )));
    }
    if t >= n {
        return Err(Error::Invalid(format!(
            "shot index {t} out of range for {n} shots"
        )));
    }
    let half = (window_len / 2) as i64;
    let start = t as i64 - half + 1;
    let mut entity = Tensor::zeros(&[window_len, seq.entity.cols()]);
    let mut place = Tensor::zeros(&[window_len, seq.place.cols()]);
    for w in 0..window_len {
        let src = (start + w as i64).clamp(0, n as i64 - 1) as usize;
        entity.row_mut(w).copy_from_slice(seq.entity.row(src));
        place.row_mut(w).copy_from_slice(seq.place.row(src));
    }
    Ok(WindowSample {
        entity,
        place,
        center: t,
    })
}
