use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Interval, PartialLabel};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const MANIFEST_VERSION: &str = "cu-corpus/1";
pub const MANIFEST_FILE: &str = "manifest.txt";

const COLUMNS: &str =
    "columns id frames tokens fps video_blob query_blob sentence_blob gt_start gt_end label_center label_range";

/// Feature dimensions shared by every sample of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub video: usize,
    pub query: usize,
    /// `None` when samples carry no precomputed sentence embedding.
    pub sentence: Option<usize>,
}

/// One video/query pair with its optional annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `T×D_v` frame features
    pub video: Tensor,
    /// `M×D_q` token features
    pub query: Tensor,
    pub sentence: Option<Vec<f64>>,
    pub gt: Option<Interval>,
    pub label: Option<PartialLabel>,
    pub fps: f64,
}

impl SampleRecord {
    pub fn frames(&self) -> usize {
        self.video.rows()
    }

    pub fn tokens(&self) -> usize {
        self.query.rows()
    }

    pub(crate) fn validate(&self, dims: &Dims) -> Result<()> {
        let err = |msg: String| Err(Error::sample(&self.id, msg));
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return err("ids must be non-empty and whitespace-free".into());
        }
        if self.video.ndim() != 2 || self.video.rows() < 2 || self.video.cols() != dims.video {
            return err(format!(
                "video features {:?} do not match T≥2 × {}",
                self.video.shape(),
                dims.video
            ));
        }
        if self.query.ndim() != 2 || self.query.rows() < 1 || self.query.cols() != dims.query {
            return err(format!(
                "query features {:?} do not match M≥1 × {}",
                self.query.shape(),
                dims.query
            ));
        }
        match (&self.sentence, dims.sentence) {
            (None, None) => {}
            (Some(s), Some(d)) if s.len() == d => {
                if s.iter().any(|v| !v.is_finite()) {
                    return err("non-finite sentence embedding".into());
                }
            }
            (s, d) => {
                return err(format!(
                    "sentence embedding of length {:?}, corpus expects {:?}",
                    s.as_ref().map(Vec::len),
                    d
                ))
            }
        }
        if !self.video.is_finite() || !self.query.is_finite() {
            return err("non-finite feature values".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps must be positive, got {}", self.fps));
        }
        let t = self.frames() as f64;
        if let Some(gt) = self.gt {
            if !(gt.is_valid_within(t) && gt.start < gt.end) {
                return err(format!("ground truth [{}, {}] outside 0 ≤ s < e ≤ {t}", gt.start, gt.end));
            }
        }
        if let Some(l) = self.label {
            if !(l.range >= 0.0 && l.interval().is_valid_within(t)) {
                return err(format!("partial label (c={}, r={}) outside [0, {t}]", l.center, l.range));
            }
        }
        Ok(())
    }
}

/// An ordered, validated collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dims: Dims,
    pub samples: Vec<SampleRecord>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(dims: Dims, samples: Vec<SampleRecord>, provenance: impl Into<String>) -> Result<Self> {
        let corpus = Self {
            dims,
            samples,
            provenance: provenance.into(),
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Invalid("corpus has no samples".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            s.validate(&self.dims)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::sample(&s.id, "duplicate sample id"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// First `n` samples and the rest, as two corpora sharing dims.
    pub fn split_at(&self, n: usize) -> Result<(Corpus, Corpus)> {
        if n == 0 || n >= self.samples.len() {
            return Err(Error::Invalid(format!(
                "cannot split {} samples at {n}",
                self.samples.len()
            )));
        }
        let (a, b) = self.samples.split_at(n);
        Ok((
            Corpus::new(self.dims, a.to_vec(), format!("{} [0..{n})", self.provenance))?,
            Corpus::new(
                self.dims,
                b.to_vec(),
                format!("{} [{n}..{})", self.provenance, self.samples.len()),
            )?,
        ))
    }
}

fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, expected: usize, id: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::sample(id, format!("{}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::sample(
            id,
            format!(
                "{} holds {} bytes, expected {} ({} floats)",
                path.display(),
                bytes.len(),
                expected * 4,
                expected
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::sample(id, format!("{} contains non-finite values", path.display())));
    }
    Ok(values)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Writes `manifest.txt` plus one little-endian f32 blob per modality and
/// sample into `dir`. Features are stored at 32-bit precision.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::new();
    let _ = writeln!(m, "{MANIFEST_VERSION}");
    let _ = writeln!(m, "dim_video {}", corpus.dims.video);
    let _ = writeln!(m, "dim_query {}", corpus.dims.query);
    let _ = writeln!(m, "dim_sentence {}", corpus.dims.sentence.unwrap_or(0));
    let _ = writeln!(m, "provenance {}", corpus.provenance.replace('\n', " "));
    let _ = writeln!(m, "samples {}", corpus.len());
    let _ = writeln!(m, "{COLUMNS}");
    for s in &corpus.samples {
        let video = format!("{}.video.f32", s.id);
        let query = format!("{}.query.f32", s.id);
        write_blob(&dir.join(&video), s.video.data())?;
        write_blob(&dir.join(&query), s.query.data())?;
        let sentence = match &s.sentence {
            Some(v) => {
                let name = format!("{}.sentence.f32", s.id);
                write_blob(&dir.join(&name), v)?;
                name
            }
            None => "-".into(),
        };
        let _ = writeln!(
            m,
            "sample {} {} {} {} {video} {query} {sentence} {} {} {} {}",
            s.id,
            s.frames(),
            s.tokens(),
            s.fps,
            opt(s.gt.map(|g| g.start)),
            opt(s.gt.map(|g| g.end)),
            opt(s.label.map(|l| l.center)),
            opt(s.label.map(|l| l.range)),
        );
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

/// Accepts either the corpus directory or the manifest file itself.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a corpus written by [`save_corpus`] (or by an external extractor
/// following the same layout). Sample order is preserved.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = manifest_path(path);
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |msg: String| Error::format(&manifest, msg);

    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(v) if v.trim() == MANIFEST_VERSION => {}
        other => return Err(bad(format!("expected `{MANIFEST_VERSION}` header, found {other:?}"))),
    }
    let (mut dv, mut dq, mut ds, mut declared) = (None, None, None, None);
    let mut provenance = String::new();
    let mut samples = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parse_usize = |v: &str| v.trim().parse::<usize>().map_err(|_| bad(format!("bad {key}: `{v}`")));
        match key {
            "dim_video" => dv = Some(parse_usize(rest)?),
            "dim_query" => dq = Some(parse_usize(rest)?),
            "dim_sentence" => ds = Some(parse_usize(rest)?),
            "samples" => declared = Some(parse_usize(rest)?),
            "provenance" => provenance = rest.to_string(),
            "columns" => {}
            "sample" => {
                let (Some(dv), Some(dq), Some(ds)) = (dv, dq, ds) else {
                    return Err(bad("sample row before dim_* keys".into()));
                };
                samples.push(parse_sample(rest, &dir, dv, dq, ds, &manifest)?);
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let dims = Dims {
        video: dv.ok_or_else(|| bad("missing dim_video".into()))?,
        query: dq.ok_or_else(|| bad("missing dim_query".into()))?,
        sentence: ds.filter(|&d| d > 0),
    };
    if let Some(n) = declared {
        if n != samples.len() {
            return Err(bad(format!("declares {n} samples, lists {}", samples.len())));
        }
    }
    Corpus::new(dims, samples, provenance)
}

fn parse_sample(
    row: &str,
    dir: &Path,
    dv: usize,
    dq: usize,
    ds: usize,
    manifest: &Path,
) -> Result<SampleRecord> {
    let f: Vec<&str> = row.split_whitespace().collect();
    if f.len() != 11 {
        return Err(Error::format(
            manifest,
            format!("sample row needs 11 fields, got {}: `{row}`", f.len()),
        ));
    }
    let id = f[0].to_string();
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::sample(&id, format!("cannot parse number `{s}`")))
    };
    let maybe = |s: &str| -> Result<Option<f64>> { if s == "-" { Ok(None) } else { num(s).map(Some) } };
    let frames: usize = f[1]
        .parse()
        .map_err(|_| Error::sample(&id, format!("bad frame count `{}`", f[1])))?;
    let tokens: usize = f[2]
        .parse()
        .map_err(|_| Error::sample(&id, format!("bad token count `{}`", f[2])))?;
    let fps = num(f[3])?;
    let video = read_blob(&dir.join(f[4]), frames * dv, &id)?;
    let query = read_blob(&dir.join(f[5]), tokens * dq, &id)?;
    let sentence = match (f[6], ds) {
        ("-", 0) => None,
        ("-", _) => return Err(Error::sample(&id, "corpus declares sentence embeddings but none given")),
        (_, 0) => return Err(Error::sample(&id, "sentence blob given but dim_sentence is 0")),
        (p, d) => Some(read_blob(&dir.join(p), d, &id)?),
    };
    let gt = match (maybe(f[7])?, maybe(f[8])?) {
        (Some(s), Some(e)) => Some(Interval::new(s, e)),
        (None, None) => None,
        _ => return Err(Error::sample(&id, "ground truth needs both start and end")),
    };
    let label = match (maybe(f[9])?, maybe(f[10])?) {
        (Some(c), Some(r)) => Some(PartialLabel::new(c, r)),
        (None, None) => None,
        _ => return Err(Error::sample(&id, "partial label needs both center and range")),
    };
    Ok(SampleRecord {
        video: Tensor::new(vec![frames, dv], video)?,
        query: Tensor::new(vec![tokens, dq], query)?,
        id,
        sentence,
        gt,
        label,
        fps,
    })
}
