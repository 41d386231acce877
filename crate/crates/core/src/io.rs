//! On-disk formats: sequence directories, ground-truth files, JSON-lines
//! logs and score-map dumps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BBox;
use crate::synthetic::Sequence;
use crate::tracker::{FrameMaps, FrameResult};

/// Ground-truth file names recognized inside a sequence directory.
pub const GT_NAMES: &[&str] = &["groundtruth.txt", "groundtruth_rect.txt"];

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

/// Parse `x,y,w,h` lines (commas, tabs or spaces). Blank lines are skipped.
pub fn parse_gt(text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("ground truth line {}: {e}", n + 1)))?;
        let [x, y, w, h] = vals[..] else {
            return Err(Error::data(format!(
                "ground truth line {}: expected 4 values, got {}",
                n + 1,
                vals.len()
            )));
        };
        if !(w >= 0.0 && h >= 0.0) || !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!("ground truth line {}: invalid box", n + 1)));
        }
        out.push(BBox::from_xywh(x, y, w, h)?);
    }
    Ok(out)
}

pub fn read_gt(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    parse_gt(&text)
}

pub fn format_gt(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.to_xywh();
        s.push_str(&format!("{x},{y},{w},{h}\n"));
    }
    s
}

/// An OTB-style sequence on disk: ordered image files plus ground truth.
/// `gt` is empty when the directory has no ground-truth file.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDir {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub gt: Vec<BBox>,
}

impl SequenceDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
        let mut frames = Vec::new();
        for e in entries {
            let p = e.map_err(io_err(dir))?.path();
            let is_image = p
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()));
            if is_image {
                frames.push(p);
            }
        }
        frames.sort();
        if frames.is_empty() {
            return Err(Error::data(format!("no image files in {}", dir.display())));
        }
        let gt = match GT_NAMES.iter().map(|n| dir.join(n)).find(|p| p.is_file()) {
            Some(p) => read_gt(&p)?,
            None => Vec::new(),
        };
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self { name, frames, gt })
    }

    /// Frames decoded lazily, in order.
    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        self.frames.iter().map(|p| Frame::load(p))
    }
}

/// Write frames as zero-padded PNGs plus `groundtruth.txt`.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_png(&dir.join(format!("{:05}.png", i + 1)))?;
    }
    let gt = dir.join(GT_NAMES[0]);
    std::fs::write(&gt, format_gt(&seq.boxes)).map_err(io_err(&gt))
}

/// Buffered JSON-lines output.
pub struct JsonLinesWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLinesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::data(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_results(path: &Path, results: &[FrameResult]) -> Result<()> {
    let mut w = JsonLinesWriter::create(path)?;
    for r in results {
        w.write(r)?;
    }
    w.finish()
}

pub fn read_results(path: &Path) -> Result<Vec<FrameResult>> {
    read_json_lines(path)
}

/// Header preceding each score-map record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub frame: usize,
    /// `[maps, height, width]`.
    pub shape: [usize; 3],
    pub names: Vec<String>,
    /// Element type of the payload; always little-endian f32.
    pub dtype: String,
}

/// Append-only score-map dump: per frame a `u32` header length, a JSON
/// [`MapHeader`], then `maps * height * width` little-endian `f32` values.
pub struct MapDumpWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MapDumpWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write(&mut self, frame: usize, maps: &FrameMaps) -> Result<()> {
        let header = MapHeader {
            frame,
            shape: [3, maps.cls.height, maps.cls.width],
            names: vec!["cls".into(), "loc".into(), "combined".into()],
            dtype: "<f4".into(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let mut buf = Vec::with_capacity(4 + json.len() + 12 * maps.cls.len());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for m in [&maps.cls, &maps.loc, &maps.combined] {
            for v in &m.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        self.out.write_all(&buf).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_map_dump(path: &Path) -> Result<Vec<(MapHeader, Vec<f32>)>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = || Error::data(format!("{} is not a valid map dump", path.display()));
    let mut at = 0;
    let mut out = Vec::new();
    while at < bytes.len() {
        let len = u32::from_le_bytes(bytes.get(at..at + 4).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
        at += 4;
        let header: MapHeader = serde_json::from_slice(bytes.get(at..at + len).ok_or_else(bad)?).map_err(|_| bad())?;
        at += len;
        let n: usize = header.shape.iter().product();
        let data = bytes
            .get(at..at + 4 * n)
            .ok_or_else(bad)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        out.push((header, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_parsing() {
        let b = parse_gt("1,2,3,4\n\n5\t6 7,8\n").unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].to_xywh(), [5.0, 6.0, 7.0, 8.0]);
        assert!(matches!(parse_gt("1,2,3\n"), Err(Error::Data(_))));
        assert!(matches!(parse_gt("1,2,x,4\n"), Err(Error::Data(_))));
        assert!(matches!(parse_gt("1,2,-3,4\n"), Err(Error::Data(_))));
    }

    #[test]
    fn gt_format_round_trips() {
        let boxes = vec![BBox::from_xywh(0.1, 2.0 / 3.0, 10.25, 7.0).unwrap()];
        assert_eq!(parse_gt(&format_gt(&boxes)).unwrap(), boxes);
    }
}
