use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Whole file contents, transparently gunzipped when the gzip magic is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::load(path, format!("bad gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::load(path, "truncated header"))
}

/// Loads an IDX image file (`0x00000803`) and its label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]`; the class count is `max label + 1`
/// (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::load(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * dim {
        return Err(Error::load(
            images_path,
            format!(
                "truncated: header promises {n} images of {rows}x{cols}, found {} pixel bytes",
                pixels.len()
            ),
        ));
    }

    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::load(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(Error::load(
            labels_path,
            format!(
                "truncated: header promises {label_count} labels, found {}",
                label_bytes.len()
            ),
        ));
    }
    if label_count != n {
        return Err(Error::load(
            labels_path,
            format!("count mismatch: {label_count} labels for {n} images"),
        ));
    }

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let ys: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::clean(Tensor2::from_vec(n, dim, features)?, &ys, classes)
}

/// Reads `f0,...,f{d-1},label` CSV with a header row.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::load(path, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 || header.get(width - 1) != Some("label") {
        return Err(Error::load(path, "header must be f0..f{d-1},label"));
    }
    for (j, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::load(
                path,
                format!("column {j} is named {name:?}, expected \"f{j}\""),
            ));
        }
    }
    let dim = width - 1;
    let mut data = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let bad = |what: &str| Error::load(path, format!("data row {}: {what}", line + 1));
        if rec.len() != width {
            return Err(bad("wrong number of fields"));
        }
        for field in rec.iter().take(dim) {
            let v: f64 = field.trim().parse().map_err(|_| bad("unparsable feature"))?;
            if !v.is_finite() {
                return Err(bad("non-finite feature"));
            }
            data.push(v);
        }
        ys.push(
            rec[dim]
                .trim()
                .parse::<usize>()
                .map_err(|_| bad("label is not a class index"))?,
        );
    }
    let n = ys.len();
    let classes = ys.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::clean(Tensor2::from_vec(n, dim, data)?, &ys, classes)
}

/// Writes features and true labels in the format [`load_csv`] reads.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::load(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(err)?;
    for (row, rec) in dataset.features.row_iter().zip(&dataset.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        fields.push(rec.true_label.to_string());
        w.write_record(&fields).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
