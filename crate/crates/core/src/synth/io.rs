use std::fs;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dequantize, quantize, DomainSpec, SceneSample, CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GroundTruth};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Image path relative to the manifest directory.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domain_id: String,
    pub seed: u64,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub spec: DomainSpec,
    /// Annotation file relative to the manifest directory.
    pub annotations: String,
    pub records: Vec<ManifestRecord>,
    /// Resolved run configuration, when written by the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image: String,
    boxes: Vec<[f32; 4]>,
    classes: Vec<usize>,
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != CHANNELS {
        return Err(Error::Dimension {
            op: "save_png",
            lhs: shape.to_vec(),
            rhs: vec![CHANNELS],
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut bytes = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                bytes.push(quantize(data[(c * h + y) * w + x]));
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into a `[3, H, W]` tensor.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit RGB"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0f32; CHANNELS * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..CHANNELS {
                data[(c * h + y) * w + x] = dequantize(row[x * CHANNELS + c]);
            }
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes PNG images under `images/`, a JSON-lines annotation file and the
/// manifest itself. Paths inside the manifest are relative to its directory.
pub fn save_dataset(
    samples: &[SceneSample],
    spec: &DomainSpec,
    seed: u64,
    manifest_path: &Path,
    config: Option<serde_json::Value>,
) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Validation("cannot save an empty dataset".into()))?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut records = Vec::with_capacity(samples.len());
    let mut jsonl = String::new();
    for s in samples {
        let rel = format!("images/{}.png", s.sample_id);
        save_png(&dir.join(&rel), &s.image)?;
        let ann = AnnotationRecord {
            image: rel.clone(),
            boxes: s.ground_truth.iter().map(|g| g.bbox.to_array()).collect(),
            classes: s.ground_truth.iter().map(|g| g.class_id).collect(),
        };
        jsonl.push_str(&serde_json::to_string(&ann).expect("annotation serializes"));
        jsonl.push('\n');
        records.push(ManifestRecord {
            sample_id: s.sample_id.clone(),
            image: rel,
        });
    }
    write_text(&dir.join(ANNOTATIONS_FILE), &jsonl)?;

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        domain_id: spec.domain_id.clone(),
        seed,
        image_size: [first.height(), first.width()],
        spec: spec.clone(),
        annotations: ANNOTATIONS_FILE.into(),
        records,
        config,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(manifest_path, &text)?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Incompatible {
            path: manifest_path.into(),
            expected: MANIFEST_VERSION,
            found: manifest.format_version,
        });
    }
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ann_path = dir.join(&manifest.annotations);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut annotations = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&ann_path, format!("line {}: {e}", n + 1)))?;
        annotations.push(rec);
    }
    if annotations.len() != manifest.records.len() {
        return Err(Error::Validation(format!(
            "{}: {} annotation records for {} images",
            ann_path.display(),
            annotations.len(),
            manifest.records.len()
        )));
    }

    let [h, w] = manifest.image_size;
    let mut samples = Vec::with_capacity(annotations.len());
    for (rec, ann) in manifest.records.iter().zip(annotations) {
        if rec.image != ann.image {
            return Err(Error::Validation(format!(
                "{}: annotation for `{}` where `{}` was expected",
                ann_path.display(),
                ann.image,
                rec.image
            )));
        }
        if ann.boxes.len() != ann.classes.len() {
            return Err(Error::Validation(format!(
                "{}: `{}` has {} boxes but {} classes",
                ann_path.display(),
                ann.image,
                ann.boxes.len(),
                ann.classes.len()
            )));
        }
        let image_path = dir.join(&rec.image);
        let image = load_png(&image_path)?;
        if image.shape() != [CHANNELS, h, w] {
            return Err(Error::format(&image_path, format!("expected {h}x{w} RGB")));
        }
        let ground_truth = ann
            .boxes
            .iter()
            .zip(&ann.classes)
            .map(|(b, &class_id)| GroundTruth {
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
                class_id,
            })
            .collect();
        samples.push(SceneSample {
            sample_id: rec.sample_id.clone(),
            image,
            ground_truth,
        });
    }
    Ok((manifest, samples))
}

/// Appends a line to a file; used by tests that corrupt annotation files.
#[cfg(test)]
fn append_line(path: &Path, line: &str) {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(path).unwrap();
    writeln!(f, "{line}").unwrap();
}
