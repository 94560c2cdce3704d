//! JSONL pair annotations and the sidecar patch container.
//!
//! One record per line:
//!
//! ```json
//! {"image": "imgs/0001.jpg", "width": 640, "height": 480,
//!  "box1": [cx, cy, w, h], "box2": [cx, cy, w, h], "label": 1}
//! ```
//!
//! `image` is a path relative to the dataset root, or `synthetic:<id>` to
//! refer to pair `id` in the root's `patches.bin`, which holds patches
//! `2 * id` and `2 * id + 1`.
//!
//! Patch container layout (little-endian): magic `"MGZP"`, `u32` version,
//! `u64` patch count, `u32` channels, `u32` height, `u32` width, then the
//! patches as row-major `f64` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::patch::{crop_head_patch, image_to_tensor};
use super::PairSample;
use crate::error::{Error, Result};
use crate::geometry::{needs_swap, HeadBox, ImageDims};
use crate::model::PATCH_SIZE;
use crate::nn::Tensor;

pub const PATCH_FILE: &str = "patches.bin";
const PATCH_MAGIC: &[u8; 4] = b"MGZP";
const PATCH_VERSION: u32 = 1;
const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub box1: [f64; 4],
    pub box2: [f64; 4],
    pub label: u8,
    /// Set when loading reordered the heads; patch lookups must swap too.
    #[serde(skip)]
    pub swapped: bool,
}

impl AnnotationRecord {
    pub fn dims(&self) -> Result<ImageDims> {
        ImageDims::new(self.width, self.height)
    }

    pub fn boxes(&self) -> Result<(HeadBox, HeadBox)> {
        let [a, b, c, d] = self.box1;
        let [e, f, g, h] = self.box2;
        Ok((HeadBox::new(a, b, c, d)?, HeadBox::new(e, f, g, h)?))
    }

    pub fn synthetic_id(&self) -> Option<&str> {
        self.image.strip_prefix(SYNTHETIC_PREFIX)
    }

    fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::InvalidValue(format!(
                "label must be 0 or 1, got {}",
                self.label
            )));
        }
        self.dims()?;
        self.boxes()?;
        if let Some(id) = self.synthetic_id() {
            id.parse::<u64>()
                .map_err(|_| Error::InvalidValue(format!("bad synthetic id {id:?}")))?;
        }
        Ok(())
    }

    /// Degenerate pairs have identical centers and areas; the direction
    /// between them is undefined for any focal length.
    fn is_degenerate(&self) -> bool {
        self.box1[0] == self.box2[0]
            && self.box1[1] == self.box2[1]
            && self.box1[2] * self.box1[3] == self.box2[2] * self.box2[3]
    }
}

/// Parse and validate an annotation file. Positive records with degenerate
/// geometry are dropped with a warning; heads are put in canonical order.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let root = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        if rec.synthetic_id().is_none() {
            let p = root.join(&rec.image);
            if !p.is_file() {
                return Err(Error::MissingImage(p));
            }
        }
        if rec.label == 1 && rec.is_degenerate() {
            log::warn!(
                "{}:{}: dropping positive pair with degenerate geometry",
                path.display(),
                i + 1
            );
            continue;
        }
        let (b1, b2) = rec.boxes()?;
        if needs_swap(&b1, &b2) {
            std::mem::swap(&mut rec.box1, &mut rec.box2);
            rec.swapped = true;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_patch_container(path: &Path, patches: &[&Tensor]) -> Result<()> {
    let shape = patches
        .first()
        .map(|p| p.shape().to_vec())
        .unwrap_or_else(|| vec![1, PATCH_SIZE, PATCH_SIZE]);
    if shape.len() != 3 || patches.iter().any(|p| p.shape() != shape) {
        return Err(Error::ShapeMismatch(
            "patches must share a [C, H, W] shape".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PATCH_MAGIC)?;
    w.write_u32::<LE>(PATCH_VERSION)?;
    w.write_u64::<LE>(patches.len() as u64)?;
    for d in &shape {
        w.write_u32::<LE>(*d as u32)?;
    }
    for p in patches {
        for &v in p.data() {
            w.write_f64::<LE>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_container(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |m: &str| Error::InvalidValue(format!("{}: {m}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATCH_MAGIC {
        return Err(bad("not a patch container"));
    }
    if r.read_u32::<LE>()? != PATCH_VERSION {
        return Err(bad("unsupported patch container version"));
    }
    let n = r.read_u64::<LE>()? as usize;
    let shape = [
        r.read_u32::<LE>()? as usize,
        r.read_u32::<LE>()? as usize,
        r.read_u32::<LE>()? as usize,
    ];
    let per: usize = shape.iter().product();
    if per == 0 {
        return Err(bad("empty patch shape"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = vec![0.0; per];
        r.read_f64_into::<LE>(&mut data)?;
        out.push(Tensor::new(shape.to_vec(), data)?);
    }
    Ok(out)
}

/// Load an annotation file and materialize its patches. Images are decoded
/// once each and converted to `channels` channels.
pub fn load_dataset(path: &Path, channels: usize) -> Result<Vec<PairSample>> {
    let root = path.parent().unwrap_or(Path::new("."));
    let records = load_annotations(path)?;
    let mut synthetic: Option<Vec<Tensor>> = None;
    let mut images: HashMap<PathBuf, Tensor> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let (b1, b2) = rec.boxes()?;
        let (p1, p2) = if let Some(id) = rec.synthetic_id() {
            let id: usize = id.parse().expect("validated at load");
            if synthetic.is_none() {
                synthetic = Some(read_patch_container(&root.join(PATCH_FILE))?);
            }
            let all = synthetic.as_ref().expect("just loaded");
            let (a, b) = (2 * id, 2 * id + 1);
            if b >= all.len() {
                return Err(Error::MissingImage(PathBuf::from(&rec.image)));
            }
            let (a, b) = if rec.swapped { (b, a) } else { (a, b) };
            (all[a].clone(), all[b].clone())
        } else {
            let p = root.join(&rec.image);
            if !images.contains_key(&p) {
                let img = image::open(&p).map_err(|e| match e {
                    image::ImageError::IoError(_) => Error::MissingImage(p.clone()),
                    other => Error::Image(other),
                })?;
                images.insert(p.clone(), image_to_tensor(&img, channels));
            }
            let img = &images[&p];
            (crop_head_patch(img, &b1), crop_head_patch(img, &b2))
        };
        if p1.shape()[0] != channels {
            return Err(Error::ShapeMismatch(format!(
                "patch has {} channels, expected {channels}",
                p1.shape()[0]
            )));
        }
        out.push(PairSample {
            patch1: p1,
            patch2: p2,
            box1: b1,
            box2: b2,
            dims: rec.dims()?,
            label: rec.label,
            true_gaze1: None,
            true_gaze2: None,
        });
    }
    Ok(out)
}

/// Write `samples` as a synthetic dataset file plus its sidecar patches;
/// record `i` refers to `synthetic:<first_id + i>`.
pub fn synthetic_records(samples: &[PairSample], first_id: usize) -> Vec<AnnotationRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| AnnotationRecord {
            image: format!("{SYNTHETIC_PREFIX}{}", first_id + i),
            width: s.dims.width,
            height: s.dims.height,
            box1: s.box1.as_array(),
            box2: s.box2.as_array(),
            label: s.label,
            swapped: false,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "a.jsonl", "");
        assert!(load_annotations(&p).unwrap().is_empty());
    }

    #[test]
    fn bad_label_reports_line() {
        let d = tempfile::tempdir().unwrap();
        let body = concat!(
            r#"{"image":"synthetic:0","width":10,"height":10,"box1":[1,1,2,2],"box2":[5,5,2,2],"label":0}"#,
            "\n",
            r#"{"image":"synthetic:1","width":10,"height":10,"box1":[1,1,2,2],"box2":[5,5,2,2],"label":2}"#,
            "\n"
        );
        let p = write(d.path(), "a.jsonl", body);
        match load_annotations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_bad_boxes_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "a.jsonl",
            r#"{"image":"synthetic:0","width":10,"height":10,"box1":[1,1,2,2],"box2":[5,5,2,2],"label":0,"extra":1}"#,
        );
        assert!(matches!(load_annotations(&p), Err(Error::Parse { .. })));
        let p = write(
            d.path(),
            "b.jsonl",
            r#"{"image":"synthetic:0","width":10,"height":10,"box1":[1,1,0,2],"box2":[5,5,2,2],"label":0}"#,
        );
        assert!(matches!(load_annotations(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn records_keep_file_order_and_drop_degenerate_positives() {
        let d = tempfile::tempdir().unwrap();
        let body = [
            r#"{"image":"synthetic:0","width":10,"height":10,"box1":[1,1,2,2],"box2":[5,5,2,2],"label":0}"#,
            r#"{"image":"synthetic:1","width":10,"height":10,"box1":[3,3,2,2],"box2":[3,3,2,2],"label":1}"#,
            r#"{"image":"synthetic:2","width":10,"height":10,"box1":[8,1,2,2],"box2":[2,5,2,2],"label":1}"#,
            r#"{"image":"synthetic:3","width":10,"height":10,"box1":[3,3,2,2],"box2":[3,3,2,2],"label":0}"#,
        ]
        .join("\n");
        let p = write(d.path(), "a.jsonl", &body);
        let recs = load_annotations(&p).unwrap();
        let ids: Vec<&str> = recs.iter().map(|r| r.image.as_str()).collect();
        assert_eq!(ids, ["synthetic:0", "synthetic:2", "synthetic:3"]);
        assert!(recs[1].swapped);
        assert_eq!(recs[1].box1, [2.0, 5.0, 2.0, 2.0]);
    }

    #[test]
    fn missing_image_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            d.path(),
            "a.jsonl",
            r#"{"image":"nope.png","width":10,"height":10,"box1":[1,1,2,2],"box2":[5,5,2,2],"label":0}"#,
        );
        assert!(matches!(load_annotations(&p), Err(Error::MissingImage(_))));
    }

    #[test]
    fn image_backed_dataset_crops_patches() {
        let d = tempfile::tempdir().unwrap();
        let img = image::GrayImage::from_pixel(100, 80, image::Luma([51]));
        img.save(d.path().join("frame.png")).unwrap();
        let p = write(
            d.path(),
            "a.jsonl",
            r#"{"image":"frame.png","width":100,"height":80,"box1":[30,40,32,32],"box2":[70,40,32,32],"label":1}"#,
        );
        let ds = load_dataset(&p, 1).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].patch1.shape(), &[1, 64, 64]);
        assert!(ds[0].patch1.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn synthetic_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let cfg = crate::data::SyntheticSceneConfig::default();
        let samples = crate::data::synth_make_dataset(&cfg, 3, 0.5).unwrap();
        let patches: Vec<&Tensor> = samples
            .iter()
            .flat_map(|s| [&s.patch1, &s.patch2])
            .collect();
        write_patch_container(&d.path().join(PATCH_FILE), &patches).unwrap();
        let p = d.path().join("train.jsonl");
        write_annotations(&p, &synthetic_records(&samples, 0)).unwrap();
        let back = load_dataset(&p, 1).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.patch1, b.patch1);
            assert_eq!(a.patch2, b.patch2);
            assert_eq!(a.box1, b.box1);
            assert_eq!(a.label, b.label);
        }
    }
}
