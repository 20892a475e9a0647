//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<name>.png
//! <root>/ann/<name>.json   {"points": [[x, y], ...], "meta": {...}}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::density::PointAnnotation;
use super::scene::SceneMeta;
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SceneMeta>,
}

/// Lazily readable dataset: names are listed up front in lexicographic
/// order; samples are decoded on demand, so disjoint index ranges can be
/// read by different workers.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    names: Vec<String>,
}

impl DatasetIndex {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::Dataset { path: root, message: "not a directory".into() });
        }
        let images = root.join("images");
        let mut names = Vec::new();
        if images.is_dir() {
            for entry in fs::read_dir(&images)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("png") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        names.push(stem.to_string());
                    }
                }
            }
        }
        names.sort();
        Ok(Self { root, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn load(&self, i: usize) -> Result<Sample> {
        let name = &self.names[i];
        let img_path = self.root.join("images").join(format!("{name}.png"));
        let ann_path = self.root.join("ann").join(format!("{name}.json"));
        if !ann_path.is_file() {
            return Err(Error::MissingAnnotation(ann_path));
        }
        let image = decode_image(&img_path)?;
        let text = fs::read_to_string(&ann_path)?;
        let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: ann_path.clone(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let points = PointAnnotation::new(ann.points.iter().map(|p| (p[0], p[1])).collect());
        let (h, w) = (image.shape()[1], image.shape()[2]);
        points.validate(h, w).map_err(|e| Error::Dataset { path: ann_path.clone(), message: e.to_string() })?;
        if let Some(meta) = &ann.meta {
            meta.validate().map_err(|e| Error::Dataset { path: ann_path.clone(), message: e.to_string() })?;
        }
        Ok(Sample { name: name.clone(), image, points, meta: ann.meta })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

/// Read a whole dataset into memory in lexicographic order.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    DatasetIndex::open(root)?.iter().collect()
}

/// Decode a PNG to a `(c, h, w)` tensor in `[0, 1]`; grey images give one
/// channel, everything else three (alpha is dropped).
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grey = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if grey {
        let buf = img.into_luma16();
        let data = buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Tensor::new(vec![1, h, w], data)
    } else {
        let buf = img.into_rgb16();
        let mut data = vec![0.0; 3 * h * w];
        for (i, p) in buf.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p.0[c] as f64 / 65535.0;
            }
        }
        Tensor::new(vec![3, h, w], data)
    }
}

/// Write a `(c, h, w)` tensor in `[0, 1]` as a 16-bit PNG.
pub fn encode_image(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("expected (c, h, w) image, got {s:?}"))),
    };
    let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let d = image.data();
    let wrap = |source| Error::Image { path: path.to_path_buf(), source };
    match c {
        1 => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([q(d[y as usize * w + x as usize])]));
            buf.save(path).map_err(wrap)
        }
        3 => {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
            });
            buf.save(path).map_err(wrap)
        }
        _ => Err(Error::Shape(format!("cannot encode {c}-channel image"))),
    }
}

/// Write samples in the on-disk layout under `root`.
pub fn write_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("ann"))?;
    for s in samples {
        encode_image(&s.image, &root.join("images").join(format!("{}.png", s.name)))?;
        let ann =
            AnnotationFile { points: s.points.points.iter().map(|&(x, y)| [x, y]).collect(), meta: s.meta.clone() };
        let text = serde_json::to_string(&ann).expect("annotation serialises");
        fs::write(root.join("ann").join(format!("{}.json", s.name)), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(name: &str, n: usize) -> Sample {
        Sample {
            name: name.into(),
            image: Tensor::full(&[1, 8, 8], 0.5),
            points: PointAnnotation::new((0..n).map(|i| (i as f64 % 8.0, 1.0)).collect()),
            meta: None,
        }
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn round_trip_counts_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("b", 0), sample("c", 15), sample("a", 2)]).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let got: Vec<(String, usize)> = loaded.iter().map(|s| (s.name.clone(), s.points.count())).collect();
        assert_eq!(got, vec![("a".into(), 2), ("b".into(), 0), ("c".into(), 15)]);
        assert!((loaded[0].image.data()[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn missing_annotation_names_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("x", 1)]).unwrap();
        fs::remove_file(dir.path().join("ann/x.json")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingAnnotation(p)) => assert!(p.ends_with("ann/x.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("x", 1)]).unwrap();
        fs::write(dir.path().join("ann/x.json"), "{\n  \"points\": [[1, 2],\n  oops\n}").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_annotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("x", 0)]).unwrap();
        fs::write(dir.path().join("ann/x.json"), r#"{"points": [[3, 9]]}"#).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset { .. })));
    }

    #[test]
    fn meta_time_is_hh_mm() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[sample("x", 0)]).unwrap();
        fs::write(
            dir.path().join("ann/x.json"),
            r#"{"points": [], "meta": {"level": 3, "time": "12:30", "weather": 1, "count": 0, "ratio": 0.4}}"#,
        )
        .unwrap();
        let s = load_dataset(dir.path()).unwrap().remove(0);
        assert_eq!(s.meta.unwrap().time.minutes(), 750);
    }
}
