//! Datasets, image helpers and on-disk formats.

pub mod format;
pub mod synthetic;

use std::fs;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use format::{read_tensor, write_tensor, Checkpoint, DynTensor};
pub use synthetic::{gen_dataset, ShapeKind, SyntheticSpec};

/// Images (C×H×W) with binary multi-label targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    classes: usize,
    names: Vec<String>,
    images: Vec<Tensor<T>>,
    labels: Vec<Vec<u8>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(classes: usize) -> Self {
        Dataset {
            classes,
            names: Vec::new(),
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, image: Tensor<T>, labels: Vec<u8>) -> Result<()> {
        image.dims3()?;
        if labels.len() != self.classes {
            return Err(shape_err(format!(
                "label vector has {} entries, dataset has {} classes",
                labels.len(),
                self.classes
            )));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        self.names.push(name);
        self.images.push(image);
        self.labels.push(labels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes `images/<name>`, `labels.csv` and, when given, `spec.txt`.
    pub fn write_dir(&self, dir: &Path, spec: Option<&SyntheticSpec>) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let mut csv = String::from("filename");
        for c in 0..self.classes {
            csv.push_str(&format!(",c{c}"));
        }
        csv.push('\n');
        for ((name, img), y) in self.names.iter().zip(&self.images).zip(&self.labels) {
            write_tensor(&img_dir.join(name), img)?;
            csv.push_str(name);
            for v in y {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        fs::write(dir.join("labels.csv"), csv)?;
        if let Some(spec) = spec {
            let body: String = spec
                .to_pairs()
                .into_iter()
                .map(|(k, v)| format!("{k}={v}\n"))
                .collect();
            fs::write(dir.join("spec.txt"), body)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let csv = fs::read_to_string(dir.join("labels.csv"))?;
        let mut lines = csv.lines();
        let header = lines.next().ok_or(Error::Empty("labels.csv"))?;
        let classes = header.split(',').count().saturating_sub(1);
        if classes == 0 {
            return Err(Error::InvalidArgument("labels.csv has no class columns".into()));
        }
        let mut ds = Dataset::new(classes);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default().to_string();
            let labels = fields
                .map(|f| {
                    f.trim()
                        .parse::<u8>()
                        .map_err(|_| Error::InvalidArgument(format!("bad label `{f}` for {name}")))
                })
                .collect::<Result<Vec<u8>>>()?;
            let img = read_tensor(&dir.join("images").join(&name))?;
            ds.push(name, img, labels)?;
        }
        Ok(ds)
    }
}

/// Bilinear resize of a C×H×W image (pixel-center aligned).
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize to or from an empty image".into()));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    let src = img.data();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, T) {
        let pos = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, T::lit(pos - i0 as f64))
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, out_h, h);
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Resizes so the longer side equals `longest`, keeping the aspect ratio.
pub fn resize_longest<T: Scalar>(img: &Tensor<T>, longest: usize) -> Result<Tensor<T>> {
    let (_, h, w) = img.dims3()?;
    let (oh, ow) = if h >= w {
        (longest, ((w * longest) as f64 / h as f64).round().max(1.0) as usize)
    } else {
        (((h * longest) as f64 / w as f64).round().max(1.0) as usize, longest)
    };
    resize_bilinear(img, oh, ow)
}

pub fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for row in 0..c * h {
        for x in 0..w {
            dst[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
        let c = Tensor::<f64>::filled(&[2, 5, 7], 3.25);
        let r = resize_bilinear(&c, 9, 4).unwrap();
        assert_eq!(r.shape(), &[2, 9, 4]);
        assert!(r.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        let r = resize_longest(&c, 14).unwrap();
        assert_eq!(r.shape(), &[2, 10, 14]);
    }

    #[test]
    fn flip_reverses_columns() {
        let img = Tensor::from_vec(&[1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flip_horizontal(&img).unwrap().data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let mut ds = Dataset::<f64>::new(2);
        assert!(ds.push("a".into(), Tensor::zeros(&[1, 2, 2]), vec![1]).is_err());
        assert!(ds.push("a".into(), Tensor::zeros(&[1, 2, 2]), vec![2, 0]).is_err());
        assert!(ds.push("a".into(), Tensor::zeros(&[2, 2]), vec![1, 0]).is_err());
        assert!(ds.push("a".into(), Tensor::zeros(&[1, 2, 2]), vec![1, 0]).is_ok());
    }
}
