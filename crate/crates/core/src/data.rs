//! Datasets, superclass partitions and train/val/test splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EasError, Result};
use crate::substrate::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superclass {
    pub name: String,
    pub classes: Vec<usize>,
}

/// Disjoint grouping of class indices into superclasses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperclassPartition {
    pub superclasses: Vec<Superclass>,
}

impl SuperclassPartition {
    /// `count` superclasses of `size` consecutive classes each.
    pub fn contiguous(count: usize, size: usize) -> Self {
        SuperclassPartition {
            superclasses: (0..count)
                .map(|t| Superclass { name: format!("superclass-{t}"), classes: (t * size..(t + 1) * size).collect() })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EasError::Partition(format!("cannot read partition {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    pub fn len(&self) -> usize {
        self.superclasses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superclasses.is_empty()
    }

    pub fn classes(&self, t: usize) -> Result<&[usize]> {
        self.superclasses
            .get(t)
            .map(|s| s.classes.as_slice())
            .ok_or(EasError::UnknownSuperclass { index: t, count: self.len() })
    }

    /// Checks that the groups are disjoint and cover exactly `0..classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(EasError::Partition("partition has no superclasses".into()));
        }
        let mut owner = vec![None; classes];
        for (t, s) in self.superclasses.iter().enumerate() {
            if s.classes.is_empty() {
                return Err(EasError::Partition(format!("superclass `{}` is empty", s.name)));
            }
            for &c in &s.classes {
                let slot = owner.get_mut(c).ok_or_else(|| {
                    EasError::Partition(format!("superclass `{}` references class {c}, but the data has {classes} classes", s.name))
                })?;
                if let Some(prev) = slot.replace(t) {
                    return Err(EasError::Partition(format!(
                        "class {c} belongs to both `{}` and `{}`",
                        self.superclasses[prev].name, s.name
                    )));
                }
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(EasError::Partition(format!("class {c} belongs to no superclass")));
        }
        Ok(())
    }

    /// Superclass index of every class.
    pub fn superclass_of(&self, classes: usize) -> Result<Vec<usize>> {
        self.validate(classes)?;
        let mut out = vec![0; classes];
        for (t, s) in self.superclasses.iter().enumerate() {
            for &c in &s.classes {
                out[c] = t;
            }
        }
        Ok(out)
    }

    /// Class-level mask keeping only superclass `t`.
    pub fn class_mask(&self, t: usize, classes: usize) -> Result<Vec<bool>> {
        let mut m = vec![false; classes];
        for &c in self.classes(t)? {
            m[c] = true;
        }
        Ok(m)
    }
}

/// Labeled images, `[n, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        (Tensor::new(shape, data).unwrap(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.gather(idx);
        Dataset { images, labels, classes: self.classes }
    }

    /// Indices of samples whose class is in `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

impl Splits {
    pub fn classes(&self) -> usize {
        self.train.classes
    }
}

/// Seeded Gaussian class prototypes. Classes of one superclass share a smooth
/// base pattern and differ by a smaller class-specific pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Consecutive classes per superclass for the shared base pattern.
    pub classes_per_superclass: usize,
    pub samples_per_class: usize,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    pub resolution: [usize; 3],
    /// Scale of the class-specific pattern relative to the superclass base.
    pub class_scale: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 12,
            classes_per_superclass: 3,
            samples_per_class: 300,
            split: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            resolution: [32, 32, 3],
            class_scale: 0.6,
            noise: 0.8,
            seed: 0,
        }
    }
}

/// Bilinear upsampling of a `[g, g, c]` grid to `[h, w, c]`.
fn upsample(grid: &[f64], g: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * c);
    let coord = |i: usize, n: usize| {
        let p = (i as f64 + 0.5) * g as f64 / n as f64 - 0.5;
        let p = p.clamp(0.0, (g - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(g - 1), p - lo as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| grid[(yy * g + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn split_counts(n: usize, split: [f64; 3]) -> [usize; 3] {
    let total: f64 = split.iter().sum();
    let tr = (n as f64 * split[0] / total).round() as usize;
    let va = (n as f64 * split[1] / total).round() as usize;
    let tr = tr.min(n);
    let va = va.min(n - tr);
    [tr, va, n - tr - va]
}

/// Stratified per-class split with a seeded shuffle.
fn split_by_class(images: Tensor, labels: Vec<usize>, classes: usize, split: [f64; 3], seed: u64) -> Result<Splits> {
    let all = Dataset { images, labels, classes };
    let mut rng = RngStream::new(seed).fork("split");
    let mut parts: [Vec<usize>; 3] = Default::default();
    for c in 0..classes {
        let mut idx = all.indices_of(&[c]);
        if idx.is_empty() {
            return Err(EasError::Dataset(format!("class {c} has no samples")));
        }
        idx.shuffle(&mut rng);
        let [tr, va, _] = split_counts(idx.len(), split);
        parts[0].extend_from_slice(&idx[..tr]);
        parts[1].extend_from_slice(&idx[tr..tr + va]);
        parts[2].extend_from_slice(&idx[tr + va..]);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(Splits { train: all.subset(&parts[0]), val: all.subset(&parts[1]), test: all.subset(&parts[2]), seed })
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.classes_per_superclass == 0 {
        return Err(EasError::Dataset("synthetic dataset needs positive class and sample counts".into()));
    }
    let [h, w, c] = spec.resolution;
    let root = RngStream::new(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let grid = 4;
    let pattern = |label: &str, i: usize, scale: f64| {
        let mut r = root.fork_indexed(label, i);
        let coarse: Vec<f64> = (0..grid * grid * c).map(|_| normal.sample(&mut r) * scale).collect();
        upsample(&coarse, grid, h, w, c)
    };
    let supers = spec.classes.div_ceil(spec.classes_per_superclass);
    let bases: Vec<Vec<f64>> = (0..supers).map(|t| pattern("superclass", t, 1.0)).collect();
    let per = h * w * c;
    let mut data = Vec::with_capacity(spec.classes * spec.samples_per_class * per);
    let mut labels = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let noise = Normal::new(0.0, spec.noise).unwrap();
    for class in 0..spec.classes {
        let own = pattern("class", class, spec.class_scale);
        let base = &bases[class / spec.classes_per_superclass];
        let mut r = root.fork_indexed("samples", class);
        for _ in 0..spec.samples_per_class {
            let gain = 1.0 + 0.2 * r.random_range(-1.0..1.0);
            for i in 0..per {
                data.push(((base[i] + own[i]) * gain + noise.sample(&mut r)) as f32);
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![labels.len(), h, w, c], data)?;
    split_by_class(images, labels, spec.classes, spec.split, spec.seed)
}

/// Loads `root/<class>/<image>` folders, sorted by name, resized to `resolution`
/// and scaled to `[-1, 1]`.
pub fn from_directory(root: &Path, resolution: [usize; 3], split: [f64; 3], seed: u64) -> Result<Splits> {
    let [h, w, c] = resolution;
    if c != 3 {
        return Err(EasError::Dataset("directory datasets are read as RGB".into()));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(EasError::Dataset(format!("{} has no class folders", root.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| EasError::Dataset(format!("cannot decode {}: {e}", f.display())))?
                .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            data.extend(img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![labels.len(), h, w, c], data)?;
    split_by_class(images, labels, dirs.len(), split, seed)
}
