//! Two-group Gaussian-blob images with recorded blob widths.
//!
//! Every image is the sum of four unit-amplitude isotropic Gaussians, one
//! per quadrant. Group 1 draws each width from U(2, 6), Group 2 from
//! U(4, 8). The widths of the off-diagonal blobs (B, C) are the planted
//! confounders.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_index_seed, derive_seed};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const BLOCK_SIDE: usize = IMAGE_SIDE / 2;
pub const SIGMA_NAMES: [&str; 4] = ["sigma_A", "sigma_B", "sigma_C", "sigma_D"];
pub const CONFOUNDER_NAMES: [&str; 2] = ["sigma_B", "sigma_C"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    A,
    B,
    C,
    D,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::A, Block::B, Block::C, Block::D];

    fn origin(self) -> (usize, usize) {
        match self {
            Block::A => (0, 0),
            Block::B => (0, BLOCK_SIDE),
            Block::C => (BLOCK_SIDE, 0),
            Block::D => (BLOCK_SIDE, BLOCK_SIDE),
        }
    }

    pub fn center(self) -> (f64, f64) {
        let (r, c) = self.origin();
        ((r + BLOCK_SIDE / 2) as f64, (c + BLOCK_SIDE / 2) as f64)
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::A => "A",
            Block::B => "B",
            Block::C => "C",
            Block::D => "D",
        }
    }
}

/// The 16×16 quadrant of `block` as (row, col) pairs, row-major.
pub fn block_mask(block: Block) -> Vec<(usize, usize)> {
    let (r0, c0) = block.origin();
    (r0..r0 + BLOCK_SIDE)
        .flat_map(|r| (c0..c0 + BLOCK_SIDE).map(move |c| (r, c)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub center: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
}

impl BlobSpec {
    pub fn value_at(&self, row: usize, col: usize) -> f64 {
        let dr = row as f64 - self.center.0;
        let dc = col as f64 - self.center.1;
        self.amplitude * (-(dr * dr + dc * dc) / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Adds this blob, evaluated at integer pixel centers, onto `image`.
    pub fn render_into(&self, image: &mut [f64], side: usize) {
        for r in 0..side {
            for c in 0..side {
                image[r * side + c] += self.value_at(r, c);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    One,
    Two,
}

impl Group {
    pub fn label(self) -> u8 {
        match self {
            Group::One => 1,
            Group::Two => 2,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(Group::One),
            2 => Some(Group::Two),
            _ => None,
        }
    }

    /// Sampling interval of the blob widths.
    pub fn sigma_range(self) -> (f64, f64) {
        match self {
            Group::One => (2.0, 6.0),
            Group::Two => (4.0, 8.0),
        }
    }

    /// Binary classification target: Group 2 is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Group::One => 0.0,
            Group::Two => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub image: Tensor,
    pub group: Group,
    /// Widths of blobs A, B, C, D.
    pub sigmas: [f64; 4],
}

pub fn generate_image(group: Group, rng: &mut impl Rng) -> SyntheticRecord {
    let (lo, hi) = group.sigma_range();
    let mut sigmas = [0.0; 4];
    for s in sigmas.iter_mut() {
        *s = rng.random_range(lo..hi);
    }
    let mut pixels = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (block, &sigma) in Block::ALL.iter().zip(&sigmas) {
        BlobSpec {
            center: block.center(),
            sigma,
            amplitude: 1.0,
        }
        .render_into(&mut pixels, IMAGE_SIDE);
    }
    SyntheticRecord {
        image: Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], pixels).expect("image shape"),
        group,
        sigmas,
    }
}

/// One labelled image with its covariate values.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: usize,
    pub group: Group,
    pub covariates: Vec<f64>,
    /// Shape `[1, H, W]`.
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_records: usize,
    pub n_per_group: usize,
    pub seed: Option<u64>,
    pub height: usize,
    pub width: usize,
    pub covariate_names: Vec<String>,
    pub confounder_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// Names of the per-record covariate columns, in CSV order.
    pub covariate_names: Vec<String>,
    /// Default subset of covariates treated as confounders.
    pub confounder_names: Vec<String>,
    pub n_per_group: usize,
    pub seed: Option<u64>,
    pub height: usize,
    pub width: usize,
}

/// `2 * n_per_group` records: Group 1 first, then Group 2. Record `i` is
/// drawn from its own stream derived from `(seed, i)`, so records can be
/// generated in any order.
pub fn generate_dataset(n_per_group: usize, seed: u64) -> Result<Dataset> {
    if n_per_group == 0 {
        return Err(Error::Validation("n_per_group must be at least 1".into()));
    }
    let stage_seed = derive_seed(seed, "synth");
    let records = (0..2 * n_per_group)
        .map(|id| {
            let group = if id < n_per_group { Group::One } else { Group::Two };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_index_seed(stage_seed, id as u64));
            let rec = generate_image(group, &mut rng);
            Record {
                id,
                group,
                covariates: rec.sigmas.to_vec(),
                image: rec.image,
            }
        })
        .collect();
    Ok(Dataset {
        records,
        covariate_names: SIGMA_NAMES.iter().map(|s| s.to_string()).collect(),
        confounder_names: CONFOUNDER_NAMES.iter().map(|s| s.to_string()).collect(),
        n_per_group,
        seed: Some(seed),
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown confounder column `{name}` (available: {})",
                    self.covariate_names.join(", ")
                ))
            })
    }

    /// Covariate columns by name, each of length `len()`.
    pub fn covariate_columns(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        names
            .iter()
            .map(|name| {
                let idx = self.covariate_index(name)?;
                Ok(self.records.iter().map(|r| r.covariates[idx]).collect())
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: 1,
            n_records: self.records.len(),
            n_per_group: self.n_per_group,
            seed: self.seed,
            height: self.height,
            width: self.width,
            covariate_names: self.covariate_names.clone(),
            confounder_names: self.confounder_names.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.image.shape() != [1, self.height, self.width] {
                return Err(Error::Shape(format!(
                    "record {} has image shape {:?}, expected [1, {}, {}]",
                    r.id,
                    r.image.shape(),
                    self.height,
                    self.width
                )));
            }
            if r.covariates.len() != self.covariate_names.len() {
                return Err(Error::format(
                    "covariates",
                    format!("record {} has {} covariates", r.id, r.covariates.len()),
                ));
            }
        }
        for name in &self.confounder_names {
            self.covariate_index(name)?;
        }
        Ok(())
    }

    /// Writes `manifest.json` and `data.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

        let csv_path = dir.join("data.csv");
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(&csv_path, e);
        let mut header = vec!["id".to_string(), "group".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        header.extend((0..self.height * self.width).map(|i| format!("pixel_{i}")));
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for r in &self.records {
            let mut line = format!("{},{}", r.id, r.group.label());
            for v in r.covariates.iter().chain(r.image.data()) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest.json", e.to_string()))?;
        if manifest.format_version != 1 {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        let n_pixels = manifest.height * manifest.width;
        if n_pixels == 0 {
            return Err(Error::format("height", "image extents must be positive"));
        }

        let csv_path = dir.join("data.csv");
        let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("data.csv", "missing header"))?
            .map_err(|e| Error::io(&csv_path, e))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_cov = manifest.covariate_names.len();
        if cols.len() != 2 + n_cov + n_pixels {
            return Err(Error::format(
                "data.csv header",
                format!("expected {} columns, found {}", 2 + n_cov + n_pixels, cols.len()),
            ));
        }
        if cols[0] != "id" || cols[1] != "group" {
            return Err(Error::format("data.csv header", "must start with `id,group`"));
        }
        for (i, name) in manifest.covariate_names.iter().enumerate() {
            if cols[2 + i] != name {
                return Err(Error::format(
                    "data.csv header",
                    format!("column {} is `{}`, manifest says `{name}`", 2 + i, cols[2 + i]),
                ));
            }
        }

        let mut records = Vec::with_capacity(manifest.n_records);
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(&csv_path, e))?;
            if line.is_empty() {
                continue;
            }
            let row = lineno + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::format(
                    format!("data.csv line {row}"),
                    format!("expected {} fields, found {}", cols.len(), fields.len()),
                ));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| Error::format(format!("data.csv line {row} `id`"), fields[0]))?;
            let group = fields[1]
                .parse::<u8>()
                .ok()
                .and_then(Group::from_label)
                .ok_or_else(|| {
                    Error::format(format!("data.csv line {row} `group`"), "must be 1 or 2")
                })?;
            let mut values = Vec::with_capacity(n_cov + n_pixels);
            for (col, f) in cols.iter().zip(&fields).skip(2) {
                let v: f64 = f.parse().map_err(|_| {
                    Error::format(format!("data.csv line {row} `{col}`"), format!("bad number `{f}`"))
                })?;
                values.push(v);
            }
            let image = Tensor::new(vec![1, manifest.height, manifest.width], values.split_off(n_cov))?;
            records.push(Record {
                id,
                group,
                covariates: values,
                image,
            });
        }
        if records.len() != manifest.n_records {
            return Err(Error::format(
                "n_records",
                format!("manifest says {}, data.csv has {}", manifest.n_records, records.len()),
            ));
        }
        let ds = Dataset {
            records,
            covariate_names: manifest.covariate_names,
            confounder_names: manifest.confounder_names,
            n_per_group: manifest.n_per_group,
            seed: manifest.seed,
            height: manifest.height,
            width: manifest.width,
        };
        ds.validate()?;
        Ok(ds)
    }
}
