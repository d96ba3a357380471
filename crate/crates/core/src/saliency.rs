//! Saliency maps: full, per-feature, and partial (confounder-free).
//!
//! The full map is `|ds/dI_v|`. Because the score depends on the image only
//! through the encoder features, the signed gradient splits into one term
//! per feature, `(ds/df^j) * (df^j/dI_v)`. The partial map keeps only the
//! terms of retained features. It is computed two independent ways:
//!
//! * [`partial_saliency_map`] zeroes the adjoint of masked features at the
//!   feature node during a single reverse pass;
//! * [`RefactorizedModel`] inserts a blend layer that replaces masked
//!   features by per-image constants, then runs the ordinary full reverse
//!   pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::convnet::{FeatureBlend, ForwardPass, Model};
use crate::error::{Error, Result};
use crate::glm::ConfoundMask;
use crate::synthdata::{block_mask, Block};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMode {
    Full,
    Partial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Row-major, non-negative.
    values: Vec<f64>,
    height: usize,
    width: usize,
    pub subject: Option<usize>,
    pub mode: SaliencyMode,
    pub mask_id: Option<String>,
}

impl SaliencyMap {
    pub fn from_signed(gradient: &Tensor, mode: SaliencyMode) -> Result<Self> {
        let (h, w) = spatial(gradient)?;
        Ok(Self {
            values: gradient.data().iter().map(|v| v.abs()).collect(),
            height: h,
            width: w,
            subject: None,
            mode,
            mask_id: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Full-precision CSV grid, one image row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain-text 8-bit graymap, scaled so the map maximum is 255.
    pub fn to_pgm(&self) -> String {
        let max = self.max();
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row
                .iter()
                .map(|&v| {
                    let level = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                    (level as u8).to_string()
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        _ => Err(Error::Shape(format!(
            "saliency needs a single-channel image, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_mask(model: &Model, mask: &ConfoundMask) -> Result<()> {
    if mask.len() != model.feature_dim() {
        return Err(Error::Shape(format!(
            "mask has {} bits, model has {} features",
            mask.len(),
            model.feature_dim()
        )));
    }
    Ok(())
}

fn forward_checked(model: &Model, image: &Tensor) -> Result<ForwardPass> {
    spatial(image)?;
    model.forward(image)
}

/// Signed `ds/dI`.
pub fn input_gradient(model: &Model, image: &Tensor) -> Result<Tensor> {
    let pass = forward_checked(model, image)?;
    let g = pass.tape.backward(pass.score)?;
    Ok(g.get(pass.input).clone())
}

pub fn saliency_map(model: &Model, image: &Tensor) -> Result<SaliencyMap> {
    SaliencyMap::from_signed(&input_gradient(model, image)?, SaliencyMode::Full)
}

/// `ds/df^j` for every feature.
pub fn feature_sensitivities(model: &Model, image: &Tensor) -> Result<Vec<f64>> {
    let pass = forward_checked(model, image)?;
    let g = pass.tape.backward(pass.score)?;
    Ok(g.get(pass.features).data().to_vec())
}

/// `df^j/dI`, from a reverse pass seeded with the unit vector `e_j` at the
/// feature node.
pub fn feature_jacobian_row(model: &Model, image: &Tensor, j: usize) -> Result<Tensor> {
    let m = model.feature_dim();
    if j >= m {
        return Err(Error::Index { index: j, len: m });
    }
    let pass = forward_checked(model, image)?;
    let mut seed = Tensor::zeros(&[m]);
    seed.data_mut()[j] = 1.0;
    let g = pass.tape.backward_from(pass.features, seed)?;
    Ok(g.get(pass.input).clone())
}

/// Signed gradient with masked features' adjoints zeroed at the feature node.
pub fn partial_input_gradient(model: &Model, image: &Tensor, mask: &ConfoundMask) -> Result<Tensor> {
    check_mask(model, mask)?;
    let pass = forward_checked(model, image)?;
    let weights = mask.as_weights();
    let g = pass
        .tape
        .backward_with(pass.score, Tensor::scalar(1.0), &[(pass.features, &weights)])?;
    Ok(g.get(pass.input).clone())
}

pub fn partial_saliency_map(model: &Model, image: &Tensor, mask: &ConfoundMask) -> Result<SaliencyMap> {
    let mut map = SaliencyMap::from_signed(&partial_input_gradient(model, image, mask)?, SaliencyMode::Partial)?;
    map.mask_id = Some(mask.to_bit_string());
    Ok(map)
}

/// Model with a blend layer after the encoder that freezes masked features
/// to their values on one subject's image.
#[derive(Debug, Clone)]
pub struct RefactorizedModel<'a> {
    pub base: &'a Model,
    pub constants: Vec<f64>,
    pub mask: Vec<f64>,
    pub subject: Option<usize>,
}

pub fn refactorize_model<'a>(
    model: &'a Model,
    image: &Tensor,
    mask: &ConfoundMask,
    subject: Option<usize>,
) -> Result<RefactorizedModel<'a>> {
    check_mask(model, mask)?;
    let pass = forward_checked(model, image)?;
    Ok(RefactorizedModel {
        base: model,
        constants: pass.features().data().to_vec(),
        mask: mask.as_weights(),
        subject,
    })
}

impl RefactorizedModel<'_> {
    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        self.base.forward_with(
            image,
            Some(FeatureBlend {
                mask: &self.mask,
                constants: &self.constants,
            }),
        )
    }

    /// Ordinary full back-propagation through the refactorized network.
    pub fn input_gradient(&self, image: &Tensor) -> Result<Tensor> {
        let pass = self.forward(image)?;
        let g = pass.tape.backward(pass.score)?;
        Ok(g.get(pass.input).clone())
    }

    pub fn saliency_map(&self, image: &Tensor) -> Result<SaliencyMap> {
        let mut map = SaliencyMap::from_signed(&self.input_gradient(image)?, SaliencyMode::Partial)?;
        map.subject = self.subject;
        map.mask_id = Some(
            self.mask
                .iter()
                .map(|&b| if b == 1.0 { '1' } else { '0' })
                .collect(),
        );
        Ok(map)
    }
}

/// Pointwise mean over maps of equal shape and mode, summed in list order.
pub fn average_saliency(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("cannot average an empty list of maps".into()))?;
    let mut sum = vec![0.0; first.values.len()];
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::Shape(format!(
                "map of {}x{} averaged with {}x{}",
                m.height, m.width, first.height, first.width
            )));
        }
        if m.mode != first.mode {
            return Err(Error::Validation("cannot average full and partial maps".into()));
        }
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    let n = maps.len() as f64;
    Ok(SaliencyMap {
        values: sum.into_iter().map(|s| s / n).collect(),
        height: first.height,
        width: first.width,
        subject: None,
        mode: first.mode,
        mask_id: first.mask_id.clone(),
    })
}

/// Mean saliency over the pixels of each block.
pub fn block_saliency_stats(map: &SaliencyMap, blocks: &[Block]) -> Result<Vec<f64>> {
    blocks
        .iter()
        .map(|&b| region_mean(map, &block_mask(b)))
        .collect()
}

pub fn region_mean(map: &SaliencyMap, pixels: &[(usize, usize)]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Validation("empty region".into()));
    }
    let mut acc = 0.0;
    for &(r, c) in pixels {
        if r >= map.height || c >= map.width {
            return Err(Error::Index {
                index: r * map.width + c,
                len: map.values.len(),
            });
        }
        acc += map.get(r, c);
    }
    Ok(acc / pixels.len() as f64)
}
