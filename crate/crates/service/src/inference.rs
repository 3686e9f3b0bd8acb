//! Raster-level inference shared by the CLI and the HTTP API.

use lomit::imageio::{self, MaskRaster, Raster};
use lomit::networks::{MaskOverrides, ModelBundle};
use lomit::{LomitError, Result};

/// Input and exemplar decoded to the model resolution.
#[derive(Debug)]
pub struct ImagePair {
    pub input: Raster,
    pub exemplar: Raster,
    /// Names of the images that were resized to fit the model.
    pub resized: Vec<&'static str>,
}

/// Decodes both images, rejecting pairs whose original sizes differ, and
/// resizes them to `resolution` when needed.
pub fn decode_pair(input: &[u8], exemplar: &[u8], resolution: u32) -> Result<ImagePair> {
    let (raw_in, _) = imageio::decode_image(input, None)?;
    let (raw_ex, _) = imageio::decode_image(exemplar, None)?;
    if (raw_in.height, raw_in.width) != (raw_ex.height, raw_ex.width) {
        return Err(LomitError::Dimension(format!(
            "input is {}x{} but exemplar is {}x{}",
            raw_in.height, raw_in.width, raw_ex.height, raw_ex.width
        )));
    }
    let (input, in_resized) = imageio::decode_image(input, Some(resolution))?;
    let (exemplar, ex_resized) = imageio::decode_image(exemplar, Some(resolution))?;
    let resized = [("input", in_resized), ("exemplar", ex_resized)]
        .into_iter()
        .filter_map(|(name, r)| r.then_some(name))
        .collect();
    Ok(ImagePair {
        input,
        exemplar,
        resized,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslateOutput {
    pub output: Raster,
    /// Masks exactly as consumed by the pipeline.
    pub input_mask: MaskRaster,
    pub exemplar_mask: MaskRaster,
}

/// Translates `input` toward `exemplar`, replacing the extracted masks with
/// any overrides.
pub fn translate(
    model: &ModelBundle,
    input: &Raster,
    exemplar: &Raster,
    input_mask: Option<&MaskRaster>,
    exemplar_mask: Option<&MaskRaster>,
) -> Result<TranslateOutput> {
    tch::no_grad(|| {
        let overrides = MaskOverrides {
            input: input_mask.map(MaskRaster::to_tensor),
            exemplar: exemplar_mask.map(MaskRaster::to_tensor),
        };
        let t = model.translate(&input.to_tensor(), &exemplar.to_tensor(), overrides)?;
        let output = Raster::from_tensor(&t.output, 0)?;
        check_finite(&output.pixels)?;
        Ok(TranslateOutput {
            output,
            input_mask: input_mask
                .cloned()
                .map_or_else(|| MaskRaster::from_tensor(&t.input_mask, 0), Ok)?,
            exemplar_mask: exemplar_mask
                .cloned()
                .map_or_else(|| MaskRaster::from_tensor(&t.exemplar_mask, 0), Ok)?,
        })
    })
}

/// The attention network's mask for one image.
pub fn extract_mask(model: &ModelBundle, image: &Raster) -> Result<MaskRaster> {
    tch::no_grad(|| MaskRaster::from_tensor(&model.extract_mask(&image.to_tensor())?, 0))
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(LomitError::Numeric(format!("translation produced {v}"))),
        None => Ok(()),
    }
}
