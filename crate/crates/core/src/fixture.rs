//! Synthetic backbone pyramid and map padding helpers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{tensor_read, tensor_write};
use crate::pyramid::Pyramid;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `C2..C5` dims of the standard fixture.
pub const FIXTURE_DIMS: [[usize; 3]; 4] = [[16, 64, 64], [32, 32, 32], [64, 16, 16], [128, 8, 8]];
pub const FIXTURE_NAMES: [&str; 4] = ["C2", "C3", "C4", "C5"];
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

/// One SplitMix64 stream drawn in `C2, C3, C4, C5` order, values `2u − 1`.
pub fn backbone_with_dims(seed: u64, dims: [[usize; 3]; 4]) -> Result<Pyramid> {
    let mut rng = RngState::new(seed);
    let mut levels = Vec::with_capacity(4);
    for d in &dims {
        levels.push(Tensor::from_fn(d, |_| 2.0 * rng.next_f64() - 1.0)?);
    }
    Ok(Pyramid::new(levels.try_into().expect("four levels")))
}

pub fn backbone_fixture(seed: u64) -> Result<Pyramid> {
    backbone_with_dims(seed, FIXTURE_DIMS)
}

pub fn write_fixture(seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let pyramid = backbone_fixture(seed)?;
    let mut tensors = Vec::with_capacity(4);
    for (name, t) in FIXTURE_NAMES.iter().zip(&pyramid.levels) {
        let file = format!("{name}.tnsr");
        tensor_write(&out_dir.join(&file), t)?;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            file,
            dims: t.dims().to_vec(),
        });
    }
    let manifest = Manifest {
        seed,
        dtype: "float64".into(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

/// Reads `C2..C5` from a fixture directory. The manifest is used when
/// present, otherwise the conventional file names.
pub fn read_backbone(dir: &Path) -> Result<Pyramid> {
    let manifest_path = dir.join(MANIFEST);
    let files: Vec<String> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: e.column(),
            message: format!("manifest: {e}"),
        })?;
        if m.tensors.len() != 4 {
            return Err(Error::Pipeline {
                node: "backbone".into(),
                reason: format!("manifest lists {} tensors, expected 4", m.tensors.len()),
            });
        }
        m.tensors.into_iter().map(|e| e.file).collect()
    } else {
        FIXTURE_NAMES.iter().map(|n| format!("{n}.tnsr")).collect()
    };
    let mut levels = Vec::with_capacity(4);
    for (i, f) in files.iter().enumerate() {
        let path = dir.join(f);
        if !path.exists() {
            return Err(Error::Pipeline {
                node: format!("C{}", i + 2),
                reason: format!("missing input {}", path.display()),
            });
        }
        levels.push(tensor_read(&path)?);
    }
    Ok(Pyramid::new(levels.try_into().expect("four levels")))
}

/// Zero-pads bottom and right so `s` divides both spatial extents.
pub fn pad_to_multiple(f: &Tensor, s: usize) -> Result<Tensor> {
    let (c, h, w) = match f.dims() {
        &[c, h, w] => (c, h, w),
        d => return Err(Error::shape(format!("expected [C, H, W], got {d:?}"))),
    };
    if s == 0 {
        return Err(Error::config("multiple must be positive"));
    }
    let ho = h.div_ceil(s) * s;
    let wo = w.div_ceil(s) * s;
    if (ho, wo) == (h, w) {
        return Ok(f.clone());
    }
    let mut out = Tensor::zeros(&[c, ho, wo])?.to_dtype(f.dtype());
    for ch in 0..c {
        for y in 0..h {
            let src = &f.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.data_mut()[(ch * ho + y) * wo..(ch * ho + y) * wo + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Top-left `h × w` window of a map.
pub fn crop(f: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (fh, fw) = (f.dims()[1], f.dims()[2]);
    if f.rank() != 3 || h > fh || w > fw || h == 0 || w == 0 {
        return Err(Error::shape(format!("cannot crop {:?} to {h}x{w}", f.dims())));
    }
    f.slice(1, 0, h)?.slice(2, 0, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_cases() {
        let mut rng = RngState::new(1);
        let f = Tensor::uniform(&[2, 7, 7], &mut rng, -1.0, 1.0).unwrap();
        let p = pad_to_multiple(&f, 2).unwrap();
        assert_eq!(p.dims(), &[2, 8, 8]);
        for c in 0..2 {
            for i in 0..8 {
                assert_eq!(p.at(&[c, 7, i]), 0.0);
                assert_eq!(p.at(&[c, i, 7]), 0.0);
            }
        }
        assert!(crop(&p, 7, 7).unwrap().bit_eq(&f));
        let g = Tensor::uniform(&[1, 8, 8], &mut rng, -1.0, 1.0).unwrap();
        assert!(pad_to_multiple(&g, 2).unwrap().bit_eq(&g));
    }

    #[test]
    fn fixture_is_deterministic_and_in_range() {
        let a = backbone_with_dims(3, [[2, 8, 8], [2, 4, 4], [2, 2, 2], [2, 1, 1]]).unwrap();
        let b = backbone_with_dims(3, [[2, 8, 8], [2, 4, 4], [2, 2, 2], [2, 1, 1]]).unwrap();
        let c = backbone_with_dims(4, [[2, 8, 8], [2, 4, 4], [2, 2, 2], [2, 1, 1]]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.levels.iter().all(|t| t.data().iter().all(|v| (-1.0..1.0).contains(v))));
    }
}
