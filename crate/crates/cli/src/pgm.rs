use std::fs;
use std::path::Path;

use lowdose::{Error, Result, Tensor};

/// Binary greymap (P5, 8-bit) of the mid-axial slice of `[1, 1, E, E, E]`.
/// Values are divided by `max` and clamped to `[0, 1]`.
pub fn write_mid_slice(volume: &Tensor, max: f64, path: &Path) -> Result<()> {
    let &[1, 1, d, h, w] = volume.shape() else {
        return Err(Error::Shape(format!("expected one volume, got {:?}", volume.shape())));
    };
    let z = d / 2;
    let slice = &volume.data()[z * h * w..(z + 1) * h * w];
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(slice.iter().map(|&v| ((v as f64 / max).clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
