//! Plain-tensor reference CNN: direct convolution, square activation,
//! average pooling and the fully connected head. Ground truth for every
//! equivalence test in the crate.
//!
//! Convolution orientation is cross-correlation (no kernel flip), matching
//! the packed implementations. All arithmetic is `f64`.

use std::fmt;
use std::path::Path;

/// Row-major tensor, shape `(channels, height, width)` for images or
/// `(rows, cols)` for matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    ShapeMismatch(String),
    Io(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            OracleError::Io(m) => write!(f, "tensor io: {m}"),
        }
    }
}

impl std::error::Error for OracleError {}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn chw(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![c, h, w], data)
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Write `data` as little-endian f64 plus a JSON shape manifest beside it.
    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| OracleError::Io(e.to_string()))?;
        let manifest = serde_json::json!({ "shape": self.shape });
        std::fs::write(
            path.with_extension("shape.json"),
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .map_err(|e| OracleError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tensor, OracleError> {
        let bytes = std::fs::read(path).map_err(|e| OracleError::Io(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(OracleError::Io("length not a multiple of 8".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let manifest = std::fs::read_to_string(path.with_extension("shape.json"))
            .map_err(|e| OracleError::Io(e.to_string()))?;
        let v: serde_json::Value =
            serde_json::from_str(&manifest).map_err(|e| OracleError::Io(e.to_string()))?;
        let shape: Vec<usize> = v["shape"]
            .as_array()
            .ok_or_else(|| OracleError::Io("manifest missing shape".into()))?
            .iter()
            .map(|x| x.as_u64().unwrap_or(0) as usize)
            .collect();
        if shape.iter().product::<usize>() != data.len() {
            return Err(OracleError::ShapeMismatch(format!(
                "manifest {:?} vs {} values",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

/// Convolution weights for one layer: `[c_o][c_i][f][f]`, row-major.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    pub c_o: usize,
    pub c_i: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(c_o: usize, c_i: usize, f: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c_o * c_i * f * f);
        ConvKernel { c_o, c_i, f, data }
    }

    pub fn at(&self, o: usize, i: usize, j1: usize, j2: usize) -> f64 {
        self.data[((o * self.c_i + i) * self.f + j1) * self.f + j2]
    }
}

/// Direct 2D convolution (cross-correlation) with zero padding.
///
/// Output pixel (y, x) of channel o is
/// `sum_i sum_{j1,j2} k[o,i,j1,j2] * x[i, s*y + j1 - pad, s*x + j2 - pad]`
/// with out-of-range taps contributing zero.
pub fn conv2d_ref(
    x: &Tensor,
    k: &ConvKernel,
    stride: usize,
    pad: usize,
) -> Result<Tensor, OracleError> {
    if x.channels() != k.c_i {
        return Err(OracleError::ShapeMismatch(format!(
            "input has {} channels, kernel expects {}",
            x.channels(),
            k.c_i
        )));
    }
    let (h, w) = (x.height(), x.width());
    let ho = (h + 2 * pad - k.f) / stride + 1;
    let wo = (w + 2 * pad - k.f) / stride + 1;
    let mut out = Tensor::zeros(vec![k.c_o, ho, wo]);
    for o in 0..k.c_o {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for i in 0..k.c_i {
                    for j1 in 0..k.f {
                        for j2 in 0..k.f {
                            let sy = (stride * y + j1) as isize - pad as isize;
                            let sx = (stride * xx + j2) as isize - pad as isize;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += k.at(o, i, j1, j2) * x.at3(i, sy as usize, sx as usize);
                            }
                        }
                    }
                }
                out.set3(o, y, xx, acc);
            }
        }
    }
    Ok(out)
}

/// Slot-wise square activation.
pub fn square_ref(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v * v).collect(),
    }
}

/// Global average pooling: (C, H, W) -> length-C vector.
pub fn avg_pool_ref(x: &Tensor) -> Tensor {
    let c = x.channels();
    let hw = (x.height() * x.width()) as f64;
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for y in 0..x.height() {
            for xx in 0..x.width() {
                s += x.at3(ch, y, xx);
            }
        }
        out[ch] = s / hw;
    }
    Tensor::new(vec![c], out)
}

/// 2x2 stride-2 average pooling.
pub fn avg_pool2_ref(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height() / 2, x.width() / 2);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let s = x.at3(ch, 2 * y, 2 * xx)
                    + x.at3(ch, 2 * y, 2 * xx + 1)
                    + x.at3(ch, 2 * y + 1, 2 * xx)
                    + x.at3(ch, 2 * y + 1, 2 * xx + 1);
                out.set3(ch, y, xx, s / 4.0);
            }
        }
    }
    out
}

/// Fully connected layer: weights `[rows][cols]`, out = W · x + b.
pub fn fc_ref(x: &[f64], weights: &Tensor, bias: &[f64]) -> Vec<f64> {
    let rows = weights.shape[0];
    let cols = weights.shape[1];
    assert_eq!(x.len(), cols);
    assert_eq!(bias.len(), rows);
    (0..rows)
        .map(|r| {
            let mut acc = bias[r];
            for c in 0..cols {
                acc += weights.data[r * cols + c] * x[c];
            }
            acc
        })
        .collect()
}
