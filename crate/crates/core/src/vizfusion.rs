//! Fusion of patch-level attention maps into one interpretation map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("map {model_id}: non-finite value at {index}")]
    NonFiniteValue { model_id: String, index: usize },
    #[error("map {model_id}: negative value at {index}")]
    NegativeValue { model_id: String, index: usize },
    #[error("bad grid {rows}x{cols}: {reason}")]
    BadGrid { rows: usize, cols: usize, reason: String },
    #[error("no attention maps to fuse")]
    EmptyMapList,
    #[error("{path}: {reason}")]
    IOError { path: String, reason: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> VizError {
    VizError::IOError {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Row-major attention values on a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub model_id: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(model_id: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, VizError> {
        let m = Self {
            model_id: model_id.into(),
            rows,
            cols,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), VizError> {
        check_grid(self.rows, self.cols)?;
        if self.rows * self.cols != self.values.len() {
            return Err(VizError::BadGrid {
                rows: self.rows,
                cols: self.cols,
                reason: format!("{} values", self.values.len()),
            });
        }
        for (index, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(VizError::NonFiniteValue {
                    model_id: self.model_id.clone(),
                    index,
                });
            }
            if *v < 0.0 {
                return Err(VizError::NegativeValue {
                    model_id: self.model_id.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Reads a JSON map `{model_id?, rows, cols, values}` or the binary
    /// layout `u32 rows, u32 cols, f64 values` (all little-endian). The file
    /// stem names the model when the file does not.
    pub fn load(path: &Path) -> Result<Self, VizError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
        let map = if first == Some(&b'{') {
            #[derive(Deserialize)]
            struct Raw {
                model_id: Option<String>,
                rows: usize,
                cols: usize,
                values: Vec<f64>,
            }
            let raw: Raw = serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))?;
            Self {
                model_id: raw.model_id.unwrap_or(stem),
                rows: raw.rows,
                cols: raw.cols,
                values: raw.values,
            }
        } else {
            if bytes.len() < 8 {
                return Err(io_err(path, "binary map shorter than its header"));
            }
            let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
            let body = &bytes[8..];
            if body.len() != rows * cols * 8 {
                return Err(io_err(path, format!("{rows}x{cols} map needs {} value bytes, found {}", rows * cols * 8, body.len())));
            }
            let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Self {
                model_id: stem,
                rows,
                cols,
                values,
            }
        };
        map.validate()?;
        Ok(map)
    }

    /// Binary layout understood by [`load`](Self::load).
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

fn check_grid(rows: usize, cols: usize) -> Result<(), VizError> {
    if rows == 0 || cols == 0 {
        return Err(VizError::BadGrid {
            rows,
            cols,
            reason: "both dimensions must be at least 1".into(),
        });
    }
    Ok(())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Min-max scaling onto [0,1]; the flag is set for a constant map, which
/// becomes all zeros.
pub fn normalize_values(values: &[f64]) -> (Vec<f64>, bool) {
    let (lo, hi) = min_max(values);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return (vec![0.0; values.len()], true);
    }
    let span = hi - lo;
    (values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(), false)
}

pub fn normalize_map(m: &AttentionMap) -> Result<(AttentionMap, bool), VizError> {
    if let Some(index) = m.values.iter().position(|v| !v.is_finite()) {
        return Err(VizError::NonFiniteValue {
            model_id: m.model_id.clone(),
            index,
        });
    }
    let (values, degenerate) = normalize_values(&m.values);
    Ok((
        AttentionMap {
            values,
            ..m.clone()
        },
        degenerate,
    ))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    (a + (b - a) * t).clamp(a.min(b), a.max(b))
}

/// Source coordinate of target index `i` (align-corners; a single target
/// cell samples the center).
fn source_coord(i: usize, target: usize, source: usize) -> f64 {
    if target == 1 {
        (source - 1) as f64 / 2.0
    } else {
        (i * (source - 1)) as f64 / (target - 1) as f64
    }
}

/// Bilinear resampling onto `rows x cols`.
pub fn resample(m: &AttentionMap, rows: usize, cols: usize) -> Result<AttentionMap, VizError> {
    check_grid(rows, cols)?;
    m.validate()?;
    if (rows, cols) == (m.rows, m.cols) {
        return Ok(m.clone());
    }
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let y = source_coord(i, rows, m.rows);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(m.rows - 1);
        let ty = y - y0 as f64;
        for j in 0..cols {
            let x = source_coord(j, cols, m.cols);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(m.cols - 1);
            let tx = x - x0 as f64;
            let top = lerp(m.at(y0, x0), m.at(y0, x1), tx);
            let bottom = lerp(m.at(y1, x0), m.at(y1, x1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    Ok(AttentionMap {
        model_id: m.model_id.clone(),
        rows,
        cols,
        values,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Sorted model ids of the inputs.
    pub source_ids: Vec<String>,
    pub mode: FusionMode,
    /// Set when the fused map was constant before re-normalization.
    pub degenerate: bool,
    /// Sorted ids of inputs that were constant maps.
    #[serde(default)]
    pub degenerate_inputs: Vec<String>,
}

/// Normalizes and resamples every map, combines them pixel by pixel, and
/// re-normalizes. Per-pixel values are sorted before combining so the
/// result does not depend on input order.
pub fn fuse(maps: &[AttentionMap], rows: usize, cols: usize, mode: FusionMode) -> Result<FusedMap, VizError> {
    if maps.is_empty() {
        return Err(VizError::EmptyMapList);
    }
    check_grid(rows, cols)?;
    let mut prepared = Vec::with_capacity(maps.len());
    let mut degenerate_inputs = Vec::new();
    for m in maps {
        m.validate()?;
        let (n, flat) = normalize_map(m)?;
        if flat {
            degenerate_inputs.push(m.model_id.clone());
        }
        prepared.push(resample(&n, rows, cols)?);
    }
    let k = prepared.len() as f64;
    let mut column = Vec::with_capacity(prepared.len());
    let combined: Vec<f64> = (0..rows * cols)
        .map(|p| {
            column.clear();
            column.extend(prepared.iter().map(|m| m.values[p]));
            column.sort_by(f64::total_cmp);
            match mode {
                FusionMode::Max => *column.last().unwrap(),
                FusionMode::Mean if column[0] == column[column.len() - 1] => column[0],
                FusionMode::Mean => (column.iter().sum::<f64>() / k).clamp(column[0], column[column.len() - 1]),
            }
        })
        .collect();
    let (values, degenerate) = normalize_values(&combined);
    let mut source_ids: Vec<String> = maps.iter().map(|m| m.model_id.clone()).collect();
    source_ids.sort();
    degenerate_inputs.sort();
    Ok(FusedMap {
        rows,
        cols,
        values,
        source_ids,
        mode,
        degenerate,
        degenerate_inputs,
    })
}

/// Grey level of a [0,1] value, rounding half up.
pub fn to_gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes `out_png` and a `.json` sidecar next to it; returns the sidecar
/// path.
pub fn render(fused: &FusedMap, out_png: &Path) -> Result<PathBuf, VizError> {
    let pixels: Vec<u8> = fused.values.iter().map(|&v| to_gray(v)).collect();
    let img = image::GrayImage::from_raw(fused.cols as u32, fused.rows as u32, pixels).ok_or_else(|| VizError::BadGrid {
        rows: fused.rows,
        cols: fused.cols,
        reason: "value count does not match grid".into(),
    })?;
    img.save_with_format(out_png, image::ImageFormat::Png).map_err(|e| io_err(out_png, e))?;
    let sidecar = out_png.with_extension("json");
    let text = serde_json::to_string_pretty(fused).expect("fused map serializes");
    std::fs::write(&sidecar, text + "\n").map_err(|e| io_err(&sidecar, e))?;
    Ok(sidecar)
}

pub fn load_sidecar(path: &Path) -> Result<FusedMap, VizError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(id: &str, rows: usize, cols: usize, v: &[f64]) -> AttentionMap {
        AttentionMap::new(id, rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let (n, flat) = normalize_map(&map("a", 2, 2, &[2.0, 4.0, 6.0, 8.0])).unwrap();
        assert_eq!(n.values, [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(!flat);
        let (z, flat) = normalize_map(&map("a", 2, 2, &[5.0; 4])).unwrap();
        assert_eq!(z.values, [0.0; 4]);
        assert!(flat);
        let unit = map("a", 1, 3, &[0.0, 0.25, 1.0]);
        assert_eq!(normalize_map(&unit).unwrap().0, unit);
        let bad = AttentionMap {
            model_id: "x".into(),
            rows: 1,
            cols: 1,
            values: vec![f64::NAN],
        };
        assert!(matches!(normalize_map(&bad), Err(VizError::NonFiniteValue { .. })));
    }

    #[test]
    fn resample_examples() {
        let m = map("a", 2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(resample(&m, 2, 2).unwrap().values, m.values);
        let c = resample(&map("a", 2, 3, &[0.7; 6]), 5, 4).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.7));
        assert_eq!(resample(&map("a", 2, 1, &[0.0, 1.0]), 3, 1).unwrap().values, [0.0, 0.5, 1.0]);
        assert!(matches!(resample(&m, 0, 2), Err(VizError::BadGrid { .. })));
    }

    #[test]
    fn fuse_examples() {
        let m = map("a", 2, 2, &[1.0, 3.0, 2.0, 9.0]);
        let (n, _) = normalize_map(&m).unwrap();
        let copies: Vec<_> = ["x", "y", "z"].iter().map(|id| AttentionMap { model_id: id.to_string(), ..m.clone() }).collect();
        assert_eq!(fuse(&copies, 2, 2, FusionMode::Mean).unwrap().values, n.values);

        let f = fuse(&[map("a", 2, 1, &[0.0, 1.0]), map("b", 2, 1, &[1.0, 0.0])], 2, 1, FusionMode::Mean).unwrap();
        assert_eq!(f.values, [0.0, 0.0]);
        assert!(f.degenerate);

        let single = fuse(std::slice::from_ref(&m), 3, 3, FusionMode::Mean).unwrap();
        let expect = normalize_map(&resample(&n, 3, 3).unwrap()).unwrap().0;
        assert_eq!(single.values, expect.values);
        assert!(matches!(fuse(&[], 2, 2, FusionMode::Mean), Err(VizError::EmptyMapList)));

        let mx = fuse(&[map("a", 1, 2, &[0.0, 1.0]), map("b", 1, 2, &[1.0, 0.0])], 1, 2, FusionMode::Max).unwrap();
        assert_eq!(mx.values, [0.0, 0.0]);
    }

    #[test]
    fn gray_levels() {
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(0.5), 128);
        assert_eq!(to_gray(0.0), 0);
    }

    #[test]
    fn render_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("m.png");
        let f = fuse(&[map("a", 1, 3, &[0.0, 0.5, 1.0])], 1, 3, FusionMode::Mean).unwrap();
        let side = render(&f, &png).unwrap();
        let img = image::open(&png).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0u8, 128, 255]);
        assert_eq!(load_sidecar(&side).unwrap(), f);
    }

    #[test]
    fn binary_and_json_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = map("uni", 2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 1.0 / 7.0]);
        let bin = dir.path().join("uni.bin");
        std::fs::write(&bin, m.to_binary()).unwrap();
        assert_eq!(AttentionMap::load(&bin).unwrap(), m);
        let js = dir.path().join("conch.json");
        std::fs::write(&js, r#"{"rows":1,"cols":2,"values":[1,2]}"#).unwrap();
        assert_eq!(AttentionMap::load(&js).unwrap().model_id, "conch");
        std::fs::write(&bin, [1u8, 0, 0, 0, 1, 0, 0, 0, 9]).unwrap();
        assert!(AttentionMap::load(&bin).is_err());
    }

    fn arb_map() -> impl Strategy<Value = AttentionMap> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            prop::collection::vec(0.0f64..10.0, r * c)
                .prop_map(move |v| AttentionMap { model_id: String::new(), rows: r, cols: c, values: v })
        })
    }

    proptest! {
        #[test]
        fn fuse_is_permutation_invariant(maps in prop::collection::vec(arb_map(), 1..5), seed in any::<u64>()) {
            let maps: Vec<_> = maps.into_iter().enumerate().map(|(i, m)| AttentionMap { model_id: format!("m{i}"), ..m }).collect();
            let mut shuffled = maps.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
            }
            let a = fuse(&maps, 3, 4, FusionMode::Mean).unwrap();
            prop_assert_eq!(&a, &fuse(&shuffled, 3, 4, FusionMode::Mean).unwrap());
            prop_assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn normalize_idempotent(m in arb_map()) {
            let (once, flat) = normalize_map(&m).unwrap();
            prop_assume!(!flat);
            prop_assert_eq!(&normalize_map(&once).unwrap().0, &once);
        }

        #[test]
        fn resample_stays_in_range(m in arb_map(), r in 1usize..7, c in 1usize..7) {
            let (lo, hi) = min_max(&m.values);
            let out = resample(&m, r, c).unwrap();
            prop_assert!(out.values.iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
