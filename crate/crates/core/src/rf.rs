//! Receptive-field size, jump and alignment of layer stacks, and a
//! gradient-support oracle that measures them on a concrete network.
//!
//! Input pixel `i` spans `[i, i + 1)`, so the center of pixel 0 sits at 1/2.

use std::fmt::Write as _;

use num_rational::Rational64;

use crate::nn::{LayerKind, TrunkLayer};
use crate::tensor::{window_output_size, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RfError {
    #[error("receptive-field profile needs at least one layer")]
    Empty,
    #[error("layer {layer}: kernel and stride must be at least 1 (got kernel {kernel}, stride {stride})")]
    BadLayer { layer: usize, kernel: usize, stride: usize },
    #[error("layer {layer} ({kind}) mixes all positions; its receptive field is the whole input")]
    Global { layer: usize, kind: LayerKind },
    #[error("output unit {unit:?} outside the {dims:?} output grid")]
    UnitOutOfRange { unit: (usize, usize, usize), dims: (usize, usize, usize) },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Receptive field after one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfRecord {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub rf: i64,
    pub jump: i64,
    /// Center of unit 0 in input coordinates.
    pub start: Rational64,
}

impl RfRecord {
    /// First input pixel covered by unit `u` along one axis (may be negative
    /// or past the border for units whose field overhangs the input).
    pub fn first_pixel(&self, u: usize) -> i64 {
        let first = self.start - Rational64::new(self.rf, 2) + Rational64::from_integer(u as i64 * self.jump);
        debug_assert!(first.is_integer());
        first.to_integer()
    }

    /// Whether unit `u`'s field lies entirely within `[0, size)`.
    pub fn is_interior(&self, u: usize, size: usize) -> bool {
        let first = self.first_pixel(u);
        first >= 0 && first + self.rf <= size as i64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveFieldProfile {
    pub records: Vec<RfRecord>,
}

fn start_step(kernel: usize, padding: usize, jump: i64) -> Rational64 {
    (Rational64::new(kernel as i64 - 1, 2) - Rational64::from_integer(padding as i64)) * Rational64::from_integer(jump)
}

/// Exact receptive-field recurrence over `(kernel, stride, padding)` triples.
pub fn rf_profile(layers: &[(usize, usize, usize)]) -> Result<ReceptiveFieldProfile, RfError> {
    if layers.is_empty() {
        return Err(RfError::Empty);
    }
    let mut rf = 1i64;
    let mut jump = 1i64;
    let mut start = Rational64::new(1, 2);
    let mut records = Vec::with_capacity(layers.len());
    for (i, &(kernel, stride, padding)) in layers.iter().enumerate() {
        if kernel == 0 || stride == 0 {
            return Err(RfError::BadLayer { layer: i, kernel, stride });
        }
        rf += (kernel as i64 - 1) * jump;
        start += start_step(kernel, padding, jump);
        jump *= stride as i64;
        records.push(RfRecord {
            kernel,
            stride,
            padding,
            rf,
            jump,
            start,
        });
    }
    Ok(ReceptiveFieldProfile { records })
}

/// Profile of a model trunk as listed by `Model::list_layers`.
pub fn trunk_profile(layers: &[TrunkLayer]) -> Result<ReceptiveFieldProfile, RfError> {
    if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.is_global()) {
        return Err(RfError::Global { layer: i, kind: l.kind });
    }
    let triples: Vec<_> = layers.iter().map(|l| (l.kernel, l.stride, l.padding)).collect();
    rf_profile(&triples)
}

impl ReceptiveFieldProfile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> &RfRecord {
        self.records.last().expect("profiles are never empty")
    }

    /// Aligned text table, one row per layer.
    pub fn table(&self, names: &[String]) -> String {
        let header = ["layer", "name", "kernel", "stride", "padding", "rf", "jump", "start"];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (i, r) in self.records.iter().enumerate() {
            rows.push(vec![
                (i + 1).to_string(),
                names.get(i).cloned().unwrap_or_default(),
                r.kernel.to_string(),
                r.stride.to_string(),
                r.padding.to_string(),
                r.rf.to_string(),
                r.jump.to_string(),
                r.start.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    pub fn csv(&self, names: &[String]) -> String {
        let mut out = String::from("layer,name,kernel,stride,padding,rf,jump,start\n");
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                i + 1,
                names.get(i).map(String::as_str).unwrap_or(""),
                r.kernel,
                r.stride,
                r.padding,
                r.rf,
                r.jump,
                r.start
            );
        }
        out
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
}

/// Output grid `(channels, height, width)` of a single-channel proxy stack.
pub fn proxy_output_dims(layers: &[TrunkLayer], input_hw: (usize, usize)) -> Result<(usize, usize, usize), RfError> {
    let (mut h, mut w) = input_hw;
    for (i, l) in layers.iter().enumerate() {
        if l.is_global() {
            return Err(RfError::Global { layer: i, kind: l.kind });
        }
        h = window_output_size("proxy", "height", h, l.kernel, l.stride, l.padding)?;
        w = window_output_size("proxy", "width", w, l.kernel, l.stride, l.padding)?;
    }
    Ok((1, h, w))
}

/// Measures which input pixels influence output unit `(channel, y, x)`.
///
/// The stack is rebuilt as a single-channel network with strictly positive
/// weights, max pooling replaced by zero-padded average pooling, and a
/// positive input, so the support of the input gradient equals the
/// dependence region.
pub fn impulse_rf_oracle(layers: &[TrunkLayer], unit: (usize, usize, usize), input_hw: (usize, usize)) -> Result<BBox, RfError> {
    let dims = proxy_output_dims(layers, input_hw)?;
    if unit.0 >= dims.0 || unit.1 >= dims.1 || unit.2 >= dims.2 {
        return Err(RfError::UnitOutOfRange { unit, dims });
    }
    let mut tape = Tape::<f64>::new();
    let input = tape.param(Tensor::full(&[1, 1, input_hw.0, input_hw.1], 1.0));
    let mut x = input;
    for l in layers {
        x = match l.kind {
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let padded = if l.padding > 0 { tape.pad2d(x, l.padding)? } else { x };
                tape.avgpool2d(padded, l.kernel, l.stride)?
            }
            _ => {
                let k = l.kernel;
                let w = tape.constant(Tensor::full(&[1, 1, k, k], 1.0 / (k * k) as f64));
                tape.conv2d(x, w, None, l.stride, l.padding)?
            }
        };
    }
    let index = (unit.0 * dims.1 + unit.1) * dims.2 + unit.2;
    let picked = tape.select(x, index)?;
    tape.backward(picked)?;
    let grad = tape.grad(input).expect("input requires grad");
    let (h, w) = input_hw;
    let mut bbox: Option<BBox> = None;
    for y in 0..h {
        for xx in 0..w {
            if grad[y * w + xx] != 0.0 {
                let b = bbox.get_or_insert(BBox { y0: y, x0: xx, y1: y, x1: xx });
                b.y0 = b.y0.min(y);
                b.x0 = b.x0.min(xx);
                b.y1 = b.y1.max(y);
                b.x1 = b.x1.max(xx);
            }
        }
    }
    Ok(bbox.expect("a positive network always has nonzero input gradient"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCheck {
    /// 1-based layer number.
    pub layer: usize,
    pub analytic_rf: i64,
    pub analytic_jump: i64,
    /// Box extents of interior units.
    pub measured_rf: Vec<i64>,
    /// Left/top edge spacing between adjacent units with unclipped edges.
    pub measured_jump: Vec<i64>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfComparison {
    pub checks: Vec<LayerCheck>,
    pub first_mismatch: Option<usize>,
    pub interior_units: usize,
}

impl RfComparison {
    pub fn passed(&self) -> bool {
        self.first_mismatch.is_none()
    }

    pub fn summary(&self) -> String {
        match self.first_mismatch {
            None => format!("all {} layers match ({} interior unit checks)", self.checks.len(), self.interior_units),
            Some(l) => {
                let c = &self.checks[l - 1];
                format!(
                    "first mismatch at layer {l}: analytic rf {} jump {}, measured rf {:?} jump {:?}",
                    c.analytic_rf, c.analytic_jump, c.measured_rf, c.measured_jump
                )
            }
        }
    }
}

/// Input side length giving at least `units` interior output units per axis
/// at the deepest layer of `profile`.
pub fn oracle_input_size(profile: &ReceptiveFieldProfile, units: usize) -> usize {
    let extent = |size: usize| {
        profile
            .records
            .iter()
            .map(|r| {
                let mut interior = 0;
                let mut u = 0;
                while r.first_pixel(u) + r.rf <= size as i64 {
                    if r.is_interior(u, size) {
                        interior += 1;
                    }
                    u += 1;
                }
                interior
            })
            .min()
            .unwrap_or(0)
    };
    let mut size = (profile.last().rf as usize).max(1);
    while extent(size) < units {
        size += 1;
    }
    size
}

/// Checks `profile` against impulse measurements on `layers` for every
/// layer prefix. Units come from the center row and column of each output
/// grid; units whose analytic field leaves the input are excluded from the
/// extent check, and spacing is compared only between unclipped edges.
pub fn compare_rf(profile: &ReceptiveFieldProfile, layers: &[TrunkLayer], input_hw: (usize, usize)) -> Result<RfComparison, RfError> {
    let mut checks = Vec::new();
    let mut first_mismatch = None;
    let mut interior_units = 0;
    for (li, rec) in profile.records.iter().enumerate() {
        let prefix = &layers[..(li + 1).min(layers.len())];
        let (_, oh, ow) = proxy_output_dims(prefix, input_hw)?;
        let (cy, cx) = (oh / 2, ow / 2);
        let mut check = LayerCheck {
            layer: li + 1,
            analytic_rf: rec.rf,
            analytic_jump: rec.jump,
            measured_rf: Vec::new(),
            measured_jump: Vec::new(),
            ok: true,
        };
        // Horizontal neighbours along the center row, vertical along the center column.
        let mut row = Vec::new();
        for x in cx.saturating_sub(1)..(cx + 2).min(ow) {
            row.push((x, impulse_rf_oracle(prefix, (0, cy, x), input_hw)?));
        }
        let mut col = Vec::new();
        for y in cy.saturating_sub(1)..(cy + 2).min(oh) {
            col.push((y, impulse_rf_oracle(prefix, (0, y, cx), input_hw)?));
        }
        for &(x, b) in &row {
            if rec.is_interior(x, input_hw.1) && rec.is_interior(cy, input_hw.0) {
                interior_units += 1;
                check.measured_rf.push(b.width() as i64);
                check.measured_rf.push(b.height() as i64);
                check.ok &= b.width() as i64 == rec.rf && b.height() as i64 == rec.rf;
            }
        }
        for (horizontal, units) in [(true, &row), (false, &col)] {
            let size = if horizontal { input_hw.1 } else { input_hw.0 } as i64;
            for pair in units.windows(2) {
                let ((u0, b0), (u1, b1)) = (pair[0], pair[1]);
                if rec.first_pixel(u0) > 0 && rec.first_pixel(u1) < size {
                    let (e0, e1) = if horizontal { (b0.x0, b1.x0) } else { (b0.y0, b1.y0) };
                    let spacing = (e1 as i64 - e0 as i64) / (u1 as i64 - u0 as i64);
                    check.measured_jump.push(spacing);
                    check.ok &= spacing == rec.jump;
                }
            }
        }
        if check.measured_rf.is_empty() && check.measured_jump.is_empty() {
            check.ok = false;
        }
        if !check.ok && first_mismatch.is_none() {
            first_mismatch = Some(li + 1);
        }
        checks.push(check);
    }
    Ok(RfComparison {
        checks,
        first_mismatch,
        interior_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(k: usize, s: usize, p: usize) -> TrunkLayer {
        TrunkLayer::new(LayerKind::Conv, k, s, p)
    }

    #[test]
    fn stem_recurrence() {
        let p = rf_profile(&[(7, 2, 3)]).unwrap();
        assert_eq!((p.last().rf, p.last().jump), (7, 2));
        let p = rf_profile(&[(7, 2, 3), (3, 2, 1)]).unwrap();
        assert_eq!((p.last().rf, p.last().jump), (11, 4));
        let p = rf_profile(&[(7, 1, 3), (3, 2, 1)]).unwrap();
        assert_eq!((p.last().rf, p.last().jump), (9, 2));
        assert_eq!(rf_profile(&[]), Err(RfError::Empty));
    }

    #[test]
    fn start_offsets_are_exact() {
        let p = rf_profile(&[(2, 2, 0), (3, 1, 1)]).unwrap();
        assert_eq!(p.records[0].start, Rational64::new(1, 1));
        assert_eq!(p.records[1].start, Rational64::new(1, 1));
        assert_eq!(p.records[0].first_pixel(1), 2);
    }

    #[test]
    fn impulse_identity_and_3x3() {
        let b = impulse_rf_oracle(&[conv(1, 1, 0)], (0, 2, 3), (5, 5)).unwrap();
        assert_eq!(b, BBox { y0: 2, x0: 3, y1: 2, x1: 3 });
        let b = impulse_rf_oracle(&[conv(3, 1, 1)], (0, 2, 2), (5, 5)).unwrap();
        assert_eq!((b.height(), b.width(), b.y0, b.x0), (3, 3, 1, 1));
        assert!(matches!(
            impulse_rf_oracle(&[conv(3, 1, 1)], (0, 5, 0), (5, 5)),
            Err(RfError::UnitOutOfRange { .. })
        ));
    }

    #[test]
    fn compare_flags_wrong_stride() {
        let layers = [conv(7, 2, 3), TrunkLayer::new(LayerKind::MaxPool, 3, 2, 1), conv(3, 1, 1)];
        let good = trunk_profile(&layers).unwrap();
        let size = oracle_input_size(&good, 3);
        assert!(compare_rf(&good, &layers, (size, size)).unwrap().passed());
        let wrong = rf_profile(&[(7, 2, 3), (3, 1, 1), (3, 1, 1)]).unwrap();
        let report = compare_rf(&wrong, &layers, (size, size)).unwrap();
        assert_eq!(report.first_mismatch, Some(2));
    }

    #[test]
    fn table_lists_every_layer() {
        let p = rf_profile(&[(7, 2, 3), (3, 2, 1)]).unwrap();
        let t = p.table(&["conv".into(), "maxpool".into()]);
        assert_eq!(t.lines().count(), 3);
        assert!(p.csv(&[]).starts_with("layer,name"));
    }
}
