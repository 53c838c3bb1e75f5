//! Ground-truth boxes to per-pixel, per-pyramid-level supervision.
//!
//! Each pyramid level owns a stride and an object-size range; a feature-map
//! location becomes positive for the smallest ground-truth box that contains
//! it strictly and whose max regression offset falls inside the level's range.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{centerness_unchecked, ltrb_offsets, Box};

/// One pyramid level: index (3..=7), stride in pixels, and the half-open
/// object-size interval `(lower, upper]` it is responsible for.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LevelSpec {
    pub index: u32,
    pub stride: usize,
    pub lower: f64,
    pub upper: f64,
}

/// The five-level feature pyramid layout.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<LevelSpec>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        // Strides 8..128, size ranges (0,64], (64,128], (128,256], (256,512], (512,inf).
        let bounds = [0.0, 64.0, 128.0, 256.0, 512.0, f64::INFINITY];
        let levels = (0..5)
            .map(|i| LevelSpec {
                index: 3 + i as u32,
                stride: 8 << i,
                lower: bounds[i],
                upper: bounds[i + 1],
            })
            .collect();
        PyramidSpec { levels }
    }
}

impl PyramidSpec {
    /// Build from strides and size-range bounds (`bounds.len() == strides.len() + 1`,
    /// first bound 0, last +inf implied if omitted).
    pub fn from_config(strides: &[usize], range_bounds: &[f64]) -> Result<Self> {
        if strides.len() != 5 {
            return Err(Error::Config(format!(
                "pyramid needs exactly 5 levels, got {}",
                strides.len()
            )));
        }
        let mut bounds = range_bounds.to_vec();
        if bounds.len() == strides.len() {
            bounds.push(f64::INFINITY);
        }
        if bounds.len() != strides.len() + 1 {
            return Err(Error::Config(format!(
                "need {} size-range bounds for {} levels, got {}",
                strides.len() + 1,
                strides.len(),
                range_bounds.len()
            )));
        }
        let levels: Vec<LevelSpec> = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| LevelSpec {
                index: 3 + i as u32,
                stride: s,
                lower: bounds[i],
                upper: bounds[i + 1],
            })
            .collect();
        let spec = PyramidSpec { levels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 5 {
            return Err(Error::Config("pyramid must have exactly 5 levels".into()));
        }
        for pair in self.levels.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(Error::Config("pyramid strides must strictly increase".into()));
            }
            if pair[1].lower != pair[0].upper {
                return Err(Error::Config(
                    "size ranges must be contiguous: upper of level i = lower of level i+1".into(),
                ));
            }
        }
        let first = &self.levels[0];
        let last = &self.levels[self.levels.len() - 1];
        if first.lower != 0.0 || !last.upper.is_infinite() {
            return Err(Error::Config(
                "size ranges must start at 0 and end at +inf".into(),
            ));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        self.levels.last().map(|l| l.stride).unwrap_or(1)
    }
}

/// Feature-map grid of one level: `h x w` cells in row-major order, cell
/// `(x, y)` centered at image point `(stride/2 + x*stride, stride/2 + y*stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelGrid {
    pub fn point(&self, x: usize, y: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (s / 2.0 + x as f64 * s, s / 2.0 + y as f64 * s)
    }
}

/// Per-level grids for an image, with ceil-division feature sizes.
pub fn pyramid_grids(spec: &PyramidSpec, image_w: usize, image_h: usize) -> Result<Vec<LevelGrid>> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::Invalid(format!(
            "image size must be positive, got {image_w}x{image_h}"
        )));
    }
    Ok(spec
        .levels
        .iter()
        .map(|l| LevelGrid {
            stride: l.stride,
            h: image_h.div_ceil(l.stride),
            w: image_w.div_ceil(l.stride),
        })
        .collect())
}

/// All location centers per level, row-major.
pub fn pyramid_locations(
    spec: &PyramidSpec,
    image_w: usize,
    image_h: usize,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let grids = pyramid_grids(spec, image_w, image_h)?;
    Ok(grids
        .iter()
        .map(|g| {
            let mut pts = Vec::with_capacity(g.h * g.w);
            for y in 0..g.h {
                for x in 0..g.w {
                    pts.push(g.point(x, y));
                }
            }
            pts
        })
        .collect())
}

/// Per-level supervision maps derived from ground-truth boxes.
///
/// `cls` holds the foreground class index or -1 for background; `ctr` and
/// `reg` are only meaningful where `pos` is true.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub grid: LevelGrid,
    pub cls: Array2<i32>,
    pub ctr: Array2<f64>,
    /// Offsets in pixel units, layout `[4 (l,t,r,b), h, w]`.
    pub reg: Array3<f64>,
    pub pos: Array2<bool>,
}

impl LevelTargets {
    pub fn num_pos(&self) -> usize {
        self.pos.iter().filter(|&&p| p).count()
    }
}

/// Convert ground-truth boxes into per-level targets.
///
/// A location is positive for box `b` iff it lies strictly inside `b` and
/// `max(l,t,r,b)` falls in the level's size range; among qualifying boxes the
/// one with minimum area wins, ties to the lowest list index.
pub fn assign_targets(
    gts: &[(Box, usize)],
    spec: &PyramidSpec,
    image_w: usize,
    image_h: usize,
    num_classes: usize,
) -> Result<Vec<LevelTargets>> {
    for (b, class_id) in gts {
        if *class_id >= num_classes {
            return Err(Error::Invalid(format!(
                "class id {class_id} out of range [0, {num_classes})"
            )));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image_w as f64 || b.y2 > image_h as f64 {
            return Err(Error::Invalid(format!(
                "gt box ({},{},{},{}) outside image {image_w}x{image_h}",
                b.x1, b.y1, b.x2, b.y2
            )));
        }
    }
    let grids = pyramid_grids(spec, image_w, image_h)?;
    let mut out = Vec::with_capacity(grids.len());
    for (level, grid) in spec.levels.iter().zip(&grids) {
        let mut cls = Array2::from_elem((grid.h, grid.w), -1i32);
        let mut ctr = Array2::zeros((grid.h, grid.w));
        let mut reg = Array3::zeros((4, grid.h, grid.w));
        let mut pos = Array2::from_elem((grid.h, grid.w), false);
        for y in 0..grid.h {
            for x in 0..grid.w {
                let (px, py) = grid.point(x, y);
                let mut best: Option<(f64, usize)> = None;
                for (i, (b, _)) in gts.iter().enumerate() {
                    let o = ltrb_offsets(px, py, b);
                    if o.min() <= 0.0 {
                        continue;
                    }
                    let m = o.max();
                    if m <= level.lower || m > level.upper {
                        continue;
                    }
                    let area = b.area();
                    if best.map_or(true, |(ba, _)| area < ba) {
                        best = Some((area, i));
                    }
                }
                if let Some((_, i)) = best {
                    let (b, class_id) = &gts[i];
                    let o = ltrb_offsets(px, py, b);
                    cls[[y, x]] = *class_id as i32;
                    ctr[[y, x]] = centerness_unchecked(&o);
                    reg[[0, y, x]] = o.l;
                    reg[[1, y, x]] = o.t;
                    reg[[2, y, x]] = o.r;
                    reg[[3, y, x]] = o.b;
                    pos[[y, x]] = true;
                }
            }
        }
        out.push(LevelTargets { grid: *grid, cls, ctr, reg, pos });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Box {
        Box::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = PyramidSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.levels.len(), 5);
        assert_eq!(spec.levels[0].stride, 8);
        assert_eq!(spec.levels[4].stride, 128);
        assert!(spec.levels[4].upper.is_infinite());
    }

    #[test]
    fn locations_match_stride_arithmetic() {
        let spec = PyramidSpec::default();
        let locs = pyramid_locations(&spec, 16, 16).unwrap();
        assert_eq!(
            locs[0],
            vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]
        );
        let locs = pyramid_locations(&spec, 8, 8).unwrap();
        assert_eq!(locs[0], vec![(4.0, 4.0)]);
        let locs = pyramid_locations(&spec, 128, 128).unwrap();
        assert_eq!(locs[4], vec![(64.0, 64.0)]);
        assert!(pyramid_locations(&spec, 0, 16).is_err());
    }

    #[test]
    fn single_box_positives_land_on_level3_only() {
        let spec = PyramidSpec::default();
        let gts = vec![(bx(0.0, 0.0, 60.0, 60.0), 0usize)];
        let targets = assign_targets(&gts, &spec, 128, 128, 3).unwrap();
        assert!(targets[0].num_pos() > 0, "level 3 should hold the box");
        for t in &targets[1..] {
            assert_eq!(t.num_pos(), 0);
        }
        // Per-level membership rule: positive iff strictly inside with
        // max offset in the level range.
        for (level, t) in spec.levels.iter().zip(&targets) {
            for y in 0..t.grid.h {
                for x in 0..t.grid.w {
                    let (px, py) = t.grid.point(x, y);
                    let o = ltrb_offsets(px, py, &gts[0].0);
                    let expect =
                        o.min() > 0.0 && o.max() > level.lower && o.max() <= level.upper;
                    assert_eq!(t.pos[[y, x]], expect);
                }
            }
        }
    }

    #[test]
    fn nested_boxes_prefer_smaller_area() {
        let spec = PyramidSpec::default();
        let gts = vec![
            (bx(0.0, 0.0, 60.0, 60.0), 0usize),
            (bx(20.0, 20.0, 40.0, 40.0), 1usize),
        ];
        let targets = assign_targets(&gts, &spec, 128, 128, 3).unwrap();
        let t = &targets[0];
        // (28, 28) is a stride-8 cell center inside both boxes and in-range
        // for level 3 through either; the smaller box must win.
        let (x, y) = (3, 3);
        assert_eq!(t.grid.point(x, y), (28.0, 28.0));
        assert!(t.pos[[y, x]]);
        assert_eq!(t.cls[[y, x]], 1);
        assert_eq!(t.reg[[0, y, x]], 8.0);
        // A point inside only the big box keeps class 0.
        let (x, y) = (0, 0);
        assert!(t.pos[[y, x]]);
        assert_eq!(t.cls[[y, x]], 0);
    }

    #[test]
    fn empty_gts_all_background() {
        let spec = PyramidSpec::default();
        let targets = assign_targets(&[], &spec, 128, 128, 3).unwrap();
        for t in &targets {
            assert_eq!(t.num_pos(), 0);
            assert!(t.cls.iter().all(|&c| c == -1));
        }
    }

    #[test]
    fn rejects_bad_class_and_out_of_bounds_box() {
        let spec = PyramidSpec::default();
        let err = assign_targets(&[(bx(0.0, 0.0, 10.0, 10.0), 7)], &spec, 128, 128, 3);
        assert!(err.is_err());
        let err = assign_targets(&[(bx(-2.0, 0.0, 10.0, 10.0), 0)], &spec, 128, 128, 3);
        assert!(err.is_err());
    }

    #[test]
    fn reg_targets_reconstruct_gt_exactly() {
        let spec = PyramidSpec::default();
        let gts = vec![(bx(8.0, 16.0, 72.0, 96.0), 2usize)];
        let targets = assign_targets(&gts, &spec, 128, 128, 3).unwrap();
        for t in &targets {
            for y in 0..t.grid.h {
                for x in 0..t.grid.w {
                    if !t.pos[[y, x]] {
                        continue;
                    }
                    let (px, py) = t.grid.point(x, y);
                    assert_eq!(px - t.reg[[0, y, x]], 8.0);
                    assert_eq!(py - t.reg[[1, y, x]], 16.0);
                    assert_eq!(px + t.reg[[2, y, x]], 72.0);
                    assert_eq!(py + t.reg[[3, y, x]], 96.0);
                }
            }
        }
    }
}
