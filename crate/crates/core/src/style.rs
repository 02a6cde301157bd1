//! Target-style estimation from matched exemplar patches.
//!
//! The test photo is cut into a grid of non-overlapping square patches. Each
//! patch is matched by mean squared error against the exemplar photos; the
//! feature maps of the paired sketch are then cropped at the matched location
//! on every tap ("pyramid column") and the columns are tiled back into a full
//! pyramid whose Gram matrices are the style target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gram, GramMatrix, Shape, Tensor};
use crate::vgg::{FeaturePyramid, StyleLayer, VggWeights};

/// Largest tap stride; patch offsets and region edges must be multiples of it.
pub const MAX_STRIDE: usize = 16;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub const fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Region {
            x,
            y,
            width,
            height,
        }
    }

    /// Checks alignment to the coarsest tap and containment in a `canvas x canvas` image.
    pub fn validate(&self, canvas_h: usize, canvas_w: usize) -> Result<()> {
        let op = "Region";
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(op, "region is empty"));
        }
        if [self.x, self.y, self.width, self.height]
            .iter()
            .any(|v| v % MAX_STRIDE != 0)
        {
            return Err(Error::invalid(
                op,
                format!("{self:?} is not aligned to {MAX_STRIDE} pixels"),
            ));
        }
        if self.x + self.width > canvas_w || self.y + self.height > canvas_h {
            return Err(Error::invalid(
                op,
                format!("{self:?} exceeds the {canvas_h}x{canvas_w} canvas"),
            ));
        }
        Ok(())
    }

    /// The footprint of this region on a map downsampled by `stride`.
    pub fn scaled(&self, stride: usize) -> Region {
        Region::new(
            self.x / stride,
            self.y / stride,
            self.width / stride,
            self.height / stride,
        )
    }

    pub fn crop(&self, map: &Tensor, stride: usize) -> Result<Tensor> {
        let r = self.scaled(stride);
        map.crop(r.y, r.x, r.height, r.width)
    }
}

/// Grid cell `(row, col)`; covers pixels `[row*p, row*p+p) x [col*p, col*p+p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// All cells of a square canvas in row-major order.
pub fn grid_cells(canvas: usize, patch: usize) -> Result<Vec<Cell>> {
    if patch == 0 || canvas == 0 || !canvas.is_multiple_of(patch) {
        return Err(Error::invalid(
            "grid_cells",
            format!("canvas {canvas} is not divisible into {patch}-pixel patches"),
        ));
    }
    let k = canvas / patch;
    Ok((0..k)
        .flat_map(|row| (0..k).map(move |col| Cell { row, col }))
        .collect())
}

/// Where to look for a match: offsets `origin + i*step` with `|i*step| <= radius`,
/// clamped to the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchWindow {
    pub radius: usize,
    pub step: usize,
}

impl Default for SearchWindow {
    fn default() -> Self {
        SearchWindow {
            radius: 16,
            step: 16,
        }
    }
}

impl SearchWindow {
    /// Candidate top-left offsets along one axis, ascending and deduplicated.
    pub fn offsets(&self, origin: usize, max_offset: usize) -> Vec<usize> {
        let step = self.step.max(1);
        let reach = self.radius / step;
        let mut out: Vec<usize> = (-(reach as isize)..=reach as isize)
            .map(|i| (origin as isize + i * step as isize).clamp(0, max_offset as isize) as usize)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// A matched exemplar patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRef {
    pub pair_index: usize,
    pub row: usize,
    pub col: usize,
    /// Mean squared intensity error.
    pub cost: f64,
}

/// Aligned exemplar pairs, with a feature pyramid per sketch.
#[derive(Debug, Clone, Default)]
pub struct ExemplarSet {
    pub photos: Vec<Tensor>,
    pub sketches: Vec<Tensor>,
    pub pyramids: Vec<FeaturePyramid>,
}

impl ExemplarSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pair, extracting the sketch pyramid with `vgg`.
    pub fn push_extract(&mut self, photo: Tensor, sketch: Tensor, vgg: &VggWeights) -> Result<()> {
        let pyramid = vgg.extract(&sketch)?;
        self.push(photo, sketch, pyramid)
    }

    pub fn push(&mut self, photo: Tensor, sketch: Tensor, pyramid: FeaturePyramid) -> Result<()> {
        let ps = photo.shape();
        if ps.n != 1 || ps.c != 1 || sketch.shape() != ps {
            return Err(Error::shape("ExemplarSet", ps, sketch.shape()));
        }
        if let Some(first) = self.photos.first() {
            photo.ensure_shape("ExemplarSet", first.shape())?;
        }
        if pyramid.image_size() != (ps.h, ps.w) {
            return Err(Error::shape(
                "ExemplarSet",
                format!("pyramid of a {}x{} image", ps.h, ps.w),
                format!("{:?}", pyramid.image_size()),
            ));
        }
        self.photos.push(photo);
        self.sketches.push(sketch);
        self.pyramids.push(pyramid);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.photos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photos.is_empty()
    }
}

fn patch_mse(photo: &Tensor, row: usize, col: usize, patch: &Tensor) -> f64 {
    let s = patch.shape();
    let w = photo.shape().w;
    let src = photo.plane(0, 0);
    let mut acc = 0.0;
    for (y, prow) in patch.plane(0, 0).chunks_exact(s.w).enumerate() {
        let start = (row + y) * w + col;
        for (a, b) in src[start..start + s.w].iter().zip(prow) {
            let d = a - b;
            acc += d * d;
        }
    }
    acc / s.plane() as f64
}

/// Lowest-MSE exemplar photo patch within the search window around `origin`
/// (top-left pixel of the test patch). Ties go to the smallest
/// `(pair_index, row, col)`.
pub fn match_patch(
    test_patch: &Tensor,
    photos: &[Tensor],
    origin: (usize, usize),
    window: SearchWindow,
) -> Result<PatchRef> {
    let first = photos
        .first()
        .ok_or_else(|| Error::invalid("match_patch", "exemplar set is empty"))?;
    let ps = test_patch.shape();
    let fs = first.shape();
    if ps.n != 1 || ps.c != 1 || ps.h > fs.h || ps.w > fs.w {
        return Err(Error::shape(
            "match_patch",
            format!("1x1 patch within {fs}"),
            ps,
        ));
    }
    let rows = window.offsets(origin.0, fs.h - ps.h);
    let cols = window.offsets(origin.1, fs.w - ps.w);
    let mut best: Option<PatchRef> = None;
    for (pair_index, photo) in photos.iter().enumerate() {
        photo.ensure_shape("match_patch", fs)?;
        for &row in &rows {
            for &col in &cols {
                let cost = patch_mse(photo, row, col, test_patch);
                if best.is_none_or(|b| cost < b.cost) {
                    best = Some(PatchRef {
                        pair_index,
                        row,
                        col,
                        cost,
                    });
                }
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// The five tap crops belonging to one image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidColumn {
    pub crops: [Tensor; 5],
}

impl PyramidColumn {
    pub fn get(&self, layer: StyleLayer) -> &Tensor {
        &self.crops[layer.index()]
    }
}

/// Crops the feature patches of a `patch x patch` image patch at `(row, col)` from every tap.
pub fn crop_column(
    pyramid: &FeaturePyramid,
    row: usize,
    col: usize,
    patch: usize,
) -> Result<PyramidColumn> {
    if !row.is_multiple_of(MAX_STRIDE)
        || !col.is_multiple_of(MAX_STRIDE)
        || !patch.is_multiple_of(MAX_STRIDE)
        || patch == 0
    {
        return Err(Error::invalid(
            "crop_column",
            format!(
                "patch {patch} at ({row}, {col}) is not aligned to the {MAX_STRIDE}-pixel tap grid"
            ),
        ));
    }
    let crops = StyleLayer::ALL.map(|l| {
        let s = l.stride();
        pyramid.get(l).crop(row / s, col / s, patch / s, patch / s)
    });
    let mut out = Vec::with_capacity(5);
    for c in crops {
        out.push(c?);
    }
    Ok(PyramidColumn {
        crops: out.try_into().expect("five crops"),
    })
}

/// Grid of pyramid columns, one per cell, row-major.
#[derive(Debug, Clone)]
pub struct ColumnGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub cells: Vec<Option<PyramidColumn>>,
}

impl ColumnGrid {
    pub fn new(rows: usize, cols: usize, patch: usize) -> Self {
        ColumnGrid {
            rows,
            cols,
            patch,
            cells: vec![None; rows * cols],
        }
    }

    pub fn set(&mut self, cell: Cell, column: PyramidColumn) {
        self.cells[cell.row * self.cols + cell.col] = Some(column);
    }
}

/// Tiles the columns into full-size feature maps, one tile per cell, no blending.
pub fn assemble_target(grid: &ColumnGrid) -> Result<FeaturePyramid> {
    let mut maps = Vec::with_capacity(5);
    for l in StyleLayer::ALL {
        let s = l.stride();
        let tile = grid.patch / s;
        let mut channels = None;
        let mut map: Option<Tensor> = None;
        for (i, cell) in grid.cells.iter().enumerate() {
            let column = cell.as_ref().ok_or_else(|| {
                Error::invalid(
                    "assemble_target",
                    format!("cell ({}, {}) has no column", i / grid.cols, i % grid.cols),
                )
            })?;
            let crop = column.get(l);
            let c = *channels.get_or_insert(crop.shape().c);
            crop.ensure_shape("assemble_target", Shape::new(1, c, tile, tile))?;
            let m = map.get_or_insert_with(|| {
                Tensor::zeros(Shape::new(1, c, grid.rows * tile, grid.cols * tile))
            });
            m.paste(crop, (i / grid.cols) * tile, (i % grid.cols) * tile)?;
        }
        maps.push(map.ok_or_else(|| Error::invalid("assemble_target", "empty grid"))?);
    }
    Ok(FeaturePyramid {
        maps: maps.try_into().expect("five maps"),
    })
}

/// Gram matrices of a target pyramid over the whole canvas and over region R.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    pub full: [GramMatrix; 5],
    pub region: [GramMatrix; 5],
    pub region_rect: Region,
}

impl GramSet {
    pub fn full(&self, layer: StyleLayer) -> &GramMatrix {
        &self.full[layer.index()]
    }

    pub fn region(&self, layer: StyleLayer) -> &GramMatrix {
        &self.region[layer.index()]
    }
}

pub fn target_grams(target: &FeaturePyramid, region: Region) -> Result<GramSet> {
    let (h, w) = target.image_size();
    region.validate(h, w)?;
    let mut full = Vec::with_capacity(5);
    let mut reg = Vec::with_capacity(5);
    for l in StyleLayer::ALL {
        let map = target.get(l);
        full.push(gram(map)?);
        reg.push(gram(&region.crop(map, l.stride())?)?);
    }
    Ok(GramSet {
        full: full.try_into().expect("five grams"),
        region: reg.try_into().expect("five grams"),
        region_rect: region,
    })
}

/// How matched sketch patches become a style target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleComposition {
    /// Tile pyramid columns in feature space.
    #[default]
    FeatureSpace,
    /// Paste sketch patches into an image, then extract its features.
    PixelSpace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleOptions {
    pub patch: usize,
    pub window: SearchWindow,
    pub region: Region,
    pub composition: StyleComposition,
}

#[derive(Debug, Clone)]
pub struct StyleEstimate {
    pub grams: GramSet,
    /// One match per grid cell, row-major.
    pub matches: Vec<(Cell, PatchRef)>,
    pub target: FeaturePyramid,
    /// The pasted sketch image, in pixel-space mode only.
    pub composite: Option<Tensor>,
}

/// Matches every grid cell of `photo` and builds the target Gram set.
pub fn estimate_style(
    photo: &Tensor,
    exemplars: &ExemplarSet,
    vgg: &VggWeights,
    opts: &StyleOptions,
) -> Result<StyleEstimate> {
    let s = photo.shape();
    if s.n != 1 || s.c != 1 || s.h != s.w {
        return Err(Error::shape("estimate_style", "1x1xNxN photo", s));
    }
    if exemplars.is_empty() {
        return Err(Error::invalid("estimate_style", "exemplar set is empty"));
    }
    exemplars.photos[0].ensure_shape("estimate_style", s)?;
    let p = opts.patch;
    let cells = grid_cells(s.h, p)?;
    let mut matches = Vec::with_capacity(cells.len());
    for &cell in &cells {
        let origin = (cell.row * p, cell.col * p);
        let test_patch = photo.crop(origin.0, origin.1, p, p)?;
        matches.push((
            cell,
            match_patch(&test_patch, &exemplars.photos, origin, opts.window)?,
        ));
    }
    let k = s.h / p;
    let (target, composite) = match opts.composition {
        StyleComposition::FeatureSpace => {
            let mut grid = ColumnGrid::new(k, k, p);
            for (cell, m) in &matches {
                grid.set(
                    *cell,
                    crop_column(&exemplars.pyramids[m.pair_index], m.row, m.col, p)?,
                );
            }
            (assemble_target(&grid)?, None)
        }
        StyleComposition::PixelSpace => {
            let mut image = Tensor::zeros(s);
            for (cell, m) in &matches {
                let src = exemplars.sketches[m.pair_index].crop(m.row, m.col, p, p)?;
                image.paste(&src, cell.row * p, cell.col * p)?;
            }
            (vgg.extract(&image)?, Some(image))
        }
    };
    let grams = target_grams(&target, opts.region)?;
    Ok(StyleEstimate {
        grams,
        matches,
        target,
        composite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfile::Normalization;
    use crate::vgg::synthetic_weight_file;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_vgg() -> VggWeights {
        let f = synthetic_weight_file([4, 4, 6, 6, 6], 3, Normalization::identity(3));
        VggWeights::from_tensor_file(&f, String::new()).unwrap()
    }

    fn one_by_one(v: f64, size: usize) -> Tensor {
        Tensor::full(Shape::new(1, 1, size, size), v)
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid_cells(288, 16).unwrap().len(), 324);
        assert_eq!(grid_cells(32, 16).unwrap().len(), 4);
        assert_eq!(grid_cells(16, 16).unwrap(), vec![Cell { row: 0, col: 0 }]);
        assert!(grid_cells(40, 16).is_err());
        let cells = grid_cells(48, 16).unwrap();
        assert_eq!(cells[4], Cell { row: 1, col: 1 });
    }

    #[test]
    fn offsets_clamp_and_dedupe() {
        let w = SearchWindow {
            radius: 16,
            step: 16,
        };
        assert_eq!(w.offsets(0, 272), vec![0, 16]);
        assert_eq!(w.offsets(272, 272), vec![256, 272]);
        assert_eq!(w.offsets(128, 272), vec![112, 128, 144]);
        assert_eq!(
            SearchWindow {
                radius: 0,
                step: 16
            }
            .offsets(32, 272),
            vec![32]
        );
    }

    #[test]
    fn exact_patch_matches_with_zero_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let photos: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(Shape::new(1, 1, 48, 48), 0.0, 1.0, &mut rng))
            .collect();
        let patch = photos[2].crop(32, 16, 16, 16).unwrap();
        let m = match_patch(&patch, &photos, (16, 16), SearchWindow::default()).unwrap();
        assert_eq!((m.pair_index, m.row, m.col, m.cost), (2, 32, 16, 0.0));
    }

    #[test]
    fn nearer_intensity_wins() {
        let photos = vec![one_by_one(1.0, 16), one_by_one(0.5, 16)];
        let m = match_patch(
            &one_by_one(0.0, 16),
            &photos,
            (0, 0),
            SearchWindow::default(),
        )
        .unwrap();
        assert_eq!(m.pair_index, 1);
        assert_eq!(m.cost, 0.25);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let photos = vec![one_by_one(0.5, 32), one_by_one(0.5, 32)];
        let m = match_patch(
            &one_by_one(0.5, 16),
            &photos,
            (16, 16),
            SearchWindow::default(),
        )
        .unwrap();
        assert_eq!((m.pair_index, m.row, m.col), (0, 0, 0));
    }

    #[test]
    fn empty_exemplars_rejected() {
        assert!(match_patch(&one_by_one(0.0, 16), &[], (0, 0), SearchWindow::default()).is_err());
    }

    #[test]
    fn crop_offsets_scale_with_stride() {
        let vgg = small_vgg();
        let p = vgg.extract(&one_by_one(0.3, 64)).unwrap();
        let col = crop_column(&p, 16, 32, 16).unwrap();
        for l in StyleLayer::ALL {
            let s = l.stride();
            assert_eq!(
                col.get(l),
                &p.get(l).crop(16 / s, 32 / s, 16 / s, 16 / s).unwrap()
            );
        }
        assert_eq!(col.get(StyleLayer::Conv3_1).shape().h, 4);
        assert_eq!(col.get(StyleLayer::Conv5_1).shape(), Shape::new(1, 6, 1, 1));
        assert!(crop_column(&p, 8, 0, 16).is_err());
    }

    #[test]
    fn assembling_own_columns_reproduces_pyramid() {
        let vgg = small_vgg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(Shape::new(1, 1, 48, 48), 0.0, 1.0, &mut rng);
        let p = vgg.extract(&img).unwrap();
        let mut grid = ColumnGrid::new(3, 3, 16);
        for cell in grid_cells(48, 16).unwrap() {
            grid.set(
                cell,
                crop_column(&p, cell.row * 16, cell.col * 16, 16).unwrap(),
            );
        }
        assert_eq!(assemble_target(&grid).unwrap(), p);
    }

    #[test]
    fn missing_cell_rejected() {
        let vgg = small_vgg();
        let p = vgg.extract(&one_by_one(0.1, 32)).unwrap();
        let mut grid = ColumnGrid::new(2, 2, 16);
        grid.set(Cell { row: 0, col: 0 }, crop_column(&p, 0, 0, 16).unwrap());
        assert!(assemble_target(&grid).is_err());
    }

    #[test]
    fn zero_target_has_zero_grams() {
        let maps = StyleLayer::ALL
            .map(|l| Tensor::zeros(Shape::new(1, 3, 48 / l.stride(), 48 / l.stride())));
        let g = target_grams(&FeaturePyramid { maps }, Region::new(0, 0, 48, 48)).unwrap();
        assert!(g
            .full
            .iter()
            .chain(&g.region)
            .all(|m| m.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn whole_canvas_region_equals_full_gram() {
        let vgg = small_vgg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = vgg
            .extract(&Tensor::uniform(
                Shape::new(1, 1, 48, 48),
                0.0,
                1.0,
                &mut rng,
            ))
            .unwrap();
        let g = target_grams(&p, Region::new(0, 0, 48, 48)).unwrap();
        assert_eq!(g.full, g.region);
        for l in StyleLayer::ALL {
            assert_eq!(g.region(l).m, (48 / l.stride()).pow(2));
        }
    }

    #[test]
    fn region_must_be_aligned_and_inside() {
        assert!(Region::new(8, 0, 48, 48).validate(96, 96).is_err());
        assert!(Region::new(64, 64, 48, 48).validate(96, 96).is_err());
        assert!(Region::new(0, 0, 0, 16).validate(96, 96).is_err());
        assert!(Region::new(48, 32, 48, 48).validate(96, 96).is_ok());
    }
}
