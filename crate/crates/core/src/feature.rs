//! Patch-feature domain types, the `CLVF` interchange format and the
//! neighborhood aggregation that turns backbone layer outputs into patch
//! feature vectors.
//!
//! `CLVF` layout (all integers little-endian):
//!
//! ```text
//! header   magic "CLVF" | version u16 = 1 | dim u32 | grid_h u32 | grid_w u32
//!          | img_h u32 | img_w u32 | count u32
//! record   image_id u64 | label u8 (0 normal, 1 anomalous) | has_mask u8
//!          | payload grid_h*grid_w*dim f32 | mask img_h*img_w u8 (if has_mask)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"CLVF";
pub const FEATURE_VERSION: u16 = 1;

/// A row-major set of equally sized, finite patch vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("vector dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not split into vectors of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch vectors"));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut set = Self::empty(dim)?;
        for row in rows {
            set.push(row)?;
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch vectors"));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &VectorSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, found: other.dim });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Copies the listed rows, in the order given.
    pub fn select(&self, indices: &[usize]) -> VectorSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        VectorSet { dim: self.dim, data }
    }

    pub fn truncate(&mut self, len: usize) {
        self.data.truncate(len * self.dim);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }

    fn to_byte(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            other => Err(Error::Malformed(format!("label byte {other}"))),
        }
    }
}

/// Image resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub img_h: usize,
    pub img_w: usize,
}

impl ImageGeometry {
    pub fn new(img_h: usize, img_w: usize) -> Result<Self> {
        if img_h == 0 || img_w == 0 {
            return Err(Error::InvalidParameter(format!(
                "image geometry must be positive, got {img_h}x{img_w}"
            )));
        }
        Ok(Self { img_h, img_w })
    }

    pub fn pixels(&self) -> usize {
        self.img_h * self.img_w
    }
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self { img_h: 224, img_w: 224 }
    }
}

/// Patch grid of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub label: Label,
    /// `grid_h * grid_w` patch vectors, row-major.
    pub patches: VectorSet,
    /// Per-pixel ground truth (0/1) at image resolution.
    pub mask: Option<Vec<u8>>,
}

impl FeatureGrid {
    pub fn new(image_id: u64, grid_h: usize, grid_w: usize, label: Label, patches: VectorSet) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::InvalidParameter("patch grid dimensions must be positive".into()));
        }
        if patches.len() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} patches for a {grid_h}x{grid_w} grid",
                patches.len()
            )));
        }
        Ok(Self { image_id, grid_h, grid_w, label, patches, mask: None })
    }

    pub fn with_mask(mut self, mask: Vec<u8>, geometry: ImageGeometry) -> Result<Self> {
        if mask.len() != geometry.pixels() {
            return Err(Error::Shape(format!(
                "mask has {} entries, image is {}x{}",
                mask.len(),
                geometry.img_h,
                geometry.img_w
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::InvalidParameter("mask entries must be 0 or 1".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.patches.dim()
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        self.patches.row(row * self.grid_w + col)
    }
}

/// Contents of one `CLVF` file: a shared shape plus the grids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub geometry: ImageGeometry,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub grids: Vec<FeatureGrid>,
}

impl FeatureFile {
    pub fn new(
        geometry: ImageGeometry,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        grids: Vec<FeatureGrid>,
    ) -> Result<Self> {
        for g in &grids {
            if g.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, found: g.dim() });
            }
            if g.grid_h != grid_h || g.grid_w != grid_w {
                return Err(Error::Shape(format!(
                    "grid {} is {}x{}, file expects {grid_h}x{grid_w}",
                    g.image_id, g.grid_h, g.grid_w
                )));
            }
            if let Some(mask) = &g.mask {
                if mask.len() != geometry.pixels() {
                    return Err(Error::Shape(format!("mask of grid {} does not match geometry", g.image_id)));
                }
            }
        }
        Ok(Self { geometry, grid_h, grid_w, dim, grids })
    }

    /// Builds a file from non-empty grids, taking the shape from the first one.
    pub fn from_grids(geometry: ImageGeometry, grids: Vec<FeatureGrid>) -> Result<Self> {
        let first = grids.first().ok_or(Error::Empty("feature grids"))?;
        let (h, w, d) = (first.grid_h, first.grid_w, first.dim());
        Self::new(geometry, h, w, d, grids)
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        for (v, what) in [
            (self.dim, "dim"),
            (self.grid_h, "grid_h"),
            (self.grid_w, "grid_w"),
            (self.geometry.img_h, "img_h"),
            (self.geometry.img_w, "img_w"),
            (self.grids.len(), "count"),
        ] {
            w.write_all(&binio::to_u32(v, what)?.to_le_bytes())?;
        }
        for g in &self.grids {
            w.write_all(&g.image_id.to_le_bytes())?;
            w.write_all(&[g.label.to_byte(), g.mask.is_some() as u8])?;
            binio::write_f32s(w, g.patches.as_slice())?;
            if let Some(mask) = &g.mask {
                w.write_all(mask)?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, FEATURE_MAGIC)?;
        binio::read_version(r, FEATURE_VERSION)?;
        let dim = binio::read_u32(r, "header")? as usize;
        let grid_h = binio::read_u32(r, "header")? as usize;
        let grid_w = binio::read_u32(r, "header")? as usize;
        let img_h = binio::read_u32(r, "header")? as usize;
        let img_w = binio::read_u32(r, "header")? as usize;
        let count = binio::read_u32(r, "header")? as usize;
        let geometry = ImageGeometry::new(img_h, img_w)?;
        if count > 0 && (dim == 0 || grid_h == 0 || grid_w == 0) {
            return Err(Error::Malformed("zero-sized grid shape with non-empty payload".into()));
        }

        let values = grid_h * grid_w * dim;
        let mut grids = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let image_id = binio::read_u64(r, "record header")?;
            let label = Label::from_byte(binio::read_u8(r, "record header")?)?;
            let has_mask = match binio::read_u8(r, "record header")? {
                0 => false,
                1 => true,
                other => return Err(Error::Malformed(format!("has_mask byte {other}"))),
            };
            let payload = binio::read_f32s(r, values, "patch payload")?;
            let grid = FeatureGrid::new(image_id, grid_h, grid_w, label, VectorSet::new(dim, payload)?)?;
            let grid = if has_mask {
                grid.with_mask(binio::read_bytes(r, geometry.pixels(), "mask")?, geometry)?
            } else {
                grid
            };
            grids.push(grid);
        }
        binio::expect_eof(r)?;
        Self::new(geometry, grid_h, grid_w, dim, grids)
    }
}

pub fn write_feature_file(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    file.encode(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let mut r = BufReader::new(File::open(path)?);
    FeatureFile::decode(&mut r)
}

/// JSON sidecar mapping feature files to task names. Relative paths are
/// resolved against the manifest's own directory; list order is stream order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub tasks: Vec<TaskFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFiles {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl StreamManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// One raw backbone output, channel-major (`c * h * w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f32>,
}

impl Layer {
    pub fn new(channels: usize, height: usize, width: usize, activations: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidParameter("layer dimensions must be positive".into()));
        }
        if activations.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} activations for a {channels}x{height}x{width} layer",
                activations.len()
            )));
        }
        if activations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer activations"));
        }
        Ok(Self { channels, height, width, activations })
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.activations[(c * self.height + y) * self.width + x]
    }
}

/// Backbone outputs for one image, finest layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Layer>,
}

/// Local average pooling (stride 1, window `neighborhood`, only in-bounds
/// cells are averaged), nearest-neighbor upsampling of coarser layers to
/// `target` and channel concatenation, finest layer first.
///
/// The returned grid has id 0 and a normal label.
pub fn aggregate_layers(stack: &LayerStack, neighborhood: usize, target: (usize, usize)) -> Result<FeatureGrid> {
    let first = stack.layers.first().ok_or(Error::Empty("layer stack"))?;
    if neighborhood == 0 || neighborhood.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "neighborhood must be a positive odd integer, got {neighborhood}"
        )));
    }
    let (th, tw) = target;
    if (first.height, first.width) != (th, tw) {
        return Err(Error::Shape(format!(
            "target grid {th}x{tw} differs from finest layer {}x{}",
            first.height, first.width
        )));
    }

    let dim: usize = stack.layers.iter().map(|l| l.channels).sum();
    let pooled: Vec<Layer> = stack.layers.iter().map(|l| avg_pool_same(l, neighborhood)).collect();

    let mut data = vec![0f32; th * tw * dim];
    let mut offset = 0;
    for layer in &pooled {
        for y in 0..th {
            let sy = y * layer.height / th;
            for x in 0..tw {
                let sx = x * layer.width / tw;
                let base = (y * tw + x) * dim + offset;
                for c in 0..layer.channels {
                    data[base + c] = layer.at(c, sy, sx);
                }
            }
        }
        offset += layer.channels;
    }
    FeatureGrid::new(0, th, tw, Label::Normal, VectorSet::new(dim, data)?)
}

fn avg_pool_same(layer: &Layer, window: usize) -> Layer {
    if window == 1 {
        return layer.clone();
    }
    let r = window / 2;
    let (h, w) = (layer.height, layer.width);
    let mut out = vec![0f32; layer.activations.len()];
    for c in 0..layer.channels {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let mut sum = 0f64;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        sum += layer.at(c, yy, xx) as f64;
                    }
                }
                let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                out[(c * h + y) * w + x] = (sum / n) as f32;
            }
        }
    }
    Layer { channels: layer.channels, height: h, width: w, activations: out }
}
