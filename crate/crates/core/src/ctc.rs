//! Cell Tracking Challenge directory layout: multi-page TIFF frames and lineage files.
//!
//! A volume is one TIFF file, one page per z slice. Labels are written as
//! 16-bit grayscale; intensities and probabilities as 16-bit scaled to `[0, 65535]`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::lineage::LineageTable;
use crate::volume::{Dims, Grid, LabelVolume, Spacing, Volume};

fn tiff_err(path: &Path) -> impl FnOnce(tiff::TiffError) -> Error + '_ {
    move |source| Error::Tiff {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes every page of a grayscale TIFF with `convert` and stacks them along z.
fn read_pages<T: Copy + Send>(
    path: &Path,
    spacing: Spacing,
    convert: impl Fn(DecodingResult) -> std::result::Result<Vec<T>, String>,
) -> Result<Grid<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(tiff_err(path))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(tiff_err(path))?;
    let mut data = Vec::new();
    let mut page = 0usize;
    loop {
        let size = dec.dimensions().map_err(tiff_err(path))?;
        if size != (w, h) {
            return Err(Error::PageSize {
                path: path.to_path_buf(),
                page,
                got: size,
                expected: (w, h),
            });
        }
        match dec.colortype().map_err(tiff_err(path))? {
            ColorType::Gray(_) => {}
            other => {
                return Err(Error::UnsupportedTiff {
                    path: path.to_path_buf(),
                    reason: format!("page {page} has color type {other:?}, expected grayscale"),
                })
            }
        }
        let img = dec.read_image().map_err(tiff_err(path))?;
        let values = convert(img).map_err(|reason| Error::UnsupportedTiff {
            path: path.to_path_buf(),
            reason,
        })?;
        data.extend(values);
        page += 1;
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(tiff_err(path))?;
    }
    Grid::new(Dims::new(w as usize, h as usize, page), spacing, data)
}

/// Reads an 8/16/32-bit integer or 32-bit float stack as `f32`.
///
/// Integer samples are divided by their type's maximum, floats are kept verbatim.
pub fn read_volume(path: &Path, spacing: Spacing) -> Result<Volume> {
    read_pages(path, spacing, |img| match img {
        DecodingResult::U8(v) => Ok(v.into_iter().map(|x| x as f32 / 255.0).collect()),
        DecodingResult::U16(v) => Ok(v.into_iter().map(|x| x as f32 / 65535.0).collect()),
        DecodingResult::U32(v) => Ok(v
            .into_iter()
            .map(|x| (x as f64 / u32::MAX as f64) as f32)
            .collect()),
        DecodingResult::F32(v) => Ok(v),
        other => Err(format!("unsupported sample type {}", sample_name(&other))),
    })
}

/// Reads an unsigned integer label stack; values are kept as-is.
pub fn read_labels(path: &Path, spacing: Spacing) -> Result<LabelVolume> {
    read_pages(path, spacing, |img| match img {
        DecodingResult::U8(v) => Ok(v.into_iter().map(u32::from).collect()),
        DecodingResult::U16(v) => Ok(v.into_iter().map(u32::from).collect()),
        DecodingResult::U32(v) => Ok(v),
        other => Err(format!(
            "label images must be unsigned integers, found {}",
            sample_name(&other)
        )),
    })
}

fn sample_name(r: &DecodingResult) -> &'static str {
    match r {
        DecodingResult::U8(_) => "u8",
        DecodingResult::U16(_) => "u16",
        DecodingResult::U32(_) => "u32",
        DecodingResult::U64(_) => "u64",
        DecodingResult::F16(_) => "f16",
        DecodingResult::F32(_) => "f32",
        DecodingResult::F64(_) => "f64",
        DecodingResult::I8(_) => "i8",
        DecodingResult::I16(_) => "i16",
        DecodingResult::I32(_) => "i32",
        DecodingResult::I64(_) => "i64",
    }
}

fn write_pages(path: &Path, dims: Dims, data: &[u16]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err(path))?;
    let page = dims.nx * dims.ny;
    for slice in data.chunks(page) {
        enc.write_image::<colortype::Gray16>(dims.nx as u32, dims.ny as u32, slice)
            .map_err(tiff_err(path))?;
    }
    Ok(())
}

/// Writes labels as 16-bit pages. Labels above 65535 are an error.
pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let data = labels
        .data()
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| Error::LabelOverflow(l)))
        .collect::<Result<Vec<u16>>>()?;
    write_pages(path, labels.dims(), &data)
}

/// Writes values in `[0, 1]` as 16-bit pages; values outside are clamped.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let data: Vec<u16> = vol
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pages(path, vol.dims(), &data)
}

/// Writes `id begin end parent` lines, ascending id.
pub fn write_lineage(table: &LineageTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_lineage(path: &Path) -> Result<LineageTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LineageTable::from_text(&text, path)
}

/// One directory of numbered frames plus its lineage file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub root: PathBuf,
    /// File name before the 3-digit frame index, e.g. `mask`.
    pub prefix: String,
    pub lineage_file: String,
}

impl SequenceLayout {
    pub fn new(root: impl Into<PathBuf>, prefix: &str, lineage_file: &str) -> Self {
        Self {
            root: root.into(),
            prefix: prefix.to_owned(),
            lineage_file: lineage_file.to_owned(),
        }
    }

    /// Raw input frames `tNNN.tif`.
    pub fn input(root: impl Into<PathBuf>) -> Self {
        Self::new(root, "t", "res_track.txt")
    }

    /// Result masks `maskNNN.tif` with `res_track.txt`.
    pub fn result(root: impl Into<PathBuf>) -> Self {
        Self::new(root, "mask", "res_track.txt")
    }

    /// Tracking truth `man_trackNNN.tif` with `man_track.txt`.
    pub fn truth_track(root: impl Into<PathBuf>) -> Self {
        Self::new(root, "man_track", "man_track.txt")
    }

    /// Segmentation truth `man_segNNN.tif`.
    pub fn truth_seg(root: impl Into<PathBuf>) -> Self {
        Self::new(root, "man_seg", "man_track.txt")
    }

    pub fn frame_path(&self, t: usize) -> PathBuf {
        self.root.join(format!("{}{:03}.tif", self.prefix, t))
    }

    pub fn lineage_path(&self) -> PathBuf {
        self.root.join(&self.lineage_file)
    }

    /// Frame indices present on disk, ascending, possibly with gaps.
    pub fn present_frames(&self) -> Result<Vec<usize>> {
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut found = BTreeSet::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(rest) = name.strip_prefix(&self.prefix) else { continue };
            let digits = rest
                .strip_suffix(".tif")
                .or_else(|| rest.strip_suffix(".tiff"));
            if let Some(d) = digits {
                if !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) {
                    found.insert(d.parse::<usize>().expect("ascii digits"));
                }
            }
        }
        Ok(found.into_iter().collect())
    }

    /// Number of frames, which must be numbered contiguously from 0.
    pub fn frame_count(&self) -> Result<usize> {
        let frames = self.present_frames()?;
        if frames.is_empty() {
            return Err(Error::EmptySequence(self.root.clone()));
        }
        for (i, &f) in frames.iter().enumerate() {
            if f != i {
                return Err(Error::MissingFrame {
                    dir: self.root.clone(),
                    index: i,
                });
            }
        }
        Ok(frames.len())
    }

    fn check_dims<T: Copy>(frames: &[Grid<T>]) -> Result<()> {
        if let Some(first) = frames.first() {
            for (t, f) in frames.iter().enumerate() {
                if f.dims() != first.dims() {
                    return Err(Error::DimsMismatch(f.dims(), first.dims()).in_frame(t));
                }
            }
        }
        Ok(())
    }

    pub fn read_volumes(&self, spacing: Spacing) -> Result<Vec<Volume>> {
        let n = self.frame_count()?;
        let frames = (0..n)
            .into_par_iter()
            .map(|t| read_volume(&self.frame_path(t), spacing))
            .collect::<Result<Vec<_>>>()?;
        Self::check_dims(&frames)?;
        Ok(frames)
    }

    pub fn read_labels(&self, spacing: Spacing) -> Result<Vec<LabelVolume>> {
        let n = self.frame_count()?;
        let frames = (0..n)
            .into_par_iter()
            .map(|t| read_labels(&self.frame_path(t), spacing))
            .collect::<Result<Vec<_>>>()?;
        Self::check_dims(&frames)?;
        Ok(frames)
    }

    /// Reads whichever frames exist, for sparsely annotated truth.
    pub fn read_labels_sparse(&self, spacing: Spacing) -> Result<Vec<(usize, LabelVolume)>> {
        self.present_frames()?
            .into_par_iter()
            .map(|t| read_labels(&self.frame_path(t), spacing).map(|v| (t, v)))
            .collect()
    }

    fn ensure_root(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn write_labels(&self, frames: &[LabelVolume]) -> Result<()> {
        self.ensure_root()?;
        frames
            .par_iter()
            .enumerate()
            .try_for_each(|(t, f)| write_labels(&self.frame_path(t), f))
    }

    pub fn write_volumes(&self, frames: &[Volume]) -> Result<()> {
        self.ensure_root()?;
        frames
            .par_iter()
            .enumerate()
            .try_for_each(|(t, f)| write_volume(&self.frame_path(t), f))
    }

    pub fn read_lineage(&self) -> Result<LineageTable> {
        read_lineage(&self.lineage_path())
    }

    pub fn write_lineage(&self, table: &LineageTable) -> Result<()> {
        self.ensure_root()?;
        write_lineage(table, &self.lineage_path())
    }
}
