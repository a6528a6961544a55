//! NIfTI-1 volumes and the `imagesTr/labelsTr` dataset layout.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiVolume, ReaderOptions};
use nnqc_core::fingerprint::VolumePair;
use nnqc_core::grid::Grid;
use nnqc_core::orientation::Orientation;

use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "imagesTr";
pub const LABELS_DIR: &str = "labelsTr";

/// Voxel grid, spacing and orientation of one volume file.
pub struct Volume<T> {
    pub grid: Grid<T>,
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

fn nifti_err(path: &Path, e: nifti::NiftiError) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn qform_affine(h: &NiftiHeader) -> [[f64; 4]; 4] {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [h.pixdim[1] as f64, h.pixdim[2] as f64, qfac * h.pixdim[3] as f64];
    let offset = [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

/// sform when present, else qform, else scanner-less pixdim diagonal.
pub fn header_affine(h: &NiftiHeader) -> [[f64; 4]; 4] {
    if h.sform_code > 0 {
        let row = |r: [f32; 4]| r.map(|v| v as f64);
        [row(h.srow_x), row(h.srow_y), row(h.srow_z), [0.0, 0.0, 0.0, 1.0]]
    } else if h.qform_code > 0 {
        qform_affine(h)
    } else {
        let p = |i: usize| h.pixdim[i].abs().max(f32::MIN_POSITIVE) as f64;
        [[p(1), 0.0, 0.0, 0.0], [0.0, p(2), 0.0, 0.0], [0.0, 0.0, p(3), 0.0], [0.0, 0.0, 0.0, 1.0]]
    }
}

fn read_raw(path: &Path) -> Result<(NiftiHeader, Vec<f64>, [usize; 3])> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let volume = obj.into_volume();
    let shape = volume.dim().to_vec();
    let dims = match shape.as_slice() {
        [x] => [*x as usize, 1, 1],
        [x, y] => [*x as usize, *y as usize, 1],
        [x, y, z] => [*x as usize, *y as usize, *z as usize],
        [x, y, z, rest @ ..] if rest.iter().all(|&r| r == 1) => [*x as usize, *y as usize, *z as usize],
        _ => return Err(Error::Format(format!("{}: unsupported dims {shape:?}", path.display()))),
    };
    let arr = volume.into_ndarray::<f64>().map_err(|e| nifti_err(path, e))?;
    // x fastest, matching the grid layout
    let data: Vec<f64> = arr.t().iter().copied().collect();
    Ok((header, data, dims))
}

fn volume_meta(path: &Path, h: &NiftiHeader) -> Result<([f64; 3], Orientation)> {
    let spacing = [1, 2, 3].map(|i| h.pixdim[i].abs() as f64);
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Format(format!("{}: non-positive spacing {spacing:?}", path.display())));
    }
    let orientation = Orientation::from_affine(&header_affine(h))?;
    Ok((spacing, orientation))
}

pub fn read_image(path: &Path) -> Result<Volume<f32>> {
    let (h, data, dims) = read_raw(path)?;
    let (spacing, orientation) = volume_meta(path, &h)?;
    Ok(Volume {
        grid: Grid::from_vec(dims, data.into_iter().map(|v| v as f32).collect())?,
        spacing,
        orientation,
    })
}

/// Labels must be non-negative integers below 256.
pub fn read_mask(path: &Path) -> Result<Volume<u8>> {
    let (h, data, dims) = read_raw(path)?;
    let (spacing, orientation) = volume_meta(path, &h)?;
    let labels = data
        .into_iter()
        .map(|v| {
            let r = v.round();
            if (r - v).abs() > 1e-3 || !(0.0..=255.0).contains(&r) {
                Err(Error::Format(format!("{}: non-label value {v}", path.display())))
            } else {
                Ok(r as u8)
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Volume {
        grid: Grid::from_vec(dims, labels)?,
        spacing,
        orientation,
    })
}

fn header_for(spacing: [f64; 3], orientation: Orientation) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    let mut rows = [[0f32; 4]; 3];
    for (voxel_axis, &c) in orientation.as_str().as_bytes().iter().enumerate() {
        let (world, sign) = match c {
            b'R' => (0, 1.0),
            b'L' => (0, -1.0),
            b'A' => (1, 1.0),
            b'P' => (1, -1.0),
            b'S' => (2, 1.0),
            _ => (2, -1.0),
        };
        rows[world][voxel_axis] = sign * spacing[voxel_axis] as f32;
    }
    h.srow_x = rows[0];
    h.srow_y = rows[1];
    h.srow_z = rows[2];
    h.sform_code = 1;
    h.qform_code = 0;
    h.xyzt_units = 2;
    h
}

fn write_grid<T: Copy + nifti::DataElement + bytemuck::Pod>(
    path: &Path,
    grid: &Grid<T>,
    spacing: [f64; 3],
    orientation: Orientation,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let [x, y, z] = grid.dims();
    let arr = Array3::from_shape_vec((x, y, z).f(), grid.data().to_vec())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = header_for(spacing, orientation);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| nifti_err(path, e))
}

pub fn write_image(path: &Path, v: &Volume<f32>) -> Result<()> {
    write_grid(path, &v.grid, v.spacing, v.orientation)
}

pub fn write_mask(path: &Path, v: &Volume<u8>) -> Result<()> {
    write_grid(path, &v.grid, v.spacing, v.orientation)
}

/// Subject ids with both an image (`<id>_0000` or `<id>`) and a label file.
pub fn list_subjects(dataset: &Path) -> Result<Vec<String>> {
    let labels = dataset.join(LABELS_DIR);
    let entries = std::fs::read_dir(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&labels, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = strip_nifti(&name) {
            if image_path(dataset, id).is_some() {
                ids.push(id.to_string());
            } else {
                log::warn!("{}: label without image, skipped", name);
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn strip_nifti(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn first_existing(candidates: impl IntoIterator<Item = PathBuf>) -> Option<PathBuf> {
    candidates.into_iter().find(|p| p.exists())
}

pub fn image_path(dataset: &Path, id: &str) -> Option<PathBuf> {
    let dir = dataset.join(IMAGES_DIR);
    first_existing(
        [format!("{id}_0000.nii.gz"), format!("{id}_0000.nii"), format!("{id}.nii.gz"), format!("{id}.nii")]
            .map(|n| dir.join(n)),
    )
}

pub fn label_path(dataset: &Path, id: &str) -> Option<PathBuf> {
    let dir = dataset.join(LABELS_DIR);
    first_existing([format!("{id}.nii.gz"), format!("{id}.nii")].map(|n| dir.join(n)))
}

/// Reads an image/mask pair; the mask grid must match the image grid.
pub fn read_pair(subject_id: &str, image: &Path, mask: &Path) -> Result<VolumePair> {
    let im = read_image(image)?;
    let m = read_mask(mask)?;
    if im.grid.dims() != m.grid.dims() {
        return Err(Error::Format(format!(
            "{subject_id}: image dims {:?} vs mask dims {:?}",
            im.grid.dims(),
            m.grid.dims()
        )));
    }
    if im.orientation != m.orientation {
        log::warn!("{subject_id}: mask orientation {} differs from image {}; using the image's", m.orientation, im.orientation);
    }
    Ok(VolumePair {
        subject_id: subject_id.to_string(),
        image: im.grid,
        mask: m.grid,
        spacing: im.spacing,
        orientation: im.orientation,
    })
}

pub fn read_dataset(dataset: &Path) -> Result<Vec<VolumePair>> {
    let ids = list_subjects(dataset)?;
    if ids.is_empty() {
        return Err(Error::MissingPrerequisite(format!("no subjects under {}", dataset.display())));
    }
    ids.iter()
        .map(|id| {
            let image = image_path(dataset, id).expect("listed subjects have images");
            let label = label_path(dataset, id).expect("listed subjects have labels");
            read_pair(id, &image, &label)
        })
        .collect()
}

pub fn write_dataset(dataset: &Path, pairs: &[VolumePair]) -> Result<()> {
    for p in pairs {
        write_image(
            &dataset.join(IMAGES_DIR).join(format!("{}_0000.nii.gz", p.subject_id)),
            &Volume {
                grid: p.image.clone(),
                spacing: p.spacing,
                orientation: p.orientation,
            },
        )?;
        write_mask(
            &dataset.join(LABELS_DIR).join(format!("{}.nii.gz", p.subject_id)),
            &Volume {
                grid: p.mask.clone(),
                spacing: p.spacing,
                orientation: p.orientation,
            },
        )?;
    }
    Ok(())
}
