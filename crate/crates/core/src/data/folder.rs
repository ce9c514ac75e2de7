use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{DataError, Image, LabeledDataset, Provenance, Result};

/// Files that could not be decoded while loading a folder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<PathBuf>,
}

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(e.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, data))
}

/// Loads `root/<class>/<image>`; classes are the sorted subdirectory names.
///
/// Undecodable files are skipped with a warning and listed in the report.
/// When `size` is given, each image is centre-cropped to its shorter side and
/// area-resized to `size x size`.
pub fn load_image_folder(root: &Path, size: Option<usize>) -> Result<(LabeledDataset, LoadReport)> {
    let root_err = |reason: &str| DataError::Root {
        path: root.display().to_string(),
        reason: reason.to_string(),
    };
    if !root.is_dir() {
        return Err(root_err("not a directory"));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(root_err("no class subdirectories"));
    }
    let names: Vec<String> = classes
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut ds = LabeledDataset::new(names.clone());
    let mut report = LoadReport::default();
    for (label, dir) in classes.iter().enumerate() {
        let mut count = 0;
        for path in sorted_entries(dir)? {
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !path.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            match decode(&path) {
                Ok(img) => {
                    let img = match size {
                        Some(s) => {
                            let crop = img.height().min(img.width());
                            center_crop_resize(&img, crop, s)?
                        }
                        None => img,
                    };
                    ds.push(img, label, Provenance::Real);
                    count += 1;
                }
                Err(e) => {
                    warn!("skipping unreadable image: {e}");
                    report.skipped.push(path);
                }
            }
        }
        if count == 0 {
            return Err(DataError::EmptyClass(names[label].clone()));
        }
    }
    report.loaded = ds.len();
    Ok((ds, report))
}

pub(crate) fn to_rgb8(img: &Image) -> image::RgbImage {
    let bytes = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer size matches")
}

/// Writes `root/<class>/<index>.png`, the layout [`load_image_folder`] reads.
pub fn save_image_folder(ds: &LabeledDataset, root: &Path) -> Result<()> {
    for (c, name) in ds.class_names().iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, i) in ds.indices_of_class(c).into_iter().enumerate() {
            let path = dir.join(format!("{k:05}.png"));
            to_rgb8(&ds.images()[i]).save(&path).map_err(|source| DataError::Image {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Centre crop to `crop x crop`, then area-average resize to `size x size`.
pub fn center_crop_resize(img: &Image, crop: usize, size: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if crop == 0 || crop > h || crop > w {
        return Err(DataError::Crop { crop, height: h, width: w });
    }
    if size == 0 {
        return Err(DataError::Invalid {
            what: "size",
            reason: "must be >= 1".into(),
        });
    }
    let (y0, x0) = ((h - crop) / 2, (w - crop) / 2);
    let mut data = Vec::with_capacity(crop * crop * 3);
    for y in y0..y0 + crop {
        let o = (y * w + x0) * 3;
        data.extend_from_slice(&img.data()[o..o + crop * 3]);
    }
    Ok(resize_area(&Image::new(crop, crop, data), size))
}

/// Overlap weights of output cells over input cells along one axis.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut ws = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / scale));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// Area-averaging resize of a square or rectangular image to `size x size`.
pub fn resize_area(img: &Image, size: usize) -> Image {
    let wy = area_weights(img.height(), size);
    let wx = area_weights(img.width(), size);
    let mut out = Image::filled(size, size, [0.0; 3]);
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(iy, a) in ry {
                for &(ix, b) in rx {
                    let p = img.pixel(iy, ix);
                    for c in 0..3 {
                        acc[c] += a * b * p[c] as f64;
                    }
                }
            }
            out.set_pixel(oy, ox, acc.map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_resize_of_constant_is_constant() {
        let img = Image::filled(450, 600, [0.2, 0.4, 0.6]);
        let out = center_crop_resize(&img, 450, 128).unwrap();
        assert_eq!((out.height(), out.width()), (128, 128));
        for px in out.data().chunks(3) {
            assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_takes_the_centre() {
        let mut img = Image::filled(4, 6, [0.0; 3]);
        for y in 0..4 {
            for x in 1..5 {
                img.set_pixel(y, x, [1.0; 3]);
            }
        }
        let out = center_crop_resize(&img, 4, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn area_resize_halving_averages_blocks() {
        let data: Vec<f32> = (0..16).flat_map(|i| [i as f32 / 16.0; 3]).collect();
        let out = resize_area(&Image::new(4, 4, data), 2);
        let want = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        assert!((out.pixel(0, 0)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn oversized_crop_rejected() {
        let img = Image::filled(10, 12, [0.0; 3]);
        assert!(matches!(center_crop_resize(&img, 11, 4), Err(DataError::Crop { .. })));
    }

    #[test]
    fn folder_round_trip_skips_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = LabeledDataset::new(vec!["a".into(), "b".into()]);
        ds.push(Image::filled(3, 3, [1.0, 0.0, 0.0]), 0, Provenance::Real);
        ds.push(Image::filled(3, 3, [0.0, 1.0, 0.0]), 1, Provenance::Real);
        ds.push(Image::filled(3, 3, [0.0, 0.0, 1.0]), 1, Provenance::Real);
        save_image_folder(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("b").join("broken.png"), b"not a png").unwrap();
        let (back, report) = load_image_folder(dir.path(), None).unwrap();
        assert_eq!(back.class_histogram(), vec![1, 2]);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(back.images()[0], ds.images()[0]);
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("x")).unwrap();
        assert!(matches!(load_image_folder(dir.path(), None), Err(DataError::EmptyClass(_))));
    }
}
