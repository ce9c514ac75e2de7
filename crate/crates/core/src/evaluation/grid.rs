use std::path::Path;

use image::{Rgb, RgbImage};

use super::EvalError;
use crate::data::LabeledDataset;

/// Width of the class-name column on the left of a grid.
pub const LABEL_GUTTER: usize = 72;
pub const GLYPH_WIDTH: usize = 3;
pub const GLYPH_HEIGHT: usize = 5;
const PAD: usize = 2;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);

/// 3x5 bitmap glyphs, one row per entry, most significant bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [6, 1, 2, 4, 7],
        '3' => [6, 1, 2, 1, 6],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 6, 1, 6],
        '6' => [3, 4, 7, 5, 7],
        '7' => [7, 1, 2, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 6],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '.' => [0, 0, 0, 0, 2],
        ' ' => [0; 5],
        _ => [6, 1, 2, 0, 2],
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x0: usize, y0: usize, scale: usize) {
    let advance = (GLYPH_WIDTH + 1) * scale;
    let fit = (LABEL_GUTTER - 2 * PAD) / advance;
    for (i, ch) in text.chars().take(fit).enumerate() {
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_WIDTH {
                if bits >> (GLYPH_WIDTH - 1 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (x, y) = (x0 + i * advance + col * scale + dx, y0 + row * scale + dy);
                            if (x as u32) < img.width() && (y as u32) < img.height() {
                                img.put_pixel(x as u32, y as u32, INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Pixel size of a grid with `rows` classes and `cols` samples of `cell` px:
/// cells tile without gaps to the right of the label gutter.
pub fn grid_dimensions(rows: usize, cols: usize, cell: usize) -> (usize, usize) {
    (LABEL_GUTTER + cols * cell, rows * cell)
}

/// One row per class holding its first `cols` images, class name on the
/// left. Classes with fewer images leave blank cells.
pub fn emit_sample_grid(ds: &LabeledDataset, cols: usize, path: &Path) -> Result<(), EvalError> {
    if ds.is_empty() || cols == 0 {
        return Err(EvalError::Data("nothing to draw".into()));
    }
    let cell = ds.images()[0].height();
    if ds.images().iter().any(|im| im.height() != cell || im.width() != cell) {
        return Err(EvalError::Data("grid images must share one square size".into()));
    }
    let rows = ds.n_classes();
    let (w, h) = grid_dimensions(rows, cols, cell);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, BACKGROUND);
    let scale = if cell < 2 * GLYPH_HEIGHT + 2 { 1 } else { 2 };
    for c in 0..rows {
        let y0 = c * cell;
        let text_y = y0 + cell.saturating_sub(GLYPH_HEIGHT * scale) / 2;
        draw_text(&mut img, &ds.class_names()[c], PAD, text_y, scale);
        for (j, &i) in ds.indices_of_class(c).iter().take(cols).enumerate() {
            let x0 = LABEL_GUTTER + j * cell;
            let src = &ds.images()[i];
            for y in 0..cell {
                for x in 0..cell {
                    let p = src.pixel(y, x).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(p));
                }
            }
        }
    }
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| EvalError::Write {
            path: d.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    img.save(path).map_err(|e| EvalError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, Provenance};

    #[test]
    fn glyphs_fit_three_columns() {
        for c in "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_. ?".chars() {
            assert!(glyph(c).iter().all(|&r| r < 8), "{c}");
        }
    }

    #[test]
    fn grid_places_cells_and_labels() {
        let mut ds = LabeledDataset::new(vec!["NV".into(), "DF".into()]);
        ds.push(Image::filled(16, 16, [1.0, 0.0, 0.0]), 0, Provenance::Generated);
        ds.push(Image::filled(16, 16, [0.0, 0.0, 1.0]), 1, Provenance::Generated);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        emit_sample_grid(&ds, 3, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!((img.width() as usize, img.height() as usize), grid_dimensions(2, 3, 16));
        assert_eq!(grid_dimensions(7, 8, 32), (LABEL_GUTTER + 8 * 32, 7 * 32));
        let x = (LABEL_GUTTER + 5) as u32;
        assert_eq!(img.get_pixel(x, 5).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(x, 16 + 5).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(x + 16, 5).0, BACKGROUND.0);
        let ink = (0..LABEL_GUTTER as u32)
            .flat_map(|x| (0..img.height()).map(move |y| (x, y)))
            .filter(|&(x, y)| img.get_pixel(x, y) == &INK)
            .count();
        assert!(ink > 0);
        let again = dir.path().join("h.png");
        emit_sample_grid(&ds, 3, &again).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    }
}
