//! Grayscale image files, heatmaps and the AUC bar chart.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, Luma, Rgb, RgbImage};
use kdiag_core::data::ImageSample;
use kdiag_core::eval::{ClassStatus, EvalReport};
use kdiag_core::{Error, Result};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse(format!("{}: {other}", path.display())),
    }
}

/// Loads any PNG or PNM file as one channel in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<ImageSample> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = img.to_luma32f();
    let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    ImageSample::new(id, gray.height() as usize, gray.width() as usize, gray.into_raw())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// `ImageFormat::Pnm` would pick PAM (P7) for gray buffers.
fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))?;
    std::io::Write::flush(&mut out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit binary PGM (P5).
pub fn save_pgm(path: &Path, image: &ImageSample) -> Result<()> {
    let bytes = image.pixels.iter().map(|&p| to_byte(p)).collect();
    let img = GrayImage::from_raw(image.width as u32, image.height as u32, bytes).expect("buffer matches dimensions");
    write_pgm(path, &img)
}

/// Heatmap as a PGM normalized to its maximum and enlarged `scale` times,
/// plus a sidecar text file with one line of decimal floats per grid row.
pub fn save_heatmap(pgm: &Path, sidecar: &Path, heat: &[f64], grid: (usize, usize), scale: usize) -> Result<()> {
    let (h, w) = grid;
    let max = heat.iter().cloned().fold(0.0f64, f64::max);
    let scale = scale.max(1);
    let img = GrayImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let v = heat[(y as usize / scale) * w + x as usize / scale];
        Luma([if max > 0.0 { to_byte((v / max) as f32) } else { 0 }])
    });
    write_pgm(pgm, &img)?;
    let mut text = String::new();
    for r in 0..h {
        let row: Vec<String> = heat[r * w..(r + 1) * w].iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(sidecar, text).map_err(|source| Error::Io {
        path: sidecar.to_path_buf(),
        source,
    })
}

#[cfg(test)]
/// Reads a sidecar written by [`save_heatmap`].
pub fn read_sidecar(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}

const BAR: u32 = 14;
const GAP: u32 = 6;
const HEIGHT: u32 = 200;
const MARGIN: u32 = 10;

/// One bar per class, height proportional to AUC on a 0..1 axis; grey
/// bars for classes outside the mean, a dark line at 0.5.
pub fn auc_chart(path: &Path, report: &EvalReport) -> Result<()> {
    let n = report.classes.len().max(1) as u32;
    let width = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let height = HEIGHT + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let y_of = |v: f64| MARGIN + HEIGHT - (v.clamp(0.0, 1.0) * HEIGHT as f64).round() as u32;
    for (i, class) in report.classes.iter().enumerate() {
        let Some(value) = class.auc else { continue };
        let color = if class.status == ClassStatus::Ok {
            Rgb([52, 101, 164])
        } else {
            Rgb([170, 170, 170])
        };
        let x0 = MARGIN + i as u32 * (BAR + GAP);
        for y in y_of(value)..MARGIN + HEIGHT {
            for x in x0..x0 + BAR {
                img.put_pixel(x, y, color);
            }
        }
    }
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, y_of(0.5), Rgb([40, 40, 40]));
        img.put_pixel(x, MARGIN + HEIGHT - 1, Rgb([0, 0, 0]));
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let pixels: Vec<f32> = (0..80).map(|i| i as f32 / 79.0).collect();
        let img = ImageSample::new("x", 8, 10, pixels.clone()).unwrap();
        save_pgm(&path, &img).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
        let back = load_gray(&path).unwrap();
        assert_eq!((back.height, back.width), (8, 10));
        for (a, b) in back.pixels.iter().zip(&pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn sidecar_holds_the_exact_grid() {
        let dir = tempfile::tempdir().unwrap();
        let heat: Vec<f64> = (0..6).map(|i| (i + 1) as f64 / 21.0).collect();
        let (pgm, txt) = (dir.path().join("h.pgm"), dir.path().join("h.txt"));
        save_heatmap(&pgm, &txt, &heat, (2, 3), 4).unwrap();
        let rows = read_sidecar(&txt).unwrap();
        assert_eq!(rows.len(), 2);
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_eq!(*v, heat[r * 3 + c]);
            }
        }
        let img = image::open(&pgm).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (12, 8));
        assert_eq!(img.get_pixel(11, 7)[0], 255);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_gray(Path::new("/nonexistent/img.png")), Err(Error::Io { .. })));
    }
}
