//! Greyscale PGM images and SVG result overlays.

use super::records::ResultItem;
use crate::error::{Error, Result};
use crate::numerics::Dense;
use image::{GrayImage, ImageFormat, Luma};
use std::fmt::Write as _;
use std::path::Path;

/// Reads any greyscale-convertible PNM file as `H×W` intensities in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Dense> {
    let img = image::open(path)
        .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Dense::new(vec![h as usize, w as usize], data)
}

/// Quantises intensities in `[0, 1]` to 8 bits and writes a binary PGM.
pub fn write_pgm(path: &Path, image: &Dense) -> Result<()> {
    if image.dims().len() != 2 {
        return Err(Error::shape(
            "write_pgm",
            format!("expected H×W, got {:?}", image.dims()),
        ));
    }
    let (h, w) = (image.rows(), image.cols());
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.get2(y as usize, x as usize).clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG showing the image with each result polygon and transcript drawn on top.
pub fn render_svg(image_href: &str, width: usize, height: usize, results: &[ResultItem]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"  <image href="{}" x="0" y="0" width="{width}" height="{height}"/>"#,
        escape(image_href)
    );
    for r in results {
        let pts: Vec<String> = r
            .poly
            .iter()
            .map(|[x, y]| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            s,
            r#"  <polygon points="{}" fill="none" stroke="lime" stroke-width="1"/>"#,
            pts.join(" ")
        );
        if let Some([x, y]) = r.poly.first() {
            let _ = writeln!(
                s,
                r#"  <text x="{x:.1}" y="{:.1}" fill="red" font-size="10" font-family="monospace">{} {:.2}</text>"#,
                (y - 2.0).max(10.0),
                escape(&r.text),
                r.conf
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_quantises() {
        let img = Dense::from_rows(&[vec![0.0, 0.5, 1.0], vec![0.2, 1.5, -0.1]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.dims(), &[2, 3]);
        let expect = [0.0, 128.0 / 255.0, 1.0, 51.0 / 255.0, 1.0, 0.0];
        for (a, b) in back.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(read_pgm(&dir.path().join("missing.pgm")).is_err());
    }

    #[test]
    fn svg_lists_every_result() {
        let item = ResultItem {
            poly: vec![[0.0, 0.0], [8.0, 0.0], [8.0, 4.0], [0.0, 4.0]],
            text: "A<B".into(),
            conf: 0.5,
            flags: vec![],
            points: vec![],
        };
        let svg = render_svg("a.pgm", 16, 8, &[item.clone(), item]);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(svg.contains("A&lt;B 0.50"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
