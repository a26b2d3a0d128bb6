//! File exporters for inspection artifacts: 8-bit PGM and SVG heat maps,
//! CSV matrices and loss curves.

use ndarray::ArrayView2;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Min-max scale a matrix to 0..=255 (a constant matrix maps to 0).
fn quantize(values: ArrayView2<'_, f64>) -> (Vec<u8>, usize, usize) {
    let (rows, cols) = (values.nrows(), values.ncols());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let mut bytes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            bytes.push(((values[[r, c]] - min) * scale).round() as u8);
        }
    }
    (bytes, rows, cols)
}

/// Binary PGM (P5), one gray byte per cell, min-max scaled.
pub fn write_pgm(path: &Path, values: ArrayView2<'_, f64>) -> std::io::Result<()> {
    let (bytes, rows, cols) = quantize(values);
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{cols} {rows}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}

/// SVG heat map: one grayscale rect per cell.
pub fn write_svg_heatmap(
    path: &Path,
    values: ArrayView2<'_, f64>,
    cell_px: usize,
) -> std::io::Result<()> {
    let (bytes, rows, cols) = quantize(values);
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(
        f,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">",
        cols * cell_px,
        rows * cell_px
    )?;
    for r in 0..rows {
        for c in 0..cols {
            let g = bytes[r * cols + c];
            writeln!(
                f,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell_px}\" height=\"{cell_px}\" fill=\"rgb({g},{g},{g})\"/>",
                c * cell_px,
                r * cell_px
            )?;
        }
    }
    writeln!(f, "</svg>")?;
    Ok(())
}

/// Plain CSV: one row per matrix row, values comma separated.
pub fn write_matrix_csv(path: &Path, values: ArrayView2<'_, f64>) -> std::io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for r in 0..values.nrows() {
        for c in 0..values.ncols() {
            if c > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", values[[r, c]])?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Loss curve CSV: `epoch,loss,lr` per trained epoch.
pub fn write_loss_csv(path: &Path, losses: &[f64], lrs: &[f64]) -> std::io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "epoch,loss,lr")?;
    for (i, (loss, lr)) in losses.iter().zip(lrs).enumerate() {
        writeln!(f, "{},{},{}", i + 1, loss, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn identity_heatmap_has_white_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let eye = Array2::<f64>::eye(4);
        let path = dir.path().join("eye.pgm");
        write_pgm(&path, eye.view()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pixels = &bytes[header.len()..];
        assert_eq!(pixels.len(), 16);
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r == c { 255 } else { 0 };
                assert_eq!(pixels[r * 4 + c], expected, "({r},{c})");
            }
        }
    }

    #[test]
    fn pgm_pixels_reproduce_min_max_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64 * 0.25 - 1.0);
        let path = dir.path().join("m.pgm");
        write_pgm(&path, m.view()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let pixels = &bytes[b"P5\n5 3\n255\n".len()..];
        let (min, max) = (-1.0, 13.0 * 0.25 - 1.0 + 0.25);
        for (i, &v) in m.iter().enumerate() {
            let expected = ((v - min) / (max - min) * 255.0).round() as u8;
            assert_eq!(pixels[i], expected);
        }
    }

    #[test]
    fn csv_and_svg_write() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_vec((2, 2), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        write_matrix_csv(&dir.path().join("m.csv"), m.view()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text, "0,0.5\n1,0.25\n");

        write_svg_heatmap(&dir.path().join("m.svg"), m.view(), 4).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("m.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 4);

        write_loss_csv(&dir.path().join("loss.csv"), &[0.5, 0.25], &[1e-3, 1e-3]).unwrap();
        let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(loss.lines().count(), 3);
        assert!(loss.starts_with("epoch,loss,lr\n1,0.5,0.001\n"));
    }
}
