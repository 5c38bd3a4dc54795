use ndarray::{s, Array3};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::png8;

/// Display brightening applied before clipping to `[0, 1]`.
pub const PANEL_GAIN: f64 = 3.0;

/// One column of a comparison panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelColumn {
    pub truth: RgbImage,
    pub historical: RgbImage,
    /// The masked input as a method sees it.
    pub input: RgbImage,
    /// One image per method, in row order.
    pub outputs: Vec<RgbImage>,
}

/// `image * gain`, clipped.
pub fn stretch(image: &RgbImage, gain: f64) -> Array3<f64> {
    image.values().mapv(|v| (v * gain).clamp(0.0, 1.0))
}

/// Grid PNG with rows truth, historical, input, then one per method, and one
/// column per sample. All tiles must share a size.
pub fn render_panel(columns: &[PanelColumn]) -> Result<Vec<u8>> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Precondition("a panel needs at least one sample".into()))?;
    let (h, w) = first.truth.dim();
    let n_rows = 3 + first.outputs.len();
    let mut canvas = Array3::zeros((3, n_rows * h, columns.len() * w));
    for (col, column) in columns.iter().enumerate() {
        if column.outputs.len() != first.outputs.len() {
            return Err(Error::Precondition(
                "every panel column needs the same number of methods".into(),
            ));
        }
        let tiles = [&column.truth, &column.historical, &column.input]
            .into_iter()
            .chain(&column.outputs);
        for (row, tile) in tiles.enumerate() {
            if tile.dim() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    got: vec![tile.dim().0, tile.dim().1],
                });
            }
            canvas
                .slice_mut(s![.., row * h..(row + 1) * h, col * w..(col + 1) * w])
                .assign(&stretch(tile, PANEL_GAIN));
        }
    }
    png8::encode(canvas.view())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64, h: usize, w: usize) -> RgbImage {
        RgbImage::new(Array3::from_elem((3, h, w), v)).unwrap()
    }

    fn column(n_methods: usize) -> PanelColumn {
        PanelColumn {
            truth: flat(0.1, 8, 10),
            historical: flat(0.2, 8, 10),
            input: flat(0.0, 8, 10),
            outputs: (0..n_methods).map(|i| flat(0.05 * i as f64, 8, 10)).collect(),
        }
    }

    #[test]
    fn single_sample_single_method_is_four_tiles_tall() {
        let png = render_panel(&[column(1)]).unwrap();
        let img = png8::decode(&png).unwrap();
        assert_eq!(img.dim(), (3, 32, 10));
        assert_eq!(img[[0, 0, 0]], png8::dequantize(png8::quantize(0.3)));
        assert_eq!(img[[0, 8, 0]], png8::dequantize(png8::quantize(0.6)));
    }

    #[test]
    fn grid_dimensions_and_determinism() {
        let cols = vec![column(3), column(3)];
        let a = render_panel(&cols).unwrap();
        assert_eq!(a, render_panel(&cols).unwrap());
        assert_eq!(png8::decode(&a).unwrap().dim(), (3, 6 * 8, 2 * 10));
    }

    #[test]
    fn gain_clips() {
        let mut c = column(0);
        c.truth = flat(0.5, 8, 10);
        let img = png8::decode(&render_panel(&[c]).unwrap()).unwrap();
        assert_eq!(img[[1, 2, 2]], 1.0);
    }

    #[test]
    fn inconsistent_columns_rejected() {
        assert!(render_panel(&[]).is_err());
        assert!(render_panel(&[column(1), column(2)]).is_err());
        let mut c = column(1);
        c.input = flat(0.0, 4, 4);
        assert!(render_panel(&[c]).is_err());
    }
}
