use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// An RGB image, channels-last, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return dim_err(format!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).expect("shape checked at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, 3] => Self::new(h, w, t.data().to_vec()),
            ref s => dim_err(format!("expected [H,W,3] tensor, got {s:?}")),
        }
    }

    /// Stack equally sized images into a `[B, H, W, 3]` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return dim_err("empty image batch");
        };
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height != h || img.width != w {
                return dim_err(format!("batch mixes {h}x{w} and {}x{}", img.height, img.width));
            }
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), h, w, 3], data)
    }

    /// Split a `[B, H, W, 3]` tensor into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        match *t.shape() {
            [b, h, w, 3] => {
                let n = h * w * 3;
                (0..b).map(|i| Self::new(h, w, t.data()[i * n..(i + 1) * n].to_vec())).collect()
            }
            ref s => dim_err(format!("expected [B,H,W,3] tensor, got {s:?}")),
        }
    }

    /// Peak signal-to-noise ratio in dB for a peak value of 1.
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
            / self.data.len() as f64;
        if mse == 0.0 {
            return f64::INFINITY;
        }
        -10.0 * mse.log10()
    }

    /// Tile images row-major into a `cols`-wide sheet with a 2-pixel gutter.
    pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
        let Some(first) = images.first() else {
            return dim_err("contact sheet needs at least one image");
        };
        let (h, w, gap) = (first.height, first.width, 2);
        let cols = cols.max(1).min(images.len());
        let rows = images.len().div_ceil(cols);
        let (sh, sw) = (rows * h + (rows + 1) * gap, cols * w + (cols + 1) * gap);
        let mut sheet = Image::filled(sh, sw, [1.0, 1.0, 1.0]);
        for (i, img) in images.iter().enumerate() {
            if img.height != h || img.width != w {
                return dim_err("contact sheet images must share a size");
            }
            let (oy, ox) = (gap + (i / cols) * (h + gap), gap + (i % cols) * (w + gap));
            for y in 0..h {
                for x in 0..w {
                    sheet.set_pixel(oy + y, ox + x, img.pixel(y, x));
                }
            }
        }
        Ok(sheet)
    }
}
