//! RGB image tensors, PPM I/O, and the dominant-hue oracle.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// An H x W x 3 image with values in [0,1], row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        let at = (r * self.width + c) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let at = (r * self.width + c) * 3;
        self.data[at] = rgb[0];
        self.data[at + 1] = rgb[1];
        self.data[at + 2] = rgb[2];
    }

    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Peak signal-to-noise ratio against a reference, in dB.
    pub fn psnr(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mse: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}

/// HSV (h in degrees [0,360), s and v in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// RGB to (hue degrees, saturation-as-chroma/value, value).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let maxv = r.max(g).max(b);
    let minv = r.min(g).min(b);
    let c = maxv - minv;
    let h = if c == 0.0 {
        0.0
    } else if maxv == r {
        60.0 * (((g - b) / c).rem_euclid(6.0))
    } else if maxv == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let s = if maxv == 0.0 { 0.0 } else { c / maxv };
    (h, s, maxv)
}

/// Dominant-hue classifier used as the free generation oracle.
///
/// Pixels whose chroma (max-min channel) exceeds `chroma_threshold` vote via
/// a circular mean of their hue; the class is the nearest of `num_classes`
/// hue centers at `360/num_classes` degree spacing. Returns `None` when too
/// few chromatic pixels exist to call a class.
pub fn classify_dominant_hue(img: &ImageTensor, num_classes: usize) -> Option<usize> {
    const CHROMA_THRESHOLD: f64 = 0.18;
    const MIN_CHROMATIC: usize = 12;
    let mut sum_sin = 0.0;
    let mut sum_cos = 0.0;
    let mut count = 0usize;
    for r in 0..img.height {
        for c in 0..img.width {
            let rgb = img.get(r, c);
            let maxv = rgb[0].max(rgb[1]).max(rgb[2]);
            let minv = rgb[0].min(rgb[1]).min(rgb[2]);
            if maxv - minv > CHROMA_THRESHOLD {
                let (h, _, _) = rgb_to_hsv(rgb);
                sum_sin += h.to_radians().sin();
                sum_cos += h.to_radians().cos();
                count += 1;
            }
        }
    }
    if count < MIN_CHROMATIC {
        return None;
    }
    let mean_hue = sum_sin.atan2(sum_cos).to_degrees().rem_euclid(360.0);
    let spacing = 360.0 / num_classes as f64;
    let class = ((mean_hue + spacing / 2.0) / spacing) as usize % num_classes;
    Some(class)
}

/// Write as binary PPM (P6, 8-bit); the bit-exact portable output format.
pub fn write_ppm<W: Write>(img: &ImageTensor, w: &mut W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`].
pub fn read_ppm<R: Read>(r: &mut R) -> Result<ImageTensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let header_err = || Error::Format("ppm: malformed header".into());
    // P6\n<w> <h>\n255\n
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 && at < buf.len() {
        while at < buf.len() && buf[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < buf.len() && !buf[at].is_ascii_whitespace() {
            at += 1;
        }
        fields.push(std::str::from_utf8(&buf[start..at]).map_err(|_| header_err())?.to_string());
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(header_err());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    at += 1; // single whitespace after maxval
    let need = width * height * 3;
    if buf.len() < at + need {
        return Err(Error::Format("ppm: truncated pixel data".into()));
    }
    let data = buf[at..at + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageTensor { height, width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_rgb_roundtrip() {
        for &h in &[0.0, 45.0, 90.0, 180.0, 270.0, 350.0] {
            let rgb = hsv_to_rgb(h, 0.9, 0.8);
            let (h2, s2, v2) = rgb_to_hsv(rgb);
            assert!((h - h2).abs() < 1e-9, "hue {h} vs {h2}");
            assert!((s2 - 0.9).abs() < 1e-9);
            assert!((v2 - 0.8).abs() < 1e-9);
        }
    }

    #[test]
    fn hue_oracle_classifies_solid_patches() {
        for class in 0..4 {
            let mut img = ImageTensor::zeros(16, 16);
            let rgb = hsv_to_rgb(class as f64 * 90.0, 1.0, 1.0);
            for r in 4..12 {
                for c in 4..12 {
                    img.set(r, c, rgb);
                }
            }
            assert_eq!(classify_dominant_hue(&img, 4), Some(class));
        }
    }

    #[test]
    fn hue_oracle_rejects_gray_images() {
        let mut img = ImageTensor::zeros(8, 8);
        for r in 0..8 {
            for c in 0..8 {
                img.set(r, c, [0.5, 0.5, 0.5]);
            }
        }
        assert_eq!(classify_dominant_hue(&img, 4), None);
    }

    #[test]
    fn ppm_roundtrip_is_exact_on_8bit_grid() {
        let mut img = ImageTensor::zeros(3, 5);
        for r in 0..3 {
            for c in 0..5 {
                img.set(r, c, [r as f64 / 255.0 * 17.0, c as f64 / 255.0 * 31.0, 0.5019607843137255]);
            }
        }
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        let back = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(back.height, 3);
        assert_eq!(back.width, 5);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
        // Writing the decoded image again is byte-identical.
        let mut buf2 = Vec::new();
        write_ppm(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
