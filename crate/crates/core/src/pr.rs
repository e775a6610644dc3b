//! Proxy representation: the network input assembled from a silhouette
//! channel and one Gaussian heatmap channel per 2D keypoint.
//!
//! Images are row-major `height × width`; multi-channel data is
//! channel-major (`channel · H · W + y · W + x`). All values live in [0, 1].

use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Amplitude-1 Gaussian heatmaps: channel `l` holds
/// `exp(−‖p − j_l‖² / (2σ²))` sampled at pixel centers, so a keypoint
/// sitting exactly on a pixel center produces a 1 there, and the channel
/// sum approximates 2πσ² when the support fits in the image.
pub fn joint_heatmaps(
    joints2d: &[Vector2<f64>],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::parameter(format!(
            "heatmap sigma must be positive, got {sigma}"
        )));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; joints2d.len() * height * width];
    for (l, j) in joints2d.iter().enumerate() {
        if !j.x.is_finite() || !j.y.is_finite() {
            return Err(Error::numeric(format!("keypoint {l} is not finite: {j:?}")));
        }
        let base = l * height * width;
        for py in 0..height {
            let dy = py as f64 + 0.5 - j.y;
            let row = base + py * width;
            for px in 0..width {
                let dx = px as f64 + 0.5 - j.x;
                out[row + px] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Ok(out)
}

/// Stacked network input: silhouette + L heatmap channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRepresentation {
    pub silhouette: Vec<f64>,
    pub heatmaps: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl ProxyRepresentation {
    pub fn n_keypoints(&self) -> usize {
        self.heatmaps.len() / (self.height * self.width)
    }

    /// Channel count including the silhouette: L + 1.
    pub fn channels(&self) -> usize {
        self.n_keypoints() + 1
    }

    /// Channel 0 is the silhouette; channels 1..=L are heatmaps.
    pub fn channel(&self, i: usize) -> &[f64] {
        let hw = self.height * self.width;
        if i == 0 {
            &self.silhouette
        } else {
            &self.heatmaps[(i - 1) * hw..i * hw]
        }
    }

    /// All channels flattened channel-major, silhouette first — the layout
    /// the encoder consumes.
    pub fn as_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels() * self.height * self.width);
        out.extend_from_slice(&self.silhouette);
        out.extend_from_slice(&self.heatmaps);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if hw == 0 {
            return Err(Error::parameter("zero-sized image".to_string()));
        }
        if self.silhouette.len() != hw {
            return Err(Error::parameter(format!(
                "silhouette has {} values, expected {hw}",
                self.silhouette.len()
            )));
        }
        if self.heatmaps.is_empty() || self.heatmaps.len() % hw != 0 {
            return Err(Error::parameter(format!(
                "heatmap stack of {} values is not a positive multiple of {hw}",
                self.heatmaps.len()
            )));
        }
        let ok = |v: &f64| (0.0..=1.0).contains(v);
        if !self.silhouette.iter().all(ok) || !self.heatmaps.iter().all(ok) {
            return Err(Error::numeric("proxy representation values outside [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Bundles a silhouette and heatmap stack after shape/range validation.
pub fn assemble_pr(
    silhouette: Vec<f64>,
    heatmaps: Vec<f64>,
    height: usize,
    width: usize,
) -> Result<ProxyRepresentation> {
    let pr = ProxyRepresentation {
        silhouette,
        heatmaps,
        height,
        width,
    };
    pr.validate()?;
    Ok(pr)
}

/// Writes a grayscale image as binary PGM (P5, maxval 255); values are
/// clamped to [0, 1] and scaled.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::parameter(format!(
            "image has {} values, expected {}x{} = {}",
            values.len(),
            height,
            width,
            height * width
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM back into [0, 1] values. Accepts `#` comments and any
/// maxval up to 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));

    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 header)"));
    }
    // Tokenize the header: three integers after the magic, skipping
    // whitespace and # comments.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < data.len() {
            match data[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed PGM header"));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PGM maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let need = width * height;
    if data.len() - pos < need {
        return Err(bad("truncated raster"));
    }
    let values = data[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((values, height, width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoint_on_a_pixel_center_peaks_at_one() {
        let hm = joint_heatmaps(&[Vector2::new(3.5, 2.5)], 8, 8, 1.5).unwrap();
        assert_eq!(hm[2 * 8 + 3], 1.0);
        assert!(hm.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn channel_sum_approximates_gaussian_mass() {
        let sigma = 2.0;
        let (h, w) = (64, 64);
        let hm = joint_heatmaps(&[Vector2::new(32.0, 32.0)], h, w, sigma).unwrap();
        let sum: f64 = hm.iter().sum();
        let expected = 2.0 * std::f64::consts::PI * sigma * sigma;
        assert!(
            (sum - expected).abs() / expected < 0.01,
            "sum {sum:.4} vs 2πσ² = {expected:.4}"
        );
    }

    #[test]
    fn heatmap_layout_is_channel_major() {
        let hm = joint_heatmaps(
            &[Vector2::new(0.5, 0.5), Vector2::new(3.5, 1.5)],
            4,
            4,
            1.0,
        )
        .unwrap();
        assert_eq!(hm.len(), 2 * 16);
        assert_eq!(hm[0], 1.0); // channel 0, pixel (0,0)
        assert_eq!(hm[16 + 4 + 3], 1.0); // channel 1, pixel (3,1)
    }

    #[test]
    fn assembly_validates_and_extraction_inverts() {
        let (h, w) = (4, 5);
        let sil: Vec<f64> = (0..h * w).map(|i| (i % 2) as f64).collect();
        let hm = joint_heatmaps(
            &[Vector2::new(1.0, 1.0), Vector2::new(2.0, 3.0)],
            h,
            w,
            1.0,
        )
        .unwrap();
        let pr = assemble_pr(sil.clone(), hm.clone(), h, w).unwrap();
        assert_eq!(pr.channels(), 3);
        assert_eq!(pr.channel(0), &sil[..]);
        assert_eq!(pr.channel(1), &hm[..h * w]);
        assert_eq!(pr.channel(2), &hm[h * w..]);
        let input = pr.as_input();
        assert_eq!(input.len(), 3 * h * w);
        assert_eq!(&input[..h * w], &sil[..]);
    }

    #[test]
    fn assembly_rejects_bad_shapes_and_ranges() {
        assert!(assemble_pr(vec![0.0; 10], vec![0.0; 16], 4, 4).is_err());
        assert!(assemble_pr(vec![0.0; 16], vec![0.0; 10], 4, 4).is_err());
        assert!(assemble_pr(vec![1.5; 16], vec![0.0; 16], 4, 4).is_err());
        assert!(assemble_pr(vec![0.0; 16], vec![-0.1; 16], 4, 4).is_err());
    }

    #[test]
    fn pgm_round_trip_preserves_binary_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sil.pgm");
        let img: Vec<f64> = (0..12 * 10).map(|i| ((i / 7) % 2) as f64).collect();
        write_pgm(&path, &img, 12, 10).unwrap();
        let (back, h, w) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (12, 10));
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip_quantizes_grays_to_half_a_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        let img: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        write_pgm(&path, &img, 8, 8).unwrap();
        let (back, _, _) = read_pgm(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n0000").unwrap();
        assert!(read_pgm(&path).is_err());
        std::fs::write(&path, b"P5\n4 4\n255\nxy").unwrap();
        assert!(read_pgm(&path).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn invalid_sigma_is_rejected() {
        assert!(joint_heatmaps(&[Vector2::new(1.0, 1.0)], 4, 4, 0.0).is_err());
        assert!(joint_heatmaps(&[Vector2::new(1.0, 1.0)], 4, 4, f64::NAN).is_err());
    }
}
