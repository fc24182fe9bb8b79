//! Binary PPM rendering of a state, one pixel per site of the bounding box
//! of the visited set. Rows run from the largest `x2` down, columns from the
//! smallest `x1`. In `d >= 3` the slice `x3 = ... = xd = 0` is drawn.
//!
//! Palette: unvisited white, visited sites without mass gray, sites carrying
//! mass blue (light near `μ = 0`, dark at `μ = m`), sources red. Convert with
//! e.g. `magick run.ppm run.png`.

use std::io::Write;
use std::path::Path;

use crate::engine::SandpileState;
use crate::error::{Result, SandpileError};
use crate::scalar::Real;

pub const UNVISITED: [u8; 3] = [255, 255, 255];
pub const MASS_FREE: [u8; 3] = [160, 160, 160];
pub const SOURCE: [u8; 3] = [220, 0, 0];
/// Colour of a site holding a vanishing amount of mass.
pub const MASS_LIGHT: [u8; 3] = [200, 215, 255];
/// Colour of a full site, `μ = m`.
pub const MASS_DARK: [u8; 3] = [0, 20, 140];

/// Mass at or below this fraction of `m` is drawn as mass-free. Stabilized
/// states keep residues of order the stopping tolerance on the core.
pub const MASS_FLOOR: f64 = 1e-9;

/// Colour for a visited, non-source site holding mass `mu`.
pub fn mass_colour(mu: f64, m: f64) -> [u8; 3] {
    if mu <= MASS_FLOOR * m {
        return MASS_FREE;
    }
    let t = (mu / m).clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        let (a, b) = (MASS_LIGHT[k] as f64, MASS_DARK[k] as f64);
        out[k] = (a + t * (b - a)).round() as u8;
    }
    out
}

/// Encodes the image as `P6` bytes.
pub fn render_ppm<T: Real>(s: &SandpileState<T>) -> Vec<u8> {
    let (lo, hi) = s.bounding_box();
    let (x0, x1) = (lo[0], hi[0]);
    let (y0, y1) = (lo[1], hi[1]);
    let width = (x1 - x0 + 1) as usize;
    let height = (y1 - y0 + 1) as usize;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * width * height);
    let m = s.m().as_f64();
    let mut c = vec![0i64; s.dim()];
    for y in (y0..=y1).rev() {
        for x in x0..=x1 {
            c[0] = x;
            c[1] = y;
            let pixel = if s.sources().iter().any(|(p, _)| p.coords() == c.as_slice()) {
                SOURCE
            } else if !s.visited().get_coords(&c) {
                UNVISITED
            } else {
                mass_colour(s.mu().get_coords(&c).as_f64(), m)
            };
            out.extend_from_slice(&pixel);
        }
    }
    out
}

pub fn render_image<T: Real>(s: &SandpileState<T>, path: &Path) -> Result<()> {
    let bytes = render_ppm(s);
    let mut f = std::fs::File::create(path).map_err(|e| SandpileError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| SandpileError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{stabilize, Schedule, StabilizeOptions};
    use crate::lattice::Site;

    fn pixels(bytes: &[u8]) -> (usize, usize, &[u8]) {
        let end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
        let header = std::str::from_utf8(&bytes[..end]).unwrap();
        let parts: Vec<&str> = header.split_ascii_whitespace().collect();
        assert_eq!((parts[0], parts[3]), ("P6", "255"));
        (parts[1].parse().unwrap(), parts[2].parse().unwrap(), &bytes[end..])
    }

    #[test]
    fn trivial_state_is_one_red_pixel() {
        let s = SandpileState::new(2, &[(Site::origin(2), 4.0)], 10.0).unwrap();
        let bytes = render_ppm(&s);
        assert!(bytes.starts_with(b"P6\n"));
        assert_eq!(bytes, b"P6\n1 1\n255\n\xdc\x00\x00".to_vec());
    }

    #[test]
    fn palette_endpoints() {
        assert_eq!(mass_colour(0.0, 5.0), MASS_FREE);
        assert_eq!(mass_colour(5.0, 5.0), MASS_DARK);
        assert_eq!(mass_colour(1e-6, 5.0), MASS_LIGHT);
        let mid = mass_colour(2.5, 5.0);
        assert!(mid[2] < MASS_LIGHT[2] && mid[2] > MASS_DARK[2]);
    }

    #[test]
    fn stabilized_image_layout() {
        let mut s = SandpileState::new(2, &[(Site::origin(2), 3000.0)], 4.0).unwrap();
        stabilize(&mut s, Schedule::sweep(), &StabilizeOptions::default()).unwrap();
        let bytes = render_ppm(&s);
        let (w, h, px) = pixels(&bytes);
        let (lo, hi) = s.bounding_box();
        assert_eq!((w, h), ((hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize));
        assert_eq!(px.len(), 3 * w * h);
        let at = |x: i64, y: i64| {
            let i = 3 * ((hi[1] - y) as usize * w + (x - lo[0]) as usize);
            [px[i], px[i + 1], px[i + 2]]
        };
        assert_eq!(at(0, 0), SOURCE);
        assert_eq!(at(1, 0), MASS_FREE);
        assert_eq!(at(lo[0], lo[1]), UNVISITED);
        assert_eq!(at(hi[0], 0), mass_colour(s.mu().get(&Site::from([hi[0], 0])), 4.0));
        assert_eq!(bytes, render_ppm(&s));
    }
}
