//! Geometric training augmentation: optional horizontal flip followed by a
//! rotation about the image centre.

use rand::Rng;

use super::Sample;
use crate::image::{ClassMap, GrayImage, IGNORE};

/// Random flip (p = 0.5) and rotation angle uniform in [-90°, 90°].
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let flip = rng.gen_bool(0.5);
    let theta = rng.gen_range(-90.0..=90.0);
    transform(sample, flip, theta)
}

fn exact_trig(theta_deg: f64) -> (f64, f64) {
    let quarter = theta_deg / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let t = theta_deg.to_radians();
        (t.cos(), t.sin())
    }
}

/// Applies the flip (if set) then a rotation by `theta_deg`. The image is
/// resampled bilinearly and the label by nearest neighbour; pixels whose
/// source falls outside the frame become 0 and [`IGNORE`]. Multiples of 90°
/// are exact pixel permutations.
pub fn transform(sample: &Sample, flip: bool, theta_deg: f64) -> Sample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos, sin) = exact_trig(theta_deg);
    let src_img = &sample.image;
    let src_lbl = &sample.label;

    let mut img = vec![0.0; h * w];
    let mut lbl = vec![IGNORE; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + cos * dy - sin * dx;
            let mut sx = cx + sin * dy + cos * dx;
            if flip {
                sx = (w as f64 - 1.0) - sx;
            }
            let (ny, nx) = (sy.round(), sx.round());
            if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                continue;
            }
            lbl[y * w + x] = src_lbl.get(ny as usize, nx as usize);

            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = src_img.get(y0, x0) * (1.0 - fx) + src_img.get(y0, x1) * fx;
            let bottom = src_img.get(y1, x0) * (1.0 - fx) + src_img.get(y1, x1) * fx;
            img[y * w + x] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
        }
    }
    Sample {
        image: GrayImage::new(h, w, img).expect("same size"),
        label: ClassMap::new(h, w, lbl).expect("same size"),
        id: sample.id.clone(),
    }
}
