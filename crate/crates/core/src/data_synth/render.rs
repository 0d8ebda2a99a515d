use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{validate_box, DataError, DatasetSpec, DetectionLabel, NuisanceEffect, NuisanceLabel};

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.8;
const DARKEN: f64 = 0.35;
const RAMP_AMPLITUDE: f64 = 0.2;

fn inside_shape(class_id: usize, x: f64, y: f64, b: [f64; 4]) -> bool {
    let [cx, cy, w, h] = b;
    let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
    let in_box = dx <= w / 2.0 && dy <= h / 2.0;
    match class_id {
        0 => in_box,
        1 => (dx / (w / 2.0)).powi(2) + (dy / (h / 2.0)).powi(2) <= 1.0,
        _ => in_box && (dx <= w / 6.0 || dy <= h / 6.0),
    }
}

fn box_blur(img: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..height {
        for c in 0..width {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(height - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(width - 1));
            let mut sum = 0.0;
            for rr in r0..=r1 {
                sum += img[rr * width + c0..=rr * width + c1].iter().sum::<f64>();
            }
            out[r * width + c] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

/// Renders one image: object shape, then brightness, blur and gradient
/// nuisance effects in that order, then uniform pixel noise. Pixels are
/// clamped to `[0, 1]` after each stage that can leave the range.
pub fn render_sample(
    y_o: &DetectionLabel,
    y_n: &NuisanceLabel,
    spec: &DatasetSpec,
    noise_seed: u64,
) -> Result<Vec<f32>, DataError> {
    validate_box(&y_o.bbox)?;
    if y_o.class_id >= spec.num_classes {
        return Err(DataError::InvalidLabel(format!(
            "class {} out of range for {} classes",
            y_o.class_id, spec.num_classes
        )));
    }
    if y_n.values.len() != spec.nuisances.len() {
        return Err(DataError::InvalidLabel(format!(
            "{} nuisance values for {} nuisances",
            y_n.values.len(),
            spec.nuisances.len()
        )));
    }
    for (n, &v) in spec.nuisances.iter().zip(&y_n.values) {
        if v >= n.cardinality {
            return Err(DataError::InvalidLabel(format!(
                "nuisance '{}' value {v} out of range for cardinality {}",
                n.name, n.cardinality
            )));
        }
    }

    let (height, width) = (spec.height, spec.width);
    let b = y_o.bbox.map(f64::from);
    let coord = |i: usize| ((i % width) as f64 + 0.5) / width as f64;
    let row = |i: usize| ((i / width) as f64 + 0.5) / height as f64;
    let mut img: Vec<f64> = (0..height * width)
        .map(|i| {
            if inside_shape(y_o.class_id, coord(i), row(i), b) {
                FOREGROUND
            } else {
                BACKGROUND
            }
        })
        .collect();

    let levels = || spec.nuisances.iter().zip(&y_n.values);
    for (n, &v) in levels().filter(|(n, _)| n.effect == NuisanceEffect::Brightness) {
        let offset = -DARKEN * v as f64 / (n.cardinality - 1) as f64;
        img.iter_mut().for_each(|p| *p = (*p + offset).clamp(0.0, 1.0));
    }
    for (_, &v) in levels().filter(|(n, _)| n.effect == NuisanceEffect::Blur) {
        img = box_blur(&img, height, width, v);
    }
    for (n, &v) in levels().filter(|(n, _)| n.effect == NuisanceEffect::Gradient) {
        let angle = std::f64::consts::PI * v as f64 / n.cardinality as f64;
        let (s, c) = angle.sin_cos();
        for (i, p) in img.iter_mut().enumerate() {
            let t = (((coord(i) - 0.5) * c + (row(i) - 0.5) * s) / 0.5).clamp(-1.0, 1.0);
            *p = (*p + RAMP_AMPLITUDE * t).clamp(0.0, 1.0);
        }
    }

    let amp = f64::from(spec.noise_amplitude);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    Ok(img
        .into_iter()
        .map(|p| {
            let noise = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
            (p + noise).clamp(0.0, 1.0) as f32
        })
        .collect())
}
