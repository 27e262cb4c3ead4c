//! Synthetic ultrasound-like frames: a dark multi-lobed target with bright rims over
//! speckled tissue, plus dark rimless distractors that are not part of the mask.

use crate::metrics::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Sample, SubjectSet, SAMPLE_SIZE};

const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.25;
const MAX_TRIES: usize = 1000;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Implicit value: ≤ 1 inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }
}

/// Per-subject characteristic cluster: centre, scale and lobe layout in scale units.
struct Template {
    cx: f64,
    cy: f64,
    scale: f64,
    lobes: Vec<(f64, f64, f64, f64, f64)>,
}

fn template(rng: &mut Rng) -> Template {
    let n = SAMPLE_SIZE as f64;
    let lobes = (0..3 + rng.below(4))
        .map(|_| {
            (
                rng.uniform(-0.6, 0.6),
                rng.uniform(-0.6, 0.6),
                rng.uniform(0.45, 0.8),
                rng.uniform(0.45, 0.8),
                rng.uniform(0.0, std::f64::consts::PI),
            )
        })
        .collect();
    Template {
        cx: rng.uniform(0.3, 0.7) * n,
        cy: rng.uniform(0.3, 0.7) * n,
        scale: rng.uniform(9.0, 15.0),
        lobes,
    }
}

fn frame(t: &Template, rng: &mut Rng) -> Option<(Vec<f32>, Vec<u8>)> {
    let n = SAMPLE_SIZE;
    let nf = n as f64;
    let scale = t.scale * rng.uniform(0.85, 1.15);
    let (cx, cy) = (t.cx + rng.uniform(-6.0, 6.0), t.cy + rng.uniform(-6.0, 6.0));
    let lobes: Vec<Ellipse> = t
        .lobes
        .iter()
        .map(|&(ox, oy, a, b, angle)| Ellipse {
            cx: cx + ox * scale + rng.uniform(-1.5, 1.5),
            cy: cy + oy * scale + rng.uniform(-1.5, 1.5),
            a: a * scale,
            b: b * scale,
            angle: angle + rng.uniform(-0.2, 0.2),
        })
        .collect();

    let radius = scale * 1.6;
    let mut distractors = Vec::new();
    for _ in 0..1 + rng.below(2) {
        let placed = (0..50).find_map(|_| {
            let e = Ellipse {
                cx: rng.uniform(0.1, 0.9) * nf,
                cy: rng.uniform(0.1, 0.9) * nf,
                a: rng.uniform(4.0, 9.0),
                b: rng.uniform(4.0, 9.0),
                angle: rng.uniform(0.0, std::f64::consts::PI),
            };
            let clear = (e.cx - cx).hypot(e.cy - cy) > radius + e.a.max(e.b) + 4.0;
            clear.then_some(e)
        });
        distractors.extend(placed);
    }

    // smooth tissue background, darker with depth
    let (p1, p2) = (rng.uniform(0.0, 6.3), rng.uniform(0.0, 6.3));
    let (f1, f2) = (rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0));
    let gain = rng.uniform(0.9, 1.1);
    let mut image = Vec::with_capacity(n * n);
    let mut bits = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = (xf / nf, yf / nf);
            let mut value = gain
                * (0.6 - 0.15 * v
                    + 0.06 * (std::f64::consts::TAU * f1 * u + p1).sin()
                    + 0.05 * (std::f64::consts::TAU * f2 * v + p2).cos());
            let lobe = lobes.iter().map(|e| e.level(xf, yf)).fold(f64::INFINITY, f64::min);
            let inside = lobe <= 1.0;
            if inside {
                value *= 0.35;
            } else if lobe <= 1.6 {
                value *= 1.3;
            }
            if !inside && distractors.iter().any(|e| e.level(xf, yf) <= 1.0) {
                value *= 0.3;
            }
            let speckle = (1.0 + 0.22 * rng.normal()).max(0.0);
            image.push((value * speckle).clamp(0.0, 1.0) as f32);
            bits.push(u8::from(inside));
        }
    }

    let fg = bits.iter().filter(|&&b| b == 1).count();
    let frac = fg as f64 / (n * n) as f64;
    if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
        return None;
    }
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (&v, &b) in image.iter().zip(&bits) {
        if b == 1 {
            sum_in += v as f64;
        } else {
            sum_out += v as f64;
        }
    }
    (sum_in / (fg as f64) < sum_out / (n * n - fg) as f64).then_some((image, bits))
}

/// Generates `count` subjects (ids `1..=count`) of `per_subject` frames each.
/// Every mask covers 1–25% of the frame and is darker on average than its surroundings.
pub fn gen_phantom_subjects(count: usize, per_subject: usize, rng: &mut Rng) -> Vec<SubjectSet> {
    let n = SAMPLE_SIZE;
    let base = Rng::new(rng.next_u64());
    (1..=count as u32)
        .map(|id| {
            let mut sub = base.fork(id as u64);
            let t = template(&mut sub);
            let samples = (0..per_subject)
                .map(|i| {
                    let (image, bits) = (0..MAX_TRIES)
                        .find_map(|_| frame(&t, &mut sub))
                        .expect("phantom rejection sampling exhausted");
                    Sample {
                        image: Tensor::from_vec([1, 1, n, n], image).expect("frame dims"),
                        mask: BinaryMask::new(n, n, bits).expect("frame dims"),
                        source: format!("phantom/subject_{id}/frame_{i:03}"),
                    }
                })
                .collect();
            SubjectSet { id, samples }
        })
        .collect()
}
