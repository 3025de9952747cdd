//! Procedural face-like corpus for toy-scale experiments.
//!
//! Each identity fixes face geometry and colours; each sample perturbs pose,
//! lighting, expression, background and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone)]
struct Identity {
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    brow_tilt: f64,
    nose_len: f64,
    mouth_w: f64,
    mouth_y: f64,
    hairline: f64,
    freckles: Vec<(f64, f64)>,
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl Identity {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone: f64 = rng.random_range(0.25..0.9);
        let skin = [
            (tone + 0.08).min(1.0),
            tone * rng.random_range(0.7..0.85),
            tone * rng.random_range(0.5..0.7),
        ];
        let n_freckles = rng.random_range(0..6);
        Identity {
            skin,
            hair: color(rng, 0.02, 0.7),
            iris: color(rng, 0.05, 0.6),
            lips: [rng.random_range(0.5..0.9), rng.random_range(0.1..0.4), rng.random_range(0.15..0.4)],
            face_rx: rng.random_range(0.26..0.36),
            face_ry: rng.random_range(0.33..0.43),
            eye_dx: rng.random_range(0.09..0.16),
            eye_y: rng.random_range(-0.12..-0.04),
            eye_r: rng.random_range(0.03..0.055),
            brow_tilt: rng.random_range(-0.3..0.3),
            nose_len: rng.random_range(0.06..0.14),
            mouth_w: rng.random_range(0.07..0.15),
            mouth_y: rng.random_range(0.14..0.22),
            hairline: rng.random_range(-0.36..-0.2),
            freckles: (0..n_freckles)
                .map(|_| (rng.random_range(-0.2..0.2), rng.random_range(-0.05..0.15)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    dx: f64,
    dy: f64,
    scale: f64,
    angle: f64,
    light: f64,
    light_dir: f64,
    smile: f64,
    bg: [f64; 3],
    noise: f64,
}

fn smoothstep(edge: f64, x: f64, width: f64) -> f64 {
    let t = ((x - edge) / width + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - a) + src[c] * a;
    }
}

fn render(id: &Identity, pose: &Pose, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let px = 1.0 / size as f64;
    let aa = 1.5 * px;
    let (sa, ca) = pose.angle.sin_cos();
    let mut out = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            // canvas coords in [-0.5, 0.5], then into the face frame
            let u0 = (xi as f64 + 0.5) * px - 0.5 - pose.dx;
            let v0 = (yi as f64 + 0.5) * px - 0.5 - pose.dy;
            let u = (ca * u0 + sa * v0) / pose.scale;
            let v = (-sa * u0 + ca * v0) / pose.scale;
            let mut c = pose.bg;
            let shade = 1.0 + pose.light * (u * pose.light_dir.cos() + v * pose.light_dir.sin());

            // hair mass behind the face
            let hr = ((u / (id.face_rx + 0.05)).powi(2) + ((v + 0.04) / (id.face_ry + 0.06)).powi(2)).sqrt();
            blend(&mut c, id.hair, 1.0 - smoothstep(1.0, hr, aa * 8.0));

            let fr = ((u / id.face_rx).powi(2) + (v / id.face_ry).powi(2)).sqrt();
            let face_a = 1.0 - smoothstep(1.0, fr, aa * 6.0);
            let skin = id.skin.map(|s| (s * shade).clamp(0.0, 1.0));
            blend(&mut c, skin, face_a);

            // fringe
            let fringe = face_a * (1.0 - smoothstep(id.hairline, v, aa));
            blend(&mut c, id.hair, fringe);

            for side in [-1.0, 1.0] {
                let ex = u - side * id.eye_dx;
                let ey = v - id.eye_y;
                let white = 1.0 - smoothstep(id.eye_r * 1.6, (ex * ex / 1.9 + ey * ey * 1.6).sqrt() * 1.2, aa);
                blend(&mut c, [0.95, 0.95, 0.92], white * face_a);
                let iris = 1.0 - smoothstep(id.eye_r * 0.75, (ex * ex + ey * ey).sqrt(), aa);
                blend(&mut c, id.iris, iris * face_a);
                let pupil = 1.0 - smoothstep(id.eye_r * 0.3, (ex * ex + ey * ey).sqrt(), aa);
                blend(&mut c, [0.02, 0.02, 0.02], pupil * face_a);
                let brow_y = id.eye_y - id.eye_r * 2.2 + side * id.brow_tilt * ex;
                let brow = (1.0 - smoothstep(0.012, (v - brow_y).abs(), aa))
                    * (1.0 - smoothstep(id.eye_r * 1.8, ex.abs(), aa));
                blend(&mut c, id.hair.map(|h| h * 0.7), brow * face_a);
            }

            let nose = (1.0 - smoothstep(0.012, u.abs(), aa))
                * (1.0 - smoothstep(id.nose_len / 2.0, (v - id.nose_len / 2.0).abs(), aa));
            blend(&mut c, skin.map(|s| s * 0.72), nose * face_a);

            let curve = pose.smile * (u / id.mouth_w).powi(2) * 0.04;
            let my = v - id.mouth_y + curve;
            let mouth = (1.0 - smoothstep(0.016, my.abs(), aa)) * (1.0 - smoothstep(id.mouth_w, u.abs(), aa));
            blend(&mut c, id.lips, mouth * face_a);

            for &(fx, fy) in &id.freckles {
                let d = ((u - fx).powi(2) + (v - fy).powi(2)).sqrt();
                blend(&mut c, skin.map(|s| s * 0.6), (1.0 - smoothstep(0.012, d, aa)) * face_a);
            }

            for ch in c {
                let n: f64 = rng.random_range(-1.0..1.0) * pose.noise;
                out.push((ch + n).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// `identities x per_identity` images of side `size`, labels `0..identities`.
pub fn synth_faces<T: Scalar>(
    identities: usize,
    per_identity: usize,
    size: usize,
    seed: u64,
) -> Vec<(usize, Vec<ImageTensor<T>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<Identity> = (0..identities).map(|_| Identity::sample(&mut rng)).collect();
    ids.iter()
        .enumerate()
        .map(|(label, id)| {
            let imgs = (0..per_identity)
                .map(|_| {
                    let pose = Pose {
                        dx: rng.random_range(-0.04..0.04),
                        dy: rng.random_range(-0.04..0.04),
                        scale: rng.random_range(0.92..1.08),
                        angle: rng.random_range(-0.12..0.12),
                        light: rng.random_range(0.0..0.5),
                        light_dir: rng.random_range(0.0..std::f64::consts::TAU),
                        smile: rng.random_range(-1.0..1.0),
                        bg: color(&mut rng, 0.1, 0.9),
                        noise: rng.random_range(0.0..0.03),
                    };
                    let data = render(id, &pose, size, &mut rng);
                    ImageTensor::from_vec(size, size, 3, data.into_iter().map(T::lit).collect())
                        .expect("rendered buffer matches its size")
                })
                .collect();
            (label, imgs)
        })
        .collect()
}
