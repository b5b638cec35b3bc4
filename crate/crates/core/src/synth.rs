//! Synthetic VIDIT-style scenes: bevelled boxes on a textured ground plane,
//! lit by a coloured point source with local diffuse shading plus ambient.
//!
//! World axes: `x` points east, `y` north, `z` up. The scene occupies the
//! unit square of the ground plane and is viewed orthographically from above
//! with north at the top of the image.

use std::path::Path;

use log::warn;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Direction, FilenamePattern, IlluminationSetting, SceneIndex};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::tensor::{Shape, Tensor};

pub type Vec3 = [f64; 3];
pub type Rgb = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

const UNIT_TOL: f64 = 1e-6;

fn unit_or_normalize(v: Vec3, what: &str) -> Result<Vec3> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numeric(format!("{what} has zero or non-finite length")));
    }
    if (n - 1.0).abs() > UNIT_TOL {
        warn!("{what} has length {n}; normalizing");
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    /// Radiant power `I_s`; zero gives an ambient-only render.
    pub intensity: f64,
    pub position: Vec3,
    pub temperature_k: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surfel {
    pub position: Vec3,
    pub normal: Vec3,
    pub k_d: Rgb,
    pub k_a: Rgb,
}

pub const KELVIN_RANGE: (f64, f64) = (1000.0, 12000.0);

/// Tanner Helland's fit of blackbody colour (8-bit scale, clamped to [0, 255]).
fn helland_rgb(t_k: f64) -> Rgb {
    let t = t_k / 100.0;
    let r = if t <= 66.0 { 255.0 } else { 329.698727446 * (t - 60.0).powf(-0.1332047592) };
    let g = if t <= 66.0 {
        99.4708025861 * t.ln() - 161.1195681661
    } else {
        288.1221695283 * (t - 60.0).powf(-0.0755148492)
    };
    let b = if t >= 66.0 {
        255.0
    } else if t <= 19.0 {
        0.0
    } else {
        138.5177312231 * (t - 10.0).ln() - 305.0447927307
    };
    [r, g, b].map(|v| v.clamp(0.0, 255.0))
}

/// Light tint for a colour temperature, normalized so 6500 K is white and
/// clipped to `[0, 1]`.
pub fn kelvin_to_rgb(t_k: f64) -> Result<Rgb> {
    if !(KELVIN_RANGE.0..=KELVIN_RANGE.1).contains(&t_k) {
        return Err(Error::Config(format!(
            "colour temperature {t_k} K outside [{}, {}]",
            KELVIN_RANGE.0, KELVIN_RANGE.1
        )));
    }
    let (c, w) = (helland_rgb(t_k), helland_rgb(6500.0));
    Ok([0, 1, 2].map(|i| (c[i] / w[i]).min(1.0)))
}

/// Inverse-square irradiance `I_s / (4 pi r^2)` tinted by the source colour.
pub fn irradiance(surfel_pos: Vec3, source: &PointSource) -> Result<Rgb> {
    let r = norm(sub(source.position, surfel_pos));
    if r == 0.0 {
        return Err(Error::Numeric("surfel coincides with the point source".into()));
    }
    let mag = source.intensity / (4.0 * std::f64::consts::PI * r * r);
    Ok(kelvin_to_rgb(source.temperature_k)?.map(|c| mag * c))
}

/// Local diffuse shading `I_p K_d max(N.L, 0) + K_a I_a` per channel.
pub fn shade_diffuse(surfel: &Surfel, i_p: Rgb, l_hat: Vec3, i_a: Rgb) -> Result<Rgb> {
    let n = unit_or_normalize(surfel.normal, "surface normal")?;
    let l = unit_or_normalize(l_hat, "light direction")?;
    let cos = dot(n, l).max(0.0);
    Ok([0, 1, 2].map(|c| i_p[c] * surfel.k_d[c] * cos + surfel.k_a[c] * i_a[c]))
}

/// Box with a 45-degree bevel around its flat top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevelBox {
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub height: f64,
    pub bevel: f64,
    pub top_albedo: Rgb,
    pub side_albedo: Rgb,
}

impl BevelBox {
    /// Visible surfel of this box above ground point `(x, y)`, if any.
    fn surfel_at(&self, x: f64, y: f64) -> Option<Surfel> {
        let (ox, oy) = (x - self.center[0], y - self.center[1]);
        let dx = self.half_extent[0] - ox.abs();
        let dy = self.half_extent[1] - oy.abs();
        if dx < 0.0 || dy < 0.0 {
            return None;
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (normal, z, albedo) = if dx.min(dy) >= self.bevel {
            ([0.0, 0.0, 1.0], self.height, self.top_albedo)
        } else if dx <= dy {
            ([s * ox.signum(), 0.0, s], self.height - (self.bevel - dx), self.side_albedo)
        } else {
            ([0.0, s * oy.signum(), s], self.height - (self.bevel - dy), self.side_albedo)
        };
        Some(Surfel { position: [x, y, z], normal, k_d: albedo, k_a: albedo })
    }
}

/// A seeded arrangement of boxes over a tiled ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub boxes: Vec<BevelBox>,
    /// Row-major `tiles x tiles` ground albedo, row 0 at the south edge.
    pub ground_tiles: usize,
    pub ground_albedo: Vec<Rgb>,
    pub ambient: Rgb,
    pub source_intensity: f64,
    pub source_distance: f64,
    pub source_elevation_deg: f64,
}

impl SyntheticScene {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let albedo = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Rgb {
            [0; 3].map(|_| rng.gen_range(lo..hi))
        };
        let ground_tiles = 4;
        let ground_albedo = (0..ground_tiles * ground_tiles).map(|_| albedo(&mut rng, 0.25, 0.75)).collect();
        let n_boxes = rng.gen_range(3..=6);
        let boxes = (0..n_boxes)
            .map(|_| {
                let half_extent: [f64; 2] = [rng.gen_range(0.07..0.2), rng.gen_range(0.07..0.2)];
                let bevel = rng.gen_range(0.3..0.6) * half_extent[0].min(half_extent[1]);
                BevelBox {
                    center: [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
                    half_extent,
                    height: rng.gen_range(bevel..0.35_f64.max(bevel + 0.01)),
                    bevel,
                    top_albedo: albedo(&mut rng, 0.3, 0.95),
                    side_albedo: albedo(&mut rng, 0.3, 0.95),
                }
            })
            .collect();
        let distance = 1.2;
        Self {
            seed,
            boxes,
            ground_tiles,
            ground_albedo,
            ambient: [0.12; 3],
            // Roughly unit irradiance at the scene centre.
            source_intensity: 4.0 * std::f64::consts::PI * distance * distance * 1.1,
            source_distance: distance,
            source_elevation_deg: 35.0,
        }
    }

    /// Point source for a capture setting: at fixed elevation and distance
    /// from the scene centre along the compass direction.
    pub fn source_for(&self, setting: &IlluminationSetting) -> PointSource {
        let az = setting.direction.azimuth_deg().to_radians();
        let el = self.source_elevation_deg.to_radians();
        let d = self.source_distance;
        PointSource {
            intensity: self.source_intensity,
            position: [0.5 + d * el.cos() * az.sin(), 0.5 + d * el.cos() * az.cos(), d * el.sin()],
            temperature_k: setting.temperature_k as f64,
        }
    }

    /// Topmost visible surfel above ground point `(x, y)`.
    pub fn surfel_at(&self, x: f64, y: f64) -> Surfel {
        let top = self
            .boxes
            .iter()
            .filter_map(|b| b.surfel_at(x, y))
            .max_by(|a, b| a.position[2].total_cmp(&b.position[2]));
        top.unwrap_or_else(|| {
            let t = self.ground_tiles;
            let tx = ((x * t as f64) as usize).min(t - 1);
            let ty = ((y * t as f64) as usize).min(t - 1);
            let a = self.ground_albedo[ty * t + tx];
            Surfel { position: [x, y, 0.0], normal: [0.0, 0.0, 1.0], k_d: a, k_a: a }
        })
    }
}

fn check_render_size(size: usize) -> Result<()> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Dimension(format!("render size {size} is not a positive multiple of 16")));
    }
    Ok(())
}

/// Renders the scene under an explicit source (values clipped to `[0, 1]`).
pub fn render_with_source(scene: &SyntheticScene, source: &PointSource, size: usize) -> Result<ImageTensor> {
    check_render_size(size)?;
    if !(source.intensity >= 0.0 && source.intensity.is_finite()) {
        return Err(Error::Config(format!("source intensity {} must be finite and >= 0", source.intensity)));
    }
    let mut t = Tensor::<f32>::zeros(Shape::new(3, size, size));
    for row in 0..size {
        let y = 1.0 - (row as f64 + 0.5) / size as f64;
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64;
            let s = scene.surfel_at(x, y);
            let to_light = sub(source.position, s.position);
            let i_p = irradiance(s.position, source)?;
            let rgb = shade_diffuse(&s, i_p, to_light, scene.ambient)?;
            for (c, v) in rgb.into_iter().enumerate() {
                t.set(c, row, col, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(t)
}

pub fn render_scene(scene: &SyntheticScene, setting: &IlluminationSetting, size: usize) -> Result<ImageTensor> {
    let setting = IlluminationSetting::new(setting.direction, setting.temperature_k)?;
    render_with_source(scene, &scene.source_for(&setting), size)
}

/// Scene id used for the `i`-th generated scene.
pub fn scene_id(i: usize) -> String {
    format!("scene{i:04}")
}

/// Renders `n_scenes` random scenes under every (direction, temperature)
/// pair into `out_dir`, named by the default loader pattern, and writes a
/// manifest next to them.
pub fn generate_corpus(
    n_scenes: usize,
    directions: &[Direction],
    temperatures: &[u32],
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<SceneIndex> {
    check_render_size(size)?;
    let settings = directions
        .iter()
        .flat_map(|&d| temperatures.iter().map(move |&t| IlluminationSetting::new(d, t)))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;
    let pattern = FilenamePattern::default();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut index = SceneIndex::default();
    for i in 0..n_scenes {
        let scene = SyntheticScene::random(seeds.next_u64());
        let id = scene_id(i);
        for s in &settings {
            let path = out_dir.join(pattern.format(&id, s));
            render_scene(&scene, s, size)?.save_png(&path)?;
            index.insert(id.clone(), *s, path);
        }
    }
    data::write_manifest(&index, &out_dir.join(data::MANIFEST_FILE))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn white(intensity: f64, position: Vec3) -> PointSource {
        PointSource { intensity, position, temperature_k: 6500.0 }
    }

    #[test]
    fn irradiance_fixtures() {
        let i = irradiance([0.0; 3], &white(4.0 * PI, [1.0, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(i[0], 1.0, epsilon = 1e-12);
        let near = irradiance([0.0; 3], &white(1.0, [0.0, 0.0, 1.0])).unwrap()[1];
        let far = irradiance([0.0; 3], &white(1.0, [0.0, 0.0, 2.0])).unwrap()[1];
        assert_abs_diff_eq!(far, near / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(far, 0.019894367886486918, epsilon = 1e-12);
        assert!(matches!(irradiance([1.0; 3], &white(1.0, [1.0; 3])), Err(Error::Numeric(_))));
    }

    #[test]
    fn shading_fixtures() {
        let s = |kd: f64, ka: f64| Surfel { position: [0.0; 3], normal: [0.0, 0.0, 1.0], k_d: [kd; 3], k_a: [ka; 3] };
        assert_eq!(shade_diffuse(&s(1.0, 0.0), [1.0; 3], [0.0, 0.0, 1.0], [0.5; 3]).unwrap(), [1.0; 3]);
        let amb = shade_diffuse(&s(0.9, 0.3), [1.0; 3], [1.0, 0.0, 0.0], [0.5; 3]).unwrap();
        assert_abs_diff_eq!(amb[0], 0.15, epsilon = 1e-15);
        let l = [(0.75f64).sqrt(), 0.0, 0.5];
        let v = shade_diffuse(&s(0.8, 0.1), [0.5; 3], l, [0.2; 3]).unwrap();
        assert_abs_diff_eq!(v[2], 0.22, epsilon = 1e-12);
        // Back-facing light contributes nothing.
        let back = shade_diffuse(&s(1.0, 0.0), [1.0; 3], [0.0, 0.0, -1.0], [0.0; 3]).unwrap();
        assert_eq!(back, [0.0; 3]);
        // Non-unit vectors are normalized.
        let scaled = shade_diffuse(&s(1.0, 0.0), [1.0; 3], [0.0, 0.0, 3.0], [0.0; 3]).unwrap();
        assert_abs_diff_eq!(scaled[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kelvin_table() {
        assert_eq!(kelvin_to_rgb(6500.0).unwrap(), [1.0, 1.0, 1.0]);
        let fixtures = [
            (2500.0, [1.0, 0.6259672624262866, 0.28022573347261875]),
            (3500.0, [1.0, 0.7576785385558665, 0.5632119213627663]),
            (4500.0, [1.0, 0.8560549882476658, 0.7496101581433232]),
            (5500.0, [1.0, 0.9346070662631984, 0.8888328374926758]),
        ];
        for (t, want) in fixtures {
            let got = kelvin_to_rgb(t).unwrap();
            for c in 0..3 {
                assert_abs_diff_eq!(got[c], want[c], epsilon = 1e-9);
            }
        }
        let warm = kelvin_to_rgb(2500.0).unwrap();
        assert!(warm[0] > warm[1] && warm[1] > warm[2]);
        let mut last = 0.0;
        for t in (1000..=12000).step_by(250) {
            let b = kelvin_to_rgb(t as f64).unwrap()[2];
            assert!(b >= last);
            last = b;
        }
        assert!(kelvin_to_rgb(999.0).is_err());
        assert!(kelvin_to_rgb(12001.0).is_err());
    }

    fn setting(d: Direction) -> IlluminationSetting {
        IlluminationSetting::new(d, 6500).unwrap()
    }

    fn row_mean(img: &ImageTensor, rows: std::ops::Range<usize>) -> f64 {
        let t = img.tensor();
        let w = t.width();
        let n = (rows.len() * w * 3) as f64;
        rows.flat_map(|r| (0..3).flat_map(move |c| (0..w).map(move |x| (c, r, x))))
            .map(|(c, r, x)| t.at(c, r, x) as f64)
            .sum::<f64>()
            / n
    }

    #[test]
    fn north_and_south_flip_vertical_gradient() {
        let scene = SyntheticScene::random(11);
        let n = render_scene(&scene, &setting(Direction::N), 64).unwrap();
        let s = render_scene(&scene, &setting(Direction::S), 64).unwrap();
        let grad = |img: &ImageTensor| row_mean(img, 0..32) - row_mean(img, 32..64);
        assert!(grad(&n) > 0.0, "north light brightens the top half");
        assert!(grad(&s) < 0.0, "south light brightens the bottom half");
    }

    #[test]
    fn ambient_only_render_is_k_a_times_i_a() {
        let mut scene = SyntheticScene::random(3);
        scene.boxes.clear();
        scene.ground_albedo.iter_mut().for_each(|a| *a = [0.5, 0.6, 0.7]);
        let src = PointSource { intensity: 0.0, ..scene.source_for(&setting(Direction::E)) };
        let img = render_with_source(&scene, &src, 16).unwrap();
        for c in 0..3 {
            let want = ([0.5, 0.6, 0.7][c] * scene.ambient[c]) as f32;
            assert!(img.tensor().plane(c).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn render_is_deterministic_and_checks_size() {
        let a = render_scene(&SyntheticScene::random(5), &setting(Direction::SW), 32).unwrap();
        let b = render_scene(&SyntheticScene::random(5), &setting(Direction::SW), 32).unwrap();
        assert_eq!(a, b);
        assert!(matches!(render_scene(&SyntheticScene::random(5), &setting(Direction::N), 40), Err(Error::Dimension(_))));
    }

    #[test]
    fn facing_surfel_is_never_darker_than_grazing() {
        let facing = Surfel { position: [0.0; 3], normal: [0.0, 0.0, 1.0], k_d: [0.6; 3], k_a: [0.6; 3] };
        let grazing = Surfel { normal: [1.0, 0.0, 0.0], ..facing };
        let l = [0.0, 0.0, 1.0];
        let a = shade_diffuse(&facing, [0.7; 3], l, [0.1; 3]).unwrap();
        let b = shade_diffuse(&grazing, [0.7; 3], l, [0.1; 3]).unwrap();
        assert!(a[0] >= b[0]);
    }
}
