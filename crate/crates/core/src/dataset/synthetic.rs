//! Procedural sonar-like patch pairs.
//!
//! Each scene is a seabed texture with an optional bright object and the
//! acoustic shadow it casts further down range (towards the bottom of the
//! patch). Matching pairs render the same scene twice under a small change
//! of viewpoint, gain and speckle; non-matching pairs render two unrelated
//! scenes. Speckle is multiplicative gamma noise, as in incoherent sonar
//! returns.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{LabelOrientation, PairDataset, Patch, PatchPair};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    pub match_fraction: f64,
    /// Number of looks of the gamma speckle; lower is noisier.
    pub speckle_looks: f64,
    /// Largest viewpoint translation between the two views, in pixels.
    pub max_shift: f64,
    /// Largest viewpoint rotation between the two views, in radians.
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 1000,
            height: super::DEFAULT_PATCH_SIZE,
            width: super::DEFAULT_PATCH_SIZE,
            match_fraction: 0.5,
            speckle_looks: 2.0,
            max_shift: 6.0,
            max_rotation: 0.35,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Bottle,
    Tire,
    Can,
    Chain,
    Hook,
}

const SHAPES: [Shape; 5] = [Shape::Bottle, Shape::Tire, Shape::Can, Shape::Chain, Shape::Hook];

#[derive(Debug, Clone)]
struct Object {
    shape: Shape,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    brightness: f64,
    shadow: f64,
}

#[derive(Debug, Clone)]
struct Scene {
    object: Option<Object>,
    floor: f64,
    // low-frequency seabed texture: (amplitude, kx, ky, phase)
    ripples: [(f64, f64, f64, f64); 2],
}

#[derive(Debug, Clone, Copy)]
struct View {
    dx: f64,
    dy: f64,
    rotation: f64,
    gain: f64,
}

impl View {
    const IDENTITY: View = View { dx: 0.0, dy: 0.0, rotation: 0.0, gain: 1.0 };
}

fn smoothstep(edge: f64, d: f64) -> f64 {
    // 1 inside (d <= -edge), 0 outside (d >= edge)
    let t = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Object {
    fn random(rng: &mut seeds::Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        Self {
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            cx: w as f64 * rng.random_range(0.3..0.7),
            cy: h as f64 * rng.random_range(0.3..0.6),
            size: side * rng.random_range(0.14..0.3),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            brightness: rng.random_range(0.45..0.85),
            shadow: side * rng.random_range(0.1..0.3),
        }
    }

    /// Soft occupancy in [0,1] at object-frame coordinates.
    fn occupancy(&self, u: f64, v: f64) -> f64 {
        let e = 0.08;
        let r = (u * u + v * v).sqrt();
        match self.shape {
            Shape::Bottle => smoothstep(e, (u * u + (v / 0.38).powi(2)).sqrt() - 1.0),
            Shape::Tire => smoothstep(e, (r - 0.75).abs() - 0.22),
            Shape::Can => smoothstep(e, u.abs().max(v.abs()) - 0.7),
            Shape::Chain => {
                let link = ((u * 4.0).rem_euclid(1.0) - 0.5).abs();
                smoothstep(e, (v.abs() - 0.14).max(u.abs() - 1.0)) * (0.55 + 0.45 * (link < 0.3) as u8 as f64)
            }
            Shape::Hook => {
                let shaft = smoothstep(e, (u.abs() - 0.12).max(v.abs() - 0.9));
                let curl = smoothstep(e, ((u - 0.35).powi(2) + (v - 0.9).powi(2)).sqrt().max(0.0) - 0.35)
                    * smoothstep(e, 0.22 - ((u - 0.35).powi(2) + (v - 0.9).powi(2)).sqrt());
                shaft.max(curl)
            }
        }
    }
}

impl Scene {
    fn random(rng: &mut seeds::Rng, h: usize, w: usize, with_object: bool) -> Self {
        let mut ripple = || {
            (
                rng.random_range(0.01..0.05),
                rng.random_range(0.02..0.15),
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        let ripples = [ripple(), ripple()];
        Self {
            object: with_object.then(|| Object::random(rng, h, w)),
            floor: rng.random_range(0.08..0.2),
            ripples,
        }
    }

    fn render(&self, view: View, h: usize, w: usize, looks: f64, rng: &mut seeds::Rng) -> Vec<f32> {
        let mut clean = vec![0f64; h * w];
        let mut occupied_to = vec![None::<usize>; w];
        let (ccx, ccy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (sr, cr) = view.rotation.sin_cos();
        for y in 0..h {
            for x in 0..w {
                // undo the view transform to get scene coordinates
                let (px, py) = (x as f64 - ccx - view.dx, y as f64 - ccy - view.dy);
                let sx = cr * px + sr * py + ccx;
                let sy = -sr * px + cr * py + ccy;
                let mut v = self.floor;
                for &(amp, kx, ky, ph) in &self.ripples {
                    v += amp * (kx * sx + ky * sy + ph).sin();
                }
                if let Some(o) = &self.object {
                    let (sa, ca) = o.angle.sin_cos();
                    let (dx, dy) = ((sx - o.cx) / o.size, (sy - o.cy) / o.size);
                    let occ = o.occupancy(ca * dx + sa * dy, -sa * dx + ca * dy);
                    if occ > 0.3 {
                        occupied_to[x] = Some(y);
                    }
                    v += occ * o.brightness;
                }
                // range attenuation: returns weaken further down the patch
                v *= 1.0 - 0.25 * y as f64 / h as f64;
                clean[y * w + x] = v;
            }
        }
        if let Some(o) = &self.object {
            let len = o.shadow.round() as usize;
            for (x, end) in occupied_to.iter().enumerate() {
                if let Some(end) = *end {
                    for y in end + 1..(end + 1 + len).min(h) {
                        clean[y * w + x] *= 0.25;
                    }
                }
            }
        }
        let speckle = Gamma::new(looks, 1.0 / looks).expect("positive speckle looks");
        clean
            .into_iter()
            .map(|v| ((v * view.gain).max(0.0) * speckle.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect()
    }
}

fn random_view(rng: &mut seeds::Rng, cfg: &SyntheticConfig) -> View {
    View {
        dx: rng.random_range(-cfg.max_shift..=cfg.max_shift),
        dy: rng.random_range(-cfg.max_shift..=cfg.max_shift),
        rotation: rng.random_range(-cfg.max_rotation..=cfg.max_rotation),
        gain: rng.random_range(0.85..1.15),
    }
}

/// Generates `cfg.pairs` labelled pairs in match-is-one orientation.
///
/// Pair `i` depends only on `(cfg.seed, i)`, so prefixes of a larger set
/// equal smaller sets generated with the same seed.
pub fn generate(cfg: &SyntheticConfig) -> Result<PairDataset> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic patches must be at least 8x8, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if !(0.0..=1.0).contains(&cfg.match_fraction) || cfg.speckle_looks <= 0.0 {
        return Err(Error::InvalidArgument("match_fraction must lie in [0,1] and speckle_looks be positive".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let pairs = (0..cfg.pairs)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive_indexed(cfg.seed, "synthetic", i as u64));
            let is_match = rng.random_bool(cfg.match_fraction);
            let (a, b) = if is_match {
                let with_object = rng.random_bool(0.85);
                let scene = Scene::random(&mut rng, h, w, with_object);
                let a = scene.render(View::IDENTITY, h, w, cfg.speckle_looks, &mut rng);
                let view = random_view(&mut rng, cfg);
                (a, scene.render(view, h, w, cfg.speckle_looks, &mut rng))
            } else {
                let (first_obj, second_obj) = (rng.random_bool(0.85), rng.random_bool(0.7));
                let first = Scene::random(&mut rng, h, w, first_obj);
                let second = Scene::random(&mut rng, h, w, second_obj);
                let a = first.render(View::IDENTITY, h, w, cfg.speckle_looks, &mut rng);
                let view = random_view(&mut rng, cfg);
                (a, second.render(view, h, w, cfg.speckle_looks, &mut rng))
            };
            PatchPair::new(Patch::new(h, w, a)?, Patch::new(h, w, b)?, u8::from(is_match), i)
        })
        .collect::<Result<Vec<_>>>()?;
    PairDataset::new(pairs, format!("synthetic-{}", cfg.seed), LabelOrientation::MatchIsOne)
}
