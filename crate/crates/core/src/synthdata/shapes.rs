use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Vec3;

/// A planar surface element in object-local coordinates (origin at the box
/// center).
#[derive(Clone, Debug)]
pub(crate) enum Patch {
    /// `origin + s*u + t*v`, `s, t in [0, 1]`.
    Parallelogram {
        origin: Vec3,
        u: Vec3,
        v: Vec3,
    },
    Triangle {
        a: Vec3,
        b: Vec3,
        c: Vec3,
    },
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Patch {
    pub(crate) fn area(&self) -> f64 {
        match self {
            Patch::Parallelogram { u, v, .. } => norm(cross(*u, *v)),
            Patch::Triangle { a, b, c } => 0.5 * norm(cross(sub(*b, *a), sub(*c, *a))),
        }
    }

    pub(crate) fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match self {
            Patch::Parallelogram { origin, u, v } => {
                let s: f64 = rng.gen();
                let t: f64 = rng.gen();
                [
                    origin[0] + s * u[0] + t * v[0],
                    origin[1] + s * u[1] + t * v[1],
                    origin[2] + s * u[2] + t * v[2],
                ]
            }
            Patch::Triangle { a, b, c } => {
                let mut s: f64 = rng.gen();
                let mut t: f64 = rng.gen();
                if s + t > 1.0 {
                    s = 1.0 - s;
                    t = 1.0 - t;
                }
                [
                    a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
                    a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
                    a[2] + s * (b[2] - a[2]) + t * (c[2] - a[2]),
                ]
            }
        }
    }
}

/// The six faces of the axis-aligned cuboid `[lo, hi]`, minus the faces whose
/// index appears in `skip` (0: -x, 1: +x, 2: -y, 3: +y, 4: -z, 5: +z).
fn cuboid_faces(lo: Vec3, hi: Vec3, skip: &[usize], out: &mut Vec<Patch>) {
    let d = sub(hi, lo);
    let ex = [d[0], 0.0, 0.0];
    let ey = [0.0, d[1], 0.0];
    let ez = [0.0, 0.0, d[2]];
    let faces = [
        (lo, ey, ez),
        ([hi[0], lo[1], lo[2]], ey, ez),
        (lo, ex, ez),
        ([lo[0], hi[1], lo[2]], ex, ez),
        (lo, ex, ey),
        ([lo[0], lo[1], hi[2]], ex, ey),
    ];
    for (i, (origin, u, v)) in faces.into_iter().enumerate() {
        if !skip.contains(&i) {
            out.push(Patch::Parallelogram { origin, u, v });
        }
    }
}

/// Vertical prism with `facets` sides inscribed in the ellipse with semi-axes
/// `(rx, ry)` around `(cx, cy)`, spanning `z0..z1`, optionally capped.
#[allow(clippy::too_many_arguments)]
fn prism(
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    z0: f64,
    z1: f64,
    facets: usize,
    caps: bool,
    out: &mut Vec<Patch>,
) {
    let ring: Vec<(f64, f64)> = (0..facets)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / facets as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect();
    for i in 0..facets {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % facets];
        out.push(Patch::Parallelogram {
            origin: [x0, y0, z0],
            u: [x1 - x0, y1 - y0, 0.0],
            v: [0.0, 0.0, z1 - z0],
        });
        if caps {
            for z in [z0, z1] {
                out.push(Patch::Triangle {
                    a: [cx, cy, z],
                    b: [x0, y0, z],
                    c: [x1, y1, z],
                });
            }
        }
    }
}

/// Parameterized composition of primitives. Every program fills exactly the
/// box `[-size/2, size/2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShapeProgram {
    /// Closed cuboid shell.
    CuboidShell,
    /// Cuboid shell without its top face.
    OpenBox,
    /// Floor plate plus a vertical back plate.
    LBracket { plate: f64 },
    /// Capped vertical facet prism.
    Cylinder { facets: usize },
    /// Top slab on four corner legs.
    Table { top: f64, leg: f64 },
    /// Seat slab at mid height, backrest slab, four legs.
    Chair { leg: f64 },
    /// Box open at the front with internal boards.
    Shelf { boards: usize },
    /// Round top on a central column.
    Stool { facets: usize },
    /// Low mattress slab with a headboard.
    Bed { mattress: f64 },
    /// Thin panel on a column and base plate.
    Monitor,
    /// Long slab on two end panels.
    Bench { top: f64 },
    /// Tall shell split by a horizontal divider.
    Cabinet,
    /// Thin column with a wide faceted shade.
    Lamp { facets: usize },
    /// Seat block, backrest and two arms.
    Sofa,
}

impl ShapeProgram {
    /// Surface patches for an instance of extent `size`, centered at the origin.
    pub(crate) fn patches(&self, size: Vec3) -> Vec<Patch> {
        let h = [0.5 * size[0], 0.5 * size[1], 0.5 * size[2]];
        let lo = [-h[0], -h[1], -h[2]];
        let hi = h;
        let mut out = Vec::new();
        match *self {
            ShapeProgram::CuboidShell => cuboid_faces(lo, hi, &[], &mut out),
            ShapeProgram::OpenBox => cuboid_faces(lo, hi, &[5], &mut out),
            ShapeProgram::LBracket { plate } => {
                let t = plate * size[2];
                cuboid_faces(lo, [hi[0], hi[1], lo[2] + t], &[], &mut out);
                let ty = plate * size[1];
                cuboid_faces([lo[0], hi[1] - ty, lo[2] + t], hi, &[4], &mut out);
            }
            ShapeProgram::Cylinder { facets } => {
                prism(0.0, 0.0, h[0], h[1], lo[2], hi[2], facets, true, &mut out)
            }
            ShapeProgram::Table { top, leg } => {
                let zt = hi[2] - top * size[2];
                cuboid_faces([lo[0], lo[1], zt], hi, &[], &mut out);
                let lx = leg * size[0];
                let ly = leg * size[1];
                for (x0, y0) in [
                    (lo[0], lo[1]),
                    (hi[0] - lx, lo[1]),
                    (lo[0], hi[1] - ly),
                    (hi[0] - lx, hi[1] - ly),
                ] {
                    cuboid_faces([x0, y0, lo[2]], [x0 + lx, y0 + ly, zt], &[4, 5], &mut out);
                }
            }
            ShapeProgram::Chair { leg } => {
                let seat_z = lo[2] + 0.45 * size[2];
                let seat_t = 0.08 * size[2];
                cuboid_faces(
                    [lo[0], lo[1], seat_z],
                    [hi[0], hi[1], seat_z + seat_t],
                    &[],
                    &mut out,
                );
                let back_t = 0.12 * size[1];
                cuboid_faces([lo[0], hi[1] - back_t, seat_z + seat_t], hi, &[4], &mut out);
                let lx = leg * size[0];
                let ly = leg * size[1];
                for (x0, y0) in [
                    (lo[0], lo[1]),
                    (hi[0] - lx, lo[1]),
                    (lo[0], hi[1] - ly),
                    (hi[0] - lx, hi[1] - ly),
                ] {
                    cuboid_faces(
                        [x0, y0, lo[2]],
                        [x0 + lx, y0 + ly, seat_z],
                        &[4, 5],
                        &mut out,
                    );
                }
            }
            ShapeProgram::Shelf { boards } => {
                cuboid_faces(lo, hi, &[2], &mut out);
                for i in 1..=boards {
                    let z = lo[2] + size[2] * i as f64 / (boards + 1) as f64;
                    out.push(Patch::Parallelogram {
                        origin: [lo[0], lo[1], z],
                        u: [size[0], 0.0, 0.0],
                        v: [0.0, size[1], 0.0],
                    });
                }
            }
            ShapeProgram::Stool { facets } => {
                let top_z = hi[2] - 0.1 * size[2];
                prism(0.0, 0.0, h[0], h[1], top_z, hi[2], facets, true, &mut out);
                prism(
                    0.0,
                    0.0,
                    0.15 * h[0],
                    0.15 * h[1],
                    lo[2],
                    top_z,
                    facets,
                    false,
                    &mut out,
                );
                prism(
                    0.0,
                    0.0,
                    0.7 * h[0],
                    0.7 * h[1],
                    lo[2],
                    lo[2] + 0.04 * size[2],
                    facets,
                    true,
                    &mut out,
                );
            }
            ShapeProgram::Bed { mattress } => {
                let mz = lo[2] + mattress * size[2];
                let head_t = 0.06 * size[1];
                cuboid_faces(lo, [hi[0], hi[1] - head_t, mz], &[4], &mut out);
                cuboid_faces([lo[0], hi[1] - head_t, lo[2]], hi, &[4], &mut out);
            }
            ShapeProgram::Monitor => {
                let panel_z = lo[2] + 0.35 * size[2];
                let panel_t = 0.2 * size[1];
                cuboid_faces(
                    [lo[0], -0.5 * panel_t, panel_z],
                    [hi[0], 0.5 * panel_t, hi[2]],
                    &[],
                    &mut out,
                );
                cuboid_faces(
                    [-0.06 * size[0], -0.5 * panel_t, lo[2]],
                    [0.06 * size[0], 0.5 * panel_t, panel_z],
                    &[4, 5],
                    &mut out,
                );
                cuboid_faces(
                    [-0.3 * size[0], lo[1], lo[2]],
                    [0.3 * size[0], hi[1], lo[2] + 0.05 * size[2]],
                    &[4],
                    &mut out,
                );
            }
            ShapeProgram::Bench { top } => {
                let zt = hi[2] - top * size[2];
                cuboid_faces([lo[0], lo[1], zt], hi, &[], &mut out);
                let px = 0.08 * size[0];
                cuboid_faces(
                    [lo[0], lo[1], lo[2]],
                    [lo[0] + px, hi[1], zt],
                    &[4, 5],
                    &mut out,
                );
                cuboid_faces(
                    [hi[0] - px, lo[1], lo[2]],
                    [hi[0], hi[1], zt],
                    &[4, 5],
                    &mut out,
                );
            }
            ShapeProgram::Cabinet => {
                cuboid_faces(lo, hi, &[], &mut out);
                out.push(Patch::Parallelogram {
                    origin: [lo[0], lo[1], 0.0],
                    u: [size[0], 0.0, 0.0],
                    v: [0.0, size[1], 0.0],
                });
            }
            ShapeProgram::Lamp { facets } => {
                let shade_z = hi[2] - 0.3 * size[2];
                prism(
                    0.0, 0.0, h[0], h[1], shade_z, hi[2], facets, false, &mut out,
                );
                prism(
                    0.0,
                    0.0,
                    0.08 * h[0],
                    0.08 * h[1],
                    lo[2],
                    shade_z,
                    facets,
                    false,
                    &mut out,
                );
                prism(
                    0.0,
                    0.0,
                    0.6 * h[0],
                    0.6 * h[1],
                    lo[2],
                    lo[2] + 0.03 * size[2],
                    facets,
                    true,
                    &mut out,
                );
            }
            ShapeProgram::Sofa => {
                let seat_z = lo[2] + 0.45 * size[2];
                let back_t = 0.2 * size[1];
                let arm_t = 0.12 * size[0];
                cuboid_faces(
                    [lo[0] + arm_t, lo[1], lo[2]],
                    [hi[0] - arm_t, hi[1] - back_t, seat_z],
                    &[4],
                    &mut out,
                );
                cuboid_faces([lo[0], hi[1] - back_t, lo[2]], hi, &[4], &mut out);
                let arm_top = lo[2] + 0.7 * size[2];
                cuboid_faces(lo, [lo[0] + arm_t, hi[1] - back_t, arm_top], &[4], &mut out);
                cuboid_faces(
                    [hi[0] - arm_t, lo[1], lo[2]],
                    [hi[0], hi[1] - back_t, arm_top],
                    &[4],
                    &mut out,
                );
            }
        }
        out
    }
}

/// One object category: a shape program, per-axis size bounds (meters) and
/// the number of surface points sampled per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub class_id: usize,
    pub name: String,
    pub shape_program: ShapeProgram,
    pub size_min: Vec3,
    pub size_max: Vec3,
    pub points_min: usize,
    pub points_max: usize,
}

impl CategorySpec {
    pub fn validate(&self) -> crate::error::Result<()> {
        let bad_size = (0..3).any(|a| {
            !(self.size_min[a] > 0.0)
                || !(self.size_max[a] >= self.size_min[a])
                || !self.size_max[a].is_finite()
        });
        if bad_size {
            return Err(crate::error::Error::Config(format!(
                "category {} ({}): empty or non-positive size range {:?}..{:?}",
                self.class_id, self.name, self.size_min, self.size_max
            )));
        }
        if self.points_min == 0 || self.points_max < self.points_min {
            return Err(crate::error::Error::Config(format!(
                "category {} ({}): empty points-per-object range {}..{}",
                self.class_id, self.name, self.points_min, self.points_max
            )));
        }
        Ok(())
    }

    pub fn sample_size(&self, rng: &mut impl Rng) -> Vec3 {
        let mut s = [0.0; 3];
        for a in 0..3 {
            s[a] = if self.size_max[a] > self.size_min[a] {
                rng.gen_range(self.size_min[a]..=self.size_max[a])
            } else {
                self.size_min[a]
            };
        }
        s
    }

    pub fn sample_point_count(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.points_min..=self.points_max)
    }
}

struct Template {
    name: &'static str,
    program: ShapeProgram,
    min: Vec3,
    max: Vec3,
}

fn templates() -> Vec<Template> {
    use ShapeProgram::*;
    vec![
        Template {
            name: "crate",
            program: CuboidShell,
            min: [0.35, 0.35, 0.35],
            max: [0.6, 0.6, 0.6],
        },
        Template {
            name: "bin",
            program: OpenBox,
            min: [0.3, 0.3, 0.35],
            max: [0.5, 0.5, 0.6],
        },
        Template {
            name: "bracket",
            program: LBracket { plate: 0.15 },
            min: [0.5, 0.35, 0.35],
            max: [0.8, 0.5, 0.6],
        },
        Template {
            name: "barrel",
            program: Cylinder { facets: 10 },
            min: [0.35, 0.35, 0.6],
            max: [0.55, 0.55, 1.0],
        },
        Template {
            name: "table",
            program: Table {
                top: 0.06,
                leg: 0.07,
            },
            min: [0.8, 0.6, 0.7],
            max: [1.4, 1.0, 0.8],
        },
        Template {
            name: "chair",
            program: Chair { leg: 0.1 },
            min: [0.45, 0.45, 0.8],
            max: [0.6, 0.6, 1.0],
        },
        Template {
            name: "shelf",
            program: Shelf { boards: 3 },
            min: [0.6, 0.3, 1.1],
            max: [1.0, 0.4, 1.6],
        },
        Template {
            name: "stool",
            program: Stool { facets: 8 },
            min: [0.3, 0.3, 0.45],
            max: [0.45, 0.45, 0.7],
        },
        Template {
            name: "bed",
            program: Bed { mattress: 0.5 },
            min: [1.6, 0.9, 0.45],
            max: [2.0, 1.4, 0.65],
        },
        Template {
            name: "monitor",
            program: Monitor,
            min: [0.45, 0.18, 0.35],
            max: [0.7, 0.25, 0.55],
        },
        Template {
            name: "bench",
            program: Bench { top: 0.1 },
            min: [1.0, 0.3, 0.4],
            max: [1.6, 0.45, 0.5],
        },
        Template {
            name: "cabinet",
            program: Cabinet,
            min: [0.5, 0.4, 0.9],
            max: [0.9, 0.6, 1.4],
        },
        Template {
            name: "lamp",
            program: Lamp { facets: 8 },
            min: [0.3, 0.3, 1.2],
            max: [0.45, 0.45, 1.7],
        },
        Template {
            name: "sofa",
            program: Sofa,
            min: [1.5, 0.8, 0.7],
            max: [2.1, 1.0, 0.9],
        },
    ]
}

/// `n` category specs with class ids `0..n`. Beyond the built-in templates,
/// categories reuse a template with scaled size bounds.
pub fn catalog(n: usize, points_per_object: (usize, usize)) -> Vec<CategorySpec> {
    let base = templates();
    (0..n)
        .map(|i| {
            let t = &base[i % base.len()];
            let round = i / base.len();
            let scale = 1.0 + 0.35 * round as f64;
            let name = if round == 0 {
                t.name.to_string()
            } else {
                format!("{}_{}", t.name, round + 1)
            };
            CategorySpec {
                class_id: i,
                name,
                shape_program: t.program.clone(),
                size_min: t.min.map(|v| v * scale),
                size_max: t.max.map(|v| v * scale),
                points_min: points_per_object.0,
                points_max: points_per_object.1,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_program_stays_inside_its_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in catalog(14, (100, 100)) {
            let size = spec.sample_size(&mut rng);
            let patches = spec.shape_program.patches(size);
            assert!(!patches.is_empty());
            assert!(patches.iter().map(Patch::area).sum::<f64>() > 0.0);
            for patch in &patches {
                for _ in 0..50 {
                    let p = patch.sample(&mut rng);
                    for a in 0..3 {
                        assert!(
                            p[a].abs() <= 0.5 * size[a] + 1e-9,
                            "{} escapes on axis {a}",
                            spec.name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn empty_size_range_is_rejected() {
        let mut spec = catalog(1, (10, 20)).remove(0);
        spec.size_max[1] = spec.size_min[1] - 0.1;
        assert!(spec.validate().is_err());
        let mut spec = catalog(1, (10, 20)).remove(0);
        spec.points_max = 5;
        assert!(spec.validate().is_err());
    }
}
