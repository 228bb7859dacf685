//! Ray intersection against the analytic scene geometry (global frame).

use nalgebra::Vector3;

use super::{Object, Shape, WorldSpec};

/// Hits closer than this are ignored, so rays leaving a surface do not
/// re-hit it.
const T_MIN: f64 = 1e-9;

/// What a ray struck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; the distance for unit directions.
    pub t: f64,
    pub point: Vector3<f64>,
    pub class: u8,
    pub surface: Surface,
}

fn slab(o: f64, d: f64, half: f64, t0: &mut f64, t1: &mut f64) -> bool {
    if d.abs() < 1e-300 {
        return o.abs() <= half;
    }
    let (mut a, mut b) = ((-half - o) / d, (half - o) / d);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    *t0 = t0.max(a);
    *t1 = t1.min(b);
    t0 <= t1
}

/// Entry parameter of the ray into `shape`, if it enters ahead of the origin.
pub fn intersect(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    match *shape {
        Shape::Box { center, size, yaw } => {
            let (s, c) = yaw.sin_cos();
            let rel = origin - Vector3::from(center);
            // rotate by -yaw into the box frame
            let o = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
            let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if !slab(o[a], d[a], size[a] / 2.0, &mut t0, &mut t1) {
                    return None;
                }
            }
            (t0 > T_MIN).then_some(t0)
        }
        Shape::Cylinder { center, z, radius } => {
            let (ox, oy) = (origin.x - center[0], origin.y - center[1]);
            let mut best: Option<f64> = None;
            let mut take = |t: f64| {
                if t > T_MIN && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            };
            let a = dir.x * dir.x + dir.y * dir.y;
            if a > 1e-300 {
                let b = 2.0 * (ox * dir.x + oy * dir.y);
                let cc = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let zt = origin.z + t * dir.z;
                    if zt >= z[0] && zt <= z[1] {
                        take(t);
                    }
                }
            }
            if dir.z.abs() > 1e-300 {
                let cap = if dir.z < 0.0 { z[1] } else { z[0] };
                let t = (cap - origin.z) / dir.z;
                let (px, py) = (ox + t * dir.x, oy + t * dir.y);
                if px * px + py * py <= radius * radius {
                    take(t);
                }
            }
            // Origins inside the solid are not considered hits.
            let inside = ox * ox + oy * oy < radius * radius && origin.z > z[0] && origin.z < z[1];
            if inside {
                None
            } else {
                best
            }
        }
    }
}

fn object_hit(i: usize, o: &Object, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    intersect(&o.shape, origin, dir).map(|t| Hit {
        t,
        point: origin + dir * t,
        class: o.class,
        surface: Surface::Object(i),
    })
}

/// Nearest hit within `max_t` along `origin + t * dir`.
pub fn raycast(world: &WorldSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if let Some(class) = world.ground_class {
        if dir.z < 0.0 && origin.z > 0.0 {
            let t = -origin.z / dir.z;
            let mut point = origin + dir * t;
            point.z = 0.0;
            best = Some(Hit { t, point, class, surface: Surface::Ground });
        }
    }
    for (i, o) in world.objects.iter().enumerate() {
        if let Some(h) = object_hit(i, o, origin, dir) {
            if best.is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        }
    }
    best.filter(|h| h.t <= max_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_faces() {
        let shape = Shape::Box { center: [5.0, 0.0, 1.0], size: [2.0, 2.0, 2.0], yaw: 0.0 };
        let t = intersect(&shape, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(intersect(&shape, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(-1.0, 0.0, 0.0)).is_none());
        // yawed 45 degrees: the near corner sits at x = 5 - sqrt(2)
        let rot = Shape::Box { center: [5.0, 0.0, 1.0], size: [2.0, 2.0, 2.0], yaw: std::f64::consts::FRAC_PI_4 };
        let t = intersect(&rot, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - (5.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn cylinder_side_and_cap() {
        let shape = Shape::Cylinder { center: [3.0, 0.0], z: [0.0, 2.0], radius: 0.5 };
        let t = intersect(&shape, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        let t = intersect(&shape, &Vector3::new(3.0, 0.0, 5.0), &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        assert!(intersect(&shape, &Vector3::new(0.0, 0.0, 3.0), &Vector3::new(1.0, 0.0, 0.0)).is_none());
    }
}
