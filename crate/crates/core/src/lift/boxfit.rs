//! Gravity-aligned oriented box fitting.
//!
//! Yaw comes from the minimum-area enclosing rectangle of the cluster's
//! ground-plane projection, found with rotating calipers over the convex
//! hull; the vertical extent is the z range.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, PointCloud};

/// Smallest extent a fitted box may have along any axis, in meters.
pub const EXTENT_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Rotation about +z, radians.
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn center(&self) -> Point3 {
        Point3::new(self.cx, self.cy, self.cz)
    }

    /// True when `p` lies inside the box grown by `slack` on every face.
    pub fn contains(&self, p: &Point3, slack: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (ex, ey) = (p.x - self.cx, p.y - self.cy);
        let lx = ex * c + ey * s;
        let ly = -ex * s + ey * c;
        lx.abs() <= self.dx / 2.0 + slack
            && ly.abs() <= self.dy / 2.0 + slack
            && (p.z - self.cz).abs() <= self.dz / 2.0 + slack
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn footprint_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Ground-plane corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hx, hy) = (self.dx / 2.0, self.dy / 2.0);
        [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)]
            .map(|(a, b)| [self.cx + a * c - b * s, self.cy + a * s + b * c])
    }

    /// Volumetric IoU of two yaw-only boxes.
    pub fn iou(&self, other: &OrientedBox3D) -> f64 {
        let inter_area = convex_intersection_area(&self.footprint(), &other.footprint());
        let z_lo = (self.cz - self.dz / 2.0).max(other.cz - other.dz / 2.0);
        let z_hi = (self.cz + self.dz / 2.0).min(other.cz + other.dz / 2.0);
        let inter = inter_area * (z_hi - z_lo).max(0.0);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Indices of `cloud` points inside the box.
    pub fn members(&self, cloud: &PointCloud) -> Vec<usize> {
        cloud
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| self.contains(p, 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxFit {
    pub bbox: OrientedBox3D,
    /// Set when the ground-plane projection had no area and an axis-aligned
    /// fallback was used.
    pub degenerate: bool,
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull, counter-clockwise, without collinear or duplicate vertices.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum-area rectangle over a CCW hull with at least three vertices.
/// Returns `(edge angle, length along edge, length across edge, center)`.
fn min_area_rectangle(hull: &[[f64; 2]]) -> (f64, f64, f64, [f64; 2]) {
    let n = hull.len();
    let dot = |p: [f64; 2], d: [f64; 2]| p[0] * d[0] + p[1] * d[1];
    let mut best: Option<(f64, f64, f64, f64, [f64; 2])> = None;
    // Calipers: `right` maximizes projection on the edge, `top` maximizes
    // the inward normal, `left` minimizes the edge projection.
    let (mut right, mut top, mut left) = (1 % n, 1 % n, 1 % n);
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let e = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let nrm = [-e[1], e[0]];
        let neg_e = [-e[0], -e[1]];

        if i == 0 {
            right = 0;
        }
        let mut guard = 0;
        while guard < n && dot(hull[(right + 1) % n], e) >= dot(hull[right], e) {
            right = (right + 1) % n;
            guard += 1;
        }
        if i == 0 {
            top = right;
        }
        guard = 0;
        while guard < n && dot(hull[(top + 1) % n], nrm) >= dot(hull[top], nrm) {
            top = (top + 1) % n;
            guard += 1;
        }
        if i == 0 {
            left = top;
        }
        guard = 0;
        while guard < n && dot(hull[(left + 1) % n], neg_e) >= dot(hull[left], neg_e) {
            left = (left + 1) % n;
            guard += 1;
        }

        let s_min = dot(hull[left], e);
        let s_max = dot(hull[right], e);
        let t_min = dot(a, nrm);
        let t_max = dot(hull[top], nrm);
        let (w, h) = (s_max - s_min, t_max - t_min);
        let area = w * h;
        let better = match &best {
            None => true,
            Some((best_area, ..)) => area < *best_area * (1.0 - 1e-12),
        };
        if better {
            let (sc, tc) = ((s_min + s_max) / 2.0, (t_min + t_max) / 2.0);
            let center = [sc * e[0] + tc * nrm[0], sc * e[1] + tc * nrm[1]];
            best = Some((area, e[1].atan2(e[0]), w, h, center));
        }
    }
    let (_, angle, w, h, center) = best.expect("hull has edges");
    (angle, w, h, center)
}

/// Chooses one of the equivalent (yaw, dx, dy) descriptions of a rectangle:
/// yaw in (−π/2, π/2] with the long side along yaw, or yaw in (−π/4, π/4]
/// for squares.
fn canonical_yaw(angle: f64, along: f64, across: f64) -> (f64, f64, f64) {
    let to_half_turn = |a: f64| {
        let mut r = wrap_angle(a);
        if r <= -FRAC_PI_2 {
            r += PI;
        } else if r > FRAC_PI_2 {
            r -= PI;
        }
        r
    };
    let scale = along.max(across).max(f64::MIN_POSITIVE);
    if (along - across).abs() <= 1e-9 * scale {
        let mut r = to_half_turn(angle);
        if r <= -FRAC_PI_4 {
            r += FRAC_PI_2;
        } else if r > FRAC_PI_4 {
            r -= FRAC_PI_2;
        }
        (r, along, across)
    } else if along >= across {
        (to_half_turn(angle), along, across)
    } else {
        (to_half_turn(angle + FRAC_PI_2), across, along)
    }
}

fn axis_aligned(points: &[Point3]) -> OrientedBox3D {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    OrientedBox3D {
        cx: (lo[0] + hi[0]) / 2.0,
        cy: (lo[1] + hi[1]) / 2.0,
        cz: (lo[2] + hi[2]) / 2.0,
        dx: (hi[0] - lo[0]).max(EXTENT_FLOOR),
        dy: (hi[1] - lo[1]).max(EXTENT_FLOOR),
        dz: (hi[2] - lo[2]).max(EXTENT_FLOOR),
        yaw: 0.0,
    }
}

/// Fits a box to raw points. Panics on an empty slice.
pub fn fit_points(points: &[Point3]) -> BoxFit {
    assert!(!points.is_empty(), "cannot fit a box to zero points");
    let planar: Vec<[f64; 2]> = points.iter().map(|p| [p.x, p.y]).collect();
    let hull = convex_hull(&planar);
    if hull.len() < 3 {
        return BoxFit {
            bbox: axis_aligned(points),
            degenerate: true,
        };
    }
    let (angle, along, across, center) = min_area_rectangle(&hull);
    let (yaw, dx, dy) = canonical_yaw(angle, along, across);
    let (z_lo, z_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.z), hi.max(p.z)));
    BoxFit {
        bbox: OrientedBox3D {
            cx: center[0],
            cy: center[1],
            cz: (z_lo + z_hi) / 2.0,
            dx: dx.max(EXTENT_FLOOR),
            dy: dy.max(EXTENT_FLOOR),
            dz: (z_hi - z_lo).max(EXTENT_FLOOR),
            yaw,
        },
        degenerate: false,
    }
}

/// Fits a box to the cloud points named by `indices`.
pub fn fit_box(indices: &[usize], cloud: &PointCloud) -> BoxFit {
    let pts: Vec<Point3> = indices.iter().map(|&i| cloud.points[i]).collect();
    fit_points(&pts)
}

/// Area of the intersection of two convex CCW polygons.
pub fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.to_vec();
    let m = b.len();
    for k in 0..m {
        if poly.is_empty() {
            break;
        }
        let (p, q) = (b[k], b[(k + 1) % m]);
        let side = |x: [f64; 2]| cross(p, q, x);
        let input = std::mem::take(&mut poly);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    poly.push(segment_cross(prev, cur, sp, sc));
                }
                poly.push(cur);
            } else if sp >= 0.0 {
                poly.push(segment_cross(prev, cur, sp, sc));
            }
        }
    }
    polygon_area(&poly)
}

fn segment_cross(a: [f64; 2], b: [f64; 2], sa: f64, sb: f64) -> [f64; 2] {
    let t = sa / (sa - sb);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice.abs() / 2.0
}
