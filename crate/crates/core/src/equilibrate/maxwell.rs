//! Maxwell force polygons: centroids, pole selection and the walk that turns
//! a pole into side forces.
//!
//! The polygon of forces `F1, F2, ...` has vertices `V0 = 0` and
//! `Vk = V(k-1) + Fk`. With pole `G`, the element owning side `k` receives
//! `G - V(k-1)` on the edge it shares with its predecessor and `Vk - G` on the
//! edge shared with its successor, so consecutive elements get equal and
//! opposite forces on their common edge.

use thiserror::Error;

use crate::grid::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaxwellError {
    #[error("force polygon is not closed (residual {residual:e}, scale {scale:e})")]
    NotClosed { residual: f64, scale: f64 },
    #[error("diagonal void pattern around a node")]
    Checkerboard,
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed area and centroid of triangle `(a, b, c)`.
fn triangle(a: Vec2, b: Vec2, c: Vec2) -> (f64, Vec2) {
    (0.5 * cross(b - a, c - a), (a + b + c) / 3.0)
}

/// Intersection point of segments `p0p1` and `q0q1` when they cross at a
/// point interior to both.
fn crossing(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> Option<Vec2> {
    let r = p1 - p0;
    let s = q1 - q0;
    let den = cross(r, s);
    let scale = r.norm() * s.norm();
    if den.abs() <= 1e-14 * scale {
        return None;
    }
    let t = cross(q0 - p0, s) / den;
    let u = cross(q0 - p0, r) / den;
    let eps = 1e-12;
    if t > eps && t < 1.0 - eps && u > eps && u < 1.0 - eps {
        Some(p0 + r * t)
    } else {
        None
    }
}

/// Vertices `V0 = 0, V1, ..., V(n-1)` of the polygon of `forces`.
pub fn vertices(forces: &[Vec2]) -> Vec<Vec2> {
    let mut v = Vec::with_capacity(forces.len() + 1);
    let mut acc = Vec2::zeros();
    v.push(acc);
    for f in forces {
        acc += f;
        v.push(acc);
    }
    v
}

/// Centroid of the quadrilateral of four (nearly) closing forces, measured
/// from the start vertex. The quadrilateral is split along the diagonal
/// `V0 V2`; when two opposite sides cross, the doubly covered triangle is
/// removed. A polygon without area has its centroid at the origin.
pub fn polygon_centroid(f: [Vec2; 4]) -> Result<Vec2, MaxwellError> {
    let scale = f.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(Vec2::zeros());
    }
    let residual = (f[0] + f[1] + f[2] + f[3]).norm();
    if residual > 1e-6 * scale {
        return Err(MaxwellError::NotClosed { residual, scale });
    }
    let v0 = Vec2::zeros();
    let v1 = f[0];
    let v2 = f[0] + f[1];
    let v3 = v2 + f[2];
    let (a1, c1) = triangle(v0, v1, v2);
    let (a2, c2) = triangle(v0, v2, v3);
    let tiny = 1e-12 * scale * scale;
    if a1 * a2 < 0.0 {
        let q = crossing(v0, v1, v2, v3).or_else(|| crossing(v1, v2, v3, v0));
        if let Some(q) = q {
            let (a3, c3) = triangle(v0, v2, q);
            let den = a1.abs() + a2.abs() - 2.0 * a3.abs();
            if den.abs() <= tiny {
                return Ok(Vec2::zeros());
            }
            return Ok((c1 * a1.abs() + c2 * a2.abs() - c3 * (2.0 * a3.abs())) / den);
        }
    }
    let den = a1 + a2;
    if den.abs() <= tiny {
        return Ok(Vec2::zeros());
    }
    Ok((c1 * a1 + c2 * a2) / den)
}

/// Geometric centre of a closed polygon given by its vertices (2 to 4 sides).
pub fn centre(verts: &[Vec2]) -> Result<Vec2, MaxwellError> {
    match verts.len() {
        0 => Ok(Vec2::zeros()),
        1 => Ok(verts[0]),
        2 => Ok((verts[0] + verts[1]) * 0.5),
        3 => Ok((verts[0] + verts[1] + verts[2]) / 3.0),
        4 => {
            let f = [verts[1] - verts[0], verts[2] - verts[1], verts[3] - verts[2], verts[0] - verts[3]];
            Ok(verts[0] + polygon_centroid(f)?)
        }
        n => unreachable!("polygon with {n} sides around a grid node"),
    }
}

/// Pole of a closed polygon given by `verts`, where side `k` runs from
/// `verts[k]` to `verts[(k + 1) % n]` and `void[k]` flags sides whose element
/// is void. Sides that belong to no element (a support reaction closing the
/// polygon) are never void. `cycle` marks a full ring of four elements, where
/// a diagonal void pattern is an error.
pub fn choose_pole(verts: &[Vec2], void: &[bool], element_sides: usize, cycle: bool) -> Result<Vec2, MaxwellError> {
    let n = verts.len();
    debug_assert_eq!(void.len(), n);
    let voids = void.iter().filter(|v| **v).count();
    let midpoint = |k: usize| (verts[k] + verts[(k + 1) % n]) * 0.5;
    if voids == 0 || voids == element_sides || n <= 2 {
        return centre(verts);
    }
    if voids == 1 {
        return Ok(midpoint(void.iter().position(|v| *v).unwrap()));
    }
    if n - voids == 1 {
        return Ok(midpoint(void.iter().position(|v| !*v).unwrap()));
    }
    if voids == 2 {
        for k in 0..n {
            if void[k] && void[(k + 1) % n] {
                return Ok(verts[(k + 1) % n]);
            }
        }
        if cycle {
            return Err(MaxwellError::Checkerboard);
        }
    }
    centre(verts)
}

/// Side forces of a full ring of elements around a node for pole `g`.
/// Returns `(enter, leave, lambda)` where `enter[k]` acts on the edge element
/// `k` shares with element `k - 1`. The closure residual `lambda` is booked in
/// the corner of element 0: `enter[0] + leave[0] + lambda = F[0]`.
pub fn split_cycle(forces: &[Vec2], g: Vec2) -> (Vec<Vec2>, Vec<Vec2>, Vec2) {
    let n = forces.len();
    let v = vertices(forces);
    let lambda = v[n];
    let mut enter = vec![Vec2::zeros(); n];
    let mut leave = vec![Vec2::zeros(); n];
    enter[0] = g;
    for k in 0..n {
        if k + 1 < n {
            leave[k] = v[k + 1] - g - lambda;
            enter[k + 1] = -leave[k];
        } else {
            leave[k] = -enter[0];
        }
    }
    (enter, leave, lambda)
}

/// Side forces of an open chain of elements for pole `g`: `enter[0] = g` on
/// the first boundary edge, `leave[m-1] = Vm - g` on the last one.
pub fn split_chain(forces: &[Vec2], g: Vec2) -> (Vec<Vec2>, Vec<Vec2>) {
    let n = forces.len();
    let v = vertices(forces);
    let mut enter = vec![Vec2::zeros(); n];
    let mut leave = vec![Vec2::zeros(); n];
    enter[0] = g;
    for k in 0..n {
        leave[k] = v[k + 1] - g;
        if k + 1 < n {
            enter[k + 1] = -leave[k];
        }
    }
    (enter, leave)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn unit_square_centroid() {
        let g = polygon_centroid([v(1., 0.), v(0., 1.), v(-1., 0.), v(0., -1.)]).unwrap();
        assert_relative_eq!(g, v(0.5, 0.5), epsilon = 1e-15);
    }

    #[test]
    fn triangle_centroid() {
        let g = polygon_centroid([v(1., 0.), v(-1., 1.), v(0., -1.), v(0., 0.)]).unwrap();
        assert_relative_eq!(g, v(1. / 3., 1. / 3.), epsilon = 1e-15);
    }

    #[test]
    fn clockwise_and_concave_polygons() {
        // clockwise square
        let g = polygon_centroid([v(0., 1.), v(1., 0.), v(0., -1.), v(-1., 0.)]).unwrap();
        assert_relative_eq!(g, v(0.5, 0.5), epsilon = 1e-15);
        // arrow head: V3 inside triangle V0 V1 V2
        let verts = [v(0., 0.), v(4., 0.), v(0., 4.), v(1., 1.)];
        let f = [verts[1] - verts[0], verts[2] - verts[1], verts[3] - verts[2], verts[0] - verts[3]];
        let g = polygon_centroid(f).unwrap();
        let mc = monte_carlo(&verts, 400_000, 1);
        assert_relative_eq!(g, mc, epsilon = 1e-2);
    }

    #[test]
    fn degenerate_polygons() {
        assert_eq!(polygon_centroid([Vec2::zeros(); 4]).unwrap(), Vec2::zeros());
        let g = polygon_centroid([v(1., 0.), v(1., 0.), v(-2., 0.), v(0., 0.)]).unwrap();
        assert_eq!(g, Vec2::zeros());
        assert!(matches!(
            polygon_centroid([v(1., 0.), v(0., 1.), v(0., 0.), v(0., 0.)]),
            Err(MaxwellError::NotClosed { .. })
        ));
    }

    fn point_in_triangle(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> bool {
        let d1 = cross(b - a, p - a);
        let d2 = cross(c - b, p - b);
        let d3 = cross(a - c, p - c);
        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(neg && pos)
    }

    /// Centroid of the region covered by exactly one of the two triangles
    /// `(V0, V1, V2)` and `(V0, V2, V3)`.
    fn monte_carlo(verts: &[Vec2; 4], samples: usize, seed: u64) -> Vec2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = verts.iter().fold(v(f64::MAX, f64::MAX), |m, p| v(m.x.min(p.x), m.y.min(p.y)));
        let hi = verts.iter().fold(v(f64::MIN, f64::MIN), |m, p| v(m.x.max(p.x), m.y.max(p.y)));
        let mut sum = Vec2::zeros();
        let mut count = 0usize;
        for _ in 0..samples {
            let p = v(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
            let in1 = point_in_triangle(p, verts[0], verts[1], verts[2]);
            let in2 = point_in_triangle(p, verts[0], verts[2], verts[3]);
            if in1 != in2 {
                sum += p;
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn self_intersecting_polygon_matches_monte_carlo() {
        // V0V1 crosses V2V3
        let verts = [v(0., 0.), v(3., 3.), v(3., 0.), v(0., 2.)];
        let f = [verts[1] - verts[0], verts[2] - verts[1], verts[3] - verts[2], verts[0] - verts[3]];
        let g = polygon_centroid(f).unwrap();
        let mc = monte_carlo(&verts, 1_000_000, 2);
        assert_relative_eq!(g, mc, epsilon = 1e-2);
        // V1V2 crosses V3V0
        let verts = [v(0., 0.), v(2., 0.), v(0., 3.), v(3., 3.)];
        let f = [verts[1] - verts[0], verts[2] - verts[1], verts[3] - verts[2], verts[0] - verts[3]];
        let g = polygon_centroid(f).unwrap();
        let mc = monte_carlo(&verts, 1_000_000, 3);
        assert_relative_eq!(g, mc, epsilon = 1e-2);
    }

    #[test]
    fn random_polygons_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let verts = [
                Vec2::zeros(),
                v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                v(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            ];
            let f = [verts[1] - verts[0], verts[2] - verts[1], verts[3] - verts[2], verts[0] - verts[3]];
            let (a1, _) = triangle(verts[0], verts[1], verts[2]);
            let (a2, _) = triangle(verts[0], verts[2], verts[3]);
            if a1.abs() < 0.05 || a2.abs() < 0.05 {
                continue;
            }
            let g = polygon_centroid(f).unwrap();
            let mc = monte_carlo(&verts, 400_000, 100 + seed);
            assert_relative_eq!(g, mc, epsilon = 2e-2);
        }
    }

    #[test]
    fn square_split_by_hand() {
        let f = [v(1., 0.), v(0., 1.), v(-1., 0.), v(0., -1.)];
        let (enter, leave, lambda) = split_cycle(&f, v(0.5, 0.5));
        assert_eq!(enter[0], v(0.5, 0.5));
        assert_eq!(leave[0], v(0.5, -0.5));
        assert_eq!(enter[1], -leave[0]);
        assert_eq!(leave[3], -enter[0]);
        assert_eq!(lambda, Vec2::zeros());
        for k in 0..4 {
            assert_relative_eq!(enter[k] + leave[k], f[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_forces_split_to_zero() {
        let (enter, leave, lambda) = split_cycle(&[Vec2::zeros(); 4], Vec2::zeros());
        assert!(enter.iter().chain(&leave).all(|p| *p == Vec2::zeros()));
        assert_eq!(lambda, Vec2::zeros());
    }

    #[test]
    fn void_pole_rules() {
        let verts = vertices(&[v(1., 0.), v(1e-6, 1.), v(-1., 0.), v(-1e-6, -1.)]);
        let verts = &verts[..4];
        // one void side: its midpoint
        let g = choose_pole(verts, &[false, true, false, false], 4, true).unwrap();
        assert_relative_eq!(g, (verts[1] + verts[2]) * 0.5);
        // two consecutive voids: the vertex between them
        let g = choose_pole(verts, &[false, true, true, false], 4, true).unwrap();
        assert_eq!(g, verts[2]);
        let g = choose_pole(verts, &[true, false, false, true], 4, true).unwrap();
        assert_eq!(g, verts[0]);
        // three voids: midpoint of the remaining side
        let g = choose_pole(verts, &[true, false, true, true], 4, true).unwrap();
        assert_relative_eq!(g, (verts[1] + verts[2]) * 0.5);
        assert_eq!(choose_pole(verts, &[true, false, true, false], 4, true), Err(MaxwellError::Checkerboard));
    }

    #[test]
    fn one_void_makes_its_side_forces_small() {
        let fv = v(1e-7, -2e-7);
        let f = [v(1., 0.2), fv, v(-0.4, 1.), -(v(1., 0.2) + fv + v(-0.4, 1.))];
        let verts = vertices(&f);
        let g = choose_pole(&verts[..4], &[false, true, false, false], 4, true).unwrap();
        let (enter, leave, _) = split_cycle(&f, g);
        assert!(enter[1].norm() < 1e-6 && leave[1].norm() < 1e-6);
    }

    #[test]
    fn chain_split_balances_corners() {
        let f = [v(1., 2.), v(-0.5, 0.3), v(0.2, -1.)];
        let (enter, leave) = split_chain(&f, v(0.1, 0.1));
        for k in 0..3 {
            assert_relative_eq!(enter[k] + leave[k], f[k], epsilon = 1e-15);
        }
        assert_eq!(enter[1], -leave[0]);
        assert_eq!(enter[2], -leave[1]);
    }
}
