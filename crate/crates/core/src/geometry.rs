//! Social space of a group: convex hull of the members, one enclosing
//! ellipse per hull edge, and the costmap marking that turns C into C+.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{CostMap, Vec2, SOCIAL};

const EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("convex hull of an empty point set")]
    Empty,
    #[error("non-finite point")]
    NonFinite,
}

fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Distance from `p` to segment `a`-`b`.
pub fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    if l2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / l2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Counter-clockwise, strictly convex vertex list. One vertex for a single
/// point, two for collinear input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexHull {
    vertices: Vec<Vec2>,
}

/// Monotone-chain hull; collinear and duplicate points are discarded.
pub fn convex_hull(points: &[Vec2]) -> Result<ConvexHull, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(GeometryError::NonFinite);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() <= 2 {
        return Ok(ConvexHull { vertices: pts });
    }
    let mut lower: Vec<Vec2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vec2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Ok(ConvexHull { vertices: lower })
}

impl ConvexHull {
    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    /// True when the hull has positive area.
    pub fn is_polygon(&self) -> bool {
        self.vertices.len() >= 3
    }

    /// Closed edges; a segment hull has one edge, a point none.
    pub fn edges(&self) -> Vec<(Vec2, Vec2)> {
        let v = &self.vertices;
        match v.len() {
            0 | 1 => Vec::new(),
            2 => vec![(v[0], v[1])],
            n => (0..n).map(|k| (v[k], v[(k + 1) % n])).collect(),
        }
    }

    pub fn centroid(&self) -> Vec2 {
        self.vertices.iter().sum::<Vec2>() / self.vertices.len() as f64
    }

    /// Smallest distance between two parallel lines enclosing the hull; zero
    /// for point and segment hulls.
    pub fn width(&self) -> f64 {
        if !self.is_polygon() {
            return 0.0;
        }
        self.edges()
            .iter()
            .map(|(a, b)| {
                let len = (b - a).norm();
                self.vertices
                    .iter()
                    .map(|v| cross(*a, *b, *v).abs() / len)
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance to the hull boundary (for point and segment hulls, to the set itself).
    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        match self.vertices.len() {
            1 => (p - self.vertices[0]).norm(),
            _ => self
                .edges()
                .iter()
                .map(|(a, b)| segment_distance(p, *a, *b))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Boundary inclusive.
    pub fn contains(&self, p: Vec2) -> bool {
        if !self.is_polygon() {
            return self.boundary_distance(p) <= EPS;
        }
        self.edges().iter().all(|(a, b)| {
            let scale = (b - a).norm().max(1.0);
            cross(*a, *b, p) >= -EPS * scale
        })
    }

    /// Positive outside, minus the penetration depth inside.
    pub fn signed_distance(&self, p: Vec2) -> f64 {
        let d = self.boundary_distance(p);
        if self.is_polygon() && self.contains(p) {
            -d
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Vec2,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub orientation: f64,
}

impl Ellipse {
    /// Boundary inclusive.
    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center;
        let (s, c) = self.orientation.sin_cos();
        let u = c * d.x + s * d.y;
        let v = -s * d.x + c * d.y;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0 + EPS
    }

    /// Axis-aligned bounding box.
    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let (s, c) = self.orientation.sin_cos();
        let hx = ((self.semi_major * c).powi(2) + (self.semi_minor * s).powi(2)).sqrt();
        let hy = ((self.semi_major * s).powi(2) + (self.semi_minor * c).powi(2)).sqrt();
        let h = Vec2::new(hx, hy);
        (self.center - h, self.center + h)
    }
}

/// One ellipse per hull edge, stretched `margin` past both endpoints and
/// `margin` wide. A single-point hull yields a circle of radius `margin`.
pub fn ellipses_enclose(hull: &ConvexHull, margin: f64) -> Vec<Ellipse> {
    assert!(margin > 0.0, "margin must be positive");
    if hull.vertices.len() == 1 {
        return vec![Ellipse {
            center: hull.vertices[0],
            semi_major: margin,
            semi_minor: margin,
            orientation: 0.0,
        }];
    }
    hull.edges()
        .into_iter()
        .map(|(a, b)| {
            let d = b - a;
            Ellipse {
                center: (a + b) / 2.0,
                semi_major: d.norm() / 2.0 + margin,
                semi_minor: margin,
                orientation: d.y.atan2(d.x),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialSpace {
    pub hull: ConvexHull,
    pub ellipses: Vec<Ellipse>,
    pub margin: f64,
}

impl SocialSpace {
    pub fn new(members: &[Vec2], margin: f64) -> Result<Self, GeometryError> {
        let hull = convex_hull(members)?;
        let ellipses = ellipses_enclose(&hull, margin);
        Ok(SocialSpace { hull, ellipses, margin })
    }

    /// Hull union ellipses, boundary inclusive.
    pub fn contains(&self, p: Vec2) -> bool {
        self.hull.contains(p) || self.ellipses.iter().any(|e| e.contains(p))
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::repeat(f64::INFINITY);
        let mut hi = Vec2::repeat(f64::NEG_INFINITY);
        for v in &self.hull.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        for e in &self.ellipses {
            let (a, b) = e.bounding_box();
            lo = lo.inf(&a);
            hi = hi.sup(&b);
        }
        (lo, hi)
    }
}

pub fn point_in_region(p: Vec2, spaces: &[SocialSpace]) -> bool {
    spaces.iter().any(|s| s.contains(p))
}

/// Copy of `base` with every cell whose center lies in a social region raised
/// to at least the social cost.
pub fn update_costmap(spaces: &[SocialSpace], base: &CostMap) -> CostMap {
    let mut out = base.clone();
    let res = base.resolution();
    let o = base.origin().position();
    let cell_range = |lo: f64, hi: f64, origin: f64, n: usize| {
        let a = ((lo - origin) / res - 0.5).floor().max(0.0) as usize;
        let b = (((hi - origin) / res - 0.5).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        a..b
    };
    for s in spaces {
        let (lo, hi) = s.bounding_box();
        for j in cell_range(lo.y, hi.y, o.y, base.height()) {
            for i in cell_range(lo.x, hi.x, o.x, base.width()) {
                if s.contains(base.grid_to_world(i, j)) && out.cell(i, j) < SOCIAL {
                    out.set_cell(i, j, SOCIAL);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::LETHAL;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    fn strictly_in_triangle(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> bool {
        let d1 = cross(a, b, p);
        let d2 = cross(b, c, p);
        let d3 = cross(c, a, p);
        (d1 > 0.0 && d2 > 0.0 && d3 > 0.0) || (d1 < 0.0 && d2 < 0.0 && d3 < 0.0)
    }

    /// Keeps a point iff no triangle of other points strictly contains it.
    pub(crate) fn triangle_oracle(pts: &[Vec2]) -> Vec<Vec2> {
        let n = pts.len();
        let mut keep = Vec::new();
        'outer: for (k, &p) in pts.iter().enumerate() {
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        if [a, b, c].contains(&k) {
                            continue;
                        }
                        if strictly_in_triangle(p, pts[a], pts[b], pts[c]) {
                            continue 'outer;
                        }
                    }
                }
            }
            keep.push(p);
        }
        keep
    }

    fn sorted(mut v: Vec<Vec2>) -> Vec<Vec2> {
        v.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        v
    }

    #[test]
    fn triangle_is_its_own_hull() {
        let h = convex_hull(&[v(0.0, 0.0), v(1.0, 0.0), v(0.0, 1.0)]).unwrap();
        assert_eq!(h.vertices(), &[v(0.0, 0.0), v(1.0, 0.0), v(0.0, 1.0)]);
    }

    #[test]
    fn width_of_rectangle_triangle_and_sliver() {
        let rect = convex_hull(&[v(0.0, 0.0), v(3.0, 0.0), v(3.0, 1.0), v(0.0, 1.0)]).unwrap();
        assert!((rect.width() - 1.0).abs() < 1e-12);
        let tri = convex_hull(&[v(0.0, 0.0), v(2.0, 0.0), v(0.0, 2.0)]).unwrap();
        assert!((tri.width() - 2.0_f64.sqrt()).abs() < 1e-12);
        let sliver = convex_hull(&[v(0.0, 0.0), v(0.01, 1.5), v(0.0, 3.0)]).unwrap();
        assert!(sliver.is_polygon() && sliver.width() < 0.011);
        assert_eq!(convex_hull(&[v(0.0, 0.0), v(1.0, 1.0)]).unwrap().width(), 0.0);
    }

    #[test]
    fn interior_point_excluded() {
        let h = convex_hull(&[v(0.0, 0.0), v(2.0, 0.0), v(2.0, 2.0), v(0.0, 2.0), v(1.0, 1.0)]).unwrap();
        assert_eq!(h.vertices().len(), 4);
        assert!(!h.vertices().contains(&v(1.0, 1.0)));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(convex_hull(&[]), Err(GeometryError::Empty));
        assert_eq!(convex_hull(&[v(1.0, 1.0), v(1.0, 1.0)]).unwrap().vertices().len(), 1);
        let line = convex_hull(&[v(0.0, 0.0), v(1.0, 1.0), v(2.0, 2.0), v(3.0, 3.0)]).unwrap();
        assert_eq!(line.vertices(), &[v(0.0, 0.0), v(3.0, 3.0)]);
        assert!(line.contains(v(1.5, 1.5)));
        assert!(!line.contains(v(1.5, 1.6)));
        assert_eq!(convex_hull(&[v(f64::NAN, 0.0)]), Err(GeometryError::NonFinite));
    }

    #[test]
    fn random_hulls_match_triangle_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(3..=12);
            let pts: Vec<Vec2> = (0..n).map(|_| v(rng.random(), rng.random())).collect();
            let h = convex_hull(&pts).unwrap();
            assert_eq!(sorted(h.vertices().to_vec()), sorted(triangle_oracle(&pts)));
        }
    }

    #[test]
    fn region_queries() {
        let s = SocialSpace::new(&[v(0.0, 0.0), v(2.0, 0.0), v(1.0, 2.0)], 0.4).unwrap();
        assert!(point_in_region(s.hull.centroid(), std::slice::from_ref(&s)));
        assert!(!point_in_region(v(100.0, 0.0), std::slice::from_ref(&s)));
        assert!(s.hull.contains(v(1.0, 0.0)));
        assert!(s.contains(v(1.0, -0.4)));
        assert!(!s.contains(v(1.0, -0.41)));
    }

    #[test]
    fn ellipse_from_edge() {
        let h = convex_hull(&[v(0.0, 0.0), v(2.0, 0.0)]).unwrap();
        let e = ellipses_enclose(&h, 0.4);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].center, v(1.0, 0.0));
        assert!((e[0].semi_major - 1.4).abs() < 1e-12);
        assert_eq!(e[0].semi_minor, 0.4);
        assert_eq!(e[0].orientation, 0.0);
        let c = ellipses_enclose(&convex_hull(&[v(3.0, 3.0)]).unwrap(), 0.4);
        assert_eq!((c[0].semi_major, c[0].semi_minor), (0.4, 0.4));
        assert!(c[0].contains(v(3.4, 3.0)) && !c[0].contains(v(3.41, 3.0)));
    }

    #[test]
    fn triangle_edges_sampled_inside_ellipses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let pts: Vec<Vec2> = (0..3).map(|_| v(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let h = convex_hull(&pts).unwrap();
            let es = ellipses_enclose(&h, 0.3);
            for k in 0..200 {
                let edges = h.edges();
                let (a, b) = edges[k % edges.len()];
                let p = a + (b - a) * rng.random::<f64>();
                assert!(es.iter().any(|e| e.contains(p)));
            }
        }
    }

    /// Per-cell sweep, no bounding-box pruning.
    fn sweep(spaces: &[SocialSpace], base: &CostMap) -> CostMap {
        let mut out = base.clone();
        for j in 0..base.height() {
            for i in 0..base.width() {
                if point_in_region(base.grid_to_world(i, j), spaces) {
                    out.set_cell(i, j, base.cell(i, j).max(SOCIAL));
                }
            }
        }
        out
    }

    #[test]
    fn costmap_update_matches_sweep() {
        let mut base = CostMap::with_extent(6.0, 4.0, 0.1).unwrap();
        base.fill_rect(v(0.0, 0.0), v(6.0, 0.3));
        assert_eq!(update_costmap(&[], &base), base);
        let s = SocialSpace::new(&[v(1.0, 0.5), v(3.0, 1.0), v(2.0, 2.5)], 0.5).unwrap();
        let s2 = SocialSpace::new(&[v(5.5, 3.8)], 0.5).unwrap();
        let c = update_costmap(&[s.clone(), s2.clone()], &base);
        assert_eq!(c, sweep(&[s.clone(), s2], &base));
        let (i, j) = base.world_to_grid(v(1.0, 0.15)).unwrap();
        assert_eq!(c.cell(i, j), LETHAL);
        let (i, j) = base.world_to_grid(v(2.0, 1.3)).unwrap();
        assert_eq!(c.cell(i, j), SOCIAL);
        assert_eq!(update_costmap(std::slice::from_ref(&s), &c), c);
    }

    proptest! {
        #[test]
        fn hull_vertices_are_minimal(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..12)) {
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| v(x, y)).collect();
            let h = convex_hull(&pts).unwrap();
            for p in &pts {
                prop_assert!(h.contains(*p));
            }
            if h.is_polygon() {
                for k in 0..h.vertices().len() {
                    let mut rest = h.vertices().to_vec();
                    let removed = rest.remove(k);
                    let smaller = convex_hull(&rest).unwrap();
                    prop_assert!(!smaller.contains(removed));
                }
            }
        }

        #[test]
        fn costmap_update_monotone_and_idempotent(
            pts in prop::collection::vec((0.5f64..4.5, 0.5f64..3.5), 1..6),
            margin in 0.1f64..0.8,
        ) {
            let base = CostMap::with_extent(5.0, 4.0, 0.1).unwrap().inflate(0.2, 0.3);
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| v(x, y)).collect();
            let s = [SocialSpace::new(&pts, margin).unwrap()];
            let once = update_costmap(&s, &base);
            prop_assert!(once.costs().iter().zip(base.costs()).all(|(a, b)| a >= b));
            prop_assert_eq!(update_costmap(&s, &once), once.clone());
            prop_assert_eq!(once, sweep(&s, &base));
        }
    }
}
