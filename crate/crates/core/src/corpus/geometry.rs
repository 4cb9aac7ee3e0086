//! Planar polygon predicates used for segment footprints.

pub type Point = [f64; 2];

/// Shoelace signed area; positive for counter-clockwise rings.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

pub fn centroid(poly: &[Point]) -> Point {
    let n = poly.len();
    let a = signed_area(poly);
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Axis-aligned bounding box as `(min, max)`.
pub fn bbox(poly: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in poly {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Even-odd ray casting. Points exactly on the boundary may land either way.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > p[1]) != (yj > p[1]) {
            let x_cross = xi + (p[1] - yi) * (xj - xi) / (yj - yi);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Closed-segment intersection test (touching counts).
pub fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Strict crossing: the open segments cross at a single interior point.
fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// At least three vertices, non-zero area, and no two non-adjacent edges
/// touching.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 || signed_area(poly).abs() <= f64::EPSILON {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Points just inside the polygon near every vertex and edge midpoint.
fn interior_probes(poly: &[Point]) -> Vec<Point> {
    let (lo, hi) = bbox(poly);
    let eps = 1e-6 * ((hi[0] - lo[0]).hypot(hi[1] - lo[1])).max(1e-9);
    let n = poly.len();
    let mut probes = Vec::with_capacity(2 * n);
    for i in 0..n {
        let prev = poly[(i + n - 1) % n];
        let v = poly[i];
        let next = poly[(i + 1) % n];
        let dir = [
            (prev[0] - v[0]) + (next[0] - v[0]),
            (prev[1] - v[1]) + (next[1] - v[1]),
        ];
        let len = dir[0].hypot(dir[1]);
        if len > 0.0 {
            for sign in [1.0, -1.0] {
                let p = [v[0] + sign * eps * dir[0] / len, v[1] + sign * eps * dir[1] / len];
                if contains(poly, p) {
                    probes.push(p);
                    break;
                }
            }
        }
        let mid = [(v[0] + next[0]) / 2.0, (v[1] + next[1]) / 2.0];
        let edge = [next[0] - v[0], next[1] - v[1]];
        let el = edge[0].hypot(edge[1]);
        if el > 0.0 {
            for sign in [1.0, -1.0] {
                let p = [mid[0] - sign * eps * edge[1] / el, mid[1] + sign * eps * edge[0] / el];
                if contains(poly, p) {
                    probes.push(p);
                    break;
                }
            }
        }
    }
    probes
}

/// Whether the interiors of two simple polygons intersect. Shared walls
/// (touching boundaries) do not count as overlap.
pub fn interiors_overlap(a: &[Point], b: &[Point]) -> bool {
    let (alo, ahi) = bbox(a);
    let (blo, bhi) = bbox(b);
    if ahi[0] <= blo[0] || bhi[0] <= alo[0] || ahi[1] <= blo[1] || bhi[1] <= alo[1] {
        return false;
    }
    for i in 0..a.len() {
        let (p, q) = (a[i], a[(i + 1) % a.len()]);
        for j in 0..b.len() {
            if segments_cross(p, q, b[j], b[(j + 1) % b.len()]) {
                return true;
            }
        }
    }
    interior_probes(a).into_iter().any(|p| contains(b, p))
        || interior_probes(b).into_iter().any(|p| contains(a, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }

    #[test]
    fn area_and_centroid() {
        let r = rect(0.0, 0.0, 4.0, 2.0);
        assert_eq!(signed_area(&r), 8.0);
        assert_eq!(centroid(&r), [2.0, 1.0]);
    }

    #[test]
    fn simplicity() {
        assert!(is_simple(&rect(0.0, 0.0, 1.0, 1.0)));
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple(&bowtie));
        assert!(!is_simple(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]));
    }

    #[test]
    fn overlap_cases() {
        let a = rect(0.0, 0.0, 2.0, 2.0);
        assert!(!interiors_overlap(&a, &rect(2.0, 0.0, 4.0, 2.0)), "shared wall");
        assert!(!interiors_overlap(&a, &rect(5.0, 5.0, 6.0, 6.0)));
        assert!(interiors_overlap(&a, &rect(1.0, 0.0, 3.0, 2.0)), "collinear partial");
        assert!(interiors_overlap(&a, &a.clone()), "identical");
        assert!(interiors_overlap(&a, &rect(0.5, 0.5, 1.5, 1.5)), "nested");
        assert!(interiors_overlap(&rect(0.0, 1.0, 3.0, 2.0), &rect(1.0, 0.0, 2.0, 3.0)), "cross");
    }
}
