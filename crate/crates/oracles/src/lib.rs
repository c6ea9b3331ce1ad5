//! Slow, obviously-correct reference implementations used to cross-check
//! the optimized code in tests. Nothing here shares code with the main
//! crate.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// VLAD by direct transcription: hard assignment (lowest index wins ties),
/// per-cluster residual sums, per-cluster L2, concatenation, global L2.
/// Returns all zeros when no cluster accumulates a nonzero residual.
pub fn naive_vlad(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<f64> {
    let n_c = centroids.len();
    let d = centroids[0].len();
    let mut blocks = vec![vec![0.0; d]; n_c];
    for x in features {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let mut dist = 0.0;
            for j in 0..d {
                dist += (x[j] - c[j]) * (x[j] - c[j]);
            }
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        for j in 0..d {
            blocks[best][j] += x[j] - centroids[best][j];
        }
    }
    let mut out = Vec::with_capacity(n_c * d);
    for b in &blocks {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &v in b {
            out.push(if norm > 0.0 { v / norm } else { 0.0 });
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    out
}

pub const NOISE: i32 = -1;

/// DBSCAN from its definition. Core points (inclusive `eps` ball counting
/// the point itself holds at least `min_pts` points) are grouped into
/// connected components of the core graph; components are numbered by
/// their smallest core index. A non-core point joins the lowest-numbered
/// cluster with a core point within `eps`, otherwise it is noise.
pub fn naive_dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
        (dx * dx + dy * dy).sqrt() <= eps
    };
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
        .collect();

    // union-find over core points
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut root_label = std::collections::BTreeMap::new();
    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = root_label.len() as i32;
            labels[i] = *root_label.entry(r).or_insert(next);
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = (0..n)
                .filter(|&j| core[j] && near(i, j))
                .map(|j| labels[j])
                .min()
                .unwrap_or(NOISE);
        }
    }
    labels
}

/// Canonical form of a labeling as a set partition: sorted groups of
/// indices, noise points as singletons flagged separately.
pub fn partition(labels: &[i32]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut groups: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    let mut noise = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            noise.push(i);
        } else {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut g: Vec<Vec<usize>> = groups.into_values().collect();
    g.sort();
    (g, noise)
}

/// Number of ids shared by the first `n` retrievals and the first `n`
/// ground-truth entries, by pairwise comparison.
pub fn overlap(retrieved: &[u32], gt: &[u32], n: usize) -> usize {
    let r = &retrieved[..n.min(retrieved.len())];
    let g = &gt[..n.min(gt.len())];
    r.iter()
        .enumerate()
        .filter(|(i, a)| g.contains(a) && !r[..*i].contains(a))
        .count()
}

pub fn recall_at_n(cases: &[(Vec<u32>, Vec<u32>)], n: usize) -> f64 {
    let hits = cases.iter().filter(|(r, g)| overlap(r, g, n) >= 1).count();
    hits as f64 / cases.len() as f64
}

pub fn top_k_at_n(cases: &[(Vec<u32>, Vec<u32>)], k: usize, n: usize) -> f64 {
    let hits = cases.iter().filter(|(r, g)| overlap(r, g, n) >= k).count();
    hits as f64 / cases.len() as f64
}

/// Ids of the `n` centers nearest to `q`, ties by id, via a full sort.
pub fn nearest_ids(centers: &[(u32, f64, f64)], q: (f64, f64), n: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = centers
        .iter()
        .map(|&(id, e, no)| (((e - q.0).powi(2) + (no - q.1).powi(2)).sqrt(), id))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(n).map(|(_, id)| id).collect()
}

/// Ids of the `k` highest scores, ties by id.
pub fn top_k_ids(scores: &[(u32, f64)], k: usize) -> Vec<u32> {
    let mut all = scores.to_vec();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Rotation from roll/pitch/yaw, `Rz(yaw)·Ry(pitch)·Rx(roll)`, and its
/// partial derivatives.
fn euler(roll: f64, pitch: f64, yaw: f64) -> [Matrix3<f64>; 4] {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr);
    let dry = Matrix3::new(-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp);
    let drz = Matrix3::new(-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0);
    [rz * ry * rx, rz * ry * drx, rz * dry * rx, drz * ry * rx]
}

#[derive(Debug, Clone, Copy)]
pub struct GravityFit {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub cost: f64,
    pub converged: bool,
}

/// Levenberg-Marquardt on
/// `Σ‖R·a_i + t − b_i‖² + w·‖R·g_local − g_world‖²`
/// over Euler angles and translation jointly, started from a ring of yaw
/// guesses. The step is solved by SVD of the stacked Jacobian.
pub fn gravity_least_squares(
    local: &[Vector3<f64>],
    world: &[Vector3<f64>],
    g_local: &Vector3<f64>,
    g_world: &Vector3<f64>,
    weight: f64,
) -> GravityFit {
    let m = 3 * local.len() + 3;
    let sw = weight.sqrt();
    let residual = |x: &[f64; 6]| -> (DVector<f64>, DMatrix<f64>) {
        let rs = euler(x[0], x[1], x[2]);
        let t = Vector3::new(x[3], x[4], x[5]);
        let mut r = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, 6);
        for (i, (a, b)) in local.iter().zip(world).enumerate() {
            let e = rs[0] * a + t - b;
            for k in 0..3 {
                r[3 * i + k] = e[k];
                for p in 0..3 {
                    j[(3 * i + k, p)] = (rs[p + 1] * a)[k];
                }
                j[(3 * i + k, 3 + k)] = 1.0;
            }
        }
        let eg = (rs[0] * g_local - g_world) * sw;
        for k in 0..3 {
            r[m - 3 + k] = eg[k];
            for p in 0..3 {
                j[(m - 3 + k, p)] = (rs[p + 1] * g_local)[k] * sw;
            }
        }
        (r, j)
    };
    let n = local.len() as f64;
    let cl = local.iter().sum::<Vector3<f64>>() / n;
    let cw = world.iter().sum::<Vector3<f64>>() / n;

    let mut best: Option<GravityFit> = None;
    for s in 0..12 {
        let yaw0 = -std::f64::consts::PI + s as f64 * std::f64::consts::PI / 6.0;
        let r0 = euler(0.0, 0.0, yaw0)[0];
        let t0 = cw - r0 * cl;
        let mut x = [0.0, 0.0, yaw0, t0.x, t0.y, t0.z];
        let (mut r, mut j) = residual(&x);
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let mut converged = false;
        for _ in 0..500 {
            let g = j.transpose() * &r;
            let mut a = j.transpose() * &j;
            for d in 0..6 {
                a[(d, d)] *= 1.0 + lambda;
            }
            let step = match a.clone().svd(true, true).solve(&(-g), 1e-300) {
                Ok(s) => s,
                Err(_) => break,
            };
            let mut xn = x;
            for d in 0..6 {
                xn[d] += step[d];
            }
            let (rn, jn) = residual(&xn);
            let cn = rn.norm_squared();
            if cn <= cost {
                let small = step.norm() < 1e-12 || cost - cn <= 1e-15 * cost.max(1e-300);
                x = xn;
                r = rn;
                j = jn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-12);
                if small {
                    converged = true;
                    break;
                }
            } else {
                lambda *= 4.0;
                if lambda > 1e16 {
                    converged = true;
                    break;
                }
            }
        }
        let fit = GravityFit {
            roll: x[0],
            pitch: x[1],
            yaw: x[2],
            translation: Vector3::new(x[3], x[4], x[5]),
            rotation: euler(x[0], x[1], x[2])[0],
            cost,
            converged,
        };
        if best.as_ref().is_none_or(|b| fit.cost < b.cost) {
            best = Some(fit);
        }
    }
    best.expect("at least one start")
}

/// Wrap an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(std::f64::consts::TAU);
    if t > std::f64::consts::PI {
        t - std::f64::consts::TAU
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vlad_by_hand() {
        let c = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        let f = vec![vec![1.0, 0.0], vec![9.0, 1.0]];
        let v = naive_vlad(&f, &c);
        let h = 0.5f64.sqrt();
        let expect = [h, 0.0, -h / 2f64.sqrt(), h / 2f64.sqrt()];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dbscan_chain_and_noise() {
        let p = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (10.0, 0.0)];
        assert_eq!(naive_dbscan(&p, 1.0, 2), vec![0, 0, 0, NOISE]);
    }

    #[test]
    fn overlap_counts() {
        assert_eq!(overlap(&[1, 2, 3], &[3, 2, 9], 3), 2);
        assert_eq!(overlap(&[1, 2, 3], &[3, 2, 9], 1), 0);
    }

    #[test]
    fn least_squares_recovers_yaw() {
        let local: Vec<_> = (0..6).map(|i| Vector3::new(i as f64 * 10.0, (i * i) as f64, 0.0)).collect();
        let r = euler(0.0, 0.0, 1.0)[0];
        let t = Vector3::new(5.0, -3.0, 0.0);
        let world: Vec<_> = local.iter().map(|p| r * p + t).collect();
        let g = -Vector3::z();
        let fit = gravity_least_squares(&local, &world, &g, &g, 1e9);
        assert!(fit.converged);
        assert!((fit.yaw - 1.0).abs() < 1e-9);
        assert!((fit.translation - t).norm() < 1e-9);
    }
}
