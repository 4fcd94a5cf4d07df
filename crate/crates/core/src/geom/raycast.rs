//! Exact voxel traversal (Amanatides & Woo) over a [`VoxelGridSpec`].
//!
//! Pseudo labels, RayIoU and visibility all go through [`first_hit`] so they
//! agree on which voxel a ray hits first.

use nalgebra::Vector3;

use super::grid::VoxelGridSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub voxel: [usize; 3],
    /// Ray parameter at which the voxel is entered.
    pub t: f64,
}

/// Parameter interval `[t_enter, t_exit]` of the ray inside the grid box,
/// clipped to `t >= 0`.
pub fn clip_to_grid(spec: &VoxelGridSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        let (lo, hi) = (spec.min_corner[k], spec.max_corner[k]);
        if dir[k] == 0.0 {
            if origin[k] < lo || origin[k] >= hi {
                return None;
            }
            continue;
        }
        let a = (lo - origin[k]) / dir[k];
        let b = (hi - origin[k]) / dir[k];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    let t_enter = t_near.max(0.0);
    (t_enter < t_far).then_some((t_enter, t_far))
}

/// Visits every voxel the ray passes through, front to back, together with
/// the parameter at which it is entered. Stops when `visit` returns `false`
/// or the entry parameter exceeds `t_limit`.
pub fn traverse<F>(spec: &VoxelGridSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, t_limit: f64, mut visit: F)
where
    F: FnMut([usize; 3], f64) -> bool,
{
    let Some((t_enter, t_exit)) = clip_to_grid(spec, origin, dir) else {
        return;
    };
    let vs = spec.voxel_size;
    let entry = origin + dir * t_enter;
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        let cell = ((entry[k] - spec.min_corner[k]) / vs).floor() as i64;
        idx[k] = cell.clamp(0, spec.dims[k] as i64 - 1);
        if dir[k] > 0.0 {
            step[k] = 1;
            t_next[k] = (spec.min_corner[k] + (idx[k] + 1) as f64 * vs - origin[k]) / dir[k];
            t_delta[k] = vs / dir[k];
        } else if dir[k] < 0.0 {
            step[k] = -1;
            t_next[k] = (spec.min_corner[k] + idx[k] as f64 * vs - origin[k]) / dir[k];
            t_delta[k] = -vs / dir[k];
        }
    }
    let mut t = t_enter;
    loop {
        if t > t_limit {
            return;
        }
        let cur = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        if !visit(cur, t) {
            return;
        }
        let mut axis = 0;
        for k in 1..3 {
            if t_next[k] < t_next[axis] {
                axis = k;
            }
        }
        t = t_next[axis];
        if t >= t_exit {
            return;
        }
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= spec.dims[axis] as i64 {
            return;
        }
        t_next[axis] += t_delta[axis];
    }
}

/// First voxel along the ray for which `occupied` holds. A voxel that
/// contains the ray origin is skipped (its entry parameter is zero).
pub fn first_hit<F>(spec: &VoxelGridSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, occupied: F) -> Option<RayHit>
where
    F: Fn([usize; 3]) -> bool,
{
    let mut hit = None;
    traverse(spec, origin, dir, f64::INFINITY, |voxel, t| {
        if t > 0.0 && occupied(voxel) {
            hit = Some(RayHit { voxel, t });
            false
        } else {
            true
        }
    });
    hit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::grid::make_grid_spec;

    #[test]
    fn axis_ray_visits_row_in_order() {
        let spec = make_grid_spec([0.0; 3], [4.0, 1.0, 1.0], 1.0).unwrap();
        let mut seen = Vec::new();
        traverse(
            &spec,
            &Vector3::new(-1.0, 0.5, 0.5),
            &Vector3::new(1.0, 0.0, 0.0),
            f64::INFINITY,
            |v, t| {
                seen.push((v, t));
                true
            },
        );
        assert_eq!(seen.len(), 4);
        for (i, (v, t)) in seen.iter().enumerate() {
            assert_eq!(*v, [i, 0, 0]);
            assert!((t - (1.0 + i as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_direction_and_miss() {
        let spec = make_grid_spec([0.0; 3], [2.0, 2.0, 2.0], 1.0).unwrap();
        let hit = first_hit(
            &spec,
            &Vector3::new(1.5, 1.5, 5.0),
            &Vector3::new(0.0, 0.0, -1.0),
            |v| v == [1, 1, 0],
        )
        .unwrap();
        assert_eq!(hit.voxel, [1, 1, 0]);
        assert!((hit.t - 4.0).abs() < 1e-12);
        assert!(first_hit(
            &spec,
            &Vector3::new(5.0, 5.0, 5.0),
            &Vector3::new(1.0, 0.0, 0.0),
            |_| true
        )
        .is_none());
    }
}
