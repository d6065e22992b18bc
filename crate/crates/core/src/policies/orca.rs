//! Reciprocal collision avoidance via velocity half-planes.
//!
//! Each neighbour induces one half-plane of permitted velocities derived
//! from the truncated velocity obstacle; the new velocity is the point of
//! the feasible region closest to the preferred velocity, found by an
//! incremental two-dimensional linear program. When the region is empty the
//! three-dimensional fallback picks the velocity that minimises the worst
//! constraint violation. Both agents of a pair take half the responsibility
//! for avoiding each other.

use crate::vec2::{vec2, Vec2};

/// Strict feasibility margin for the linear programs.
const ORCA_EPS: f64 = 1e-10;

/// Velocities v with det(direction, point - v) <= 0 are permitted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub direction: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrcaParams {
    /// Seconds of lookahead for linear motion of neighbours.
    pub time_horizon: f64,
    /// Neighbours beyond this centre distance are ignored.
    pub neighbor_dist: f64,
    /// Closest-first cap on the number of half-planes.
    pub max_neighbors: usize,
}

impl Default for OrcaParams {
    fn default() -> OrcaParams {
        OrcaParams {
            time_horizon: 5.0,
            neighbor_dist: 10.0,
            max_neighbors: 10,
        }
    }
}

/// The slice of another agent visible to the avoidance computation.
#[derive(Clone, Copy, Debug)]
pub struct AgentView {
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
}

/// Half-plane induced by one neighbour, following the truncated velocity
/// obstacle geometry: cut-off disc within the horizon, legs outside it, and
/// a time-step-scale push when the discs already overlap.
fn neighbor_half_plane(me: &AgentView, other: &AgentView, time_horizon: f64, dt: f64) -> HalfPlane {
    let rel_pos = other.pos - me.pos;
    let rel_vel = me.vel - other.vel;
    let dist_sq = rel_pos.norm_sq();
    let combined_r = me.radius + other.radius;
    let combined_r_sq = combined_r * combined_r;

    let direction;
    let u;

    if dist_sq > combined_r_sq {
        // No current collision.
        let inv_horizon = 1.0 / time_horizon;
        let w = rel_vel - inv_horizon * rel_pos;
        let w_len_sq = w.norm_sq();
        let dot1 = w.dot(rel_pos);

        if dot1 < 0.0 && dot1 * dot1 > combined_r_sq * w_len_sq {
            // Project on the cut-off disc.
            let w_len = w_len_sq.sqrt();
            let unit_w = w / w_len;
            direction = vec2(unit_w.y, -unit_w.x);
            u = (combined_r * inv_horizon - w_len) * unit_w;
        } else {
            let leg = (dist_sq - combined_r_sq).sqrt();
            if rel_pos.det(w) > 0.0 {
                // Left leg.
                direction = vec2(
                    rel_pos.x * leg - rel_pos.y * combined_r,
                    rel_pos.x * combined_r + rel_pos.y * leg,
                ) / dist_sq;
            } else {
                // Right leg.
                direction = -vec2(
                    rel_pos.x * leg + rel_pos.y * combined_r,
                    -rel_pos.x * combined_r + rel_pos.y * leg,
                ) / dist_sq;
            }
            let dot2 = rel_vel.dot(direction);
            u = dot2 * direction - rel_vel;
        }
    } else {
        // Discs overlap: push apart within one time step.
        let inv_dt = 1.0 / dt;
        let w = rel_vel - inv_dt * rel_pos;
        let w_len = w.norm();
        let unit_w = if w_len > ORCA_EPS {
            w / w_len
        } else {
            // Coincident centres and equal velocities; any direction works,
            // picked fixed for determinism.
            vec2(1.0, 0.0)
        };
        direction = vec2(unit_w.y, -unit_w.x);
        u = (combined_r * inv_dt - w_len) * unit_w;
    }

    HalfPlane {
        point: me.vel + 0.5 * u,
        direction,
    }
}

/// Solve on one line: closest point to opt_v (or furthest along it when
/// dir_opt) within the disc of `radius` and the previous half-planes.
/// Returns false when that segment is empty.
fn lp1(
    lines: &[HalfPlane],
    line_no: usize,
    radius: f64,
    opt_v: Vec2,
    dir_opt: bool,
    result: &mut Vec2,
) -> bool {
    let ln = &lines[line_no];
    let dot = ln.point.dot(ln.direction);
    let discriminant = dot * dot + radius * radius - ln.point.norm_sq();
    if discriminant < 0.0 {
        // The line misses the speed disc entirely.
        return false;
    }
    let sqrt_disc = discriminant.sqrt();
    let mut t_left = -dot - sqrt_disc;
    let mut t_right = -dot + sqrt_disc;

    for prev in lines.iter().take(line_no) {
        let denominator = ln.direction.det(prev.direction);
        let numerator = prev.direction.det(ln.point - prev.point);
        if denominator.abs() <= ORCA_EPS {
            // Parallel lines.
            if numerator < 0.0 {
                return false;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return false;
        }
    }

    let t = if dir_opt {
        if opt_v.dot(ln.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        (ln.direction.dot(opt_v - ln.point)).clamp(t_left, t_right)
    };
    *result = ln.point + t * ln.direction;
    true
}

/// Incremental 2-d program over all half-planes inside the speed disc.
/// Returns lines.len() on success, otherwise the index of the first line
/// with an empty feasible set (result then holds the solution of the
/// preceding lines).
fn lp2(lines: &[HalfPlane], radius: f64, opt_v: Vec2, dir_opt: bool, result: &mut Vec2) -> usize {
    if dir_opt {
        // opt_v is a unit direction in this mode.
        *result = opt_v * radius;
    } else if opt_v.norm_sq() > radius * radius {
        *result = opt_v.normalize_or_zero() * radius;
    } else {
        *result = opt_v;
    }

    for (i, ln) in lines.iter().enumerate() {
        if ln.direction.det(ln.point - *result) > 0.0 {
            let temp = *result;
            if !lp1(lines, i, radius, opt_v, dir_opt, result) {
                *result = temp;
                return i;
            }
        }
    }
    lines.len()
}

/// Infeasible fallback: starting from the first failed line, move result to
/// minimise the largest violation, optimising along each violated line's
/// direction projected against the half-planes seen so far.
fn lp3(lines: &[HalfPlane], begin_line: usize, radius: f64, result: &mut Vec2) {
    let mut distance = 0.0;

    for i in begin_line..lines.len() {
        if lines[i].direction.det(lines[i].point - *result) > distance {
            let mut proj_lines: Vec<HalfPlane> = Vec::with_capacity(i);
            for j in 0..i {
                let denominator = lines[i].direction.det(lines[j].direction);
                let point = if denominator.abs() <= ORCA_EPS {
                    if lines[i].direction.dot(lines[j].direction) > 0.0 {
                        // Same direction: line j is redundant here.
                        continue;
                    }
                    0.5 * (lines[i].point + lines[j].point)
                } else {
                    lines[i].point
                        + (lines[j].direction.det(lines[i].point - lines[j].point) / denominator)
                            * lines[i].direction
                };
                proj_lines.push(HalfPlane {
                    point,
                    direction: (lines[j].direction - lines[i].direction).normalize_or_zero(),
                });
            }

            let temp = *result;
            let opt_dir = vec2(-lines[i].direction.y, lines[i].direction.x);
            if lp2(&proj_lines, radius, opt_dir, true, result) < proj_lines.len() {
                // Only reachable through rounding; keep the previous result.
                *result = temp;
            }
            distance = lines[i].direction.det(lines[i].point - *result);
        }
    }
}

/// Build the half-plane set for `me` against the capped, closest-first
/// neighbour list.
pub fn orca_half_planes(
    me: &AgentView,
    neighbors: &[AgentView],
    params: &OrcaParams,
    dt: f64,
) -> Vec<HalfPlane> {
    // Closest first by centre distance, stable on ties, capped.
    let mut order: Vec<(f64, usize)> = neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| ((n.pos - me.pos).norm_sq(), i))
        .filter(|&(d, _)| d < params.neighbor_dist * params.neighbor_dist)
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    order.truncate(params.max_neighbors);

    order
        .iter()
        .map(|&(_, i)| neighbor_half_plane(me, &neighbors[i], params.time_horizon, dt))
        .collect()
}

/// New velocity for `me`: the feasible velocity closest to `pref_vel`
/// within the speed disc of `max_speed`.
pub fn orca_velocity(
    me: &AgentView,
    neighbors: &[AgentView],
    params: &OrcaParams,
    dt: f64,
    pref_vel: Vec2,
    max_speed: f64,
) -> Vec2 {
    let lines = orca_half_planes(me, neighbors, params, dt);
    let mut result = Vec2::ZERO;
    let fail = lp2(&lines, max_speed, pref_vel, false, &mut result);
    if fail < lines.len() {
        lp3(&lines, fail, max_speed, &mut result);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(px: f64, py: f64, vx: f64, vy: f64) -> AgentView {
        AgentView {
            pos: vec2(px, py),
            vel: vec2(vx, vy),
            radius: 0.3,
        }
    }

    #[test]
    fn no_neighbors_returns_clamped_pref() {
        let me = agent(0.0, 0.0, 0.0, 0.0);
        let v = orca_velocity(&me, &[], &OrcaParams::default(), 0.25, vec2(0.6, 0.3), 1.0);
        assert_eq!(v, vec2(0.6, 0.3));
        let v = orca_velocity(&me, &[], &OrcaParams::default(), 0.25, vec2(3.0, 4.0), 1.0);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert!((v.x - 0.6).abs() < 1e-12 && (v.y - 0.8).abs() < 1e-12);
    }

    #[test]
    fn inactive_constraint_passes_pref_through_unchanged() {
        // Oncoming pair but already laterally separated: the preferred
        // velocity sits inside the permitted half-plane, so it must come
        // back bit-for-bit.
        let me = agent(0.0, 0.0, 1.0, 0.0);
        let other = agent(4.0, 3.0, -1.0, 0.0);
        let pref = vec2(0.9, -0.1);
        let v = orca_velocity(&me, &[other], &OrcaParams::default(), 0.25, pref, 1.0);
        assert_eq!(v, pref);
    }

    #[test]
    fn head_on_pair_is_point_symmetric_and_breaks_the_tie() {
        // Exactly aligned opposing agents: outputs are exact negations and
        // both deviate laterally, so the pair does not deadlock.
        let p = OrcaParams::default();
        let a = agent(-2.0, 0.0, 1.0, 0.0);
        let b = agent(2.0, 0.0, -1.0, 0.0);
        let va = orca_velocity(&a, &[b], &p, 0.25, vec2(1.0, 0.0), 1.0);
        let vb = orca_velocity(&b, &[a], &p, 0.25, vec2(-1.0, 0.0), 1.0);
        assert_eq!(va, -vb);
        assert!(va.y.abs() > 1e-3, "expected a lateral component, got {va:?}");
        assert!(va.x > 0.9, "forward progress should remain, got {va:?}");
    }

    #[test]
    fn overlap_resolves_within_one_step() {
        // Two stationary overlapping discs, zero preferred velocity: the
        // emergency branch pushes them apart so the overlap closes in
        // exactly one time step at shared responsibility.
        let dt = 0.25;
        let a = agent(0.0, 0.0, 0.0, 0.0);
        let b = agent(0.4, 0.0, 0.0, 0.0);
        let p = OrcaParams::default();
        let va = orca_velocity(&a, &[b], &p, dt, Vec2::ZERO, 1.0);
        let vb = orca_velocity(&b, &[a], &p, dt, Vec2::ZERO, 1.0);
        assert!((va.x - -0.4).abs() < 1e-12 && va.y.abs() < 1e-12, "{va:?}");
        assert!((vb.x - 0.4).abs() < 1e-12 && vb.y.abs() < 1e-12, "{vb:?}");
        let gap_after = (b.pos + dt * vb).dist(a.pos + dt * va) - 0.6;
        assert!(gap_after.abs() < 1e-12);
    }

    #[test]
    fn neighbor_cap_keeps_closest() {
        let me = agent(0.0, 0.0, 1.0, 0.0);
        let near = agent(2.0, 0.1, -1.0, 0.0);
        let far = agent(6.0, -0.1, -1.0, 0.0);
        let capped = OrcaParams {
            max_neighbors: 1,
            ..OrcaParams::default()
        };
        let v_both = orca_velocity(&me, &[far, near], &capped, 0.25, vec2(1.0, 0.0), 1.0);
        let v_near = orca_velocity(&me, &[near], &capped, 0.25, vec2(1.0, 0.0), 1.0);
        assert_eq!(v_both, v_near);
    }

    #[test]
    fn out_of_range_neighbors_are_ignored() {
        let me = agent(0.0, 0.0, 1.0, 0.0);
        let far = agent(11.0, 0.0, -1.0, 0.0);
        let v = orca_velocity(&me, &[far], &OrcaParams::default(), 0.25, vec2(1.0, 0.0), 1.0);
        assert_eq!(v, vec2(1.0, 0.0));
    }

    #[test]
    fn infeasible_ring_still_produces_bounded_velocity() {
        // Eight agents converging on the centre from all sides with a long
        // horizon: the feasible region is empty and the fallback program
        // must still return a finite velocity inside the speed disc.
        let me = agent(0.0, 0.0, 0.0, 0.0);
        let ring: Vec<AgentView> = (0..8)
            .map(|k| {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                AgentView {
                    pos: Vec2::from_polar(0.9, ang),
                    vel: Vec2::from_polar(1.0, ang + std::f64::consts::PI),
                    radius: 0.3,
                }
            })
            .collect();
        let v = orca_velocity(&me, &ring, &OrcaParams::default(), 0.25, vec2(1.0, 0.0), 1.0);
        assert!(v.is_finite());
        assert!(v.norm() <= 1.0 + 1e-9, "speed {} exceeds the disc", v.norm());
    }

    #[test]
    fn pairwise_crossings_never_penetrate() {
        // Many random antipodal crossings, all agents reciprocally avoiding:
        // surface distance must never go negative beyond numerical dust.
        use rand::Rng;
        let mut rng = crate::rng::substream(7, &[0x0cca]);
        let p = OrcaParams::default();
        let dt = 0.25;
        for _ in 0..40 {
            let n = rng.gen_range(2..=6usize);
            let mut pos: Vec<Vec2> = Vec::new();
            let mut goal: Vec<Vec2> = Vec::new();
            for i in 0..n {
                let ang = 2.0 * std::f64::consts::PI * (i as f64 + rng.gen::<f64>() * 0.4) / n as f64;
                pos.push(Vec2::from_polar(4.0, ang));
                goal.push(-pos[i]);
            }
            let mut vel = vec![Vec2::ZERO; n];
            for _ in 0..120 {
                let views: Vec<AgentView> = (0..n)
                    .map(|i| AgentView {
                        pos: pos[i],
                        vel: vel[i],
                        radius: 0.3,
                    })
                    .collect();
                let mut new_vel = vec![Vec2::ZERO; n];
                for i in 0..n {
                    let others: Vec<AgentView> = (0..n).filter(|&j| j != i).map(|j| views[j]).collect();
                    let pref = ((goal[i] - pos[i]) / dt).clamp_norm(1.0);
                    new_vel[i] = orca_velocity(&views[i], &others, &p, dt, pref, 1.0);
                }
                for i in 0..n {
                    vel[i] = new_vel[i];
                    pos[i] = pos[i] + dt * vel[i];
                }
                for i in 0..n {
                    for j in i + 1..n {
                        let d = pos[i].dist(pos[j]) - 0.6;
                        assert!(d > -1e-9, "penetration {d} with {n} agents");
                    }
                }
            }
        }
    }
}
