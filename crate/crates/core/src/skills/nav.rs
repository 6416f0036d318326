//! End-effector routing around resting objects.
//!
//! Shortest path over a visibility graph whose nodes are the corners of the
//! obstacles grown by a node margin. Segments are tested against obstacles
//! grown by a smaller margin, shrunk further near the segment endpoints so an
//! end-effector touching a face can still leave it.

use crate::geometry::{Rect, Vec2};
use crate::world::{Arm, WorldConfig, WorldState};

const MAX_NODES: usize = 16;

pub struct NavParams {
    pub node_margin: f64,
    pub segment_margin: f64,
}

/// Whether the open segment `a..b` passes through `rect` grown by `margin`.
fn segment_hits(rect: &Rect, margin: f64, a: Vec2, b: Vec2) -> bool {
    let p = rect.pose.to_local(a);
    let q = rect.pose.to_local(b);
    let d = q - p;
    let h = rect.half + Vec2::new(margin, margin);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p0, dd, hh) in [(p.x, d.x, h.x), (p.y, d.y, h.y)] {
        if dd.abs() < 1e-15 {
            if p0.abs() >= hh {
                return false;
            }
        } else {
            let mut ta = (-hh - p0) / dd;
            let mut tb = (hh - p0) / dd;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t1 - t0) * d.norm() > 1e-9
}

fn blocked(obstacles: &[Rect], nav: &NavParams, a: Vec2, b: Vec2) -> bool {
    obstacles.iter().any(|r| {
        let m = nav
            .segment_margin
            .min(r.distance_to(a) - 1e-4)
            .min(r.distance_to(b) - 1e-4)
            .max(-1e-6);
        segment_hits(r, m, a, b)
    })
}

/// Next waypoint for `arm` on its way to `goal`, avoiding every object not
/// currently held. Returns `goal` when the straight line is clear or no
/// detour exists.
pub fn next_waypoint(world: &WorldConfig, state: &WorldState, arm: Arm, goal: Vec2, nav: &NavParams) -> Vec2 {
    let start = state.arms[arm].position();
    let obstacles: Vec<Rect> = state
        .objects
        .iter()
        .filter(|o| !state.is_held(o.id))
        .map(|o| o.rect())
        .collect();
    if !blocked(&obstacles, nav, start, goal) {
        return goal;
    }

    let mut nodes = vec![start, goal];
    for r in &obstacles {
        let grown = Rect::new(r.pose, r.half + Vec2::new(nav.node_margin, nav.node_margin));
        for c in grown.corners() {
            let inside_ws = world.workspace.contains(c);
            let reachable = c.dist(world.bases[arm]) <= world.reach_radius - 1e-3;
            let free = obstacles
                .iter()
                .all(|o| o.distance_to(c) > nav.segment_margin + 1e-6);
            if inside_ws && reachable && free && nodes.len() < MAX_NODES {
                nodes.push(c);
            }
        }
    }

    // Dijkstra from node 0; ties resolved by node index for determinism.
    let n = nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[0] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n)
            .filter(|&i| !done[i] && dist[i].is_finite())
            .min_by(|&i, &j| dist[i].total_cmp(&dist[j]))
        else {
            break;
        };
        done[u] = true;
        if u == 1 {
            break;
        }
        for v in 0..n {
            if done[v] || blocked(&obstacles, nav, nodes[u], nodes[v]) {
                continue;
            }
            let alt = dist[u] + nodes[u].dist(nodes[v]);
            if alt < dist[v] {
                dist[v] = alt;
                prev[v] = u;
            }
        }
    }
    if !dist[1].is_finite() {
        return goal;
    }
    let mut v = 1;
    while prev[v] != 0 {
        v = prev[v];
    }
    nodes[v]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;
    use crate::world::reset_named;

    #[test]
    fn segment_rect_intersection() {
        let r = Rect::new(Pose2::new(0.0, 0.0, 0.0), Vec2::new(0.1, 0.05));
        assert!(segment_hits(&r, 0.0, Vec2::new(-0.2, 0.0), Vec2::new(0.2, 0.0)));
        assert!(!segment_hits(&r, 0.0, Vec2::new(-0.2, 0.06), Vec2::new(0.2, 0.06)));
        assert!(segment_hits(&r, 0.02, Vec2::new(-0.2, 0.06), Vec2::new(0.2, 0.06)));
        // running along a face is not a hit
        assert!(!segment_hits(&r, 0.0, Vec2::new(-0.1, 0.05), Vec2::new(0.1, 0.05)));
    }

    #[test]
    fn detours_around_object() {
        let world = WorldConfig::default();
        let mut s = reset_named("one_object", 1).unwrap();
        s.objects[0].pose = Pose2::new(0.5, 0.2, 0.0);
        s.objects[0].half_extents = Vec2::new(0.06, 0.04);
        s.arms.left.ee = Pose2::new(0.40, 0.2, 0.0);
        let nav = NavParams {
            node_margin: 0.03,
            segment_margin: 0.012,
        };
        let goal = Vec2::new(0.6, 0.2);
        let w = next_waypoint(&world, &s, Arm::Left, goal, &nav);
        assert_ne!(w, goal);
        assert!((w.x - 0.41).abs() < 1e-9 || (w.x - 0.59).abs() < 1e-9, "{w:?}");
        // a clear line goes straight
        let g2 = Vec2::new(0.40, 0.35);
        assert_eq!(next_waypoint(&world, &s, Arm::Left, g2, &nav), g2);
    }
}
