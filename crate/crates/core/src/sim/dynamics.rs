use super::{SimConfig, SimState, SpringKind};
use crate::geometry::Vec3;

fn vertex_mass(state: &SimState, cfg: &SimConfig) -> f64 {
    cfg.fabric_mass / state.mesh.vertex_count() as f64
}

fn stiffness(kind: SpringKind, cfg: &SimConfig) -> f64 {
    match kind {
        SpringKind::Structural => cfg.structural_stiffness,
        SpringKind::Shear => cfg.shear_stiffness,
        SpringKind::Bend => cfg.bend_stiffness,
    }
}

/// One symplectic-Euler substep. `anchors` carries the kinematic gripper
/// positions and velocities while grasped.
pub(super) fn substep(state: &mut SimState, cfg: &SimConfig, anchors: Option<([Vec3; 2], [Vec3; 2])>) {
    let m = vertex_mass(state, cfg);
    let dt = cfg.dt;
    let n = state.mesh.vertex_count();
    let (gl, gr) = state.grasped_vertices();
    let pinned = |i: usize| state.grasped && (i == gl || i == gr);

    let mesh = &mut state.mesh;
    let mut forces = vec![Vec3::new(0.0, 0.0, -m * cfg.gravity); n];
    for (f, v) in forces.iter_mut().zip(&mesh.velocities) {
        *f -= v * (m * cfg.damping);
    }
    for s in &mesh.springs {
        let d = mesh.positions[s.b] - mesh.positions[s.a];
        let len = d.norm();
        if len <= 1e-12 {
            continue;
        }
        let dir = d / len;
        let rel_v = (mesh.velocities[s.b] - mesh.velocities[s.a]).dot(&dir);
        let magnitude = stiffness(s.kind, cfg) * (len - s.rest_length) + cfg.spring_damping * rel_v;
        let f = dir * magnitude;
        forces[s.a] += f;
        forces[s.b] -= f;
    }

    let previous: Vec<Vec3> = mesh.positions.clone();
    for i in 0..n {
        if pinned(i) {
            continue;
        }
        mesh.velocities[i] += forces[i] * (dt / m);
        mesh.positions[i] += mesh.velocities[i] * dt;
    }
    if state.grasped {
        if let Some((targets, velocity)) = anchors {
            mesh.positions[gl] = targets[0];
            mesh.positions[gr] = targets[1];
            mesh.velocities[gl] = velocity[0];
            mesh.velocities[gr] = velocity[1];
        } else {
            mesh.velocities[gl] = Vec3::zeros();
            mesh.velocities[gr] = Vec3::zeros();
        }
    }

    // Strain limiting on structural springs (position-only correction).
    if cfg.max_strain > 0.0 {
        for _ in 0..cfg.strain_iterations {
            let mut changed = false;
            for s in &mesh.springs {
                if s.kind != SpringKind::Structural {
                    continue;
                }
                let limit = s.rest_length * (1.0 + cfg.max_strain);
                let d = mesh.positions[s.b] - mesh.positions[s.a];
                let len = d.norm();
                if len <= limit {
                    continue;
                }
                // aim slightly inside the limit so rounding cannot leave it exceeded
                let excess = d * ((len - limit * (1.0 - 1e-9)) / len);
                match (pinned(s.a), pinned(s.b)) {
                    (true, true) => {}
                    (true, false) => mesh.positions[s.b] -= excess,
                    (false, true) => mesh.positions[s.a] += excess,
                    (false, false) => {
                        mesh.positions[s.a] += excess * 0.5;
                        mesh.positions[s.b] -= excess * 0.5;
                    }
                }
                changed = true;
            }
            if !changed {
                break;
            }
        }
        for i in 0..n {
            if !pinned(i) {
                // keep velocities consistent with the corrected motion, never adding speed
                let implied = (mesh.positions[i] - previous[i]) / dt;
                if implied.norm_squared() < mesh.velocities[i].norm_squared() {
                    mesh.velocities[i] = implied;
                }
            }
        }
    }

    // Contact projection with Coulomb friction on the velocity.
    let scene = &state.scene;
    for i in 0..n {
        if pinned(i) {
            continue;
        }
        let mut p = mesh.positions[i];
        let mut v = mesh.velocities[i];
        let mut contacts: [Option<Vec3>; 2] = [None, None];
        if let Some((q, normal, _)) = scene.project_object(&p) {
            p = q;
            contacts[0] = Some(normal);
        }
        if p.z < scene.table_height {
            p.z = scene.table_height;
            contacts[1] = Some(Vec3::z());
        }
        for normal in contacts.into_iter().flatten() {
            let vn = v.dot(&normal);
            if vn >= 0.0 {
                continue;
            }
            v -= normal * vn;
            let tangential = v - normal * v.dot(&normal);
            let speed = tangential.norm();
            let budget = cfg.friction * (-vn);
            if speed <= budget {
                v -= tangential;
            } else {
                v -= tangential * (budget / speed);
            }
        }
        mesh.positions[i] = p;
        mesh.velocities[i] = v;
    }
}

pub fn kinetic_energy(state: &SimState, cfg: &SimConfig) -> f64 {
    let m = vertex_mass(state, cfg);
    0.5 * m * state.mesh.velocities.iter().map(|v| v.norm_squared()).sum::<f64>()
}

/// Kinetic + gravitational + elastic energy.
pub fn mechanical_energy(state: &SimState, cfg: &SimConfig) -> f64 {
    let m = vertex_mass(state, cfg);
    let mesh = &state.mesh;
    let gravity: f64 =
        mesh.positions.iter().map(|p| m * cfg.gravity * (p.z - state.scene.table_height)).sum();
    let elastic: f64 = mesh
        .springs
        .iter()
        .map(|s| {
            let stretch = (mesh.positions[s.a] - mesh.positions[s.b]).norm() - s.rest_length;
            0.5 * stiffness(s.kind, cfg) * stretch * stretch
        })
        .sum();
    kinetic_energy(state, cfg) + gravity + elastic
}
