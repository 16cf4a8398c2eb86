//! Reward terms written out with explicit trigonometry.

use std::f64::consts::PI;

use holosim::robot::RootState;
use holosim::{EnvState, Frame, RobotConfig};

type P = [f64; 3];

struct Link {
    pos: P,
    vel: P,
    angle: f64,
    rate: f64,
}

fn dist2(a: P, b: P) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn wrap(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w < -PI {
        w += 2.0 * PI;
    }
    w
}

fn leg_split(j: usize) -> [(Vec<usize>, f64); 2] {
    let left = j.div_ceil(2);
    [((0..left).collect(), 0.1), ((left..j).collect(), -0.1)]
}

/// Root, torso, then one link end per joint, walked with explicit
/// trigonometry.
fn chain(cfg: &RobotConfig, r: &RootState, q: &[f64], qd: &[f64]) -> (Vec<Link>, [P; 2]) {
    let (th, w) = (r.pitch, r.pitch_rate);
    let mut links = vec![Link { pos: r.pos, vel: r.vel, angle: th, rate: w }];
    let ht = cfg.torso_height;
    links.push(Link {
        pos: [r.pos[0] + ht * th.sin(), r.pos[1], r.pos[2] + ht * th.cos()],
        vel: [r.vel[0] + ht * w * th.cos(), r.vel[1], r.vel[2] - ht * w * th.sin()],
        angle: th,
        rate: w,
    });
    let mut mids = [[0.0; 3]; 2];
    for (side, (joints, y)) in leg_split(cfg.num_joints).into_iter().enumerate() {
        let seg = cfg.leg_length / joints.len() as f64;
        let (mut x, mut z) = (r.pos[0], r.pos[2]);
        let (mut vx, mut vz) = (r.vel[0], r.vel[2]);
        let (mut phi, mut rate) = (th, w);
        let mut walked = 0.0;
        let mut mid = None;
        for &k in &joints {
            phi += q[k];
            rate += qd[k];
            let (s, c) = (phi.sin(), phi.cos());
            if mid.is_none() && walked + seg >= cfg.leg_length / 2.0 - 1e-12 {
                let part = cfg.leg_length / 2.0 - walked;
                mid = Some([x - part * s, r.pos[1] + y, z - part * c]);
            }
            x -= seg * s;
            z -= seg * c;
            vx -= seg * rate * c;
            vz += seg * rate * s;
            walked += seg;
            links.push(Link {
                pos: [x, r.pos[1] + y, z],
                vel: [vx, r.vel[1], vz],
                angle: phi,
                rate,
            });
        }
        mids[side] = mid.unwrap();
    }
    (links, mids)
}

fn body_frame(r: &RootState, p: P) -> P {
    let (dx, dy, dz) = (p[0] - r.pos[0], p[1] - r.pos[1], p[2] - r.pos[2]);
    let (s, c) = r.pitch.sin_cos();
    [c * dx - s * dz, dy, s * dx + c * dz]
}

fn five(cfg: &RobotConfig, r: &RootState, links: &[Link], mids: [P; 2]) -> [P; 5] {
    let left_foot = 2 + cfg.num_joints.div_ceil(2) - 1;
    let right_foot = 2 + cfg.num_joints - 1;
    let t = links[1].pos;
    let o = cfg.torso_offset;
    [
        [t[0] + o * r.pitch.sin(), t[1], t[2] + o * r.pitch.cos()],
        mids[0],
        mids[1],
        links[left_foot].pos,
        links[right_foot].pos,
    ]
}

fn ratio(p: P, g: P) -> f64 {
    dist2(p, g).sqrt() / (dist2(g, [0.0; 3]).sqrt() + 0.1)
}

/// Every reward term, written out one by one.
pub fn oracle(cfg: &RobotConfig, s: &EnvState, f: &Frame, a: &[f64], prev: &[f64]) -> Vec<f64> {
    let gr = RootState {
        pos: f.root_pos,
        pitch: f.pitch,
        vel: f.root_vel,
        pitch_rate: f.pitch_rate,
    };
    let (robot, rm) = chain(cfg, &s.root, &s.q, &s.qd);
    let (goal, gm) = chain(cfg, &gr, &f.q, &f.qd);
    let n = robot.len() as f64;
    let mut e = [0.0; 4];
    for (p, g) in robot.iter().zip(&goal) {
        let pr = [p.pos[0] - s.root.pos[0], p.pos[1] - s.root.pos[1], p.pos[2] - s.root.pos[2]];
        let gp = [g.pos[0] - gr.pos[0], g.pos[1] - gr.pos[1], g.pos[2] - gr.pos[2]];
        e[0] += dist2(pr, gp);
        e[1] += wrap((p.angle - s.root.pitch) - (g.angle - gr.pitch)).powi(2);
        e[2] += dist2(p.vel, g.vel);
        e[3] += (p.rate - g.rate).powi(2);
    }
    let fp = five(cfg, &s.root, &robot, rm);
    let fg = five(cfg, &gr, &goal, gm);
    let e5 = (0..5)
        .map(|i| dist2(body_frame(&s.root, fp[i]), body_frame(&gr, fg[i])))
        .sum::<f64>()
        / 5.0;
    let rl = ratio(s.root.vel, gr.vel);
    let ra = ratio([0.0, s.root.pitch_rate, 0.0], [0.0, gr.pitch_rate, 0.0]);
    let rate: f64 = a.iter().zip(prev).map(|(x, y)| (x - y) * (x - y)).sum();
    let acc: f64 = s.qdd.iter().map(|x| x * x).sum();
    let limits = s.q.iter().enumerate().filter(|&(k, &v)| v < cfg.q_min[k] || v > cfg.q_max[k]).count();
    let feet = [2 + cfg.num_joints.div_ceil(2) - 1, 2 + cfg.num_joints - 1];
    let contacts = s
        .body_forces
        .iter()
        .enumerate()
        .filter(|&(b, &f)| !feet.contains(&b) && f > 1.0)
        .count();
    vec![
        0.1,
        (-(e[0] / n) / 0.09).exp(),
        (-(e[1] / n) / 0.16).exp(),
        (-(e[2] / n) / 1.0).exp(),
        (-(e[3] / n) / (3.14 * 3.14)).exp(),
        (-rl * rl).exp(),
        (-ra * ra).exp(),
        2.0 * (-e5 / 0.01).exp(),
        -0.2 * rate,
        -1e-6 * acc,
        -10.0 * limits as f64,
        -0.1 * contacts as f64,
    ]
}
