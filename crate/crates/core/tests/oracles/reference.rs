//! Two agents with a distance coupling: enumerate every adopt/keep outcome
//! of the reference update and check admissibility with exact box geometry.

use dmpc_core::constraints::distance_constraint;
use dmpc_core::geometry::{BoxSet, ConsistencySet};
use dmpc_core::ocp::TrajectoryBundle;
use dmpc_core::protocol::{update_reference, NeighborPrevious};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tally;

fn planar(agent: usize, pts: &[(f64, f64)]) -> TrajectoryBundle {
    TrajectoryBundle::reference(
        agent,
        0,
        pts.iter()
            .map(|&(x, y)| DVector::from_vec(vec![x, y]))
            .collect(),
    )
}

fn random_walk(rng: &mut ChaCha8Rng, start: (f64, f64), len: usize, step: f64) -> Vec<(f64, f64)> {
    let mut p = start;
    (0..len)
        .map(|_| {
            p.0 += rng.random_range(-step..step);
            p.1 += rng.random_range(-step..step);
            p
        })
        .collect()
}

/// Every point of `a ⊕ box(ca)` is within `d_max` of every point of
/// `b ⊕ box(cb)`: the farthest pair is corner to corner.
pub fn robust_pair_ok(a: (f64, f64), ca: f64, b: (f64, f64), cb: f64, d_max: f64) -> bool {
    let signs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    let mut worst: f64 = 0.0;
    for sa in signs {
        for sb in signs {
            let dx = a.0 + sa.0 * ca - b.0 - sb.0 * cb;
            let dy = a.1 + sa.1 * ca - b.1 - sb.1 * cb;
            worst = worst.max((dx * dx + dy * dy).sqrt());
        }
    }
    worst <= d_max
}

#[derive(Debug, Clone, Default)]
pub struct BruteForceReport {
    /// One case per (instance, index).
    pub tally: Tally,
    pub adopted: usize,
    pub kept: usize,
}

/// Previous references are robustly admissible against each other; previous
/// optima are scattered around them, some too far apart. For every index
/// and every combination of the two agents' options (shifted optimum or
/// shifted old reference), a combination the update can actually produce
/// must be admissible, and an adopted point must be admissible against both
/// of the neighbor's options.
pub fn two_agent_brute_force(seed: u64, instances: usize) -> BruteForceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_max = 2.0;
    let constraint = distance_constraint(d_max, vec![0, 1]).unwrap();
    let mut rep = BruteForceReport::default();
    let horizon = 6;
    while rep.tally.cases < instances * (horizon - 1) {
        let ci: f64 = rng.random_range(0.02..0.2);
        let cj: f64 = rng.random_range(0.02..0.2);
        let set_i = ConsistencySet::Box(BoxSet::symmetric(&[ci, ci]).unwrap());
        let set_j = ConsistencySet::Box(BoxSet::symmetric(&[cj, cj]).unwrap());
        let ref_i = random_walk(&mut rng, (0.0, 0.0), horizon + 1, 0.1);
        let ref_j: Vec<(f64, f64)> = ref_i
            .iter()
            .map(|&(x, y)| (x + 0.8, y + rng.random_range(-0.3..0.3)))
            .collect();
        if !(0..=horizon).all(|k| robust_pair_ok(ref_i[k], ci, ref_j[k], cj, d_max)) {
            continue;
        }
        let opt_i: Vec<(f64, f64)> = ref_i
            .iter()
            .map(|&(x, y)| {
                (
                    x - rng.random_range(-0.3..1.2),
                    y + rng.random_range(-0.4..0.4),
                )
            })
            .collect();
        let opt_j: Vec<(f64, f64)> = ref_j
            .iter()
            .map(|&(x, y)| {
                (
                    x + rng.random_range(-0.3..1.2),
                    y + rng.random_range(-0.4..0.4),
                )
            })
            .collect();
        let (bi_ref, bi_opt) = (planar(0, &ref_i), planar(0, &opt_i));
        let (bj_ref, bj_opt) = (planar(1, &ref_j), planar(1, &opt_j));
        let nb_of_i = NeighborPrevious {
            constraint: &constraint,
            set: &set_j,
            prev_opt: &bj_opt,
            prev_ref: &bj_ref,
        };
        let nb_of_j = NeighborPrevious {
            constraint: &constraint,
            set: &set_i,
            prev_opt: &bi_opt,
            prev_ref: &bi_ref,
        };
        let up_i = update_reference(0, 1, &[], &set_i, &bi_opt, &bi_ref, &[nb_of_i]).unwrap();
        let up_j = update_reference(1, 1, &[], &set_j, &bj_opt, &bj_ref, &[nb_of_j]).unwrap();
        for k in 0..horizon - 1 {
            let own_options = [(true, opt_i[k + 1]), (false, ref_i[k + 1])];
            let nb_options = [(true, opt_j[k + 1]), (false, ref_j[k + 1])];
            let mut ok = true;
            for (adopt_i, pi) in own_options {
                for (adopt_j, pj) in nb_options {
                    if up_i.adopted[k] != adopt_i || up_j.adopted[k] != adopt_j {
                        continue;
                    }
                    let x_i = &up_i.bundle.states[k];
                    let x_j = &up_j.bundle.states[k];
                    ok &= (x_i[0], x_i[1]) == pi && (x_j[0], x_j[1]) == pj;
                    ok &= robust_pair_ok(pi, ci, pj, cj, d_max);
                }
            }
            // an adopted point must not depend on what the neighbor decides
            for (flag, own, c_own, c_nb, options) in [
                (up_i.adopted[k], opt_i[k + 1], ci, cj, nb_options),
                (up_j.adopted[k], opt_j[k + 1], cj, ci, own_options),
            ] {
                if flag {
                    for (_, other) in options {
                        ok &= robust_pair_ok(own, c_own, other, c_nb, d_max + 1e-9);
                    }
                }
            }
            if up_i.adopted[k] {
                rep.adopted += 1;
            } else {
                rep.kept += 1;
            }
            rep.tally.add(ok);
        }
    }
    rep
}
