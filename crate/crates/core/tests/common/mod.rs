//! Independent scalar-loop oracles and helpers shared by the integration
//! tests. The oracles never call into the code under test; only the
//! dataset helper at the bottom does.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use tch::{Kind, Tensor};

pub type Grid = Vec<Vec<f64>>;

pub const CLAMP: f64 = 1e-7;

pub fn random_grid<R: Rng>(rng: &mut R, h: usize, w: usize, lo: f64, hi: f64) -> Grid {
    (0..h).map(|_| (0..w).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

pub fn binary_grid<R: Rng>(rng: &mut R, h: usize, w: usize, p: f64) -> Grid {
    (0..h)
        .map(|_| (0..w).map(|_| f64::from(u8::from(rng.random_bool(p)))).collect())
        .collect()
}

pub fn to_tensor(g: &Grid) -> Tensor {
    let (h, w) = (g.len() as i64, g[0].len() as i64);
    let flat: Vec<f64> = g.iter().flatten().copied().collect();
    Tensor::from_slice(&flat).view([h, w])
}

pub fn from_tensor(t: &Tensor) -> Grid {
    let s = t.size();
    let (h, w) = (s[s.len() - 2] as usize, s[s.len() - 1] as usize);
    let flat = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).unwrap();
    flat.chunks(w).take(h).map(<[f64]>::to_vec).collect()
}

pub fn to_array(g: &Grid) -> Array2<f64> {
    let (h, w) = (g.len(), g[0].len());
    Array2::from_shape_fn((h, w), |(y, x)| g[y][x])
}

pub fn mask_to_grid(m: &Array2<u8>) -> Grid {
    m.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn oracle_bce(p: &Grid, q: &Grid) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (pr, qr) in p.iter().zip(q) {
        for (&pv, &qv) in pr.iter().zip(qr) {
            let qc = qv.clamp(CLAMP, 1.0 - CLAMP);
            sum += pv * qc.ln() + (1.0 - pv) * (1.0 - qc).ln();
            n += 1.0;
        }
    }
    -sum / n
}

/// Running maximum down each column.
pub fn oracle_f1(g: &Grid) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for x in 0..w {
        let mut m = f64::NEG_INFINITY;
        for y in 0..h {
            m = m.max(g[y][x]);
            out[y][x] = m;
        }
    }
    out
}

/// Positive top edge per column, then max over the `t` rows above.
pub fn oracle_f2(g: &Grid, t: usize) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let mut edge = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let above = if y == 0 { 0.0 } else { g[y - 1][x] };
            edge[y][x] = (g[y][x] - above).max(0.0);
        }
    }
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0f64;
            for k in 0..t {
                if k <= y {
                    m = m.max(edge[y - k][x]);
                }
            }
            out[y][x] = m;
        }
    }
    out
}

pub fn oracle_tcc(y1: &Grid, y2: &Grid, h1: &Grid, h2: &Grid, t: usize) -> f64 {
    oracle_bce(y1, &oracle_f2(h2, t)) + oracle_bce(y2, &oracle_f1(h1))
}

pub fn oracle_total(y1: &Grid, y2: &Grid, h1: &Grid, h2: &Grid, t: usize, tcc: bool) -> f64 {
    let base = oracle_bce(y1, h1) + oracle_bce(y2, h2);
    if tcc {
        base + oracle_tcc(y1, y2, h1, h2, t)
    } else {
        base
    }
}

pub fn oracle_dice(a: &Grid, b: &Grid) -> f64 {
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (ar, br) in a.iter().zip(b) {
        for (&x, &y) in ar.iter().zip(br) {
            let (x, y) = (x >= 0.5, y >= 0.5);
            na += f64::from(u8::from(x));
            nb += f64::from(u8::from(y));
            inter += f64::from(u8::from(x && y));
        }
    }
    if na + nb == 0.0 {
        1.0
    } else {
        2.0 * inter / (na + nb)
    }
}

pub fn oracle_bse(cm: &Grid, usa: &Grid, rho: f64, delta: f64, eps: f64) -> Grid {
    cm.iter()
        .zip(usa)
        .map(|(cr, ur)| {
            cr.iter()
                .zip(ur)
                .map(|(&c, &u)| (c - rho) / u.max(eps).powf(delta) + rho)
                .collect()
        })
        .collect()
}

pub fn oracle_lp(a: &Grid, b: &Grid, c: &Grid) -> Grid {
    (0..a.len())
        .map(|y| (0..a[0].len()).map(|x| a[y][x] * b[y][x] * c[y][x]).collect())
        .collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&Grid) -> f64, x: &Grid, eps: f64) -> Grid {
    let mut g = vec![vec![0.0; x[0].len()]; x.len()];
    let mut xp = x.clone();
    for y in 0..x.len() {
        for c in 0..x[0].len() {
            let v = x[y][c];
            xp[y][c] = v + eps;
            let fp = f(&xp);
            xp[y][c] = v - eps;
            let fm = f(&xp);
            xp[y][c] = v;
            g[y][c] = (fp - fm) / (2.0 * eps);
        }
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &Grid, b: &Grid) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (ar, br) in a.iter().zip(b) {
        for (&x, &y) in ar.iter().zip(br) {
            d += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        d.sqrt() / scale
    }
}

/// Leaf f64 tensor that records gradients.
pub fn leaf(g: &Grid) -> Tensor {
    to_tensor(g).to_kind(Kind::Double).set_requires_grad(true)
}

pub fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `n` default phantoms (groups of 8) turned into a training dataset.
pub fn phantom_dataset(n: usize, seed: u64) -> ssnet::trainer::Dataset {
    use ssnet::phantom::{generate_in_group, PhantomSpec};
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let samples: Vec<_> = (0..n)
        .map(|i| generate_in_group(&spec, spec.sample_seed(i), spec.group_of(i)).unwrap())
        .collect();
    ssnet::trainer::Dataset::from_samples(&samples, &Default::default()).unwrap()
}
