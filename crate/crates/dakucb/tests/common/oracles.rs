//! Brute-force reference implementations, independent of the library's
//! estimator paths: plain nested-loop kernel sums and a Jacobi eigensolver.

#![allow(dead_code)]

use dakucb::scores::PairedCorpus;

pub fn gauss(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Triple-sum oracle for the squared kernel distance.
pub fn kd_oracle(p: &[Vec<f64>], q: &[Vec<f64>], sigma: f64, unbiased: bool) -> f64 {
    let sum_within = |set: &[Vec<f64>]| {
        let mut total = 0.0;
        let mut count = 0.0;
        for (i, a) in set.iter().enumerate() {
            for (j, b) in set.iter().enumerate() {
                if unbiased && i == j {
                    continue;
                }
                total += gauss(a, b, sigma);
                count += 1.0;
            }
        }
        total / count
    };
    let mut cross = 0.0;
    for a in p {
        for b in q {
            cross += gauss(a, b, sigma);
        }
    }
    cross /= (p.len() * q.len()) as f64;
    sum_within(p) + sum_within(q) - 2.0 * cross
}

pub fn rke_oracle(samples: &[Vec<f64>], sigma: f64) -> f64 {
    let n = samples.len() as f64;
    let mut frob = 0.0;
    for a in samples {
        for b in samples {
            frob += gauss(a, b, sigma).powi(2);
        }
    }
    n * n / frob
}

pub fn i_jrke_oracle(corpus: &PairedCorpus, sigma_t: f64, sigma_x: f64) -> f64 {
    let n = corpus.len() as f64;
    let mut total = 0.0;
    for a in corpus.iter() {
        for b in corpus.iter() {
            total += gauss(&a.prompt, &b.prompt, sigma_t).powi(2)
                * gauss(&a.output, &b.output, sigma_x).powi(2);
        }
    }
    total / (n * n)
}

pub fn joint_kd_oracle(p: &PairedCorpus, q: &PairedCorpus, sigma_t: f64, sigma_x: f64) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            let kt = gauss(&p[i].prompt, &p[j].prompt, sigma_t);
            total += kt
                * (gauss(&p[i].output, &p[j].output, sigma_x)
                    + gauss(&q[i].output, &q[j].output, sigma_x)
                    - gauss(&p[i].output, &q[j].output, sigma_x)
                    - gauss(&p[j].output, &q[i].output, sigma_x));
        }
    }
    total / (n * n)
}

/// The per-sample distance-label cross terms:
/// `(1/n^2) sum_ij k_T (k_X(x_i, x_j) - k_X(x_i, y_j))`.
pub fn jkd_cross_oracle(p: &PairedCorpus, q: &PairedCorpus, sigma_t: f64, sigma_x: f64) -> f64 {
    let n = p.len() as f64;
    let mut total = 0.0;
    for a in p.iter() {
        for (b, c) in p.iter().zip(q.iter()) {
            total += gauss(&a.prompt, &b.prompt, sigma_t)
                * (gauss(&a.output, &b.output, sigma_x) - gauss(&a.output, &c.output, sigma_x));
        }
    }
    total / (n * n)
}

/// Spectral exponential-entropy oracle via Jacobi sweeps on `K/n`.
#[allow(clippy::needless_range_loop)]
pub fn vendi_oracle(samples: &[Vec<f64>], sigma: f64) -> f64 {
    let n = samples.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = gauss(&samples[i], &samples[j], sigma) / n as f64;
        }
    }
    jacobi_entropy_exp(&mut a)
}

#[allow(clippy::needless_range_loop)]
pub fn jacobi_entropy_exp(a: &mut [Vec<f64>]) -> f64 {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut entropy = 0.0;
    for (i, row) in a.iter().enumerate() {
        let lambda = row[i].max(0.0);
        if lambda > 0.0 {
            entropy -= lambda * lambda.ln();
        }
    }
    entropy.exp()
}
