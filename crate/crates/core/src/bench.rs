//! Timing of client training and server aggregation, with log-log growth
//! fits, and exact upload sizes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::client::{local_train, FeatureBundle};
use crate::io::{encode_message, Message, UPLOAD_FRAMING_BYTES};
use crate::linalg::{ridge_solve, Matrix};
use crate::registry::ClassId;
use crate::server::ServerState;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub widths: Vec<usize>,
    pub samples: Vec<usize>,
    /// Classes per client. Small, so the width terms dominate.
    pub classes: usize,
    /// Each timing is the fastest of at least this many runs.
    pub repeats: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { widths: vec![64, 256, 1024], samples: vec![1_000, 10_000], classes: 2, repeats: 3, gamma: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub op: &'static str,
    pub width: usize,
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadSize {
    pub width: usize,
    pub classes: usize,
    pub measured: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub timings: Vec<Timing>,
    /// Aggregation time against width.
    pub server_exponent: f64,
    /// Client time against sample count, fitted jointly over all widths
    /// (`log t = a + b·log l_e + c·log N`, this is `c`).
    pub client_exponent: f64,
    /// The same slope fitted at each width separately.
    pub client_exponents: Vec<(usize, f64)>,
    pub uploads: Vec<UploadSize>,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = String::from("op,width,samples,seconds\n");
        for t in &self.timings {
            let _ = writeln!(out, "{},{},{},{:.6}", t.op, t.width, t.samples, t.seconds);
        }
        let _ = writeln!(out, "\naggregate exponent in l_e: {:.3}", self.server_exponent);
        let _ = writeln!(out, "local_train exponent in N (joint fit): {:.3}", self.client_exponent);
        for (w, e) in &self.client_exponents {
            let _ = writeln!(out, "local_train exponent in N at l_e={w}: {e:.3}");
        }
        let _ = writeln!(out, "\nl_e,d_k,upload_bytes,8(l_e^2+l_e*d_k)+{UPLOAD_FRAMING_BYTES}");
        for u in &self.uploads {
            let _ = writeln!(out, "{},{},{},{}", u.width, u.classes, u.measured, u.predicted);
        }
        out
    }
}

/// Least-squares slope of `log y` on `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Least-squares fit of `log y = a + b·log x₁ + c·log x₂`; returns
/// `(b, c)`. NaN when the design is degenerate.
pub fn loglog_fit2(points: &[(f64, f64, f64)]) -> (f64, f64) {
    let design = Matrix::from_fn(points.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => points[r].0.ln(),
        _ => points[r].1.ln(),
    });
    let y = Matrix::from_fn(points.len(), 1, |r, _| points[r].2.ln());
    match ridge_solve(&design, &y, 0.0) {
        Ok(coef) => (coef[(1, 0)], coef[(2, 0)]),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

/// Predicted UPLOAD frame size for `l_e` features and `d_k` classes.
pub fn predicted_upload_bytes(width: usize, classes: usize) -> usize {
    8 * (width * width + width * classes) + UPLOAD_FRAMING_BYTES
}

fn random_bundle(samples: usize, width: usize, classes: usize, rng: &mut ChaCha8Rng) -> FeatureBundle {
    let features = Matrix::from_fn(samples, width, |_, _| StandardNormal.sample(rng));
    let labels = (0..samples).map(|i| ClassId((i % classes) as u64)).collect();
    FeatureBundle::from_labels("bench", features, labels)
}

/// Smallest of the durations reported by `f`, over at least `repeats`
/// runs and until the runs add up to a quarter second.
fn fastest(repeats: usize, mut f: impl FnMut() -> Result<f64, Error>) -> Result<f64, Error> {
    let mut best = f64::INFINITY;
    let mut total = 0.0;
    let mut runs = 0;
    while runs < repeats.max(1) || (total < 0.25 && runs < 10_000) {
        let t = f()?;
        best = best.min(t);
        total += t;
        runs += 1;
    }
    Ok(best)
}

/// Times one aggregation into a server that already holds a round, so the
/// full recursion (not the first-round shortcut) is measured.
pub fn time_aggregate(width: usize, classes: usize, gamma: f64, repeats: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = random_bundle(2 * width, width, classes, &mut rng);
    let mut second = random_bundle(2 * width, width, classes, &mut rng);
    // Half known, half new classes.
    second.labels.iter_mut().for_each(|c| c.0 += (classes / 2) as u64);
    second.declared_classes = second.labels.iter().copied().collect::<BTreeSet<_>>();

    let mut base = ServerState::new(width, gamma)?;
    let s1 = base.register(&first.declared_classes)?;
    base.aggregate(&local_train(&first, &s1, gamma)?, &s1)?;
    let s2 = base.register(&second.declared_classes)?;
    let u2 = local_train(&second, &s2, gamma)?;
    fastest(repeats, || {
        let mut server = base.clone();
        let start = Instant::now();
        server.aggregate(&u2, &s2)?;
        Ok(start.elapsed().as_secs_f64())
    })
}

pub fn time_local_train(width: usize, samples: usize, classes: usize, gamma: f64, repeats: usize, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = random_bundle(samples, width, classes, &mut rng);
    let mut server = ServerState::new(width, gamma)?;
    let split = server.register(&bundle.declared_classes)?;
    fastest(repeats, || {
        let start = Instant::now();
        local_train(&bundle, &split, gamma)?;
        Ok(start.elapsed().as_secs_f64())
    })
}

/// Encodes a real upload and returns its size in bytes.
pub fn measured_upload_bytes(width: usize, classes: usize, seed: u64) -> Result<usize, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = random_bundle(width + classes, width, classes, &mut rng);
    let mut server = ServerState::new(width, 1.0)?;
    let split = server.register(&bundle.declared_classes)?;
    let update = local_train(&bundle, &split, 1.0)?;
    Ok(encode_message(&Message::Upload(update)).len())
}

pub fn run(config: &BenchConfig) -> Result<BenchReport, Error> {
    let mut timings = Vec::new();
    let mut server_points = Vec::new();
    for &w in &config.widths {
        let s = time_aggregate(w, config.classes, config.gamma, config.repeats, config.seed)?;
        log::info!("aggregate l_e={w}: {s:.6}s");
        timings.push(Timing { op: "aggregate", width: w, samples: 0, seconds: s });
        server_points.push((w as f64, s));
    }
    let mut client_exponents = Vec::new();
    let mut client_points = Vec::new();
    for &w in &config.widths {
        let mut points = Vec::new();
        for &n in &config.samples {
            let s = time_local_train(w, n, config.classes, config.gamma, config.repeats, config.seed)?;
            log::info!("local_train l_e={w} N={n}: {s:.6}s");
            timings.push(Timing { op: "local_train", width: w, samples: n, seconds: s });
            points.push((n as f64, s));
            client_points.push((w as f64, n as f64, s));
        }
        if points.len() >= 2 {
            client_exponents.push((w, loglog_slope(&points)));
        }
    }
    let mut uploads = Vec::new();
    for &w in &config.widths {
        for d in [1, config.classes.max(1), 10] {
            uploads.push(UploadSize {
                width: w,
                classes: d,
                measured: measured_upload_bytes(w, d, config.seed)?,
                predicted: predicted_upload_bytes(w, d),
            });
        }
    }
    let server_exponent = if server_points.len() >= 2 { loglog_slope(&server_points) } else { f64::NAN };
    let client_exponent = loglog_fit2(&client_points).1;
    Ok(BenchReport { timings, server_exponent, client_exponent, client_exponents, uploads })
}
