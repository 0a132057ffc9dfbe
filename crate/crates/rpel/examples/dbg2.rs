use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rpel::estfun::EstimatingContext;
use rpel::leverage::LeverageWeights;
use rpel::model::{BasisSet, CorrelationStructure, LongitudinalDataset, ModelFamily, Subject};
use rpel::penalty::PenaltyConfig;
use rpel::score::ScoreFunction;
use rpel::solver::{initial_coefficients, solve, SolverOptions};
use rpel::tuning::{bic, select, TuningGrid};
use std::time::Instant;

fn gaussian_panel(seed: u64, n: usize, m: usize, beta_true: &[f64]) -> LongitudinalDataset {
    let p = beta_true.len();
    let (rho, sigma) = (0.3f64, 0.5f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normal::new(0.0, 1.0).unwrap();
    let subjects = (0..n)
        .map(|_| {
            let x = DMatrix::from_fn(m, p, |_, _| norm.sample(&mut rng));
            let shared: f64 = norm.sample(&mut rng);
            let y = DVector::from_fn(m, |j, _| {
                let e = rho.sqrt() * shared + (1.0 - rho).sqrt() * norm.sample(&mut rng);
                let mut v = sigma * e;
                for k in 0..p {
                    v += x[(j, k)] * beta_true[k];
                }
                v
            });
            let times = DVector::from_fn(m, |j, _| j as f64);
            Subject { y, x, times }
        })
        .collect();
    LongitudinalDataset::new(subjects).unwrap()
}

fn main() {
    let truth = [2.0, 0.0, -1.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

    // 1. zero-model construction at n=40.
    let data = gaussian_panel(7, 40, 4, &truth);
    let w = LeverageWeights::unit(&data);
    let ctx = EstimatingContext::new(
        &data, ModelFamily::gaussian(), BasisSet::new(CorrelationStructure::Cs),
        ScoreFunction::huber_default(), &w,
    ).unwrap();
    let beta0 = initial_coefficients(&data, ctx.family()).unwrap();
    let opts = SolverOptions::default();
    let p1 = PenaltyConfig::scad(0.8).unwrap();
    let crushed = solve(&ctx, &p1, &PenaltyConfig::scad(5.0).unwrap(), &beta0, &opts).unwrap();
    let good = solve(&ctx, &p1, &PenaltyConfig::scad(0.35).unwrap(), &beta0, &opts).unwrap();
    println!(
        "crushed: support={:?} el={:.2} bic={:.2}",
        crushed.beta_support(), crushed.el_sum, bic(&crushed, 40, 10)
    );
    println!(
        "good:    support={:?} el={:.2} bic={:.2}",
        good.beta_support(), good.el_sum, bic(&good, 40, 10)
    );

    // 2. select over a mixed grid, 50 seeds at n=50, with timing.
    let grid = TuningGrid::new(vec![0.3, 0.55, 0.8, 1.05], vec![0.2, 0.35, 0.5]).unwrap();
    let t0 = Instant::now();
    let mut exact = 0;
    let mut picks = std::collections::BTreeMap::<String, usize>::new();
    for seed in 300u64..350 {
        let data = gaussian_panel(seed, 50, 4, &truth);
        let w = LeverageWeights::unit(&data);
        let ctx = EstimatingContext::new(
            &data, ModelFamily::gaussian(), BasisSet::new(CorrelationStructure::Cs),
            ScoreFunction::huber_default(), &w,
        ).unwrap();
        let beta0 = initial_coefficients(&data, ctx.family()).unwrap();
        let sel = select(
            &ctx, &grid,
            &PenaltyConfig::scad(1.0).unwrap(), &PenaltyConfig::scad(1.0).unwrap(),
            &beta0, &opts,
        ).unwrap();
        if sel.fit.beta_support() == vec![0, 2, 5] { exact += 1; }
        *picks.entry(format!("v={} om={}", sel.v, sel.omega)).or_default() += 1;
    }
    println!("select: exact={exact}/50 in {:.1}s; picks: {picks:?}", t0.elapsed().as_secs_f64());

    // 3. timing of the old pathological point with the divergence bail in.
    let data = gaussian_panel(300, 50, 6, &[1.2, 0.0, 0.9, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
    let w = LeverageWeights::unit(&data);
    let ctx = EstimatingContext::new(
        &data, ModelFamily::gaussian(), BasisSet::new(CorrelationStructure::Cs),
        ScoreFunction::huber_default(), &w,
    ).unwrap();
    let beta0 = initial_coefficients(&data, ctx.family()).unwrap();
    let t0 = Instant::now();
    let st = solve(&ctx, &PenaltyConfig::scad(0.0005).unwrap(), &PenaltyConfig::scad(0.0005).unwrap(), &beta0, &opts).unwrap();
    println!("tiny-penalty solve: {:.2}s support={} conv={}", t0.elapsed().as_secs_f64(), st.beta_support().len(), st.trace.converged);
}
