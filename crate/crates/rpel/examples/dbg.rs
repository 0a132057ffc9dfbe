use rpel::model::CorrelationStructure;
use rpel::sim::{self, ErrorLaw, MethodConfig, ScenarioSpec};
use rpel::tuning::TuningGrid;
use std::time::Instant;

fn main() {
    let mut spec = ScenarioSpec::continuous(10, ErrorLaw::GaussianMv).unwrap();
    spec.n = 160;
    spec.m = 4;
    spec.replicates = 10;
    spec.base_seed = 600;
    for omegas in [vec![0.2, 0.3], vec![0.15, 0.25]] {
        let t0 = Instant::now();
        let grid = TuningGrid::new(vec![1.2, 1.8], omegas.clone()).unwrap();
        let table = sim::run_experiment(
            &spec,
            &[
                MethodConfig::Npel,
                MethodConfig::Erpel,
                MethodConfig::Hrpel,
                MethodConfig::Trpel,
            ],
            CorrelationStructure::Cs,
            &grid,
        )
        .unwrap();
        println!("--- omegas {omegas:?} ({:.0}s)", t0.elapsed().as_secs_f64());
        for row in &table {
            match &row.summary {
                Some(s) => println!(
                    "{:6} cf={:5.1} c={:.2} ic={:.2} noee={:5.2} aee={:.4} fails={}",
                    row.method.label(),
                    s.cf,
                    s.c,
                    s.ic,
                    s.no_ee,
                    s.aee,
                    row.failures
                ),
                None => println!("{:6} ALL FAILED ({})", row.method.label(), row.failures),
            }
        }
    }
}
